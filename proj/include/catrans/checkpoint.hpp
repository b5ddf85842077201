#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "catrans/config.hpp"
#include "catrans/nn.hpp"
#include "catrans/tensor.hpp"

namespace catrans {

struct CheckpointError : Error {
  using Error::Error;
};

// Plain-text header (format version, embedded config, per-tensor name /
// shape / byte offset) followed by one contiguous little-endian f32 blob.
struct Checkpoint {
  ModelConfig cfg;
  std::string config_hash;
  std::string fixture;  // empty for real checkpoints; test fixtures override eval
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<float>> values;

  const std::vector<float>& find(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return values[i];
    throw CheckpointError("checkpoint: missing parameter '" + name + "'");
  }
};

namespace detail {

inline std::string shape_csv(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[static_cast<std::size_t>(i)]);
  }
  return out;
}

inline Shape parse_shape_csv(const std::string& s) {
  Shape out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                     const NamedParams<T>& params, const std::string& fixture = "") {
  std::ostringstream header;
  header << "catrans-checkpoint-v1\n";
  header << "config_hash=" << cfg.hash_hex() << "\n";
  if (!fixture.empty()) header << "fixture=" << fixture << "\n";
  header << "param_count=" << params.size() << "\n";
  {
    std::istringstream cfg_lines(cfg.to_text());
    std::string line;
    while (std::getline(cfg_lines, line)) header << "config." << line << "\n";
  }
  std::size_t offset = 0;
  std::vector<float> blob;
  for (const auto& [name, t] : params) {
    header << "tensor " << name << " " << detail::shape_csv(t.shape) << " " << offset * sizeof(float)
           << " " << t.numel() << "\n";
    for (std::size_t i = 0; i < t.numel(); ++i)
      blob.push_back(static_cast<float>((*t.data)[i]));
    offset += t.numel();
  }
  header << "blob_bytes=" << blob.size() * sizeof(float) << "\n";
  header << "#BLOB\n";
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
}

// Snapshot variant (values captured earlier, e.g. the best-validation state).
inline void save_checkpoint_values(const std::filesystem::path& path, const ModelConfig& cfg,
                                   const std::vector<std::string>& names,
                                   const std::vector<Shape>& shapes,
                                   const std::vector<std::vector<float>>& values) {
  NamedParams<float> tmp;
  for (std::size_t i = 0; i < names.size(); ++i)
    tmp.emplace_back(names[i], Tensor<float>::from(shapes[i], values[i]));
  save_checkpoint<float>(path, cfg, tmp);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, bool force = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != "catrans-checkpoint-v1")
    throw CheckpointError("checkpoint '" + path.string() + "': bad format header");
  Checkpoint ck;
  std::string cfg_text;
  std::vector<std::size_t> offsets, counts;
  std::size_t blob_bytes = 0;
  bool saw_blob = false;
  while (std::getline(in, line)) {
    if (line == "#BLOB") {
      saw_blob = true;
      break;
    }
    if (line.rfind("config_hash=", 0) == 0) {
      ck.config_hash = line.substr(12);
    } else if (line.rfind("fixture=", 0) == 0) {
      ck.fixture = line.substr(8);
    } else if (line.rfind("param_count=", 0) == 0) {
      // redundant with the tensor list; kept for eyeballing
    } else if (line.rfind("config.", 0) == 0) {
      cfg_text += line.substr(7) + "\n";
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      std::string name, shape_s;
      std::size_t off = 0, count = 0;
      if (!(ls >> name >> shape_s >> off >> count))
        throw CheckpointError("checkpoint: bad tensor line '" + line + "'");
      ck.names.push_back(name);
      ck.shapes.push_back(detail::parse_shape_csv(shape_s));
      offsets.push_back(off);
      counts.push_back(count);
    } else if (line.rfind("blob_bytes=", 0) == 0) {
      blob_bytes = std::stoull(line.substr(11));
    } else {
      throw CheckpointError("checkpoint: unknown header line '" + line + "'");
    }
  }
  if (!saw_blob) throw CheckpointError("checkpoint '" + path.string() + "': missing blob");
  std::vector<float> blob(blob_bytes / sizeof(float));
  in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(blob_bytes));
  if (static_cast<std::size_t>(in.gcount()) != blob_bytes)
    throw CheckpointError("checkpoint '" + path.string() + "': blob truncated");

  ck.cfg = ModelConfig::parse(cfg_text);
  if (ck.cfg.hash_hex() != ck.config_hash && !force)
    throw CheckpointError("checkpoint '" + path.string() +
                          "': config hash mismatch (expected " + ck.config_hash + ", config is " +
                          ck.cfg.hash_hex() + "); pass --force to load anyway");
  std::size_t total = 0;
  for (std::size_t i = 0; i < ck.names.size(); ++i) {
    if (offsets[i] != total * sizeof(float))
      throw CheckpointError("checkpoint: tensor '" + ck.names[i] + "' offset mismatch");
    if (shape_numel(ck.shapes[i]) != counts[i])
      throw CheckpointError("checkpoint: tensor '" + ck.names[i] + "' count mismatch");
    total += counts[i];
  }
  if (total * sizeof(float) != blob_bytes)
    throw CheckpointError("checkpoint: blob does not account for all tensors");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < ck.names.size(); ++i) {
    ck.values.emplace_back(blob.begin() + static_cast<std::ptrdiff_t>(pos),
                           blob.begin() + static_cast<std::ptrdiff_t>(pos + counts[i]));
    pos += counts[i];
  }
  return ck;
}

// Copy loaded values into a live parameter set; names and shapes must match
// the registry exactly.
template <typename T>
void apply_checkpoint(const Checkpoint& ck, NamedParams<T>& params) {
  if (ck.names.size() != params.size())
    throw CheckpointError("checkpoint: parameter count mismatch (" +
                          std::to_string(ck.names.size()) + " vs " +
                          std::to_string(params.size()) + ")");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ck.names[i] != params[i].first)
      throw CheckpointError("checkpoint: parameter order mismatch at '" + params[i].first + "'");
    if (ck.shapes[i] != params[i].second.shape)
      throw CheckpointError("checkpoint: shape mismatch for '" + params[i].first + "'");
    auto& dst = *params[i].second.data;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(ck.values[i][j]);
  }
}

}  // namespace catrans
