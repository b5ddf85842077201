#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "catrans/rng.hpp"
#include "catrans/tensor.hpp"

namespace catrans {

struct ConfigError : Error {
  using Error::Error;
};

enum class Variant { full, rct_only, rat_only, rct_nosupport, baseline };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::rct_only: return "rct_only";
    case Variant::rat_only: return "rat_only";
    case Variant::rct_nosupport: return "rct_nosupport";
    case Variant::baseline: return "baseline";
  }
  return "full";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "rct_only") return Variant::rct_only;
  if (s == "rat_only") return Variant::rat_only;
  if (s == "rct_nosupport") return Variant::rct_nosupport;
  if (s == "baseline") return Variant::baseline;
  throw ConfigError("unknown variant '" + s + "'");
}

enum class Precision { f32, f64 };

// 12 shape classes partitioned into 4 folds of 3 test classes each.
inline constexpr int kNumClasses = 12;
inline constexpr int kNumFolds = 4;

struct ModelConfig {
  // model
  int image_size = 64;
  std::array<int, 4> channels = {16, 32, 64, 64};       // image encoder C_l
  std::array<int, 4> mask_channels = {8, 16, 32, 32};   // mask encoder C_m^l
  int decoder_channels = 32;
  int heads = 1;
  std::vector<int> levels = {3, 4};  // pyramid levels feeding fusion
  Variant variant = Variant::full;
  int k_shot = 1;
  Precision precision = Precision::f32;
  uint64_t seed = 0;
  int fold = 0;

  // training
  int train_steps = 2000;
  double base_lr = 5e-5;
  int lr_decay_step = 1000;
  double lr_decay_factor = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 1e-2;
  double bg_weight = 1.0;
  double fg_weight = 4.0;
  int eval_every = 200;
  bool freeze_encoder = true;   // pretrain the image encoder, then freeze it
  int pretrain_steps = 800;
  double pretrain_lr = 1e-3;
  int val_episodes = 40;
  double flip_prob = 0.5;

  // evaluation
  int test_episodes = 200;
  int test_runs = 5;
  std::vector<uint64_t> run_seeds = {0, 1, 2, 3, 4};

  // ablation harness
  std::vector<uint64_t> ablate_seeds = {0, 1, 2};
  int ablate_eval_episodes = 150;

  // synthetic benchmark calibration
  int distractors = 4;
  double fg_min = 0.01;
  double fg_max = 0.60;
  double target_scale_min = 0.20;
  double target_scale_max = 0.34;
  double distractor_scale_min = 0.16;
  double distractor_scale_max = 0.28;
  double hue_jitter = 0.025;
  double color_jitter = 0.15;
  double background_noise = 0.03;
  double texture_noise = 0.05;
  double rotation_jitter = 0.25;
  double stripe_amp = 0.45;
  double distractor_hue_margin = 0.15;  // ordinary distractors keep this hue distance
  double hard_negative_prob = 0.35;     // chance the first distractor is a near-hue clone

  int level_size(int level) const { return image_size >> level; }
  int level_tokens(int level) const { return level_size(level) * level_size(level); }
  bool level_used(int level) const {
    for (int l : levels)
      if (l == level) return true;
    return false;
  }

  std::string to_text() const;
  void validate() const;
  uint64_t hash() const { return fnv1a64(to_text()); }
  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
    return buf;
  }

  static ModelConfig parse(const std::string& text);
  static ModelConfig load_file(const std::string& path);
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename It>
std::string join_ints(It begin, It end) {
  std::string out;
  for (It it = begin; it != end; ++it) {
    if (!out.empty()) out += ",";
    out += std::to_string(*it);
  }
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline long long parse_ll(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long long r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("config key '" + key + "': empty list entry");
    out.push_back(static_cast<T>(parse_ll(key, item)));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

}  // namespace detail

inline std::string ModelConfig::to_text() const {
  using detail::fmt_double;
  std::ostringstream o;
  o << "image_size=" << image_size << "\n";
  o << "channels=" << detail::join_ints(channels.begin(), channels.end()) << "\n";
  o << "mask_channels=" << detail::join_ints(mask_channels.begin(), mask_channels.end()) << "\n";
  o << "decoder_channels=" << decoder_channels << "\n";
  o << "heads=" << heads << "\n";
  o << "levels=" << detail::join_ints(levels.begin(), levels.end()) << "\n";
  o << "variant=" << catrans::to_string(variant) << "\n";
  o << "k_shot=" << k_shot << "\n";
  o << "precision=" << (precision == Precision::f32 ? "f32" : "f64") << "\n";
  o << "seed=" << seed << "\n";
  o << "fold=" << fold << "\n";
  o << "train_steps=" << train_steps << "\n";
  o << "base_lr=" << fmt_double(base_lr) << "\n";
  o << "lr_decay_step=" << lr_decay_step << "\n";
  o << "lr_decay_factor=" << fmt_double(lr_decay_factor) << "\n";
  o << "beta1=" << fmt_double(beta1) << "\n";
  o << "beta2=" << fmt_double(beta2) << "\n";
  o << "adam_eps=" << fmt_double(adam_eps) << "\n";
  o << "weight_decay=" << fmt_double(weight_decay) << "\n";
  o << "bg_weight=" << fmt_double(bg_weight) << "\n";
  o << "fg_weight=" << fmt_double(fg_weight) << "\n";
  o << "eval_every=" << eval_every << "\n";
  o << "freeze_encoder=" << (freeze_encoder ? 1 : 0) << "\n";
  o << "pretrain_steps=" << pretrain_steps << "\n";
  o << "pretrain_lr=" << fmt_double(pretrain_lr) << "\n";
  o << "val_episodes=" << val_episodes << "\n";
  o << "flip_prob=" << fmt_double(flip_prob) << "\n";
  o << "test_episodes=" << test_episodes << "\n";
  o << "test_runs=" << test_runs << "\n";
  o << "run_seeds=" << detail::join_ints(run_seeds.begin(), run_seeds.end()) << "\n";
  o << "ablate_seeds=" << detail::join_ints(ablate_seeds.begin(), ablate_seeds.end()) << "\n";
  o << "ablate_eval_episodes=" << ablate_eval_episodes << "\n";
  o << "distractors=" << distractors << "\n";
  o << "fg_min=" << fmt_double(fg_min) << "\n";
  o << "fg_max=" << fmt_double(fg_max) << "\n";
  o << "target_scale_min=" << fmt_double(target_scale_min) << "\n";
  o << "target_scale_max=" << fmt_double(target_scale_max) << "\n";
  o << "distractor_scale_min=" << fmt_double(distractor_scale_min) << "\n";
  o << "distractor_scale_max=" << fmt_double(distractor_scale_max) << "\n";
  o << "hue_jitter=" << fmt_double(hue_jitter) << "\n";
  o << "color_jitter=" << fmt_double(color_jitter) << "\n";
  o << "background_noise=" << fmt_double(background_noise) << "\n";
  o << "texture_noise=" << fmt_double(texture_noise) << "\n";
  o << "rotation_jitter=" << fmt_double(rotation_jitter) << "\n";
  o << "stripe_amp=" << fmt_double(stripe_amp) << "\n";
  o << "distractor_hue_margin=" << fmt_double(distractor_hue_margin) << "\n";
  o << "hard_negative_prob=" << fmt_double(hard_negative_prob) << "\n";
  return o.str();
}

inline void ModelConfig::validate() const {
  std::vector<std::string> errs;
  auto req = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  req(image_size >= 16 && image_size % 16 == 0, "image_size must be a positive multiple of 16");
  for (int c : channels) req(c > 0, "channels must be positive");
  for (int c : mask_channels) req(c > 0, "mask_channels must be positive");
  req(decoder_channels > 0, "decoder_channels must be positive");
  req(heads >= 1, "heads must be >= 1");
  req(!levels.empty(), "levels must be non-empty");
  for (int l : levels) req(l == 3 || l == 4, "levels entries must be 3 or 4");
  for (std::size_t i = 1; i < levels.size(); ++i)
    req(levels[i] > levels[i - 1], "levels must be strictly increasing");
  req(k_shot >= 1, "k_shot must be >= 1");
  req(fold >= 0 && fold < kNumFolds, "fold must be in [0, 4)");
  req(train_steps >= 1, "train_steps must be >= 1");
  req(base_lr > 0, "base_lr must be positive");
  req(lr_decay_step >= 0, "lr_decay_step must be >= 0");
  req(lr_decay_factor > 0, "lr_decay_factor must be positive");
  req(beta1 >= 0 && beta1 < 1, "beta1 must be in [0, 1)");
  req(beta2 >= 0 && beta2 < 1, "beta2 must be in [0, 1)");
  req(adam_eps > 0, "adam_eps must be positive");
  req(weight_decay >= 0, "weight_decay must be >= 0");
  req(bg_weight > 0 && fg_weight > 0, "class weights must be positive");
  req(eval_every >= 1, "eval_every must be >= 1");
  req(pretrain_steps >= 0, "pretrain_steps must be >= 0");
  req(pretrain_lr > 0, "pretrain_lr must be positive");
  req(val_episodes >= 1, "val_episodes must be >= 1");
  req(flip_prob >= 0 && flip_prob <= 1, "flip_prob must be in [0, 1]");
  req(test_episodes >= 1, "test_episodes must be >= 1");
  req(test_runs >= 1 && test_runs <= static_cast<int>(run_seeds.size()),
      "test_runs must be in [1, |run_seeds|]");
  req(!ablate_seeds.empty(), "ablate_seeds must be non-empty");
  req(ablate_eval_episodes >= 1, "ablate_eval_episodes must be >= 1");
  req(distractors >= 0, "distractors must be >= 0");
  req(fg_min > 0 && fg_max <= 1 && fg_min < fg_max, "need 0 < fg_min < fg_max <= 1");
  req(target_scale_min > 0 && target_scale_min <= target_scale_max, "bad target scale range");
  req(distractor_scale_min > 0 && distractor_scale_min <= distractor_scale_max,
      "bad distractor scale range");
  req(stripe_amp >= 0 && stripe_amp < 1, "stripe_amp must be in [0, 1)");
  req(distractor_hue_margin >= 0 && distractor_hue_margin <= 0.5,
      "distractor_hue_margin must be in [0, 0.5]");
  req(hard_negative_prob >= 0 && hard_negative_prob <= 1,
      "hard_negative_prob must be in [0, 1]");
  for (int l : {3, 4}) {
    const int li = l - 1;
    req(image_size >> l >= 1, "image too small for level " + std::to_string(l));
    if (heads >= 1) {
      req(channels[li] % heads == 0,
          "channels at level " + std::to_string(l) + " not divisible by heads");
      req(mask_channels[li] % heads == 0,
          "mask_channels at level " + std::to_string(l) + " not divisible by heads");
      const int n = level_tokens(l);
      req(n % heads == 0, "token count at level " + std::to_string(l) + " not divisible by heads");
    }
  }
  if (!errs.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

inline ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                        t + "'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string val = detail::trim(t.substr(eq + 1));
    auto as_int = [&] { return static_cast<int>(detail::parse_ll(key, val)); };
    auto as_double = [&] { return detail::parse_double(key, val); };
    if (key == "image_size") c.image_size = as_int();
    else if (key == "channels") {
      auto v = detail::parse_list<int>(key, val);
      if (v.size() != 4) throw ConfigError("config key 'channels': expected 4 entries");
      std::copy(v.begin(), v.end(), c.channels.begin());
    } else if (key == "mask_channels") {
      auto v = detail::parse_list<int>(key, val);
      if (v.size() != 4) throw ConfigError("config key 'mask_channels': expected 4 entries");
      std::copy(v.begin(), v.end(), c.mask_channels.begin());
    } else if (key == "decoder_channels") c.decoder_channels = as_int();
    else if (key == "heads") c.heads = as_int();
    else if (key == "levels") c.levels = detail::parse_list<int>(key, val);
    else if (key == "variant") c.variant = parse_variant(val);
    else if (key == "k_shot") c.k_shot = as_int();
    else if (key == "precision") {
      if (val == "f32") c.precision = Precision::f32;
      else if (val == "f64") c.precision = Precision::f64;
      else throw ConfigError("config key 'precision': expected f32 or f64, got '" + val + "'");
    } else if (key == "seed") c.seed = static_cast<uint64_t>(detail::parse_ll(key, val));
    else if (key == "fold") c.fold = as_int();
    else if (key == "train_steps") c.train_steps = as_int();
    else if (key == "base_lr") c.base_lr = as_double();
    else if (key == "lr_decay_step") c.lr_decay_step = as_int();
    else if (key == "lr_decay_factor") c.lr_decay_factor = as_double();
    else if (key == "beta1") c.beta1 = as_double();
    else if (key == "beta2") c.beta2 = as_double();
    else if (key == "adam_eps") c.adam_eps = as_double();
    else if (key == "weight_decay") c.weight_decay = as_double();
    else if (key == "bg_weight") c.bg_weight = as_double();
    else if (key == "fg_weight") c.fg_weight = as_double();
    else if (key == "eval_every") c.eval_every = as_int();
    else if (key == "freeze_encoder") c.freeze_encoder = as_int() != 0;
    else if (key == "pretrain_steps") c.pretrain_steps = as_int();
    else if (key == "pretrain_lr") c.pretrain_lr = as_double();
    else if (key == "val_episodes") c.val_episodes = as_int();
    else if (key == "flip_prob") c.flip_prob = as_double();
    else if (key == "test_episodes") c.test_episodes = as_int();
    else if (key == "test_runs") c.test_runs = as_int();
    else if (key == "run_seeds") c.run_seeds = detail::parse_list<uint64_t>(key, val);
    else if (key == "ablate_seeds") c.ablate_seeds = detail::parse_list<uint64_t>(key, val);
    else if (key == "ablate_eval_episodes") c.ablate_eval_episodes = as_int();
    else if (key == "distractors") c.distractors = as_int();
    else if (key == "fg_min") c.fg_min = as_double();
    else if (key == "fg_max") c.fg_max = as_double();
    else if (key == "target_scale_min") c.target_scale_min = as_double();
    else if (key == "target_scale_max") c.target_scale_max = as_double();
    else if (key == "distractor_scale_min") c.distractor_scale_min = as_double();
    else if (key == "distractor_scale_max") c.distractor_scale_max = as_double();
    else if (key == "hue_jitter") c.hue_jitter = as_double();
    else if (key == "color_jitter") c.color_jitter = as_double();
    else if (key == "background_noise") c.background_noise = as_double();
    else if (key == "texture_noise") c.texture_noise = as_double();
    else if (key == "rotation_jitter") c.rotation_jitter = as_double();
    else if (key == "stripe_amp") c.stripe_amp = as_double();
    else if (key == "distractor_hue_margin") c.distractor_hue_margin = as_double();
    else if (key == "hard_negative_prob") c.hard_negative_prob = as_double();
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

inline ModelConfig ModelConfig::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace catrans
