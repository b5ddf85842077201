#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "catrans/checkpoint.hpp"
#include "catrans/config.hpp"
#include "catrans/episodes.hpp"
#include "catrans/model.hpp"
#include "catrans/tensor.hpp"

namespace catrans {

// Step learning-rate schedule: base rate until the decay step, then scaled
// by the decay factor.
inline double lr_at(int step, const ModelConfig& cfg) {
  if (step < 0) throw ValueError("lr_at: negative step");
  return step < cfg.lr_decay_step ? cfg.base_lr : cfg.base_lr * cfg.lr_decay_factor;
}

// AdamW with decoupled weight decay; moments are kept per parameter in
// registry order.
template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  int64_t step = 0;

  explicit AdamState(const NamedParams<T>& params) {
    for (const auto& [name, p] : params) {
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
  }
};

template <typename T>
void adamw_step(NamedParams<T>& params, AdamState<T>& st, double lr, const ModelConfig& cfg) {
  if (st.m.size() != params.size()) throw ShapeError("adamw_step: state/parameter mismatch");
  st.step += 1;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T eps = static_cast<T>(cfg.adam_eps);
  const T wd = static_cast<T>(cfg.weight_decay);
  const T lrt = static_cast<T>(lr);
  const T bc1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(st.step)));
  const T bc2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(st.step)));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = params[pi].second;
    if (st.m[pi].size() != p.numel())
      throw ShapeError("adamw_step: moment shape mismatch for '" + params[pi].first + "'");
    const T* g = p.grad ? p.grad->data() : nullptr;
    T* w = p.ptr();
    T* m = st.m[pi].data();
    T* v = st.v[pi].data();
    const std::size_t n = p.numel();
    for (std::size_t i = 0; i < n; ++i) {
      const T gi = g ? g[i] : T(0);
      m[i] = b1 * m[i] + (T(1) - b1) * gi;
      v[i] = b2 * v[i] + (T(1) - b2) * gi * gi;
      const T mhat = m[i] / bc1;
      const T vhat = v[i] / bc2;
      w[i] -= lrt * (mhat / (std::sqrt(vhat) + eps) + wd * w[i]);
    }
  }
}

template <typename T>
void zero_all_grads(NamedParams<T>& params) {
  for (auto& [name, p] : params) p.zero_grad();
}

// --- evaluation ------------------------------------------------------------

using Predictor = std::function<std::vector<uint8_t>(const Episode&)>;

// Scores a predictor over freshly generated episodes. The query-mask guard
// wraps the predictor call unless the caller opts out (oracle fixtures).
inline MiouResult evaluate_predictor(const ModelConfig& cfg, const DatasetSplit& split,
                                     Phase phase, int k, int n_episodes, uint64_t run_seed,
                                     const Predictor& pred, bool guard_query_mask = true) {
  std::vector<std::vector<uint8_t>> preds;
  std::vector<std::vector<float>> gts;
  std::vector<int> classes;
  preds.reserve(static_cast<std::size_t>(n_episodes));
  for (int i = 0; i < n_episodes; ++i) {
    Episode ep = generate_episode(cfg, split, phase, k,
                                  derive_seed(run_seed, "eval-episode", static_cast<uint64_t>(i)));
    std::vector<uint8_t> p;
    if (guard_query_mask) {
      EvalGuard eg;
      p = pred(ep);
    } else {
      p = pred(ep);
    }
    preds.push_back(std::move(p));
    gts.push_back(ep.query_mask());
    classes.push_back(ep.class_id);
  }
  return miou(preds, gts, classes);
}

template <typename T>
MiouResult evaluate_model(const ModelParams<T>& params, const ModelConfig& cfg,
                          const DatasetSplit& split, Phase phase, int k, int n_episodes,
                          uint64_t run_seed) {
  Predictor pred = [&](const Episode& ep) { return predict_mask(params, ep, cfg, cfg.variant); };
  return evaluate_predictor(cfg, split, phase, k, n_episodes, run_seed, pred);
}

struct EvalSummary {
  std::vector<double> per_run;
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;
};

inline EvalSummary summarize_runs(const std::vector<double>& runs) {
  EvalSummary s;
  s.per_run = runs;
  double sum = 0.0;
  s.min = runs[0];
  s.max = runs[0];
  for (double r : runs) {
    sum += r;
    s.min = std::min(s.min, r);
    s.max = std::max(s.max, r);
  }
  s.mean = sum / static_cast<double>(runs.size());
  double var = 0.0;
  for (double r : runs) var += (r - s.mean) * (r - s.mean);
  s.stddev = runs.size() > 1 ? std::sqrt(var / static_cast<double>(runs.size() - 1)) : 0.0;
  return s;
}

// --- encoder pretraining -----------------------------------------------------
//
// Desk analog of a pretrained backbone: the image encoder learns a
// class-agnostic per-pixel hue-octant classification pretext (background or
// one of 8 hue bins), then freezes for episodic training. The supervision
// forces color-discriminative features, which the matching branches need.
// The readout head is discarded afterwards.

template <typename T>
struct PretextHead {
  ConvLayer<T> mix;
  Tensor<T> out_w, out_b;
};

template <typename T>
void pretrain_image_encoder(ImageEncoderParams<T>& enc, const ModelConfig& cfg,
                            const DatasetSplit& split) {
  if (cfg.pretrain_steps <= 0) return;
  Rng rng(derive_seed(cfg.seed, "pretrain-init"));
  const int csum = cfg.channels[0] + cfg.channels[1] + cfg.channels[2] + cfg.channels[3];
  PretextHead<T> head;
  head.mix = make_conv_layer<T>(csum, 16, rng);
  head.out_w = he_normal<T>({3, 3, 16, 9}, 9 * 16, rng);
  head.out_b = Tensor<T>::zeros({9}, true);

  NamedParams<T> named;
  collect(named, "enc", enc);
  collect(named, "head.mix", head.mix);
  collect(named, "head.out_w", head.out_w);
  collect(named, "head.out_b", head.out_b);
  AdamState<T> opt(named);
  const int h1 = cfg.image_size / 2;
  for (int step = 0; step < cfg.pretrain_steps; ++step) {
    PretextSample ps = generate_pretext_sample(
        cfg, split, derive_seed(cfg.seed, "pretrain-data", static_cast<uint64_t>(step)));
    Tensor<T> img = tensor_from_floats<T>(ps.image, {cfg.image_size, cfg.image_size, 3});
    // labels at half resolution to match the readout grid
    std::vector<T> lab(static_cast<std::size_t>(h1) * h1);
    for (int y = 0; y < h1; ++y)
      for (int x = 0; x < h1; ++x)
        lab[static_cast<std::size_t>(y) * h1 + x] =
            static_cast<T>(ps.hue_labels[static_cast<std::size_t>(2 * y) * cfg.image_size + 2 * x]);
    Tensor<T> tgt = Tensor<T>::from({h1 * h1}, std::move(lab));
    zero_all_grads(named);
    FeaturePyramid<T> pyr = image_encoder(img, enc);
    Tensor<T> x = pyr.level[0];
    for (int l = 1; l < 4; ++l)
      x = concat_channels(x, bilinear_resize(pyr.level[static_cast<std::size_t>(l)], h1, h1));
    x = conv_norm_relu(x, head.mix, 1);
    Tensor<T> logits = reshape(conv2d_3x3(x, head.out_w, head.out_b, 1), {h1 * h1, 9});
    Tensor<T> loss = softmax_cross_entropy(logits, tgt);
    loss.backward();
    adamw_step(named, opt, cfg.pretrain_lr, cfg);
  }
}

template <typename T>
void freeze_image_encoder(ImageEncoderParams<T>& enc) {
  for (int l = 0; l < 4; ++l) {
    for (ConvLayer<T>* layer : {&enc.down[static_cast<std::size_t>(l)],
                                &enc.same[static_cast<std::size_t>(l)]}) {
      layer->w.requires_grad = false;
      layer->gamma.requires_grad = false;
      layer->beta.requires_grad = false;
    }
  }
}

// --- training --------------------------------------------------------------

struct MetricRow {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double val_miou = 0.0;
  bool has_val = false;
};

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "step,loss,lr,val_miou\n";
  for (const MetricRow& r : rows) {
    out += std::to_string(r.step) + "," + fmt_g17(r.loss) + "," + fmt_g17(r.lr) + ",";
    if (r.has_val) out += fmt_g17(r.val_miou);
    out += "\n";
  }
  return out;
}

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<MetricRow> metrics;
  std::vector<std::string> param_names;
  std::vector<Shape> param_shapes;
  std::vector<std::vector<float>> best_snapshot;
  std::vector<std::vector<float>> final_snapshot;
  double best_val = -1.0;
  bool diverged = false;
  std::string failure;
  int failure_step = -1;
  double wall_seconds = 0.0;
};

template <typename T>
std::vector<std::vector<float>> snapshot_values(const NamedParams<T>& params) {
  std::vector<std::vector<float>> out;
  out.reserve(params.size());
  for (const auto& [name, p] : params) {
    std::vector<float> v(p.numel());
    for (std::size_t i = 0; i < p.numel(); ++i) v[i] = static_cast<float>((*p.data)[i]);
    out.push_back(std::move(v));
  }
  return out;
}

// Episodic training loop: sample, forward, weighted cross entropy against
// the query mask, backward, AdamW. Periodic validation on held-in episodes
// (train classes, fixed seeds) under the query-mask guard.
template <typename T>
TrainResult<T> train_model(const ModelConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult<T> res;
  res.params = make_model<T>(cfg);
  DatasetSplit split{cfg.fold, cfg.train_steps, cfg.test_episodes};
  if (cfg.freeze_encoder) {
    pretrain_image_encoder(res.params.image_enc, cfg, split);
    freeze_image_encoder(res.params.image_enc);
  }
  NamedParams<T> named = collect_params(res.params);
  for (const auto& [name, p] : named) {
    res.param_names.push_back(name);
    res.param_shapes.push_back(p.shape);
  }
  // the optimizer only sees live parameters; the frozen encoder stays in the
  // registry for checkpoints
  NamedParams<T> trainable;
  for (const auto& [name, p] : named)
    if (p.requires_grad) trainable.push_back({name, p});
  AdamState<T> opt(trainable);
  const uint64_t val_seed = derive_seed(cfg.seed, "val");

  try {
    for (int step = 0; step < cfg.train_steps; ++step) {
      Episode ep = generate_episode(cfg, split, Phase::train, cfg.k_shot,
                                    derive_seed(cfg.seed, "data", static_cast<uint64_t>(step)));
      Rng flip_rng(derive_seed(cfg.seed, "flip", static_cast<uint64_t>(step)));
      augment_flip(ep, cfg.flip_prob, flip_rng);

      zero_all_grads(trainable);
      Prediction<T> pred = catrans_forward(res.params, ep, cfg, cfg.variant);
      Tensor<T> target = tensor_from_floats<T>(ep.query_mask(), {ep.h, ep.w});
      Tensor<T> loss = weighted_cross_entropy(pred.logits, target, static_cast<T>(cfg.bg_weight),
                                              static_cast<T>(cfg.fg_weight));
      loss.backward();
      const double lr = lr_at(step, cfg);
      adamw_step(trainable, opt, lr, cfg);

      MetricRow row{step, static_cast<double>(loss.item()), lr, 0.0, false};
      if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.train_steps) {
        const MiouResult val = evaluate_model(res.params, cfg, split, Phase::train, cfg.k_shot,
                                              cfg.val_episodes, val_seed);
        row.val_miou = val.mean;
        row.has_val = true;
        if (val.mean > res.best_val) {
          res.best_val = val.mean;
          res.best_snapshot = snapshot_values(named);
        }
      }
      res.metrics.push_back(row);
    }
  } catch (const NumericError& e) {
    res.diverged = true;
    res.failure = e.what();
    res.failure_step = static_cast<int>(res.metrics.size());
  }
  res.final_snapshot = snapshot_values(named);
  if (res.best_snapshot.empty()) {
    res.best_snapshot = res.final_snapshot;
  }
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

template <typename T>
std::string run_manifest(const ModelConfig& cfg, const TrainResult<T>& res) {
  std::ostringstream o;
  o << "catrans-run-manifest-v1\n";
  o << "config_hash=" << cfg.hash_hex() << "\n";
  o << "variant=" << to_string(cfg.variant) << "\n";
  o << "seed=" << cfg.seed << "\n";
  o << "wall_seconds=" << fmt_g17(res.wall_seconds) << "\n";
  o << "best_val_miou=" << fmt_g17(res.best_val) << "\n";
  o << "diverged=" << (res.diverged ? 1 : 0) << "\n";
  o << "[config]\n" << cfg.to_text();
  o << "[loss_log]\n";
  for (const MetricRow& r : res.metrics)
    o << r.step << " " << fmt_g17(r.loss) << " " << fmt_g17(r.lr) << "\n";
  o << "[val_log]\n";
  for (const MetricRow& r : res.metrics)
    if (r.has_val) o << r.step << " " << fmt_g17(r.val_miou) << "\n";
  return o.str();
}

// Full artifact-writing run: metrics CSV, manifest, last/best checkpoints.
// Throws NumericError (after dumping diagnostics) if the loss went
// non-finite.
template <typename T>
TrainResult<T> train_run(const ModelConfig& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  TrainResult<T> res = train_model<T>(cfg);
  {
    std::ofstream f(out_dir / "config.txt", std::ios::binary);
    f << cfg.to_text();
  }
  {
    std::ofstream f(out_dir / "metrics.csv", std::ios::binary);
    f << metrics_csv(res.metrics);
  }
  {
    std::ofstream f(out_dir / "manifest.txt", std::ios::binary);
    f << run_manifest(cfg, res);
  }
  save_checkpoint_values(out_dir / "last.ckpt", cfg, res.param_names, res.param_shapes,
                         res.final_snapshot);
  save_checkpoint_values(out_dir / "best.ckpt", cfg, res.param_names, res.param_shapes,
                         res.best_snapshot);
  if (res.diverged) {
    std::ofstream f(out_dir / "diagnostics.txt", std::ios::binary);
    f << "non-finite loss at step " << res.failure_step << "\n" << res.failure << "\n";
    f << "last recorded losses:\n";
    const std::size_t n = res.metrics.size();
    for (std::size_t i = n > 10 ? n - 10 : 0; i < n; ++i)
      f << res.metrics[i].step << " " << fmt_g17(res.metrics[i].loss) << "\n";
    throw NumericError("training aborted: " + res.failure + " (step " +
                       std::to_string(res.failure_step) + "); diagnostics written to " +
                       (out_dir / "diagnostics.txt").string());
  }
  return res;
}

// --- ablation harness -------------------------------------------------------

enum class AblationAxis { branch, level, heads };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "branch") return AblationAxis::branch;
  if (s == "level") return AblationAxis::level;
  if (s == "heads") return AblationAxis::heads;
  throw ConfigError("unknown ablation axis '" + s + "' (want branch, level or heads)");
}

struct AblationRow {
  std::string name;
  std::vector<double> per_seed;
  double mean = 0.0;
};

struct AblationTable {
  std::string axis;
  std::vector<AblationRow> rows;

  std::string csv() const {
    std::string out = axis;
    std::size_t n_seeds = rows.empty() ? 0 : rows[0].per_seed.size();
    for (std::size_t i = 0; i < n_seeds; ++i) out += ",seed" + std::to_string(i);
    out += ",mean\n";
    for (const AblationRow& r : rows) {
      out += r.name;
      for (double v : r.per_seed) out += "," + fmt_g17(v);
      out += "," + fmt_g17(r.mean) + "\n";
    }
    return out;
  }
};

// Trains and evaluates each grid point under shared seeds and one shared
// test-episode set per fold; independent runs may execute on worker threads.
template <typename T>
AblationTable ablate(const ModelConfig& cfg, AblationAxis axis, int jobs = 0,
                     const std::function<void(const std::string&)>& log = {}) {
  std::vector<std::pair<std::string, ModelConfig>> points;
  if (axis == AblationAxis::branch) {
    for (Variant v : {Variant::baseline, Variant::rat_only, Variant::rct_only,
                      Variant::rct_nosupport, Variant::full}) {
      ModelConfig c = cfg;
      c.variant = v;
      points.emplace_back(to_string(v), c);
    }
  } else if (axis == AblationAxis::level) {
    for (const std::vector<int>& lv : {std::vector<int>{3}, {4}, {3, 4}}) {
      ModelConfig c = cfg;
      c.levels = lv;
      std::string name = "levels_";
      for (std::size_t i = 0; i < lv.size(); ++i) name += (i ? "_" : "") + std::to_string(lv[i]);
      points.emplace_back(name, c);
    }
  } else {
    for (int h : {1, 2}) {
      ModelConfig c = cfg;
      c.heads = h;
      c.validate();
      points.emplace_back("heads_" + std::to_string(h), c);
    }
  }

  struct Task {
    std::size_t point;
    std::size_t seed_idx;
    uint64_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t p = 0; p < points.size(); ++p)
    for (std::size_t s = 0; s < cfg.ablate_seeds.size(); ++s)
      tasks.push_back({p, s, cfg.ablate_seeds[s]});

  std::vector<std::vector<double>> result(points.size(),
                                          std::vector<double>(cfg.ablate_seeds.size(), 0.0));
  const uint64_t eval_seed = derive_seed(cfg.seed, "ablate-eval");
  std::mutex log_mu;
  auto run_task = [&](const Task& t) {
    ModelConfig c = points[t.point].second;
    c.seed = t.seed;
    TrainResult<T> tr = train_model<T>(c);
    DatasetSplit split{c.fold, c.train_steps, c.ablate_eval_episodes};
    const MiouResult m = evaluate_model(tr.params, c, split, Phase::test, c.k_shot,
                                        c.ablate_eval_episodes, eval_seed);
    result[t.point][t.seed_idx] = m.mean;
    if (log) {
      std::lock_guard<std::mutex> lk(log_mu);
      log(points[t.point].first + " seed=" + std::to_string(t.seed) +
          " miou=" + fmt_g17(m.mean) + (tr.diverged ? " (diverged)" : ""));
    }
  };

  if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
  jobs = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  if (jobs == 1) {
    for (const Task& t : tasks) run_task(t);
  } else {
    std::size_t next = 0;
    std::mutex mu;
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w)
      workers.emplace_back([&] {
        for (;;) {
          std::size_t idx;
          {
            std::lock_guard<std::mutex> lk(mu);
            if (next >= tasks.size()) return;
            idx = next++;
          }
          run_task(tasks[idx]);
        }
      });
    for (std::thread& w : workers) w.join();
  }

  AblationTable table;
  table.axis = axis == AblationAxis::branch ? "variant"
               : axis == AblationAxis::level ? "levels"
                                             : "heads";
  for (std::size_t p = 0; p < points.size(); ++p) {
    AblationRow row;
    row.name = points[p].first;
    row.per_seed = result[p];
    double sum = 0.0;
    for (double v : row.per_seed) sum += v;
    row.mean = sum / static_cast<double>(row.per_seed.size());
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace catrans
