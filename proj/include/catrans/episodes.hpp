#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "catrans/config.hpp"
#include "catrans/rng.hpp"
#include "catrans/tensor.hpp"

namespace catrans {

enum class Phase { train, test };

inline std::string to_string(Phase p) { return p == Phase::train ? "train" : "test"; }

inline Phase parse_phase(const std::string& s) {
  if (s == "train") return Phase::train;
  if (s == "test") return Phase::test;
  throw ValueError("unknown phase '" + s + "'");
}

// Disjoint class split: fold f holds classes {3f, 3f+1, 3f+2} out for
// testing; the other nine are trained on.
struct DatasetSplit {
  int fold = 0;
  int n_train = 0;  // informational episode budgets
  int n_test = 0;

  std::vector<int> c_test() const {
    return {3 * fold, 3 * fold + 1, 3 * fold + 2};
  }
  std::vector<int> c_train() const {
    std::vector<int> out;
    for (int c = 0; c < kNumClasses; ++c)
      if (c / 3 != fold) out.push_back(c);
    return out;
  }
  std::vector<int> classes(Phase p) const { return p == Phase::train ? c_train() : c_test(); }
};

// While active, reading the query ground truth throws; evaluation wraps the
// model forward in this guard so the prediction path provably cannot see it.
inline int& eval_guard_depth() {
  thread_local int d = 0;
  return d;
}

struct EvalGuard {
  EvalGuard() { ++eval_guard_depth(); }
  ~EvalGuard() { --eval_guard_depth(); }
  EvalGuard(const EvalGuard&) = delete;
  EvalGuard& operator=(const EvalGuard&) = delete;
};

struct Sample {
  std::vector<float> image;  // h*w*3, row major, [0,1]
  std::vector<float> mask;   // h*w, exact 0/1
};

class Episode {
 public:
  int h = 0, w = 0, k = 1;
  int class_id = 0;
  uint64_t seed = 0;
  Phase phase = Phase::train;
  std::vector<Sample> support;
  std::vector<float> query_image;

  const std::vector<float>& query_mask() const {
    if (eval_guard_depth() > 0)
      throw Error("episode: query mask read while evaluation guard is active");
    return query_mask_;
  }
  void set_query_mask(std::vector<float> m) { query_mask_ = std::move(m); }

 private:
  std::vector<float> query_mask_;
};

// --- shape rendering -------------------------------------------------------

enum class ShapeFamily {
  circle,
  square,
  triangle,
  ring,
  cross,
  bar,
  ellipse,
  diamond,
  star,
  ell,
  tee,
  uu
};

inline ShapeFamily family_of(int class_id) {
  return static_cast<ShapeFamily>(class_id % 12);
}

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, float rgb[3]) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  double r, g, b;
  switch (i) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
  rgb[0] = static_cast<float>(r);
  rgb[1] = static_cast<float>(g);
  rgb[2] = static_cast<float>(b);
}

inline bool in_rect(double u, double v, double u0, double u1, double v0, double v1) {
  return u >= u0 && u <= u1 && v >= v0 && v <= v1;
}

inline bool in_triangle(double u, double v) {
  // vertices (0, 1), (-0.95, -0.75), (0.95, -0.75)
  auto side = [](double ax, double ay, double bx, double by, double px, double py) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
  };
  const double d1 = side(0.0, 1.0, -0.95, -0.75, u, v);
  const double d2 = side(-0.95, -0.75, 0.95, -0.75, u, v);
  const double d3 = side(0.95, -0.75, 0.0, 1.0, u, v);
  const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
  const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
  return !(neg && pos);
}

inline bool in_star(double u, double v) {
  // five-point star as a 10-vertex polygon, even-odd test
  static const std::array<std::array<double, 2>, 10> poly = [] {
    std::array<std::array<double, 2>, 10> p{};
    for (int i = 0; i < 10; ++i) {
      const double r = (i % 2 == 0) ? 1.0 : 0.45;
      const double a = -1.5707963267948966 + i * 0.6283185307179586;
      p[static_cast<std::size_t>(i)] = {r * std::cos(a), r * std::sin(a)};
    }
    return p;
  }();
  bool inside = false;
  for (int i = 0, j = 9; i < 10; j = i++) {
    const double xi = poly[static_cast<std::size_t>(i)][0], yi = poly[static_cast<std::size_t>(i)][1];
    const double xj = poly[static_cast<std::size_t>(j)][0], yj = poly[static_cast<std::size_t>(j)][1];
    if ((yi > v) != (yj > v) && u < (xj - xi) * (v - yi) / (yj - yi) + xi) inside = !inside;
  }
  return inside;
}

inline bool shape_contains(ShapeFamily f, double u, double v) {
  switch (f) {
    case ShapeFamily::circle: return u * u + v * v <= 1.0;
    case ShapeFamily::square: return std::max(std::abs(u), std::abs(v)) <= 0.9;
    case ShapeFamily::triangle: return in_triangle(u, v);
    case ShapeFamily::ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.3;
    }
    case ShapeFamily::cross:
      return in_rect(u, v, -0.33, 0.33, -1.0, 1.0) || in_rect(u, v, -1.0, 1.0, -0.33, 0.33);
    case ShapeFamily::bar: return in_rect(u, v, -1.0, 1.0, -0.32, 0.32);
    case ShapeFamily::ellipse: {
      const double a = u / 1.0, b = v / 0.55;
      return a * a + b * b <= 1.0;
    }
    case ShapeFamily::diamond: return std::abs(u) + std::abs(v) <= 1.0;
    case ShapeFamily::star: return in_star(u, v);
    case ShapeFamily::ell:
      return in_rect(u, v, -1.0, -0.35, -1.0, 1.0) || in_rect(u, v, -1.0, 1.0, -1.0, -0.35);
    case ShapeFamily::tee:
      return in_rect(u, v, -1.0, 1.0, 0.4, 1.0) || in_rect(u, v, -0.3, 0.3, -1.0, 1.0);
    case ShapeFamily::uu:
      return in_rect(u, v, -1.0, -0.4, -1.0, 1.0) || in_rect(u, v, 0.4, 1.0, -1.0, 1.0) ||
             in_rect(u, v, -1.0, 1.0, -1.0, -0.4);
  }
  return false;
}

// Appearance: the hue is drawn per episode and shared by the support and
// query instances of the target, so color is a matching cue rather than a
// class label and the whole hue circle is seen during training. Class
// identity lives in the shape family and a class-keyed stripe texture.
inline double class_stripe_angle(int class_id) {
  return std::fmod(class_id * 2.39996322972865332, 3.14159265358979324);
}
inline double class_stripe_freq(int class_id) { return 3.0 + (class_id * 5) % 4; }

// Targets are two-tone: class-keyed stripes alternate between two hues
// shared across the episode, so one pooled appearance prototype cannot
// summarize the object. Distractors are single-tone (hue2 == hue).
struct ShapeInstance {
  int class_id = 0;
  double cx = 0, cy = 0;     // pixels
  double scale = 8;          // pixels
  double rot = 0;            // radians
  double hue = 0, hue2 = 0, sat = 0.8, val = 0.8;
  double stripe_phase = 0;
};

inline ShapeInstance sample_instance(int class_id, double hue_a, double hue_b, int img,
                                     double smin, double smax, const ModelConfig& cfg, Rng& rng) {
  ShapeInstance s;
  s.class_id = class_id;
  s.scale = rng.uniform(smin, smax) * img;
  const double margin = 0.55 * s.scale / img;
  s.cx = rng.uniform(margin, 1.0 - margin) * img;
  s.cy = rng.uniform(margin, 1.0 - margin) * img;
  s.rot = rng.uniform(-cfg.rotation_jitter, cfg.rotation_jitter);
  s.hue = hue_a + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter);
  s.hue2 = hue_b + rng.uniform(-cfg.hue_jitter, cfg.hue_jitter);
  s.sat = std::clamp(0.80 + cfg.color_jitter * rng.uniform(-1.0, 1.0), 0.4, 1.0);
  s.val = std::clamp(0.78 + cfg.color_jitter * rng.uniform(-1.0, 1.0), 0.4, 1.0);
  s.stripe_phase = rng.uniform(0.0, 6.2831853);
  return s;
}

inline int footprint(const ShapeInstance& s, int h, int w) {
  const double c = std::cos(s.rot), sn = std::sin(s.rot);
  const int y0 = std::max(0, static_cast<int>(s.cy - 1.5 * s.scale));
  const int y1 = std::min(h - 1, static_cast<int>(s.cy + 1.5 * s.scale));
  const int x0 = std::max(0, static_cast<int>(s.cx - 1.5 * s.scale));
  const int x1 = std::min(w - 1, static_cast<int>(s.cx + 1.5 * s.scale));
  int count = 0;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - s.cx, dy = y + 0.5 - s.cy;
      const double u = (dx * c + dy * sn) / s.scale;
      const double v = (-dx * sn + dy * c) / s.scale;
      if (shape_contains(family_of(s.class_id), u, v)) ++count;
    }
  return count;
}

// `hue_labels`, when given, records 1 + the hue octant of the drawn tone per
// pixel (0 stays background): per-pixel color supervision for the encoder
// pretext.
inline void draw_instance(std::vector<float>& img, int h, int w, const ShapeInstance& s,
                          double stripe_amp, double texture_noise, Rng& rng,
                          std::vector<float>* mask, std::vector<float>* hue_labels = nullptr) {
  const double c = std::cos(s.rot), sn = std::sin(s.rot);
  const double sa = std::sin(class_stripe_angle(s.class_id));
  const double ca = std::cos(class_stripe_angle(s.class_id));
  const double freq = class_stripe_freq(s.class_id);
  const int y0 = std::max(0, static_cast<int>(s.cy - 1.5 * s.scale));
  const int y1 = std::min(h - 1, static_cast<int>(s.cy + 1.5 * s.scale));
  const int x0 = std::max(0, static_cast<int>(s.cx - 1.5 * s.scale));
  const int x1 = std::min(w - 1, static_cast<int>(s.cx + 1.5 * s.scale));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - s.cx, dy = y + 0.5 - s.cy;
      const double u = (dx * c + dy * sn) / s.scale;
      const double v = (-dx * sn + dy * c) / s.scale;
      if (!shape_contains(family_of(s.class_id), u, v)) continue;
      const double wave = std::sin(freq * (u * ca + v * sa) * 3.14159265 + s.stripe_phase);
      const double tone = wave > 0 ? s.hue : s.hue2;
      const double shade = 1.0 - stripe_amp * 0.4 * (0.5 + 0.5 * wave);
      float rgb[3];
      hsv_to_rgb(tone, s.sat, s.val * shade, rgb);
      float* px = img.data() + (static_cast<std::size_t>(y) * w + x) * 3;
      for (int ch = 0; ch < 3; ++ch) {
        const double n = texture_noise * rng.uniform(-1.0, 1.0);
        px[ch] = static_cast<float>(std::clamp(static_cast<double>(rgb[ch]) + n, 0.0, 1.0));
      }
      if (mask) (*mask)[static_cast<std::size_t>(y) * w + x] = 1.0f;
      if (hue_labels) {
        const double hfrac = tone - std::floor(tone);
        (*hue_labels)[static_cast<std::size_t>(y) * w + x] =
            static_cast<float>(1 + static_cast<int>(hfrac * 8.0) % 8);
      }
    }
}

inline void draw_background(std::vector<float>& img, int h, int w, double noise, Rng& rng) {
  float base[3];
  hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.25), rng.uniform(0.3, 0.7), base);
  struct Wave {
    double kx, ky, phase, amp[3];
  };
  std::array<Wave, 2> waves;
  for (Wave& wv : waves) {
    wv.kx = rng.uniform(-2.0, 2.0);
    wv.ky = rng.uniform(-2.0, 2.0);
    wv.phase = rng.uniform(0.0, 6.2831853);
    for (double& a : wv.amp) a = rng.uniform(-0.08, 0.08);
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float* px = img.data() + (static_cast<std::size_t>(y) * w + x) * 3;
      for (int ch = 0; ch < 3; ++ch) {
        double v = base[ch];
        for (const Wave& wv : waves)
          v += wv.amp[ch] *
               std::sin(6.2831853 * (wv.kx * x / w + wv.ky * y / h) + wv.phase);
        v += noise * rng.uniform(-1.0, 1.0);
        px[ch] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
}

inline double circular_dist(double a, double b) {
  double d = std::abs(a - b - std::floor(a - b));
  return std::min(d, 1.0 - d);
}

// One rendered scene: cluttered background, two-tone distractor shapes from
// other classes, the two-tone target drawn last (fully visible). Geometry is
// resampled until the mask lands inside the configured foreground range.
// `hue_labels`, when given, collects per-pixel hue-octant labels over every
// shape (color supervision for encoder pretraining).
inline Sample render_sample(const ModelConfig& cfg, int class_id, double hue_a, double hue_b,
                            uint64_t sample_seed, std::vector<float>* hue_labels = nullptr) {
  const int h = cfg.image_size, w = cfg.image_size;
  ShapeInstance target;
  bool ok = false;
  for (int attempt = 0; attempt < 64; ++attempt) {
    Rng geom(derive_seed(sample_seed, "geom", static_cast<uint64_t>(attempt)));
    target = sample_instance(class_id, hue_a, hue_b, cfg.image_size, cfg.target_scale_min,
                             cfg.target_scale_max, cfg, geom);
    const double frac = static_cast<double>(footprint(target, h, w)) / (h * w);
    if (frac >= cfg.fg_min && frac <= cfg.fg_max) {
      ok = true;
      break;
    }
  }
  if (!ok) throw ValueError("render_sample: could not satisfy foreground bounds");

  Sample out;
  out.image.assign(static_cast<std::size_t>(h) * w * 3, 0.0f);
  out.mask.assign(static_cast<std::size_t>(h) * w, 0.0f);
  if (hue_labels) hue_labels->assign(static_cast<std::size_t>(h) * w, 0.0f);
  Rng bg(derive_seed(sample_seed, "background"));
  draw_background(out.image, h, w, cfg.background_noise, bg);
  // midpoint of the target's two tones along the shorter arc: what a pooled
  // appearance prototype of the target looks like
  const double sep = circular_dist(hue_a, hue_b);
  const double fwd = std::fmod(hue_b - hue_a + 1.0, 1.0);
  const double mean_hue = fwd <= 0.5 ? std::fmod(hue_a + 0.5 * fwd, 1.0)
                                     : std::fmod(hue_a - 0.5 * (1.0 - fwd) + 1.0, 1.0);
  for (int i = 0; i < cfg.distractors; ++i) {
    Rng dr(derive_seed(sample_seed, "distractor", static_cast<uint64_t>(i)));
    int cls = dr.uniform_int(kNumClasses - 1);
    if (cls >= class_id) ++cls;  // never the target class
    // All distractors are two-tone like the target. The hard negative pair
    // straddles the target's tone midpoint, so its pooled appearance mimics
    // the target while its individual tones do not, and it sits right next
    // to the target: coarse-grid cells mix the two objects, so telling them
    // apart needs fine-grained correspondence against the support. Ordinary
    // distractors keep a hue margin from both target tones and the midpoint.
    double da, db;
    bool adjacent = false;
    if (i == 0 && dr.bernoulli(cfg.hard_negative_prob)) {
      const double eps = dr.uniform(0.04, std::max(0.05, 0.25 * sep));
      da = std::fmod(mean_hue - eps + 1.0, 1.0);
      db = std::fmod(mean_hue + eps, 1.0);
      adjacent = true;
    } else {
      da = dr.uniform();
      for (int tries = 0; tries < 32; ++tries) {
        if (circular_dist(da, hue_a) >= cfg.distractor_hue_margin &&
            circular_dist(da, hue_b) >= cfg.distractor_hue_margin &&
            circular_dist(da, mean_hue) >= cfg.distractor_hue_margin)
          break;
        da = dr.uniform();
      }
      db = std::fmod(da + dr.uniform(0.2, 0.8), 1.0);
      for (int tries = 0; tries < 32; ++tries) {
        if (circular_dist(db, hue_a) >= cfg.distractor_hue_margin &&
            circular_dist(db, hue_b) >= cfg.distractor_hue_margin)
          break;
        db = std::fmod(da + dr.uniform(0.2, 0.8), 1.0);
      }
    }
    ShapeInstance d = sample_instance(cls, da, db, cfg.image_size, cfg.distractor_scale_min,
                                      cfg.distractor_scale_max, cfg, dr);
    if (adjacent) {
      const double gap = dr.uniform(0.60, 0.80) * (target.scale + d.scale);
      const double ang = dr.uniform(0.0, 6.2831853);
      d.cx = std::clamp(target.cx + gap * std::cos(ang), 0.2 * w, 0.8 * w);
      d.cy = std::clamp(target.cy + gap * std::sin(ang), 0.2 * h, 0.8 * h);
    }
    draw_instance(out.image, h, w, d, cfg.stripe_amp, cfg.texture_noise, dr, nullptr, hue_labels);
  }
  Rng tr(derive_seed(sample_seed, "target"));
  draw_instance(out.image, h, w, target, cfg.stripe_amp, cfg.texture_noise, tr, &out.mask,
                hue_labels);
  return out;
}

}  // namespace detail

// Pure function of its arguments: the class is drawn uniformly from the
// phase's class set and every pixel follows from `seed`.
inline Episode generate_episode(const ModelConfig& cfg, const DatasetSplit& split, Phase phase,
                                int k, uint64_t seed) {
  if (k < 1) throw ValueError("generate_episode: k must be >= 1");
  const std::vector<int> classes = split.classes(phase);
  if (classes.empty()) throw ValueError("generate_episode: empty class set");
  const uint64_t base =
      derive_seed(seed, phase == Phase::train ? "episode-train" : "episode-test",
                  static_cast<uint64_t>(split.fold));
  Rng rng(base);
  Episode ep;
  ep.h = cfg.image_size;
  ep.w = cfg.image_size;
  ep.k = k;
  ep.seed = seed;
  ep.phase = phase;
  ep.class_id = classes[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(classes.size())))];
  // the target's two tones are drawn per episode and shared by all instances
  const double hue_a = rng.uniform();
  const double hue_b = std::fmod(hue_a + rng.uniform(0.3, 0.7), 1.0);
  ep.support.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i)
    ep.support.push_back(detail::render_sample(cfg, ep.class_id, hue_a, hue_b,
                                               derive_seed(base, "support", static_cast<uint64_t>(i))));
  Sample q = detail::render_sample(cfg, ep.class_id, hue_a, hue_b, derive_seed(base, "query"));
  ep.query_image = std::move(q.image);
  ep.set_query_mask(std::move(q.mask));
  return ep;
}

// Class-agnostic pretext scene for encoder pretraining: a composed image and
// the union mask of every shape in it. Target classes come from the split's
// train side.
struct PretextSample {
  std::vector<float> image;
  std::vector<float> hue_labels;  // 0 background, 1..8 hue octant
};

inline PretextSample generate_pretext_sample(const ModelConfig& cfg, const DatasetSplit& split,
                                             uint64_t seed) {
  const std::vector<int> classes = split.c_train();
  const uint64_t base = derive_seed(seed, "pretext", static_cast<uint64_t>(split.fold));
  Rng rng(base);
  const int cls = classes[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(classes.size())))];
  const double hue_a = rng.uniform();
  const double hue_b = std::fmod(hue_a + rng.uniform(0.3, 0.7), 1.0);
  PretextSample out;
  Sample s = detail::render_sample(cfg, cls, hue_a, hue_b, derive_seed(base, "scene"),
                                   &out.hue_labels);
  out.image = std::move(s.image);
  return out;
}

inline void flip_sample_horizontal(std::vector<float>& image, std::vector<float>& mask, int h,
                                   int w) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w / 2; ++x) {
      const std::size_t a = (static_cast<std::size_t>(y) * w + x);
      const std::size_t b = (static_cast<std::size_t>(y) * w + (w - 1 - x));
      for (int ch = 0; ch < 3; ++ch) std::swap(image[a * 3 + ch], image[b * 3 + ch]);
      std::swap(mask[a], mask[b]);
    }
}

// Random horizontal flip augmentation; each image/mask pair flips as a unit.
inline void augment_flip(Episode& ep, double prob, Rng& rng) {
  for (Sample& s : ep.support)
    if (rng.bernoulli(prob)) flip_sample_horizontal(s.image, s.mask, ep.h, ep.w);
  if (rng.bernoulli(prob)) {
    std::vector<float> qm = ep.query_mask();
    flip_sample_horizontal(ep.query_image, qm, ep.h, ep.w);
    ep.set_query_mask(std::move(qm));
  }
}

// --- metric ----------------------------------------------------------------

struct MiouResult {
  std::vector<int> class_ids;       // distinct classes, ascending
  std::vector<double> per_class;    // mean episode IoU per class
  double mean = 0.0;                // mIoU

  double for_class(int cls) const {
    for (std::size_t i = 0; i < class_ids.size(); ++i)
      if (class_ids[i] == cls) return per_class[i];
    throw ValueError("miou: class " + std::to_string(cls) + " not present");
  }
};

// Foreground IoU per episode, averaged per class, then averaged over
// classes. Empty-union episodes (both masks empty) count as IoU 1.
inline MiouResult miou(const std::vector<std::vector<uint8_t>>& preds,
                       const std::vector<std::vector<float>>& targets,
                       const std::vector<int>& class_ids) {
  if (preds.size() != targets.size() || preds.size() != class_ids.size())
    throw ValueError("miou: list lengths differ");
  std::array<double, kNumClasses> sum{};
  std::array<int, kNumClasses> count{};
  for (std::size_t e = 0; e < preds.size(); ++e) {
    if (preds[e].size() != targets[e].size()) throw ValueError("miou: mask sizes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < preds[e].size(); ++i) {
      const float t = targets[e][i];
      if (t != 0.0f && t != 1.0f) throw ValueError("miou: non-binary target mask");
      const uint8_t p = preds[e][i];
      if (p > 1) throw ValueError("miou: non-binary predicted mask");
      const bool pb = p == 1, tb = t == 1.0f;
      inter += (pb && tb) ? 1 : 0;
      uni += (pb || tb) ? 1 : 0;
    }
    const double iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    const int cls = class_ids[e];
    if (cls < 0 || cls >= kNumClasses) throw ValueError("miou: class id out of range");
    sum[static_cast<std::size_t>(cls)] += iou;
    count[static_cast<std::size_t>(cls)] += 1;
  }
  MiouResult r;
  double total = 0.0;
  for (int c = 0; c < kNumClasses; ++c)
    if (count[static_cast<std::size_t>(c)] > 0) {
      const double m = sum[static_cast<std::size_t>(c)] / count[static_cast<std::size_t>(c)];
      r.class_ids.push_back(c);
      r.per_class.push_back(m);
      total += m;
    }
  if (r.class_ids.empty()) throw ValueError("miou: no episodes");
  r.mean = total / static_cast<double>(r.class_ids.size());
  return r;
}

// --- serialization ---------------------------------------------------------
//
// One directory per episode: raw little-endian f32 blobs plus a plain-text
// manifest of key=value lines. Round-trips bit for bit.

namespace detail {

inline void write_f32_blob(const std::filesystem::path& path, const std::vector<float>& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
}

inline std::vector<float> read_f32_blob(const std::filesystem::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  std::vector<float> v(count);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(float)));
  if (static_cast<std::size_t>(in.gcount()) != count * sizeof(float))
    throw Error("blob '" + path.string() + "' truncated");
  return v;
}

}  // namespace detail

inline void save_episode(const Episode& ep, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream mf(dir / "manifest.txt", std::ios::binary);
  if (!mf) throw Error("cannot write episode manifest in '" + dir.string() + "'");
  mf << "shape=" << ep.h << "x" << ep.w << "\n";
  mf << "class_id=" << ep.class_id << "\n";
  mf << "seed=" << ep.seed << "\n";
  mf << "k=" << ep.k << "\n";
  mf << "phase=" << to_string(ep.phase) << "\n";
  for (int i = 0; i < ep.k; ++i) {
    detail::write_f32_blob(dir / ("support_" + std::to_string(i) + "_image.f32"),
                           ep.support[static_cast<std::size_t>(i)].image);
    detail::write_f32_blob(dir / ("support_" + std::to_string(i) + "_mask.f32"),
                           ep.support[static_cast<std::size_t>(i)].mask);
  }
  detail::write_f32_blob(dir / "query_image.f32", ep.query_image);
  detail::write_f32_blob(dir / "query_mask.f32", ep.query_mask());
}

inline Episode load_episode(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.txt", std::ios::binary);
  if (!mf) throw Error("cannot read episode manifest in '" + dir.string() + "'");
  Episode ep;
  std::string line;
  while (std::getline(mf, line)) {
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "shape") {
      const std::size_t x = val.find('x');
      if (x == std::string::npos) throw Error("episode manifest: bad shape '" + val + "'");
      ep.h = std::stoi(val.substr(0, x));
      ep.w = std::stoi(val.substr(x + 1));
    } else if (key == "class_id") ep.class_id = std::stoi(val);
    else if (key == "seed") ep.seed = std::stoull(val);
    else if (key == "k") ep.k = std::stoi(val);
    else if (key == "phase") ep.phase = parse_phase(val);
    else throw Error("episode manifest: unknown key '" + key + "'");
  }
  if (ep.h <= 0 || ep.w <= 0 || ep.k < 1) throw Error("episode manifest: incomplete");
  const std::size_t npix = static_cast<std::size_t>(ep.h) * ep.w;
  for (int i = 0; i < ep.k; ++i) {
    Sample s;
    s.image = detail::read_f32_blob(dir / ("support_" + std::to_string(i) + "_image.f32"), npix * 3);
    s.mask = detail::read_f32_blob(dir / ("support_" + std::to_string(i) + "_mask.f32"), npix);
    ep.support.push_back(std::move(s));
  }
  ep.query_image = detail::read_f32_blob(dir / "query_image.f32", npix * 3);
  ep.set_query_mask(detail::read_f32_blob(dir / "query_mask.f32", npix));
  return ep;
}

// Order-stable content hash used to audit generation determinism across
// processes.
inline uint64_t hash_episode(const Episode& ep) {
  uint64_t h = 0xCBF29CE484222325ull;
  auto mix_bytes = [&h](const void* p, std::size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001B3ull;
    }
  };
  const int meta[4] = {ep.h, ep.w, ep.k, ep.class_id};
  mix_bytes(meta, sizeof meta);
  for (const Sample& s : ep.support) {
    mix_bytes(s.image.data(), s.image.size() * sizeof(float));
    mix_bytes(s.mask.data(), s.mask.size() * sizeof(float));
  }
  mix_bytes(ep.query_image.data(), ep.query_image.size() * sizeof(float));
  mix_bytes(ep.query_mask().data(), ep.query_mask().size() * sizeof(float));
  return h;
}

}  // namespace catrans
