#pragma once

#include <string>
#include <vector>

#include "catrans/config.hpp"
#include "catrans/encoders.hpp"
#include "catrans/episodes.hpp"
#include "catrans/nn.hpp"
#include "catrans/rat.hpp"
#include "catrans/rct.hpp"
#include "catrans/tensor.hpp"

namespace catrans {

// Per-level projection used by the no-branch baseline: channel-concatenated
// support/query/mask tokens mapped straight to the fused width.
template <typename T>
struct BaselineProj {
  Tensor<T> w, b;
};

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const BaselineProj<T>& p) {
  collect(out, prefix + ".w", p.w);
  collect(out, prefix + ".b", p.b);
}

// U-Net-style ladder: start from the fused level-4 block, upsample and merge
// fused level 3, then the high-resolution query features of levels 2 and 1,
// and finish with a 3x3 conv to two logit channels at full resolution.
template <typename T>
struct DecoderParams {
  ConvLayer<T> b4a, b4b;
  ConvLayer<T> b3a, b3b;
  ConvLayer<T> b2a, b2b;
  ConvLayer<T> b1a, b1b;
  Tensor<T> head_w, head_b;
};

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const DecoderParams<T>& p) {
  collect(out, prefix + ".b4a", p.b4a);
  collect(out, prefix + ".b4b", p.b4b);
  collect(out, prefix + ".b3a", p.b3a);
  collect(out, prefix + ".b3b", p.b3b);
  collect(out, prefix + ".b2a", p.b2a);
  collect(out, prefix + ".b2b", p.b2b);
  collect(out, prefix + ".b1a", p.b1a);
  collect(out, prefix + ".b1b", p.b1b);
  collect(out, prefix + ".head_w", p.head_w);
  collect(out, prefix + ".head_b", p.head_b);
}

template <typename T>
struct ModelParams {
  ImageEncoderParams<T> image_enc;
  MaskEncoderParams<T> mask_enc;
  std::array<RctLevelParams<T>, 2> rct;       // levels 3, 4
  std::array<RatLevelParams<T>, 2> rat;
  std::array<BaselineProj<T>, 2> baseline;
  DecoderParams<T> decoder;
};

inline int fused_width(const ModelConfig& cfg, int level) {
  return cfg.mask_channels[static_cast<std::size_t>(level - 1)] + cfg.level_tokens(level);
}

// All branches are instantiated for every variant so parameter counts stay
// comparable across the ablation grid and checkpoints keep one layout.
template <typename T>
ModelParams<T> make_model(const ModelConfig& cfg, Rng& rng) {
  ModelParams<T> p;
  p.image_enc = make_image_encoder<T>(cfg, rng);
  p.mask_enc = make_mask_encoder<T>(cfg, rng);
  for (int i = 0; i < 2; ++i) {
    const int level = 3 + i;
    const int c_l = cfg.channels[static_cast<std::size_t>(level - 1)];
    const int c_m = cfg.mask_channels[static_cast<std::size_t>(level - 1)];
    const int n = cfg.level_tokens(level);
    p.rct[static_cast<std::size_t>(i)] = make_rct_level<T>(c_l, c_m, cfg.heads, rng);
    p.rat[static_cast<std::size_t>(i)] = make_rat_level<T>(c_l, c_m, n, cfg.heads, rng);
    const int in_w = 2 * c_l + c_m;
    p.baseline[static_cast<std::size_t>(i)].w = proj_init<T>(in_w, fused_width(cfg, level), rng);
    p.baseline[static_cast<std::size_t>(i)].b = Tensor<T>::zeros({fused_width(cfg, level)}, true);
    // same courtesy as the branch path: the mask-occupancy feature starts
    // wired into the channel the decoder lane reads
    (*p.baseline[static_cast<std::size_t>(i)].w.data)[static_cast<std::size_t>(2 * c_l) *
                                                          fused_width(cfg, level) +
                                                      0] += T(1);
  }
  const int d = cfg.decoder_channels;
  p.decoder.b4a = make_conv_layer<T>(fused_width(cfg, 4), d, rng);
  p.decoder.b4b = make_conv_layer<T>(d, d, rng);
  p.decoder.b3a = make_conv_layer<T>(d + fused_width(cfg, 3), d, rng);
  p.decoder.b3b = make_conv_layer<T>(d, d, rng);
  p.decoder.b2a = make_conv_layer<T>(d + cfg.channels[1], d, rng);
  p.decoder.b2b = make_conv_layer<T>(d, d, rng);
  p.decoder.b1a = make_conv_layer<T>(d + cfg.channels[0], d, rng);
  p.decoder.b1b = make_conv_layer<T>(d, d, rng);
  p.decoder.head_w = he_normal<T>({3, 3, d, 2}, 9 * d, rng);
  p.decoder.head_b = Tensor<T>::zeros({2}, true);
  // Pass-through lane, identical for every variant: channel 0 of each fused
  // input carries through the ladder into a positive foreground tap, so
  // whatever the branches write there steers predictions from the first
  // step instead of waiting for the decoder to discover the fusion inputs.
  auto center_tap = [](ConvLayer<T>& l, int ci, int co, T v) {
    (*l.w.data)[((static_cast<std::size_t>(1) * 3 + 1) * l.w.shape[2] + ci) * l.w.shape[3] + co] +=
        v;
  };
  center_tap(p.decoder.b4a, 0, 0, T(1));
  center_tap(p.decoder.b4b, 0, 0, T(1));
  center_tap(p.decoder.b3a, 0, 0, T(1));      // decoder lane
  center_tap(p.decoder.b3a, d + 0, 0, T(1));  // fused level-3 channel 0
  center_tap(p.decoder.b3b, 0, 0, T(1));
  center_tap(p.decoder.b2a, 0, 0, T(1));
  center_tap(p.decoder.b2b, 0, 0, T(1));
  center_tap(p.decoder.b1a, 0, 0, T(1));
  center_tap(p.decoder.b1b, 0, 0, T(1));
  (*p.decoder.head_w.data)[((1 * 3 + 1) * d + 0) * 2 + 1] += T(2);  // foreground tap
  (*p.decoder.head_w.data)[((1 * 3 + 1) * d + 0) * 2 + 0] -= T(2);
  return p;
}

template <typename T>
ModelParams<T> make_model(const ModelConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "init"));
  return make_model<T>(cfg, rng);
}

template <typename T>
NamedParams<T> collect_params(const ModelParams<T>& p) {
  NamedParams<T> out;
  collect(out, "image_enc", p.image_enc);
  collect(out, "mask_enc", p.mask_enc);
  for (int i = 0; i < 2; ++i) {
    const std::string lv = ".l" + std::to_string(3 + i);
    collect(out, "rct" + lv, p.rct[static_cast<std::size_t>(i)]);
    collect(out, "rat" + lv, p.rat[static_cast<std::size_t>(i)]);
    collect(out, "baseline" + lv, p.baseline[static_cast<std::size_t>(i)]);
  }
  collect(out, "decoder", p.decoder);
  return out;
}

// Context and affinity views for one level, channel-concatenated.
template <typename T>
Tensor<T> fuse_level(const Tensor<T>& context, const Tensor<T>& affinity_view) {
  if (context.ndim() != 3 || affinity_view.ndim() != 3 ||
      context.shape[0] != affinity_view.shape[0] || context.shape[1] != affinity_view.shape[1])
    throw ShapeError("fuse_level: spatial sizes differ, " + shape_str(context.shape) + " vs " +
                     shape_str(affinity_view.shape));
  return concat_channels(context, affinity_view);
}

template <typename T>
struct Prediction {
  Tensor<T> logits;             // [H x W x 2]
  std::vector<uint8_t> mask;    // argmax, ties resolved to background
};

template <typename T>
std::vector<uint8_t> hard_mask(const Tensor<T>& logits) {
  const std::size_t n = logits.numel() / 2;
  std::vector<uint8_t> m(n);
  const T* l = logits.ptr();
  for (std::size_t i = 0; i < n; ++i) m[i] = l[2 * i + 1] > l[2 * i] ? 1 : 0;
  return m;
}

template <typename T>
Tensor<T> decode(const Tensor<T>& fused4, const Tensor<T>& fused3, const Tensor<T>& f_q2,
                 const Tensor<T>& f_q1, const DecoderParams<T>& p, int out_h, int out_w) {
  Tensor<T> x = conv_norm_relu(fused4, p.b4a, 1);
  x = conv_norm_relu(x, p.b4b, 1);
  x = bilinear_resize(x, fused3.shape[0], fused3.shape[1]);
  x = concat_channels(x, fused3);
  x = conv_norm_relu(x, p.b3a, 1);
  x = conv_norm_relu(x, p.b3b, 1);
  x = bilinear_resize(x, f_q2.shape[0], f_q2.shape[1]);
  x = concat_channels(x, f_q2);
  x = conv_norm_relu(x, p.b2a, 1);
  x = conv_norm_relu(x, p.b2b, 1);
  x = bilinear_resize(x, f_q1.shape[0], f_q1.shape[1]);
  x = concat_channels(x, f_q1);
  x = conv_norm_relu(x, p.b1a, 1);
  x = conv_norm_relu(x, p.b1b, 1);
  x = bilinear_resize(x, out_h, out_w);
  return conv2d_3x3(x, p.head_w, p.head_b, 1);
}

// Model inputs carry the support set and the query image only; the query
// ground truth is structurally absent from the forward path.
template <typename T>
struct EpisodeInputs {
  std::vector<Tensor<T>> support_images;  // each [H x W x 3]
  std::vector<Tensor<T>> support_masks;   // each [H x W], binary
  Tensor<T> query_image;                  // [H x W x 3]
};

template <typename T>
Tensor<T> tensor_from_floats(const std::vector<float>& v, Shape s) {
  std::vector<T> data(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) data[i] = static_cast<T>(v[i]);
  return Tensor<T>::from(std::move(s), std::move(data));
}

template <typename T>
EpisodeInputs<T> make_inputs(const Episode& ep) {
  EpisodeInputs<T> in;
  for (const Sample& s : ep.support) {
    in.support_images.push_back(tensor_from_floats<T>(s.image, {ep.h, ep.w, 3}));
    in.support_masks.push_back(tensor_from_floats<T>(s.mask, {ep.h, ep.w}));
  }
  in.query_image = tensor_from_floats<T>(ep.query_image, {ep.h, ep.w, 3});
  return in;
}

namespace detail {

template <typename T>
Tensor<T> mean_tokens(const std::vector<Tensor<T>>& toks) {
  Tensor<T> acc = toks[0];
  for (std::size_t i = 1; i < toks.size(); ++i) acc = add(acc, toks[i]);
  return scale(acc, static_cast<T>(1.0 / static_cast<double>(toks.size())));
}

template <typename T>
Tensor<T> concat_all_tokens(const std::vector<Tensor<T>>& toks) {
  Tensor<T> acc = toks[0];
  for (std::size_t i = 1; i < toks.size(); ++i) acc = concat_tokens(acc, toks[i]);
  return acc;
}

}  // namespace detail

template <typename T>
Prediction<T> catrans_forward(const ModelParams<T>& params, const EpisodeInputs<T>& in,
                              const ModelConfig& cfg, Variant variant) {
  if (in.support_images.empty() || in.support_images.size() != in.support_masks.size())
    throw ShapeError("catrans_forward: support images/masks mismatch");
  const int k = static_cast<int>(in.support_images.size());

  FeaturePyramid<T> qp = image_encoder(in.query_image, params.image_enc);
  std::vector<FeaturePyramid<T>> sp;
  std::vector<MaskPyramid<T>> mp;
  sp.reserve(static_cast<std::size_t>(k));
  mp.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    sp.push_back(image_encoder(in.support_images[static_cast<std::size_t>(i)], params.image_enc));
    mp.push_back(mask_encoder(in.support_masks[static_cast<std::size_t>(i)], params.mask_enc));
  }

  std::array<Tensor<T>, 2> fused;  // levels 3, 4
  for (int i = 0; i < 2; ++i) {
    const int level = 3 + i;
    const int li = level - 1;
    const int hs = cfg.level_size(level);
    const int c_m = cfg.mask_channels[static_cast<std::size_t>(li)];
    const int n = cfg.level_tokens(level);
    if (!cfg.level_used(level)) {
      fused[static_cast<std::size_t>(i)] = Tensor<T>::zeros({hs, hs, c_m + n});
      continue;
    }
    Tensor<T> f_q = flatten_tokens(qp.level[static_cast<std::size_t>(li)]);
    std::vector<Tensor<T>> f_s, f_m;
    for (int s = 0; s < k; ++s) {
      f_s.push_back(flatten_tokens(sp[static_cast<std::size_t>(s)].level[static_cast<std::size_t>(li)]));
      f_m.push_back(flatten_tokens(mp[static_cast<std::size_t>(s)].level[static_cast<std::size_t>(li)]));
    }

    if (variant == Variant::baseline) {
      Tensor<T> cat = concat_channels(
          concat_channels(detail::mean_tokens(f_s), f_q), detail::mean_tokens(f_m));
      Tensor<T> proj = linear(cat, params.baseline[static_cast<std::size_t>(i)].w,
                              params.baseline[static_cast<std::size_t>(i)].b);
      fused[static_cast<std::size_t>(i)] = unflatten_tokens(proj, hs, hs);
      continue;
    }

    Tensor<T> context;
    if (variant == Variant::rat_only) {
      context = Tensor<T>::zeros({hs, hs, c_m});
    } else {
      // K-shot: support and mask tokens from all shots are concatenated
      // along the token axis before the context blocks.
      context = rct_forward(detail::concat_all_tokens(f_s), f_q, detail::concat_all_tokens(f_m),
                            hs, hs, params.rct[static_cast<std::size_t>(i)],
                            /*support_self=*/variant != Variant::rct_nosupport);
    }

    Tensor<T> aff_view;
    if (variant == Variant::rct_only) {
      aff_view = Tensor<T>::zeros({hs, hs, n});
    } else {
      // K-shot: the affinity branch runs per shot and the views average.
      for (int s = 0; s < k; ++s) {
        Tensor<T> v = rat_forward(f_s[static_cast<std::size_t>(s)], f_q,
                                  f_m[static_cast<std::size_t>(s)], hs, hs,
                                  params.rat[static_cast<std::size_t>(i)])
                          .view;
        aff_view = (s == 0) ? v : add(aff_view, v);
      }
      if (k > 1) aff_view = scale(aff_view, static_cast<T>(1.0 / k));
    }

    fused[static_cast<std::size_t>(i)] = fuse_level(context, aff_view);
  }

  Tensor<T> logits = decode(fused[1], fused[0], qp.level[1], qp.level[0], params.decoder,
                            cfg.image_size, cfg.image_size);
  Prediction<T> pred;
  pred.logits = logits;
  pred.mask = hard_mask(logits);
  return pred;
}

template <typename T>
Prediction<T> catrans_forward(const ModelParams<T>& params, const Episode& ep,
                              const ModelConfig& cfg, Variant variant) {
  return catrans_forward(params, make_inputs<T>(ep), cfg, variant);
}

// Evaluation-time prediction: no graph, and the query-mask guard is active
// so any read of the ground truth inside the forward path throws.
template <typename T>
std::vector<uint8_t> predict_mask(const ModelParams<T>& params, const Episode& ep,
                                  const ModelConfig& cfg, Variant variant) {
  NoGradGuard ng;
  EvalGuard eg;
  return catrans_forward(params, ep, cfg, variant).mask;
}

}  // namespace catrans
