#pragma once

#include <string>

#include "catrans/gradcheck.hpp"
#include "catrans/model.hpp"
#include "catrans/train.hpp"

namespace catrans {

// Small double-precision configurations for finite-difference checks of the
// whole graph. "tiny" is the 16x16 minimum-channel setup; "small" is 32x32.
inline ModelConfig gradcheck_config(const std::string& size) {
  ModelConfig cfg;
  if (size == "tiny") {
    cfg.image_size = 16;
    cfg.channels = {4, 4, 8, 8};
    cfg.mask_channels = {2, 2, 4, 4};
    cfg.decoder_channels = 8;
  } else if (size == "small") {
    cfg.image_size = 32;
    cfg.channels = {8, 8, 16, 16};
    cfg.mask_channels = {4, 4, 8, 8};
    cfg.decoder_channels = 16;
  } else {
    throw ConfigError("gradcheck size must be 'tiny' or 'small', got '" + size + "'");
  }
  cfg.precision = Precision::f64;
  cfg.heads = 1;
  cfg.levels = {3, 4};
  cfg.k_shot = 1;
  cfg.seed = 8;
  // High-contrast episode: strong texture keeps deep features varying across
  // the coarse token grids, away from the softmax shift-invariance null
  // space where gradients fall below finite-difference resolution.
  cfg.background_noise = 0.20;
  cfg.texture_noise = 0.25;
  cfg.distractors = 3;
  cfg.validate();
  return cfg;
}

// Finite differences vs the recorded graph through encoders, both branches,
// fusion and decoder, on one episode. Parameters are jittered off their
// init values so no relu input sits exactly on its kink (beta = 0 plus a
// degenerate norm would otherwise park activations at 0, where one-sided
// finite differences disagree with the subgradient convention).
inline GradCheckReport full_model_gradcheck(const ModelConfig& cfg, double eps = 1e-5,
                                            Variant variant = Variant::full) {
  ModelParams<double> params = make_model<double>(cfg);
  NamedParams<double> named = collect_params(params);
  // Bias-like parameters get a positive offset: every relu path stays alive,
  // so no gradient chain decays into the band where central differences
  // cannot resolve it against the absolute floor of the error formula.
  Rng jitter(derive_seed(cfg.seed, "gradcheck-jitter"));
  auto bias_like = [](const std::string& n) {
    return n.ends_with(".beta") || n.ends_with(".b1") || n.ends_with(".b2") ||
           n.ends_with("head_b") || n.ends_with(".b");
  };
  for (auto& [name, p] : named) {
    const bool bl = bias_like(name);
    for (double& v : *p.data) v += bl ? jitter.uniform(0.05, 0.20) : jitter.uniform(-0.03, 0.03);
  }
  DatasetSplit split{cfg.fold, 0, 0};
  Episode ep = generate_episode(cfg, split, Phase::train, cfg.k_shot,
                                derive_seed(cfg.seed, "gradcheck-episode"));
  EpisodeInputs<double> inputs = make_inputs<double>(ep);
  Tensor<double> target = tensor_from_floats<double>(ep.query_mask(), {ep.h, ep.w});
  auto objective = [&]() {
    Prediction<double> pred = catrans_forward(params, inputs, cfg, variant);
    return weighted_cross_entropy(pred.logits, target, cfg.bg_weight, cfg.fg_weight);
  };
  return grad_check<double>(objective, named, eps);
}

}  // namespace catrans
