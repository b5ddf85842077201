#pragma once

#include <cmath>
#include <string>

#include "catrans/nn.hpp"
#include "catrans/tensor.hpp"

namespace catrans {

// One scaled-dot affinity: two projection matrices, no value path.
template <typename T>
struct AffinityParams {
  Tensor<T> w_q, w_k;
};

// W_k starts as a copy of W_q: the initial affinity is a plain feature
// similarity, which is what the branch is meant to refine.
template <typename T>
AffinityParams<T> make_affinity(int width, Rng& rng) {
  AffinityParams<T> p;
  p.w_q = similarity_init<T>(width, width, rng);
  p.w_k = Tensor<T>::from({width, width}, *p.w_q.data, true);
  return p;
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const AffinityParams<T>& p) {
  collect(out, prefix + ".wq", p.w_q);
  collect(out, prefix + ".wk", p.w_k);
}

// Row-stochastic affinity between two token sets; the softmax scale is the
// raw token width, not the projected one (they coincide for square W).
template <typename T>
Tensor<T> affinity(const Tensor<T>& a_tokens, const Tensor<T>& b_tokens,
                   const AffinityParams<T>& p, int scale_width) {
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(scale_width)));
  Tensor<T> qa = matmul(a_tokens, p.w_q);
  Tensor<T> kb = matmul(b_tokens, p.w_k);
  return softmax_rows(scale(matmul(qa, transpose(kb)), inv));
}

// Relation-guided affinity transformer for one pyramid level. The three
// affinities are N x N; the fusion block treats each N-length row as a token
// and adds the query self-affinity before LN/MLP.
template <typename T>
struct RatLevelParams {
  AffinityParams<T> support_self;  // width C_l + C_m
  AffinityParams<T> query_self;    // width C_l
  AffinityParams<T> cross;         // width C_l
  AttentionParams<T> fuse_attn;    // W_q, W_k of size N x N, values raw
  Tensor<T> fuse_ln_gamma, fuse_ln_beta;
  MlpParams<T> fuse_mlp;  // N -> 2N -> N
};

template <typename T>
RatLevelParams<T> make_rat_level(int c_l, int c_m, int tokens, int heads, Rng& rng) {
  RatLevelParams<T> p;
  p.support_self = make_affinity<T>(c_l + c_m, rng);
  p.query_self = make_affinity<T>(c_l, rng);
  p.cross = make_affinity<T>(c_l, rng);
  p.fuse_attn = make_attention<T>(tokens, tokens, tokens, heads, rng, /*value_proj=*/false);
  p.fuse_ln_gamma = Tensor<T>::full({tokens}, T(1), true);
  p.fuse_ln_beta = Tensor<T>::zeros({tokens}, true);
  p.fuse_mlp = make_mlp_near_identity<T>(tokens, rng);
  return p;
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const RatLevelParams<T>& p) {
  collect(out, prefix + ".self_s", p.support_self);
  collect(out, prefix + ".self_q", p.query_self);
  collect(out, prefix + ".cross", p.cross);
  collect(out, prefix + ".fuse_attn", p.fuse_attn);
  collect(out, prefix + ".fuse_ln_gamma", p.fuse_ln_gamma);
  collect(out, prefix + ".fuse_ln_beta", p.fuse_ln_beta);
  collect(out, prefix + ".fuse_mlp", p.fuse_mlp);
}

// Self-affinity of the support image on mask-concatenated features.
template <typename T>
Tensor<T> support_self_affinity(const Tensor<T>& f_s, const Tensor<T>& f_m,
                                const RatLevelParams<T>& p) {
  if (f_s.shape[0] != f_m.shape[0])
    throw ShapeError("support_self_affinity: token counts differ, " + shape_str(f_s.shape) +
                     " vs " + shape_str(f_m.shape));
  Tensor<T> x = concat_channels(f_m, f_s);
  return affinity(x, x, p.support_self, x.shape[1]);
}

template <typename T>
Tensor<T> query_self_affinity(const Tensor<T>& f_q, const RatLevelParams<T>& p) {
  return affinity(f_q, f_q, p.query_self, f_q.shape[1]);
}

// Row i is the distribution of query token i over support tokens.
template <typename T>
Tensor<T> cross_affinity(const Tensor<T>& f_q, const Tensor<T>& f_s, const RatLevelParams<T>& p) {
  if (f_q.shape[0] != f_s.shape[0])
    throw ShapeError("cross_affinity: token counts differ, " + shape_str(f_q.shape) + " vs " +
                     shape_str(f_s.shape));
  return affinity(f_q, f_s, p.cross, f_q.shape[1]);
}

template <typename T>
struct RatOutput {
  Tensor<T> a_out;  // N x N refined cross-affinity
  Tensor<T> view;   // H x W x N, query position i holds its affinity row as channels
};

// MLP(LN(MHA(A_sq, A_ss, A_sq) + A_qq)); the residual sits inside the LN as
// written, and the fusion attention carries no value projection.
template <typename T>
RatOutput<T> rat_forward(const Tensor<T>& f_s_raw, const Tensor<T>& f_q_raw,
                         const Tensor<T>& f_m_raw, int h, int w, const RatLevelParams<T>& p) {
  if (f_s_raw.shape[0] != f_q_raw.shape[0])
    throw ShapeError("rat_forward: support/query resolutions differ, " + shape_str(f_s_raw.shape) +
                     " vs " + shape_str(f_q_raw.shape));
  // unit-variance inputs keep the scaled-dot temperatures in range: raw
  // backbone features have arbitrary scale, and affinity rows are
  // row-stochastic (norm ~ 1/sqrt(N)), far too small for Q K^T / sqrt(N)
  Tensor<T> f_s = rms_norm(f_s_raw);
  Tensor<T> f_q = rms_norm(f_q_raw);
  Tensor<T> f_m = rms_norm(f_m_raw);
  Tensor<T> a_ss = support_self_affinity(f_s, f_m, p);
  Tensor<T> a_qq = query_self_affinity(f_q, p);
  Tensor<T> a_sq = cross_affinity(f_q, f_s, p);
  Tensor<T> z = mha(rms_norm(a_sq), rms_norm(a_ss), a_sq, p.fuse_attn);
  z = add(z, a_qq);
  z = layer_norm(z, p.fuse_ln_gamma, p.fuse_ln_beta);
  Tensor<T> a_out = mlp(z, p.fuse_mlp);
  return {a_out, unflatten_tokens(a_out, h, w)};
}

}  // namespace catrans
