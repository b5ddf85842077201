#pragma once

#include <cmath>
#include <string>

#include "catrans/nn.hpp"
#include "catrans/tensor.hpp"

namespace catrans {

// Relation-guided context transformer for one pyramid level: self-context
// for support and query, then cross-context carrying support context into
// query positions.
template <typename T>
struct RctLevelParams {
  TransformerBlockParams<T> self_support;  // MLP(LN(MHA(F_s, F_s, F_m)))
  TransformerBlockParams<T> self_query;    // MLP(LN(MHA(F_q, F_q, F_q)))
  TransformerBlockParams<T> cross;         // MLP(LN(MHA(C_qq, F_s, C_ss)))
  Tensor<T> nosupport_proj;                // C_m x C_m, replaces C_ss in the ablated variant
};

template <typename T>
RctLevelParams<T> make_rct_level(int c_l, int c_m, int heads, Rng& rng) {
  RctLevelParams<T> p;
  p.self_support = make_transformer_block<T>(c_l, c_l, c_m, heads, rng);
  p.self_query = make_transformer_block<T>(c_l, c_l, c_l, heads, rng);
  // the query block starts as a pass-through (residual plus a near-zero
  // update): its output feeds the cross-attention queries, which must stay
  // aligned with the raw support keys for the initial similarity to mean
  // anything
  for (T& v : *p.self_query.mlp.w2.data) v *= T(0.05);
  p.cross = make_transformer_block<T>(c_l, c_l, c_m, heads, rng);
  p.nosupport_proj = identity_plus_noise<T>(c_m, rng, std::sqrt(0.02 / c_m));
  return p;
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const RctLevelParams<T>& p) {
  collect(out, prefix + ".self_s", p.self_support);
  collect(out, prefix + ".self_q", p.self_query);
  collect(out, prefix + ".cross", p.cross);
  collect(out, prefix + ".nosupport_proj", p.nosupport_proj);
}

// Support tokens attend to themselves, mask features as values; no residual
// (the block output width C_m differs from the query width C_l).
template <typename T>
Tensor<T> self_context_support(const Tensor<T>& f_s, const Tensor<T>& f_m,
                               const RctLevelParams<T>& p) {
  if (f_s.shape[0] != f_m.shape[0])
    throw ShapeError("self_context_support: token counts differ, " + shape_str(f_s.shape) +
                     " vs " + shape_str(f_m.shape));
  return transformer_block(f_s, f_s, f_m, p.self_support);
}

// Pure query self-attention; widths match, so the residual applies.
template <typename T>
Tensor<T> self_context_query(const Tensor<T>& f_q, const RctLevelParams<T>& p) {
  return transformer_block(f_q, f_q, f_q, p.self_query);
}

// Queries are the enhanced query context, keys are the raw support tokens,
// values the support self-context.
template <typename T>
Tensor<T> cross_context(const Tensor<T>& c_qq, const Tensor<T>& f_s, const Tensor<T>& c_ss,
                        const RctLevelParams<T>& p) {
  if (f_s.shape[0] != c_ss.shape[0])
    throw ShapeError("cross_context: token counts differ, " + shape_str(f_s.shape) + " vs " +
                     shape_str(c_ss.shape));
  return transformer_block(c_qq, f_s, c_ss, p.cross);
}

// Full branch for one level. `support_self` false is the ablated variant:
// the support self-context block is bypassed by a linear projection of the
// mask features. Output is rearranged onto the query grid. Inputs are RMS
// normalized: the scaled-dot temperature assumes unit-variance tokens, which
// a scratch backbone does not guarantee by itself.
template <typename T>
Tensor<T> rct_forward(const Tensor<T>& f_s_raw, const Tensor<T>& f_q_raw,
                      const Tensor<T>& f_m_raw, int h, int w, const RctLevelParams<T>& p,
                      bool support_self = true) {
  Tensor<T> f_s = rms_norm(f_s_raw);
  Tensor<T> f_q = rms_norm(f_q_raw);
  Tensor<T> f_m = rms_norm(f_m_raw);
  Tensor<T> c_ss = support_self ? self_context_support(f_s, f_m, p)
                                : matmul(f_m, p.nosupport_proj);
  Tensor<T> c_qq = self_context_query(f_q, p);
  Tensor<T> c_sq = cross_context(c_qq, f_s, c_ss, p);
  return unflatten_tokens(c_sq, h, w);
}

}  // namespace catrans
