#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "catrans/tensor.hpp"

namespace catrans {

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_bias(matmul(x, w), b);
}

template <typename T>
struct MlpParams {
  Tensor<T> w1, b1, w2, b2;  // in -> 2*in -> out, relu between
};

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpParams<T>& p) {
  return linear(relu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

// Projections for scaled dot-product attention. w_v is optional: without it
// the value tokens are used raw and the output width is the value width.
template <typename T>
struct AttentionParams {
  Tensor<T> w_q;                  // [c_q x d]
  Tensor<T> w_k;                  // [c_k x d]
  std::optional<Tensor<T>> w_v;   // [c_v x d_v]
  int heads = 1;

  int proj_dim() const { return w_q.shape[1]; }
};

// softmax(Q K^T / sqrt(d)) V on already-projected token matrices.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.shape[1])));
  Tensor<T> weights = softmax_rows(scale(matmul(q, transpose(k)), inv));
  return matmul(weights, v);
}

// Single-head attention over raw token matrices. Key and value token counts
// must agree; query/key inputs may have different widths, both are projected
// to the shared width d.
template <typename T>
Tensor<T> attention(const Tensor<T>& q_tokens, const Tensor<T>& k_tokens,
                    const Tensor<T>& v_tokens, const AttentionParams<T>& p) {
  if (k_tokens.shape[0] != v_tokens.shape[0])
    throw ShapeError("attention: key/value token counts differ, " + shape_str(k_tokens.shape) +
                     " vs " + shape_str(v_tokens.shape));
  Tensor<T> q = matmul(q_tokens, p.w_q);
  Tensor<T> k = matmul(k_tokens, p.w_k);
  Tensor<T> v = p.w_v ? matmul(v_tokens, *p.w_v) : v_tokens;
  return scaled_dot_attention(q, k, v);
}

// Multi-head attention: project once, split the projected sequences along
// the channel axis into `heads` groups, run attention per group, concatenate.
template <typename T>
Tensor<T> mha(const Tensor<T>& q_tokens, const Tensor<T>& k_tokens, const Tensor<T>& v_tokens,
              const AttentionParams<T>& p) {
  if (k_tokens.shape[0] != v_tokens.shape[0])
    throw ShapeError("mha: key/value token counts differ, " + shape_str(k_tokens.shape) + " vs " +
                     shape_str(v_tokens.shape));
  const int h = p.heads;
  const int d = p.proj_dim();
  Tensor<T> q = matmul(q_tokens, p.w_q);
  Tensor<T> k = matmul(k_tokens, p.w_k);
  Tensor<T> v = p.w_v ? matmul(v_tokens, *p.w_v) : v_tokens;
  const int dv = v.shape[1];
  if (h < 1 || d % h != 0)
    throw ShapeError("mha: projection width " + std::to_string(d) + " not divisible by " +
                     std::to_string(h) + " heads");
  if (dv % h != 0)
    throw ShapeError("mha: value width " + std::to_string(dv) + " not divisible by " +
                     std::to_string(h) + " heads");
  if (h == 1) return scaled_dot_attention(q, k, v);
  const int dq = d / h, dvh = dv / h;
  Tensor<T> out;
  for (int m = 0; m < h; ++m) {
    Tensor<T> head = scaled_dot_attention(slice_channels(q, m * dq, dq),
                                          slice_channels(k, m * dq, dq),
                                          slice_channels(v, m * dvh, dvh));
    out = (m == 0) ? head : concat_channels(out, head);
  }
  return out;
}

// MLP(LN(MHA(q, k, v))), residual from the query-side input added only when
// its width matches the block output width.
template <typename T>
struct TransformerBlockParams {
  AttentionParams<T> attn;
  Tensor<T> ln_gamma, ln_beta;  // [d_v]
  MlpParams<T> mlp;             // d_v -> 2*d_v -> d_v
};

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& q_tokens, const Tensor<T>& k_tokens,
                            const Tensor<T>& v_tokens, const TransformerBlockParams<T>& p) {
  Tensor<T> y = mha(q_tokens, k_tokens, v_tokens, p.attn);
  y = layer_norm(y, p.ln_gamma, p.ln_beta);
  y = mlp(y, p.mlp);
  if (q_tokens.shape[1] == y.shape[1]) y = add(y, q_tokens);
  return y;
}

// --- parameter initialization -------------------------------------------

template <typename T>
Tensor<T> he_normal(Shape s, int fan_in, Rng& rng) {
  return Tensor<T>::randn(std::move(s), rng, std::sqrt(2.0 / fan_in), true);
}

template <typename T>
Tensor<T> proj_init(int rows, int cols, Rng& rng) {
  return Tensor<T>::randn({rows, cols}, rng, std::sqrt(1.0 / rows), true);
}

// Similarity projections start hot: with W_k copying W_q the logits form a
// kernel x' W W^T x, and the gain keeps its spread wide enough that initial
// attention is selective rather than uniform.
inline constexpr double kSimilarityGain = 1.5;

template <typename T>
Tensor<T> similarity_init(int rows, int cols, Rng& rng) {
  return Tensor<T>::randn({rows, cols}, rng, kSimilarityGain * std::sqrt(1.0 / rows), true);
}

template <typename T>
MlpParams<T> make_mlp(int in, int out, Rng& rng) {
  const int hidden = 2 * in;
  MlpParams<T> p;
  p.w1 = he_normal<T>({in, hidden}, in, rng);
  p.b1 = Tensor<T>::zeros({hidden}, true);
  p.w2 = he_normal<T>({hidden, out}, hidden, rng);
  p.b2 = Tensor<T>::zeros({out}, true);
  return p;
}

// Near-identity MLP via the crelu split: relu(x) - relu(-x) == x, plus a
// small random perturbation. Blocks built this way compute their attention
// reading from the very first step instead of scrambling it through a random
// two-layer map.
template <typename T>
MlpParams<T> make_mlp_near_identity(int width, Rng& rng, double noise = 0.02) {
  const int hidden = 2 * width;
  MlpParams<T> p;
  p.w1 = Tensor<T>::randn({width, hidden}, rng, noise, true);
  p.b1 = Tensor<T>::zeros({hidden}, true);
  p.w2 = Tensor<T>::randn({hidden, width}, rng, noise, true);
  p.b2 = Tensor<T>::zeros({width}, true);
  for (int i = 0; i < width; ++i) {
    (*p.w1.data)[static_cast<std::size_t>(i) * hidden + i] += T(1);
    (*p.w1.data)[static_cast<std::size_t>(i) * hidden + width + i] -= T(1);
    (*p.w2.data)[static_cast<std::size_t>(i) * width + i] += T(1);
    (*p.w2.data)[static_cast<std::size_t>(width + i) * width + i] -= T(1);
  }
  return p;
}

template <typename T>
Tensor<T> identity_plus_noise(int n, Rng& rng, double noise) {
  Tensor<T> w = Tensor<T>::randn({n, n}, rng, noise, true);
  for (int i = 0; i < n; ++i) (*w.data)[static_cast<std::size_t>(i) * n + i] += T(1);
  return w;
}

// c_q/c_k projected to d = c_k; value projection kept square (d_v = c_v).
// When query and key widths agree, W_k starts as a copy of W_q so the
// initial logits form a similarity kernel: matching tokens attend to each
// other from the first step instead of through random noise. The two
// matrices remain independent parameters and separate during training.
template <typename T>
AttentionParams<T> make_attention(int c_q, int c_k, int c_v, int heads, Rng& rng,
                                  bool value_proj = true) {
  AttentionParams<T> p;
  const int d = c_k;
  p.w_q = similarity_init<T>(c_q, d, rng);
  if (c_q == c_k) {
    p.w_k = Tensor<T>::from({c_k, d}, *p.w_q.data, true);
  } else {
    p.w_k = similarity_init<T>(c_k, d, rng);
  }
  if (value_proj) p.w_v = identity_plus_noise<T>(c_v, rng, std::sqrt(0.02 / c_v));
  p.heads = heads;
  return p;
}

template <typename T>
TransformerBlockParams<T> make_transformer_block(int c_q, int c_k, int c_v, int heads, Rng& rng) {
  TransformerBlockParams<T> p;
  p.attn = make_attention<T>(c_q, c_k, c_v, heads, rng);
  p.ln_gamma = Tensor<T>::full({c_v}, T(1), true);
  p.ln_beta = Tensor<T>::zeros({c_v}, true);
  p.mlp = make_mlp_near_identity<T>(c_v, rng);
  return p;
}

// --- parameter registry ---------------------------------------------------

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
void collect(NamedParams<T>& out, const std::string& name, const Tensor<T>& t) {
  out.emplace_back(name, t);
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const MlpParams<T>& p) {
  collect(out, prefix + ".w1", p.w1);
  collect(out, prefix + ".b1", p.b1);
  collect(out, prefix + ".w2", p.w2);
  collect(out, prefix + ".b2", p.b2);
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const AttentionParams<T>& p) {
  collect(out, prefix + ".wq", p.w_q);
  collect(out, prefix + ".wk", p.w_k);
  if (p.w_v) collect(out, prefix + ".wv", *p.w_v);
}

template <typename T>
void collect(NamedParams<T>& out, const std::string& prefix, const TransformerBlockParams<T>& p) {
  collect(out, prefix + ".attn", p.attn);
  collect(out, prefix + ".ln_gamma", p.ln_gamma);
  collect(out, prefix + ".ln_beta", p.ln_beta);
  collect(out, prefix + ".mlp", p.mlp);
}

}  // namespace catrans
