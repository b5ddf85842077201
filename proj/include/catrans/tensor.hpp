#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "catrans/rng.hpp"

namespace catrans {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += " x ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Graph recording can be switched off (evaluation, finite differences).
inline bool& grad_enabled() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Test fixture: deliberately mis-scales the relu backward rule so the
// gradient checker can be shown to catch a broken rule (negative control).
inline bool& corrupt_backward_for_tests() {
  static bool on = false;
  return on;
}

template <typename T>
struct Tensor;

template <typename T>
struct Node {
  std::vector<Tensor<T>> parents;
  std::function<void(Tensor<T>&)> backward;
};

template <typename T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node<T>> node;

  Tensor() = default;

  // requires_grad is fixed at creation: the grad buffer is allocated up
  // front so every alias of the tensor shares it.
  static Tensor zeros(Shape s, bool req = false) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(shape_numel(t.shape), T(0));
    t.requires_grad = req;
    if (req) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static Tensor full(Shape s, T v, bool req = false) {
    Tensor t = zeros(std::move(s), req);
    std::fill(t.data->begin(), t.data->end(), v);
    return t;
  }

  static Tensor from(Shape s, std::vector<T> values, bool req = false) {
    if (shape_numel(s) != values.size())
      throw ShapeError("tensor: " + shape_str(s) + " does not hold " +
                       std::to_string(values.size()) + " values");
    for (T v : values)
      if (!std::isfinite(static_cast<double>(v)))
        throw NumericError("tensor: non-finite value in initializer");
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    t.requires_grad = req;
    if (req) t.grad = std::make_shared<std::vector<T>>(t.data->size(), T(0));
    return t;
  }

  static Tensor scalar(T v, bool req = false) { return from({1}, {v}, req); }

  static Tensor randn(Shape s, Rng& rng, double stddev, bool req = false) {
    Tensor t = zeros(std::move(s), req);
    for (T& v : *t.data) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  std::size_t numel() const { return data ? data->size() : 0; }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  T* ptr() { return data->data(); }
  const T* ptr() const { return data->data(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape) + " is not scalar");
    return (*data)[0];
  }

  void ensure_grad() {
    if (!grad) grad = std::make_shared<std::vector<T>>(numel(), T(0));
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  // Reverse-mode sweep from a scalar output. Each recorded node is visited
  // exactly once, in reverse topological order; fan-out accumulates because
  // every alias of a tensor shares one grad buffer.
  void backward() {
    if (numel() != 1) throw ValueError("backward: output must be scalar, got " + shape_str(shape));
    if (!node && !requires_grad) return;
    std::vector<Tensor<T>> order;
    std::unordered_set<const Node<T>*> seen;
    struct Frame {
      Tensor<T> t;
      std::size_t next = 0;
    };
    std::vector<Frame> stack;
    if (node && seen.insert(node.get()).second) stack.push_back({*this, 0});
    while (!stack.empty()) {
      Frame& f = stack.back();
      Node<T>* n = f.t.node.get();
      if (f.next < n->parents.size()) {
        Tensor<T> p = n->parents[f.next++];
        if (p.node && seen.insert(p.node.get()).second) stack.push_back({std::move(p), 0});
      } else {
        order.push_back(f.t);
        stack.pop_back();
      }
    }
    ensure_grad();
    (*grad)[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) it->node->backward(*it);
  }
};

namespace detail {

template <typename T>
bool want_grad(const Tensor<T>& t) {
  return grad_enabled() && t.requires_grad;
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : *t.data)
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string(op) + ": non-finite value produced");
}

template <typename T>
void attach(Tensor<T>& out, std::type_identity_t<std::vector<Tensor<T>>> parents,
            std::type_identity_t<std::function<void(Tensor<T>&)>> fn) {
  if (!out.requires_grad) return;
  out.node = std::make_shared<Node<T>>();
  out.node->parents = std::move(parents);
  out.node->backward = std::move(fn);
}

// c[m x n] = a[m x k] * b[k x n], row major.
template <typename T>
void mm(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::size_t>(i) * n;
    std::fill(ci, ci + n, T(0));
    const T* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x k] += g[m x n] * b[k x n]^T
template <typename T>
void mm_nt_acc(const T* g, const T* b, T* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const T* gi = g + static_cast<std::size_t>(i) * n;
    T* ci = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T* bp = b + static_cast<std::size_t>(p) * n;
      T acc = T(0);
      for (int j = 0; j < n; ++j) acc += gi[j] * bp[j];
      ci[p] += acc;
    }
  }
}

// c[k x n] += a[m x k]^T * g[m x n]
template <typename T>
void mm_tn_acc(const T* a, const T* g, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::size_t>(i) * k;
    const T* gi = g + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T aip = ai[p];
      if (aip == T(0)) continue;
      T* cp = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape) + " and " +
                     shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, n}, detail::want_grad(a) || detail::want_grad(b));
  detail::mm(a.ptr(), b.ptr(), out.ptr(), m, k, n);
  detail::check_finite(out, "matmul");
  detail::attach(out, {a, b}, [m, k, n](Tensor<T>& o) {
    Tensor<T>& pa = o.node->parents[0];
    Tensor<T>& pb = o.node->parents[1];
    const T* g = o.grad->data();
    if (pa.requires_grad) {
      pa.ensure_grad();
      detail::mm_nt_acc(g, pb.ptr(), pa.grad->data(), m, n, k);
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      detail::mm_tn_acc(pa.ptr(), g, pb.grad->data(), m, k, n);
    }
  });
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose: expected 2-d tensor, got " + shape_str(a.shape));
  const int m = a.shape[0], n = a.shape[1];
  Tensor<T> out = Tensor<T>::zeros({n, m}, detail::want_grad(a));
  const T* x = a.ptr();
  T* y = out.ptr();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      y[static_cast<std::size_t>(j) * m + i] = x[static_cast<std::size_t>(i) * n + j];
  detail::attach(out, {a}, [m, n](Tensor<T>& o) {
    Tensor<T>& pa = o.node->parents[0];
    if (!pa.requires_grad) return;
    pa.ensure_grad();
    const T* g = o.grad->data();
    T* d = pa.grad->data();
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        d[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
  });
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.ndim() != 2 || x.shape[1] < 1)
    throw ShapeError("softmax_rows: expected [m x n], n >= 1, got " + shape_str(x.shape));
  const int m = x.shape[0], n = x.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, n}, detail::want_grad(x));
  const T* in = x.ptr();
  T* y = out.ptr();
  for (int i = 0; i < m; ++i) {
    const T* xi = in + static_cast<std::size_t>(i) * n;
    T* yi = y + static_cast<std::size_t>(i) * n;
    T mx = xi[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    T s = T(0);
    for (int j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      s += yi[j];
    }
    const T inv = T(1) / s;
    for (int j = 0; j < n; ++j) yi[j] *= inv;
  }
  detail::check_finite(out, "softmax_rows");
  detail::attach(out, {x}, [m, n](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const T* y = o.ptr();
    const T* g = o.grad->data();
    T* d = px.grad->data();
    for (int i = 0; i < m; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * n;
      T dot = T(0);
      for (int j = 0; j < n; ++j) dot += g[off + j] * y[off + j];
      for (int j = 0; j < n; ++j) d[off + j] += y[off + j] * (g[off + j] - dot);
    }
  });
  return out;
}

namespace detail {

// Shared normalization backward: x was normalized over groups of size `len`
// with element stride `stride` (rows: stride 1, channels: stride c).
// For each group g with xhat and istd saved:
//   dx = istd * (dxh - mean(dxh) - xhat * mean(dxh .* xhat)),  dxh = dy * gamma
template <typename T>
struct NormCtx {
  std::shared_ptr<std::vector<T>> xhat;
  std::shared_ptr<std::vector<T>> istd;  // one per group
};

}  // namespace detail

// Row-wise layer normalization: mean/variance over the channel axis of [m x c].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (x.ndim() != 2) throw ShapeError("layer_norm: expected [m x c], got " + shape_str(x.shape));
  const int m = x.shape[0], c = x.shape[1];
  if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c))
    throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(c) + " entries");
  if (!(eps > T(0))) throw ValueError("layer_norm: eps must be positive");
  Tensor<T> out = Tensor<T>::zeros(
      {m, c}, detail::want_grad(x) || detail::want_grad(gamma) || detail::want_grad(beta));
  detail::NormCtx<T> ctx{std::make_shared<std::vector<T>>(x.numel()),
                         std::make_shared<std::vector<T>>(static_cast<std::size_t>(m))};
  const T* in = x.ptr();
  const T* gm = gamma.ptr();
  const T* bt = beta.ptr();
  T* y = out.ptr();
  for (int i = 0; i < m; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * c;
    T mean = T(0);
    for (int j = 0; j < c; ++j) mean += in[off + j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int j = 0; j < c; ++j) {
      const T d = in[off + j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T istd = T(1) / std::sqrt(var + eps);
    (*ctx.istd)[static_cast<std::size_t>(i)] = istd;
    for (int j = 0; j < c; ++j) {
      const T xh = (in[off + j] - mean) * istd;
      (*ctx.xhat)[off + j] = xh;
      y[off + j] = gm[j] * xh + bt[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  detail::attach(out, {x, gamma, beta}, [m, c, ctx](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    Tensor<T>& pg = o.node->parents[1];
    Tensor<T>& pb = o.node->parents[2];
    const T* g = o.grad->data();
    const T* xh = ctx.xhat->data();
    const T* gm = pg.ptr();
    if (pg.requires_grad) pg.ensure_grad();
    if (pb.requires_grad) pb.ensure_grad();
    if (px.requires_grad) px.ensure_grad();
    for (int i = 0; i < m; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * c;
      if (pg.requires_grad)
        for (int j = 0; j < c; ++j) (*pg.grad)[static_cast<std::size_t>(j)] += g[off + j] * xh[off + j];
      if (pb.requires_grad)
        for (int j = 0; j < c; ++j) (*pb.grad)[static_cast<std::size_t>(j)] += g[off + j];
      if (px.requires_grad) {
        T s1 = T(0), s2 = T(0);
        for (int j = 0; j < c; ++j) {
          const T dxh = g[off + j] * gm[j];
          s1 += dxh;
          s2 += dxh * xh[off + j];
        }
        s1 /= static_cast<T>(c);
        s2 /= static_cast<T>(c);
        const T istd = (*ctx.istd)[static_cast<std::size_t>(i)];
        for (int j = 0; j < c; ++j) {
          const T dxh = g[off + j] * gm[j];
          (*px.grad)[off + j] += istd * (dxh - s1 - xh[off + j] * s2);
        }
      }
    }
  });
  return out;
}

// Per-channel affine map y = gamma * x + beta over the trailing axis: the
// stateless equivalent of a frozen batch norm (statistics folded into the
// learnable affine).
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (x.ndim() < 2)
    throw ShapeError("channel_affine: expected >= 2 dims, got " + shape_str(x.shape));
  const int c = x.shape.back();
  const int n = static_cast<int>(x.numel()) / c;
  if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c))
    throw ShapeError("channel_affine: gamma/beta must have " + std::to_string(c) + " entries");
  Tensor<T> out = Tensor<T>::zeros(
      x.shape, detail::want_grad(x) || detail::want_grad(gamma) || detail::want_grad(beta));
  const T* in = x.ptr();
  const T* gm = gamma.ptr();
  const T* bt = beta.ptr();
  T* y = out.ptr();
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * c;
    for (int j = 0; j < c; ++j) y[off + j] = gm[j] * in[off + j] + bt[j];
  }
  detail::check_finite(out, "channel_affine");
  detail::attach(out, {x, gamma, beta}, [n, c](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    Tensor<T>& pg = o.node->parents[1];
    Tensor<T>& pb = o.node->parents[2];
    const T* g = o.grad->data();
    const T* in = px.ptr();
    const T* gm = pg.ptr();
    if (px.requires_grad) {
      px.ensure_grad();
      T* d = px.grad->data();
      for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) d[off + j] += g[off + j] * gm[j];
      }
    }
    if (pg.requires_grad) {
      pg.ensure_grad();
      T* d = pg.grad->data();
      for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) d[j] += g[off + j] * in[off + j];
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      T* d = pb.grad->data();
      for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) d[j] += g[off + j];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape, detail::want_grad(x));
  const T* in = x.ptr();
  T* y = out.ptr();
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = in[i] > T(0) ? in[i] : T(0);
  detail::attach(out, {x}, [n](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const T* in = px.ptr();
    const T* g = o.grad->data();
    T* d = px.grad->data();
    const T k = corrupt_backward_for_tests() ? T(1.05) : T(1);
    for (std::size_t i = 0; i < n; ++i)
      if (in[i] > T(0)) d[i] += k * g[i];
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape)
    throw ShapeError("add: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out = Tensor<T>::zeros(a.shape, detail::want_grad(a) || detail::want_grad(b));
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* y = out.ptr();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = pa[i] + pb[i];
  detail::check_finite(out, "add");
  detail::attach(out, {a, b}, [n](Tensor<T>& o) {
    const T* g = o.grad->data();
    for (int p = 0; p < 2; ++p) {
      Tensor<T>& t = o.node->parents[static_cast<std::size_t>(p)];
      if (!t.requires_grad) continue;
      t.ensure_grad();
      T* d = t.grad->data();
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape, detail::want_grad(a));
  const T* pa = a.ptr();
  T* y = out.ptr();
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) y[i] = pa[i] * s;
  detail::check_finite(out, "scale");
  detail::attach(out, {a}, [n, s](Tensor<T>& o) {
    Tensor<T>& t = o.node->parents[0];
    if (!t.requires_grad) return;
    t.ensure_grad();
    const T* g = o.grad->data();
    T* d = t.grad->data();
    for (std::size_t i = 0; i < n; ++i) d[i] += s * g[i];
  });
  return out;
}

// Concatenate along the trailing (channel) axis; leading dims must agree.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != b.ndim() || a.ndim() < 2)
    throw ShapeError("concat_channels: rank mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  for (int i = 0; i + 1 < a.ndim(); ++i)
    if (a.shape[static_cast<std::size_t>(i)] != b.shape[static_cast<std::size_t>(i)])
      throw ShapeError("concat_channels: leading dims differ " + shape_str(a.shape) + " vs " +
                       shape_str(b.shape));
  const int ca = a.shape.back(), cb = b.shape.back();
  Shape os = a.shape;
  os.back() = ca + cb;
  const int rows = static_cast<int>(shape_numel(os)) / (ca + cb);
  Tensor<T> out = Tensor<T>::zeros(os, detail::want_grad(a) || detail::want_grad(b));
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* y = out.ptr();
  for (int i = 0; i < rows; ++i) {
    std::copy(pa + static_cast<std::size_t>(i) * ca, pa + static_cast<std::size_t>(i + 1) * ca,
              y + static_cast<std::size_t>(i) * (ca + cb));
    std::copy(pb + static_cast<std::size_t>(i) * cb, pb + static_cast<std::size_t>(i + 1) * cb,
              y + static_cast<std::size_t>(i) * (ca + cb) + ca);
  }
  detail::attach(out, {a, b}, [rows, ca, cb](Tensor<T>& o) {
    Tensor<T>& ta = o.node->parents[0];
    Tensor<T>& tb = o.node->parents[1];
    const T* g = o.grad->data();
    if (ta.requires_grad) {
      ta.ensure_grad();
      T* d = ta.grad->data();
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < ca; ++j)
          d[static_cast<std::size_t>(i) * ca + j] += g[static_cast<std::size_t>(i) * (ca + cb) + j];
    }
    if (tb.requires_grad) {
      tb.ensure_grad();
      T* d = tb.grad->data();
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cb; ++j)
          d[static_cast<std::size_t>(i) * cb + j] +=
              g[static_cast<std::size_t>(i) * (ca + cb) + ca + j];
    }
  });
  return out;
}

// Concatenate 2-d token matrices along the token (row) axis.
template <typename T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[1])
    throw ShapeError("concat_tokens: incompatible " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  const int na = a.shape[0], nb = b.shape[0], c = a.shape[1];
  Tensor<T> out = Tensor<T>::zeros({na + nb, c}, detail::want_grad(a) || detail::want_grad(b));
  std::copy(a.ptr(), a.ptr() + a.numel(), out.ptr());
  std::copy(b.ptr(), b.ptr() + b.numel(), out.ptr() + a.numel());
  detail::attach(out, {a, b}, [na, nb, c](Tensor<T>& o) {
    Tensor<T>& ta = o.node->parents[0];
    Tensor<T>& tb = o.node->parents[1];
    const T* g = o.grad->data();
    const std::size_t asz = static_cast<std::size_t>(na) * c;
    if (ta.requires_grad) {
      ta.ensure_grad();
      T* d = ta.grad->data();
      for (std::size_t i = 0; i < asz; ++i) d[i] += g[i];
    }
    if (tb.requires_grad) {
      tb.ensure_grad();
      T* d = tb.grad->data();
      const std::size_t bsz = static_cast<std::size_t>(nb) * c;
      for (std::size_t i = 0; i < bsz; ++i) d[i] += g[asz + i];
    }
  });
  return out;
}

// Channel range [off, off+len) of the trailing axis.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int off, int len) {
  if (x.ndim() < 2) throw ShapeError("slice_channels: expected >= 2 dims");
  const int c = x.shape.back();
  if (off < 0 || len <= 0 || off + len > c)
    throw ShapeError("slice_channels: range [" + std::to_string(off) + ", " +
                     std::to_string(off + len) + ") out of " + std::to_string(c));
  Shape os = x.shape;
  os.back() = len;
  const int rows = static_cast<int>(x.numel()) / c;
  Tensor<T> out = Tensor<T>::zeros(os, detail::want_grad(x));
  const T* in = x.ptr();
  T* y = out.ptr();
  for (int i = 0; i < rows; ++i)
    std::copy(in + static_cast<std::size_t>(i) * c + off,
              in + static_cast<std::size_t>(i) * c + off + len,
              y + static_cast<std::size_t>(i) * len);
  detail::attach(out, {x}, [rows, c, off, len](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const T* g = o.grad->data();
    T* d = px.grad->data();
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < len; ++j)
        d[static_cast<std::size_t>(i) * c + off + j] += g[static_cast<std::size_t>(i) * len + j];
  });
  return out;
}

// Same flat data, new shape (row-major layouts coincide, so H x W x C and
// HW x C round-trip exactly).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape s) {
  if (shape_numel(s) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape) + " cannot become " + shape_str(s));
  Tensor<T> out = Tensor<T>::zeros(std::move(s), detail::want_grad(x));
  std::copy(x.ptr(), x.ptr() + x.numel(), out.ptr());
  const std::size_t n = x.numel();
  detail::attach(out, {x}, [n](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const T* g = o.grad->data();
    T* d = px.grad->data();
    for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
  });
  return out;
}

template <typename T>
Tensor<T> flatten_tokens(const Tensor<T>& x) {
  if (x.ndim() != 3) throw ShapeError("flatten_tokens: expected [h x w x c], got " + shape_str(x.shape));
  return reshape(x, {x.shape[0] * x.shape[1], x.shape[2]});
}

template <typename T>
Tensor<T> unflatten_tokens(const Tensor<T>& x, int h, int w) {
  if (x.ndim() != 2 || x.shape[0] != h * w)
    throw ShapeError("unflatten_tokens: " + shape_str(x.shape) + " does not hold " +
                     std::to_string(h) + "x" + std::to_string(w) + " tokens");
  return reshape(x, {h, w, x.shape[1]});
}

// Broadcast-add a [c] bias over the trailing axis.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() < 2 || b.ndim() != 1 || b.shape[0] != x.shape.back())
    throw ShapeError("add_bias: " + shape_str(b.shape) + " does not broadcast over " +
                     shape_str(x.shape));
  const int c = x.shape.back();
  const int rows = static_cast<int>(x.numel()) / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape, detail::want_grad(x) || detail::want_grad(b));
  const T* in = x.ptr();
  const T* pb = b.ptr();
  T* y = out.ptr();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j)
      y[static_cast<std::size_t>(i) * c + j] = in[static_cast<std::size_t>(i) * c + j] + pb[j];
  detail::check_finite(out, "add_bias");
  detail::attach(out, {x, b}, [rows, c](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    Tensor<T>& pbt = o.node->parents[1];
    const T* g = o.grad->data();
    if (px.requires_grad) {
      px.ensure_grad();
      T* d = px.grad->data();
      const std::size_t n = static_cast<std::size_t>(rows) * c;
      for (std::size_t i = 0; i < n; ++i) d[i] += g[i];
    }
    if (pbt.requires_grad) {
      pbt.ensure_grad();
      T* d = pbt.grad->data();
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < c; ++j) d[j] += g[static_cast<std::size_t>(i) * c + j];
    }
  });
  return out;
}

// 3x3 cross-correlation with zero padding 1; stride 1 keeps the spatial
// size, stride 2 halves it (ceiling). Layout [h x w x c], kernel
// [3 x 3 x cin x cout]. Lowered to an im2col matmul.
template <typename T>
Tensor<T> conv2d_3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride) {
  if (x.ndim() != 3) throw ShapeError("conv2d_3x3: input must be [h x w x c], got " + shape_str(x.shape));
  if (w.ndim() != 4 || w.shape[0] != 3 || w.shape[1] != 3)
    throw ShapeError("conv2d_3x3: kernel must be [3 x 3 x cin x cout], got " + shape_str(w.shape));
  if (w.shape[2] != x.shape[2])
    throw ShapeError("conv2d_3x3: channel mismatch, input " + shape_str(x.shape) + " vs kernel " +
                     shape_str(w.shape));
  const int cout = w.shape[3];
  if (b.ndim() != 1 || b.shape[0] != cout)
    throw ShapeError("conv2d_3x3: bias must have " + std::to_string(cout) + " entries");
  if (stride != 1 && stride != 2) throw ValueError("conv2d_3x3: stride must be 1 or 2");
  const int h = x.shape[0], iw = x.shape[1], cin = x.shape[2];
  const int oh = (h - 1) / stride + 1;
  const int ow = (iw - 1) / stride + 1;
  const int pr = oh * ow;          // patch rows
  const int pc = 9 * cin;          // patch cols

  auto patches = std::make_shared<std::vector<T>>(static_cast<std::size_t>(pr) * pc, T(0));
  const T* in = x.ptr();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* row = patches->data() + (static_cast<std::size_t>(oy) * ow + ox) * pc;
      for (int ky = 0; ky < 3; ++ky) {
        const int iy = oy * stride + ky - 1;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < 3; ++kx) {
          const int ix = ox * stride + kx - 1;
          if (ix < 0 || ix >= iw) continue;
          const T* src = in + (static_cast<std::size_t>(iy) * iw + ix) * cin;
          T* dst = row + (ky * 3 + kx) * cin;
          std::copy(src, src + cin, dst);
        }
      }
    }
  }

  Tensor<T> out = Tensor<T>::zeros(
      {oh, ow, cout}, detail::want_grad(x) || detail::want_grad(w) || detail::want_grad(b));
  detail::mm(patches->data(), w.ptr(), out.ptr(), pr, pc, cout);
  {
    const T* pb = b.ptr();
    T* y = out.ptr();
    for (int r = 0; r < pr; ++r)
      for (int j = 0; j < cout; ++j) y[static_cast<std::size_t>(r) * cout + j] += pb[j];
  }
  detail::check_finite(out, "conv2d_3x3");
  detail::attach(out, {x, w, b},
                 [h, iw, cin, cout, oh, ow, pr, pc, stride, patches](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    Tensor<T>& pw = o.node->parents[1];
    Tensor<T>& pb = o.node->parents[2];
    const T* g = o.grad->data();
    if (pb.requires_grad) {
      pb.ensure_grad();
      T* d = pb.grad->data();
      for (int r = 0; r < pr; ++r)
        for (int j = 0; j < cout; ++j) d[j] += g[static_cast<std::size_t>(r) * cout + j];
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      detail::mm_tn_acc(patches->data(), g, pw.grad->data(), pr, pc, cout);
    }
    if (px.requires_grad) {
      px.ensure_grad();
      std::vector<T> dpatch(static_cast<std::size_t>(pr) * pc, T(0));
      detail::mm_nt_acc(g, pw.ptr(), dpatch.data(), pr, cout, pc);
      T* d = px.grad->data();
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          const T* row = dpatch.data() + (static_cast<std::size_t>(oy) * ow + ox) * pc;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * stride + kx - 1;
              if (ix < 0 || ix >= iw) continue;
              T* dst = d + (static_cast<std::size_t>(iy) * iw + ix) * cin;
              const T* src = row + (ky * 3 + kx) * cin;
              for (int ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
            }
          }
        }
      }
    }
  });
  return out;
}

// Bilinear interpolation, align_corners = false semantics; constant inputs
// stay constant and matching sizes reproduce the input exactly.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int h2, int w2) {
  if (x.ndim() != 3) throw ShapeError("bilinear_resize: expected [h x w x c], got " + shape_str(x.shape));
  if (h2 < 1 || w2 < 1) throw ValueError("bilinear_resize: target size must be positive");
  const int h = x.shape[0], w = x.shape[1], c = x.shape[2];
  struct Axis {
    int i0, i1;
    T w0, w1;
  };
  auto make_axis = [](int in, int out) {
    std::vector<Axis> a(static_cast<std::size_t>(out));
    const double s = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
      double src = (i + 0.5) * s - 0.5;
      int i0 = static_cast<int>(std::floor(src));
      const double f = src - i0;
      int i1 = i0 + 1;
      i0 = std::clamp(i0, 0, in - 1);
      i1 = std::clamp(i1, 0, in - 1);
      a[static_cast<std::size_t>(i)] = {i0, i1, static_cast<T>(1.0 - f), static_cast<T>(f)};
    }
    return a;
  };
  auto ay = std::make_shared<std::vector<Axis>>(make_axis(h, h2));
  auto ax = std::make_shared<std::vector<Axis>>(make_axis(w, w2));
  Tensor<T> out = Tensor<T>::zeros({h2, w2, c}, detail::want_grad(x));
  const T* in = x.ptr();
  T* y = out.ptr();
  for (int oy = 0; oy < h2; ++oy) {
    const Axis& r = (*ay)[static_cast<std::size_t>(oy)];
    for (int ox = 0; ox < w2; ++ox) {
      const Axis& q = (*ax)[static_cast<std::size_t>(ox)];
      const T* p00 = in + (static_cast<std::size_t>(r.i0) * w + q.i0) * c;
      const T* p01 = in + (static_cast<std::size_t>(r.i0) * w + q.i1) * c;
      const T* p10 = in + (static_cast<std::size_t>(r.i1) * w + q.i0) * c;
      const T* p11 = in + (static_cast<std::size_t>(r.i1) * w + q.i1) * c;
      T* dst = y + (static_cast<std::size_t>(oy) * w2 + ox) * c;
      for (int j = 0; j < c; ++j)
        dst[j] = r.w0 * (q.w0 * p00[j] + q.w1 * p01[j]) + r.w1 * (q.w0 * p10[j] + q.w1 * p11[j]);
    }
  }
  detail::check_finite(out, "bilinear_resize");
  detail::attach(out, {x}, [h2, w2, w, c, ay, ax](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const T* g = o.grad->data();
    T* d = px.grad->data();
    for (int oy = 0; oy < h2; ++oy) {
      const Axis& r = (*ay)[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < w2; ++ox) {
        const Axis& q = (*ax)[static_cast<std::size_t>(ox)];
        const T* src = g + (static_cast<std::size_t>(oy) * w2 + ox) * c;
        T* d00 = d + (static_cast<std::size_t>(r.i0) * w + q.i0) * c;
        T* d01 = d + (static_cast<std::size_t>(r.i0) * w + q.i1) * c;
        T* d10 = d + (static_cast<std::size_t>(r.i1) * w + q.i0) * c;
        T* d11 = d + (static_cast<std::size_t>(r.i1) * w + q.i1) * c;
        for (int j = 0; j < c; ++j) {
          d00[j] += r.w0 * q.w0 * src[j];
          d01[j] += r.w0 * q.w1 * src[j];
          d10[j] += r.w1 * q.w0 * src[j];
          d11[j] += r.w1 * q.w1 * src[j];
        }
      }
    }
  });
  return out;
}

// Pixel-weighted two-class cross entropy, mean over all pixels. target is a
// [h x w] tensor of exact 0/1 values and never receives gradient.
template <typename T>
Tensor<T> weighted_cross_entropy(const Tensor<T>& logits, const Tensor<T>& target, T w_bg, T w_fg) {
  if (logits.ndim() != 3 || logits.shape[2] != 2)
    throw ShapeError("weighted_cross_entropy: logits must be [h x w x 2], got " +
                     shape_str(logits.shape));
  if (target.ndim() != 2 || target.shape[0] != logits.shape[0] || target.shape[1] != logits.shape[1])
    throw ShapeError("weighted_cross_entropy: target " + shape_str(target.shape) +
                     " does not match logits " + shape_str(logits.shape));
  if (!(w_bg > T(0)) || !(w_fg > T(0)))
    throw ValueError("weighted_cross_entropy: class weights must be positive");
  const std::size_t npix = target.numel();
  const T* t = target.ptr();
  for (std::size_t i = 0; i < npix; ++i)
    if (t[i] != T(0) && t[i] != T(1))
      throw ValueError("weighted_cross_entropy: non-binary target value");
  const T* l = logits.ptr();
  double total = 0.0;
  for (std::size_t i = 0; i < npix; ++i) {
    const T l0 = l[2 * i], l1 = l[2 * i + 1];
    const T mx = std::max(l0, l1);
    const T lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
    const T lt = t[i] == T(1) ? l1 : l0;
    const T wt = t[i] == T(1) ? w_fg : w_bg;
    total += static_cast<double>(wt * (lse - lt));
  }
  Tensor<T> out =
      Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(npix)), detail::want_grad(logits));
  detail::check_finite(out, "weighted_cross_entropy");
  detail::attach(out, {logits, target}, [npix, w_bg, w_fg](Tensor<T>& o) {
    Tensor<T>& pl = o.node->parents[0];
    Tensor<T>& pt = o.node->parents[1];
    if (!pl.requires_grad) return;
    pl.ensure_grad();
    const T g = (*o.grad)[0];
    const T* l = pl.ptr();
    const T* t = pt.ptr();
    T* d = pl.grad->data();
    const T inv = T(1) / static_cast<T>(npix);
    for (std::size_t i = 0; i < npix; ++i) {
      const T l0 = l[2 * i], l1 = l[2 * i + 1];
      const T mx = std::max(l0, l1);
      const T e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
      const T p1 = e1 / (e0 + e1);
      const T wt = t[i] == T(1) ? w_fg : w_bg;
      const T tgt = t[i];
      d[2 * i] += g * wt * ((T(1) - p1) - (T(1) - tgt)) * inv;
      d[2 * i + 1] += g * wt * (p1 - tgt) * inv;
    }
  });
  return out;
}

// Whole-tensor RMS normalization: y = x / sqrt(mean(x^2) + eps). A single
// global scale, so token geometry is untouched while downstream scaled-dot
// products see unit-variance inputs regardless of upstream feature scale.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, T eps = T(1e-8)) {
  const std::size_t n = x.numel();
  const T* in = x.ptr();
  T ms = T(0);
  for (std::size_t i = 0; i < n; ++i) ms += in[i] * in[i];
  ms = ms / static_cast<T>(n) + eps;
  const T inv = T(1) / std::sqrt(ms);
  Tensor<T> out = Tensor<T>::zeros(x.shape, detail::want_grad(x));
  T* y = out.ptr();
  for (std::size_t i = 0; i < n; ++i) y[i] = in[i] * inv;
  detail::check_finite(out, "rms_norm");
  detail::attach(out, {x}, [n, ms, inv](Tensor<T>& o) {
    Tensor<T>& px = o.node->parents[0];
    if (!px.requires_grad) return;
    px.ensure_grad();
    const T* g = o.grad->data();
    const T* in = px.ptr();
    T dot = T(0);
    for (std::size_t i = 0; i < n; ++i) dot += g[i] * in[i];
    const T k = dot * inv / (ms * static_cast<T>(n));
    T* d = px.grad->data();
    for (std::size_t i = 0; i < n; ++i) d[i] += g[i] * inv - in[i] * k;
  });
  return out;
}

// Multiclass cross entropy over row-wise logits; labels are integer class
// ids carried in a same-length tensor that takes no gradient.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const Tensor<T>& labels) {
  if (logits.ndim() != 2)
    throw ShapeError("softmax_cross_entropy: logits must be [n x c], got " +
                     shape_str(logits.shape));
  const int n = logits.shape[0], c = logits.shape[1];
  if (labels.numel() != static_cast<std::size_t>(n))
    throw ShapeError("softmax_cross_entropy: expected " + std::to_string(n) + " labels");
  const T* l = logits.ptr();
  const T* t = labels.ptr();
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int cls = static_cast<int>(t[static_cast<std::size_t>(i)]);
    if (cls < 0 || cls >= c || static_cast<T>(cls) != t[static_cast<std::size_t>(i)])
      throw ValueError("softmax_cross_entropy: label out of range");
    const T* li = l + static_cast<std::size_t>(i) * c;
    T mx = li[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, li[j]);
    T sum = T(0);
    for (int j = 0; j < c; ++j) sum += std::exp(li[j] - mx);
    total += static_cast<double>(mx + std::log(sum) - li[cls]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / n), detail::want_grad(logits));
  detail::check_finite(out, "softmax_cross_entropy");
  detail::attach(out, {logits, labels}, [n, c](Tensor<T>& o) {
    Tensor<T>& pl = o.node->parents[0];
    Tensor<T>& pt = o.node->parents[1];
    if (!pl.requires_grad) return;
    pl.ensure_grad();
    const T g = (*o.grad)[0];
    const T* l = pl.ptr();
    const T* t = pt.ptr();
    T* d = pl.grad->data();
    const T inv = T(1) / static_cast<T>(n);
    for (int i = 0; i < n; ++i) {
      const T* li = l + static_cast<std::size_t>(i) * c;
      T mx = li[0];
      for (int j = 1; j < c; ++j) mx = std::max(mx, li[j]);
      T sum = T(0);
      for (int j = 0; j < c; ++j) sum += std::exp(li[j] - mx);
      const int cls = static_cast<int>(t[static_cast<std::size_t>(i)]);
      for (int j = 0; j < c; ++j) {
        const T p = std::exp(li[j] - mx) / sum;
        d[static_cast<std::size_t>(i) * c + j] += g * (p - (j == cls ? T(1) : T(0))) * inv;
      }
    }
  });
  return out;
}

}  // namespace catrans
