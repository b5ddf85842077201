#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "catrans/tensor.hpp"

namespace catrans {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double ad = 0.0;
  double fd = 0.0;
  std::size_t coords_checked = 0;

  std::string summary() const {
    return "max_rel_err=" + std::to_string(max_rel_err) + " at " + worst_param + "[" +
           std::to_string(worst_index) + "] (ad=" + std::to_string(ad) +
           ", fd=" + std::to_string(fd) + ", coords=" + std::to_string(coords_checked) + ")";
  }
};

// Central finite differences against the recorded-graph gradient. `f` must
// rebuild the objective from scratch on every call (fresh graph); params are
// perturbed in place and restored bit for bit.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f,
                           std::vector<std::pair<std::string, Tensor<T>>> params,
                           T eps = T(1e-5)) {
  for (auto& [name, p] : params) p.zero_grad();
  Tensor<T> loss = f();
  if (loss.numel() != 1)
    throw ValueError("grad_check: objective must be scalar, got " + shape_str(loss.shape));
  loss.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, p] : params) {
    if (p.grad)
      analytic.push_back(*p.grad);
    else
      analytic.emplace_back(p.numel(), T(0));
  }

  GradCheckReport rep;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = params[pi].second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const T orig = (*p.data)[i];
      (*p.data)[i] = orig + eps;
      const double fp = static_cast<double>(f().item());
      (*p.data)[i] = orig - eps;
      const double fm = static_cast<double>(f().item());
      (*p.data)[i] = orig;
      const double fd = (fp - fm) / (2.0 * static_cast<double>(eps));
      const double ad = static_cast<double>(analytic[pi][i]);
      const double denom = std::max(1e-8, std::abs(ad) + std::abs(fd));
      const double rel = std::abs(ad - fd) / denom;
      ++rep.coords_checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = params[pi].first;
        rep.worst_index = i;
        rep.ad = ad;
        rep.fd = fd;
      }
    }
  }
  return rep;
}

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> params,
                           T eps = T(1e-5)) {
  std::vector<std::pair<std::string, Tensor<T>>> named;
  named.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    named.emplace_back("param" + std::to_string(i), params[i]);
  return grad_check<T>(f, std::move(named), eps);
}

}  // namespace catrans
