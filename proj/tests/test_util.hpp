#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "catrans/rng.hpp"
#include "catrans/tensor.hpp"

namespace testutil {

using catrans::Rng;
using catrans::Tensor;

template <typename T>
Tensor<T> random_tensor(catrans::Shape s, Rng& rng, double lo = -1.0, double hi = 1.0,
                        bool req = false) {
  Tensor<T> t = Tensor<T>::zeros(std::move(s), req);
  for (T& v : *t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>((*a.data)[i]) - static_cast<double>((*b.data)[i])));
  return m;
}

template <typename T>
double max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    m = std::max(m, std::abs(x - y) / std::max(1.0, std::max(std::abs(x), std::abs(y))));
  }
  return m;
}

// naive references ----------------------------------------------------------

template <typename T>
std::vector<T> naive_matmul(const std::vector<T>& a, const std::vector<T>& b, int m, int k, int n) {
  std::vector<T> c(static_cast<std::size_t>(m) * n, T(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T acc = T(0);
      for (int p = 0; p < k; ++p)
        acc += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
      c[static_cast<std::size_t>(i) * n + j] = acc;
    }
  return c;
}

template <typename T>
std::vector<T> naive_softmax_rows(const std::vector<T>& x, int m, int n) {
  std::vector<T> y(x.size());
  for (int i = 0; i < m; ++i) {
    const T* xi = x.data() + static_cast<std::size_t>(i) * n;
    T* yi = y.data() + static_cast<std::size_t>(i) * n;
    T mx = xi[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
    T s = T(0);
    for (int j = 0; j < n; ++j) {
      yi[j] = std::exp(xi[j] - mx);
      s += yi[j];
    }
    for (int j = 0; j < n; ++j) yi[j] /= s;
  }
  return y;
}

template <typename T>
std::vector<T> naive_layer_norm(const std::vector<T>& x, const std::vector<T>& gamma,
                                const std::vector<T>& beta, int m, int c, T eps) {
  std::vector<T> y(x.size());
  for (int i = 0; i < m; ++i) {
    T mean = 0, var = 0;
    for (int j = 0; j < c; ++j) mean += x[static_cast<std::size_t>(i) * c + j];
    mean /= c;
    for (int j = 0; j < c; ++j) {
      T d = x[static_cast<std::size_t>(i) * c + j] - mean;
      var += d * d;
    }
    var /= c;
    for (int j = 0; j < c; ++j)
      y[static_cast<std::size_t>(i) * c + j] =
          gamma[static_cast<std::size_t>(j)] *
              (x[static_cast<std::size_t>(i) * c + j] - mean) / std::sqrt(var + eps) +
          beta[static_cast<std::size_t>(j)];
  }
  return y;
}

// Direct 7-loop cross-correlation with zero padding 1.
template <typename T>
std::vector<T> naive_conv3x3(const std::vector<T>& x, const std::vector<T>& w,
                             const std::vector<T>& b, int h, int iw, int cin, int cout,
                             int stride) {
  const int oh = (h - 1) / stride + 1, ow = (iw - 1) / stride + 1;
  std::vector<T> y(static_cast<std::size_t>(oh) * ow * cout, T(0));
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox)
      for (int co = 0; co < cout; ++co) {
        T acc = b[static_cast<std::size_t>(co)];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy * stride + ky - 1, ix = ox * stride + kx - 1;
            if (iy < 0 || iy >= h || ix < 0 || ix >= iw) continue;
            for (int ci = 0; ci < cin; ++ci)
              acc += x[(static_cast<std::size_t>(iy) * iw + ix) * cin + ci] *
                     w[((static_cast<std::size_t>(ky) * 3 + kx) * cin + ci) * cout + co];
          }
        y[(static_cast<std::size_t>(oy) * ow + ox) * cout + co] = acc;
      }
  return y;
}

// CLI spawning ----------------------------------------------------------------

struct CmdResult {
  int exit_code = -1;
  std::string out;
};

inline std::string cli_path() {
  const char* p = std::getenv("CATRANS_CLI");
  return p ? p : "";
}

inline CmdResult run_cli(const std::string& args, const std::string& workdir = "") {
  CmdResult r;
  const std::string bin = cli_path();
  if (bin.empty()) return r;
  const std::string outfile =
      (std::filesystem::temp_directory_path() / ("catrans_cli_out_" + std::to_string(::getpid()) +
                                                 "_" + std::to_string(std::rand())))
          .string();
  std::string cmd;
  if (!workdir.empty()) cmd += "cd '" + workdir + "' && ";
  cmd += "'" + bin + "' " + args + " > '" + outfile + "' 2>&1";
  const int status = std::system(cmd.c_str());
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(outfile, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  std::filesystem::remove(outfile);
  return r;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::filesystem::path fresh_dir(const std::string& stem) {
  auto p = std::filesystem::temp_directory_path() / (stem + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
