#include <doctest.h>

#include <cmath>

#include "catrans/gradcheck.hpp"
#include "catrans/tensor.hpp"
#include "test_util.hpp"

using namespace catrans;
using testutil::naive_conv3x3;
using testutil::naive_layer_norm;
using testutil::naive_matmul;
using testutil::naive_softmax_rows;
using testutil::random_tensor;

namespace {

// Scalar head for gradient checks: weighted sum of all entries.
Tensor<double> project(const Tensor<double>& t, const std::vector<double>& w) {
  Tensor<double> flat = reshape(t, {1, static_cast<int>(t.numel())});
  Tensor<double> wt = Tensor<double>::from({static_cast<int>(t.numel()), 1}, w);
  return matmul(flat, wt);
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return w;
}

}  // namespace

TEST_SUITE("tensor") {

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<float>::from({2, 3}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::from({2}, {1.0f, std::nanf("")}), NumericError);
  Tensor<float> t = Tensor<float>::zeros({2, 3}, true);
  CHECK(t.numel() == 6);
  CHECK(t.grad->size() == t.numel());
}

TEST_CASE("matmul examples") {
  // identity case
  Tensor<double> eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  Tensor<double> x = Tensor<double>::from({2, 2}, {3, -1, 2, 7});
  CHECK(testutil::max_abs_diff(matmul(eye, x), x) == 0.0);
  // zero case
  Tensor<double> z = Tensor<double>::zeros({2, 2});
  CHECK(testutil::max_abs_diff(matmul(z, x), z) == 0.0);
  // fixed product against the hand-computed value
  Tensor<double> a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  Tensor<double> b = Tensor<double>::from({2, 2}, {5, 6, 7, 8});
  Tensor<double> c = matmul(a, b);
  CHECK((*c.data) == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul shape error names both shapes") {
  Tensor<double> a = Tensor<double>::zeros({2, 3});
  Tensor<double> b = Tensor<double>::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2 x 3]") != std::string::npos);
    CHECK(msg.find("[4 x 5]") != std::string::npos);
  }
}

TEST_CASE("matmul agrees with the naive triple loop on random shapes") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 1 + rng.uniform_int(32), k = 1 + rng.uniform_int(32), n = 1 + rng.uniform_int(32);
    Tensor<double> a = random_tensor<double>({m, k}, rng, -2.0, 2.0);
    Tensor<double> b = random_tensor<double>({k, n}, rng, -2.0, 2.0);
    Tensor<double> c = matmul(a, b);
    auto ref = naive_matmul(*a.data, *b.data, m, k, n);
    CHECK(testutil::max_rel_diff(*c.data, ref) < 1e-6);
  }
}

TEST_CASE("softmax_rows examples") {
  Tensor<double> a = softmax_rows(Tensor<double>::from({1, 2}, {0, 0}));
  CHECK((*a.data)[0] == doctest::Approx(0.5).epsilon(1e-12));
  Tensor<double> b = softmax_rows(Tensor<double>::from({1, 2}, {std::log(3.0), 0}));
  CHECK((*b.data)[0] == doctest::Approx(0.75).epsilon(1e-9));
  CHECK((*b.data)[1] == doctest::Approx(0.25).epsilon(1e-9));
  Tensor<double> c = softmax_rows(Tensor<double>::from({1, 2}, {100, 0}));
  CHECK(std::abs((*c.data)[0] - 1.0) < 1e-6);
  CHECK(std::abs((*c.data)[1]) < 1e-6);
}

TEST_CASE("softmax_rows rows are stochastic for random inputs in [-50, 50]") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + rng.uniform_int(8), n = 1 + rng.uniform_int(12);
    Tensor<double> x = random_tensor<double>({m, n}, rng, -50.0, 50.0);
    Tensor<double> y = softmax_rows(x);
    for (int i = 0; i < m; ++i) {
      double s = 0;
      for (int j = 0; j < n; ++j) {
        const double v = (*y.data)[static_cast<std::size_t>(i) * n + j];
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tensor<double> g1 = Tensor<double>::full({3}, 1.0);
  Tensor<double> b0 = Tensor<double>::zeros({3});
  // constant row maps to beta
  Tensor<double> y = layer_norm(Tensor<double>::from({1, 3}, {5, 5, 5}), g1, b0);
  for (double v : *y.data) CHECK(std::abs(v) < 1e-6);
  // row [1, 3] normalizes to [-1, 1] as eps -> 0
  Tensor<double> g2 = Tensor<double>::full({2}, 1.0);
  Tensor<double> z =
      layer_norm(Tensor<double>::from({1, 2}, {1, 3}), g2, Tensor<double>::zeros({2}), 1e-12);
  CHECK((*z.data)[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK((*z.data)[1] == doctest::Approx(1.0).epsilon(1e-5));
  // gamma = 0 gives beta broadcast
  Rng rng(5);
  Tensor<double> x = random_tensor<double>({4, 3}, rng);
  Tensor<double> beta = Tensor<double>::from({3}, {0.3, -0.7, 2.0});
  Tensor<double> w = layer_norm(x, Tensor<double>::zeros({3}), beta);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK((*w.data)[static_cast<std::size_t>(i) * 3 + j] ==
            (*beta.data)[static_cast<std::size_t>(j)]);
}

TEST_CASE("layer_norm matches the naive reference") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 1 + rng.uniform_int(8), c = 2 + rng.uniform_int(12);
    Tensor<double> x = random_tensor<double>({m, c}, rng, -3.0, 3.0);
    Tensor<double> g = random_tensor<double>({c}, rng);
    Tensor<double> b = random_tensor<double>({c}, rng);
    Tensor<double> y = layer_norm(x, g, b);
    auto ref = naive_layer_norm(*x.data, *g.data, *b.data, m, c, 1e-5);
    CHECK(testutil::max_rel_diff(*y.data, ref) < 1e-6);
  }
}

TEST_CASE("conv2d_3x3 examples") {
  Rng rng(7);
  // zero input -> bias broadcast everywhere
  Tensor<double> zx = Tensor<double>::zeros({5, 4, 2});
  Tensor<double> w = random_tensor<double>({3, 3, 2, 3}, rng);
  Tensor<double> b = Tensor<double>::from({3}, {0.5, -1.0, 2.0});
  Tensor<double> y = conv2d_3x3(zx, w, b, 1);
  for (int p = 0; p < 20; ++p)
    for (int co = 0; co < 3; ++co)
      CHECK((*y.data)[static_cast<std::size_t>(p) * 3 + co] ==
            (*b.data)[static_cast<std::size_t>(co)]);

  // center-one identity kernel reproduces the input
  Tensor<double> x = random_tensor<double>({6, 5, 2}, rng);
  Tensor<double> wid = Tensor<double>::zeros({3, 3, 2, 2});
  for (std::size_t ci = 0; ci < 2; ++ci) (*wid.data)[((1 * 3 + 1) * 2 + ci) * 2 + ci] = 1.0;
  Tensor<double> yid = conv2d_3x3(x, wid, Tensor<double>::zeros({2}), 1);
  CHECK(testutil::max_abs_diff(yid, x) == 0.0);

  // linearity in the input with zero bias
  Tensor<double> y1 = conv2d_3x3(x, w, Tensor<double>::zeros({3}), 1);
  Tensor<double> y2 = conv2d_3x3(scale(x, 2.5), w, Tensor<double>::zeros({3}), 1);
  CHECK(testutil::max_abs_diff(scale(y1, 2.5), y2) < 1e-12);
}

TEST_CASE("conv2d_3x3 channel mismatch and stride errors") {
  Tensor<double> x = Tensor<double>::zeros({4, 4, 3});
  Tensor<double> w = Tensor<double>::zeros({3, 3, 2, 4});
  CHECK_THROWS_AS(conv2d_3x3(x, w, Tensor<double>::zeros({4}), 1), ShapeError);
  CHECK_THROWS_AS(conv2d_3x3(x, Tensor<double>::zeros({3, 3, 3, 4}), Tensor<double>::zeros({4}), 3),
                  ValueError);
}

TEST_CASE("conv2d_3x3 matches the naive reference, both strides") {
  Rng rng(13);
  for (int trial = 0; trial < 60; ++trial) {
    const int h = 1 + rng.uniform_int(9), w = 1 + rng.uniform_int(9);
    const int cin = 1 + rng.uniform_int(4), cout = 1 + rng.uniform_int(4);
    const int stride = 1 + rng.uniform_int(2);
    Tensor<double> x = random_tensor<double>({h, w, cin}, rng);
    Tensor<double> k = random_tensor<double>({3, 3, cin, cout}, rng);
    Tensor<double> b = random_tensor<double>({cout}, rng);
    Tensor<double> y = conv2d_3x3(x, k, b, stride);
    auto ref = naive_conv3x3(*x.data, *k.data, *b.data, h, w, cin, cout, stride);
    CHECK(y.shape[0] == (h - 1) / stride + 1);
    CHECK(y.shape[1] == (w - 1) / stride + 1);
    CHECK(testutil::max_rel_diff(*y.data, ref) < 1e-6);
  }
}

TEST_CASE("bilinear_resize examples") {
  Rng rng(17);
  // constants stay constant
  Tensor<double> c = Tensor<double>::full({3, 5, 2}, 1.37);
  Tensor<double> up = bilinear_resize(c, 7, 9);
  for (double v : *up.data) CHECK(v == doctest::Approx(1.37).epsilon(1e-12));
  // same size is the identity
  Tensor<double> x = random_tensor<double>({6, 4, 3}, rng);
  CHECK(testutil::max_abs_diff(bilinear_resize(x, 6, 4), x) < 1e-6);
  // 1x1 upsampled is a constant fill
  Tensor<double> one = Tensor<double>::from({1, 1, 1}, {0.42});
  Tensor<double> four = bilinear_resize(one, 4, 4);
  for (double v : *four.data) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("weighted_cross_entropy examples") {
  Tensor<double> l0 = Tensor<double>::zeros({1, 1, 2});
  Tensor<double> t_bg = Tensor<double>::zeros({1, 1});
  CHECK(weighted_cross_entropy(l0, t_bg, 1.0, 4.0).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Tensor<double> t_fg = Tensor<double>::full({1, 1}, 1.0);
  CHECK(weighted_cross_entropy(l0, t_fg, 1.0, 4.0).item() ==
        doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
  Tensor<double> lbig = Tensor<double>::from({1, 1, 2}, {0, 100});
  CHECK(weighted_cross_entropy(lbig, t_fg, 1.0, 4.0).item() < 1e-6);
  Tensor<double> bad = Tensor<double>::full({1, 1}, 0.5);
  CHECK_THROWS_AS(weighted_cross_entropy(l0, bad, 1.0, 4.0), ValueError);
}

TEST_CASE("token flatten round-trips exactly") {
  Rng rng(19);
  Tensor<double> x = random_tensor<double>({5, 7, 3}, rng);
  Tensor<double> back = unflatten_tokens(flatten_tokens(x), 5, 7);
  CHECK(back.shape == x.shape);
  CHECK(testutil::max_abs_diff(back, x) == 0.0);
}

TEST_CASE("transpose, concat, slice") {
  Tensor<double> a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> at = transpose(a);
  CHECK((*at.data) == std::vector<double>{1, 4, 2, 5, 3, 6});
  Tensor<double> b = Tensor<double>::from({2, 1}, {9, 8});
  Tensor<double> cc = concat_channels(a, b);
  CHECK(cc.shape == Shape{2, 4});
  CHECK((*cc.data) == std::vector<double>{1, 2, 3, 9, 4, 5, 6, 8});
  Tensor<double> ct = concat_tokens(a, Tensor<double>::from({1, 3}, {7, 7, 7}));
  CHECK(ct.shape == Shape{3, 3});
  Tensor<double> sl = slice_channels(cc, 1, 2);
  CHECK((*sl.data) == std::vector<double>{2, 3, 5, 6});
}

TEST_CASE("finite guard rejects overflow") {
  Tensor<float> big = Tensor<float>::full({2, 2}, 1e30f);
  CHECK_THROWS_AS(matmul(big, big), NumericError);
}

TEST_CASE("backward requires a scalar") {
  Tensor<double> x = Tensor<double>::zeros({2, 2}, true);
  CHECK_THROWS_AS(add(x, x).backward(), ValueError);
}

TEST_CASE("fan-out accumulates gradients additively") {
  Tensor<double> x = Tensor<double>::from({1, 1}, {3.0}, true);
  Tensor<double> y = add(scale(x, 2.0), scale(x, 5.0));  // y = 7x
  y.backward();
  CHECK((*x.grad)[0] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("grad_check on sum of squares is near exact") {
  Rng rng(3);
  Tensor<double> x = random_tensor<double>({1, 6}, rng, -1.0, 1.0, true);
  auto f = [&]() { return matmul(x, transpose(x)); };
  auto rep = grad_check<double>(std::function<Tensor<double>()>(f), std::vector<Tensor<double>>{x});
  CHECK(rep.max_rel_err < 1e-9);
}

TEST_CASE("grad_check rejects non-scalar objectives") {
  Tensor<double> x = Tensor<double>::zeros({2, 2}, true);
  auto f = [&]() { return add(x, x); };
  CHECK_THROWS_AS(
      grad_check<double>(std::function<Tensor<double>()>(f), std::vector<Tensor<double>>{x}),
      ValueError);
}

TEST_CASE("every differentiable op passes randomized gradient checks") {
  Rng rng(41);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 2 + rng.uniform_int(4), k = 2 + rng.uniform_int(4), n = 2 + rng.uniform_int(4);
    {  // matmul
      Tensor<double> a = random_tensor<double>({m, k}, rng, -1, 1, true);
      Tensor<double> b = random_tensor<double>({k, n}, rng, -1, 1, true);
      auto w = random_weights(static_cast<std::size_t>(m) * n, rng);
      auto f = [&]() { return project(matmul(a, b), w); };
      CHECK(grad_check<double>(std::function<Tensor<double>()>(f),
                               std::vector<Tensor<double>>{a, b})
                .max_rel_err < 1e-4);
    }
    {  // softmax + scale + transpose
      Tensor<double> x = random_tensor<double>({m, n}, rng, -2, 2, true);
      auto w = random_weights(static_cast<std::size_t>(m) * n, rng);
      auto f = [&]() { return project(transpose(softmax_rows(scale(x, 1.7))), w); };
      CHECK(grad_check<double>(std::function<Tensor<double>()>(f), std::vector<Tensor<double>>{x})
                .max_rel_err < 1e-4);
    }
    {  // layer_norm
      Tensor<double> x = random_tensor<double>({m, k}, rng, -2, 2, true);
      Tensor<double> g = random_tensor<double>({k}, rng, 0.5, 1.5, true);
      Tensor<double> b = random_tensor<double>({k}, rng, -0.5, 0.5, true);
      auto w = random_weights(static_cast<std::size_t>(m) * k, rng);
      auto f = [&]() { return project(layer_norm(x, g, b), w); };
      CHECK(grad_check<double>(std::function<Tensor<double>()>(f),
                               std::vector<Tensor<double>>{x, g, b})
                .max_rel_err < 1e-4);
    }
    {  // channel_affine + relu + add + concat + slice
      Tensor<double> x = random_tensor<double>({m, k}, rng, -1, 1, true);
      Tensor<double> g = random_tensor<double>({k}, rng, 0.5, 1.5, true);
      Tensor<double> b = random_tensor<double>({k}, rng, 0.1, 0.6, true);
      auto w = random_weights(static_cast<std::size_t>(m) * 2 * k, rng);
      auto f = [&]() {
        Tensor<double> y = relu(channel_affine(x, g, b));
        return project(concat_channels(y, add(slice_channels(y, 0, k), x)), w);
      };
      CHECK(grad_check<double>(std::function<Tensor<double>()>(f),
                               std::vector<Tensor<double>>{x, g, b})
                .max_rel_err < 1e-4);
    }
    {  // conv2d + bilinear_resize + add_bias
      const int h = 3 + rng.uniform_int(3), iw = 3 + rng.uniform_int(3);
      const int stride = 1 + rng.uniform_int(2);
      Tensor<double> x = random_tensor<double>({h, iw, 2}, rng, -1, 1, true);
      Tensor<double> kern = random_tensor<double>({3, 3, 2, 2}, rng, -0.5, 0.5, true);
      Tensor<double> bias = random_tensor<double>({2}, rng, -0.3, 0.3, true);
      auto w = random_weights(static_cast<std::size_t>(7) * 6 * 2, rng);
      auto f = [&]() {
        return project(bilinear_resize(conv2d_3x3(x, kern, bias, stride), 7, 6), w);
      };
      CHECK(grad_check<double>(std::function<Tensor<double>()>(f),
                               std::vector<Tensor<double>>{x, kern, bias})
                .max_rel_err < 1e-4);
    }
    {  // weighted_cross_entropy
      Tensor<double> logits = random_tensor<double>({3, 3, 2}, rng, -1.5, 1.5, true);
      Tensor<double> tgt = Tensor<double>::zeros({3, 3});
      for (double& v : *tgt.data) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
      auto f = [&]() { return weighted_cross_entropy(logits, tgt, 1.0, 4.0); };
      CHECK(grad_check<double>(std::function<Tensor<double>()>(f),
                               std::vector<Tensor<double>>{logits})
                .max_rel_err < 1e-4);
    }
  }
}

}  // TEST_SUITE
