#include <doctest.h>

#include "catrans/encoders.hpp"
#include "catrans/gradcheck.hpp"
#include "test_util.hpp"

using namespace catrans;
using testutil::random_tensor;

TEST_SUITE("encoders") {

TEST_CASE("image encoder pyramid shapes follow stride arithmetic") {
  ModelConfig cfg;  // defaults: 64x64, channels 16,32,64,64
  Rng rng(1);
  ImageEncoderParams<double> enc = make_image_encoder<double>(cfg, rng);
  Tensor<double> img = random_tensor<double>({64, 64, 3}, rng, 0.0, 1.0);
  FeaturePyramid<double> pyr = image_encoder(img, enc);
  CHECK(pyr.level[0].shape == Shape{32, 32, 16});
  CHECK(pyr.level[1].shape == Shape{16, 16, 32});
  CHECK(pyr.level[2].shape == Shape{8, 8, 64});
  CHECK(pyr.level[3].shape == Shape{4, 4, 64});
}

TEST_CASE("image encoder rejects sizes not divisible by 16") {
  ModelConfig cfg;
  Rng rng(2);
  ImageEncoderParams<double> enc = make_image_encoder<double>(cfg, rng);
  CHECK_THROWS_AS(image_encoder(Tensor<double>::zeros({20, 20, 3}), enc), ShapeError);
}

TEST_CASE("zero input with zero shift parameters yields a zero pyramid") {
  ModelConfig cfg;
  Rng rng(3);
  ImageEncoderParams<double> enc = make_image_encoder<double>(cfg, rng);  // beta starts at zero
  FeaturePyramid<double> pyr = image_encoder(Tensor<double>::zeros({32, 32, 3}), enc);
  for (const auto& lv : pyr.level)
    for (double v : *lv.data) CHECK(v == 0.0);
}

TEST_CASE("support and query share one encoder: identical inputs, identical pyramids") {
  ModelConfig cfg;
  Rng rng(4);
  ImageEncoderParams<double> enc = make_image_encoder<double>(cfg, rng);
  Tensor<double> img = random_tensor<double>({32, 32, 3}, rng, 0.0, 1.0);
  FeaturePyramid<double> a = image_encoder(img, enc);
  FeaturePyramid<double> b = image_encoder(img, enc);
  for (int l = 0; l < 4; ++l) CHECK(testutil::max_abs_diff(a.level[l], b.level[l]) == 0.0);
  // parameter identity: one parameter set serves both calls
  NamedParams<double> p1, p2;
  collect(p1, "enc", enc);
  collect(p2, "enc", enc);
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].second.data.get() == p2[i].second.data.get());
}

TEST_CASE("mask encoder pyramid shapes") {
  ModelConfig cfg;  // mask channels 8,16,32,32
  Rng rng(5);
  MaskEncoderParams<double> enc = make_mask_encoder<double>(cfg, rng);
  Tensor<double> mask = Tensor<double>::zeros({64, 64});
  for (int i = 500; i < 900; ++i) (*mask.data)[static_cast<std::size_t>(i)] = 1.0;
  MaskPyramid<double> pyr = mask_encoder(mask, enc);
  CHECK(pyr.level[0].shape == Shape{32, 32, 8});
  CHECK(pyr.level[1].shape == Shape{16, 16, 16});
  CHECK(pyr.level[2].shape == Shape{8, 8, 32});
  CHECK(pyr.level[3].shape == Shape{4, 4, 32});
}

TEST_CASE("all-zero mask with zero shifts yields a zero pyramid") {
  ModelConfig cfg;
  Rng rng(6);
  MaskEncoderParams<double> enc = make_mask_encoder<double>(cfg, rng);
  MaskPyramid<double> pyr = mask_encoder(Tensor<double>::zeros({32, 32}), enc);
  for (const auto& lv : pyr.level)
    for (double v : *lv.data) CHECK(v == 0.0);
}

TEST_CASE("all-one and all-zero masks produce distinct level-4 features") {
  ModelConfig cfg;
  Rng rng(7);
  MaskEncoderParams<double> enc = make_mask_encoder<double>(cfg, rng);
  MaskPyramid<double> zeros = mask_encoder(Tensor<double>::zeros({32, 32}), enc);
  MaskPyramid<double> ones = mask_encoder(Tensor<double>::full({32, 32}, 1.0), enc);
  CHECK(testutil::max_abs_diff(zeros.level[3], ones.level[3]) > 1e-6);
}

TEST_CASE("mask encoder rejects non-binary input") {
  ModelConfig cfg;
  Rng rng(8);
  MaskEncoderParams<double> enc = make_mask_encoder<double>(cfg, rng);
  CHECK_THROWS_AS(mask_encoder(Tensor<double>::full({16, 16}, 0.25), enc), ValueError);
}

TEST_CASE("gradient check through both encoders at 16x16") {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.channels = {4, 4, 8, 8};
  cfg.mask_channels = {2, 2, 4, 4};
  Rng rng(9);
  ImageEncoderParams<double> ienc = make_image_encoder<double>(cfg, rng);
  MaskEncoderParams<double> menc = make_mask_encoder<double>(cfg, rng);
  NamedParams<double> named;
  collect(named, "img", ienc);
  collect(named, "mask", menc);
  // keep the graph away from relu kinks and dead scales
  Rng jit(11);
  for (auto& [n, p] : named) {
    const bool bias_like = n.ends_with(".beta");
    for (double& v : *p.data) v += bias_like ? jit.uniform(0.05, 0.20) : jit.uniform(-0.03, 0.03);
  }
  Tensor<double> img = random_tensor<double>({16, 16, 3}, rng, 0.0, 1.0);
  Tensor<double> mask = Tensor<double>::zeros({16, 16});
  for (int i = 40; i < 150; ++i) (*mask.data)[static_cast<std::size_t>(i)] = 1.0;
  std::vector<double> w;
  Rng wr(13);
  auto f = [&]() {
    FeaturePyramid<double> fp = image_encoder(img, ienc);
    MaskPyramid<double> mp = mask_encoder(mask, menc);
    Tensor<double> cat = concat_channels(flatten_tokens(fp.level[2]), flatten_tokens(mp.level[2]));
    if (w.empty())
      for (std::size_t i = 0; i < cat.numel(); ++i) w.push_back(wr.uniform(-1.0, 1.0));
    return matmul(reshape(cat, {1, static_cast<int>(cat.numel())}),
                  Tensor<double>::from({static_cast<int>(cat.numel()), 1}, w));
  };
  auto rep = grad_check<double>(std::function<Tensor<double>()>(f), named, 1e-4);
  CAPTURE(rep.summary());
  CHECK(rep.max_rel_err < 1e-4);
}

}  // TEST_SUITE
