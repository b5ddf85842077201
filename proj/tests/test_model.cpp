#include <doctest.h>

#include "catrans/model.hpp"
#include "test_util.hpp"

using namespace catrans;
using testutil::random_tensor;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.channels = {4, 4, 8, 8};
  cfg.mask_channels = {2, 2, 4, 4};
  cfg.decoder_channels = 8;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("fused widths follow the channel bookkeeping") {
  ModelConfig cfg;  // 64x64 defaults
  CHECK(fused_width(cfg, 3) == 32 + 64);  // C_m^3 + 8*8
  CHECK(fused_width(cfg, 4) == 32 + 16);  // C_m^4 + 4*4
  Rng rng(3);
  Tensor<double> ctx = random_tensor<double>({8, 8, 32}, rng);
  Tensor<double> aff = random_tensor<double>({8, 8, 64}, rng);
  Tensor<double> fused = fuse_level(ctx, aff);
  CHECK(fused.shape == Shape{8, 8, 96});
  Tensor<double> ctx4 = random_tensor<double>({4, 4, 32}, rng);
  Tensor<double> aff4 = random_tensor<double>({4, 4, 16}, rng);
  CHECK(fuse_level(ctx4, aff4).shape == Shape{4, 4, 48});
}

TEST_CASE("zero affinity view leaves only the context channels") {
  Rng rng(5);
  Tensor<double> ctx = random_tensor<double>({4, 4, 3}, rng);
  Tensor<double> aff = Tensor<double>::zeros({4, 4, 5});
  Tensor<double> fused = fuse_level(ctx, aff);
  for (int p = 0; p < 16; ++p)
    for (int c = 0; c < 8; ++c) {
      const double v = (*fused.data)[static_cast<std::size_t>(p) * 8 + c];
      if (c < 3)
        CHECK(v == (*ctx.data)[static_cast<std::size_t>(p) * 3 + c]);
      else
        CHECK(v == 0.0);
    }
}

TEST_CASE("fuse_level rejects mismatched spatial sizes") {
  CHECK_THROWS_AS(fuse_level(Tensor<double>::zeros({4, 4, 2}), Tensor<double>::zeros({8, 8, 2})),
                  ShapeError);
}

TEST_CASE("decode produces full-resolution two-channel logits") {
  ModelConfig cfg;  // 64x64 defaults
  Rng rng(7);
  ModelParams<double> params = make_model<double>(cfg, rng);
  Tensor<double> fused4 = random_tensor<double>({4, 4, 48}, rng);
  Tensor<double> fused3 = random_tensor<double>({8, 8, 96}, rng);
  Tensor<double> f_q2 = random_tensor<double>({16, 16, 32}, rng);
  Tensor<double> f_q1 = random_tensor<double>({32, 32, 16}, rng);
  Tensor<double> logits = decode(fused4, fused3, f_q2, f_q1, params.decoder, 64, 64);
  CHECK(logits.shape == Shape{64, 64, 2});
}

TEST_CASE("argmax ties resolve to background") {
  Tensor<double> logits = Tensor<double>::zeros({2, 2, 2});
  std::vector<uint8_t> mask = hard_mask(logits);
  for (uint8_t v : mask) CHECK(v == 0);
  (*logits.data)[2 * 3 + 1] = 0.1;  // one pixel favors foreground
  CHECK(hard_mask(logits)[3] == 1);
}

TEST_CASE("forward pass is deterministic and shape-correct for every variant") {
  ModelConfig cfg = tiny_cfg();
  ModelParams<float> params = make_model<float>(cfg);
  DatasetSplit split{0, 0, 0};
  Episode ep = generate_episode(cfg, split, Phase::train, 1, 77);
  for (Variant v : {Variant::full, Variant::rct_only, Variant::rat_only, Variant::rct_nosupport,
                    Variant::baseline}) {
    Prediction<float> a = catrans_forward(params, ep, cfg, v);
    CHECK(a.logits.shape == Shape{16, 16, 2});
    CHECK(a.mask.size() == 256);
    Prediction<float> b = catrans_forward(params, ep, cfg, v);
    CHECK(testutil::max_abs_diff(a.logits, b.logits) == 0.0);
    CHECK(a.mask == b.mask);
  }
}

TEST_CASE("perturbing the query mask cannot change the prediction") {
  ModelConfig cfg = tiny_cfg();
  ModelParams<float> params = make_model<float>(cfg);
  DatasetSplit split{0, 0, 0};
  Episode ep = generate_episode(cfg, split, Phase::train, 1, 91);
  Prediction<float> before = catrans_forward(params, ep, cfg, Variant::full);
  std::vector<float> poisoned(ep.query_mask().size(), 1.0f);
  ep.set_query_mask(std::move(poisoned));
  Prediction<float> after = catrans_forward(params, ep, cfg, Variant::full);
  CHECK(testutil::max_abs_diff(before.logits, after.logits) == 0.0);
}

TEST_CASE("forward path works under the query-mask guard") {
  ModelConfig cfg = tiny_cfg();
  ModelParams<float> params = make_model<float>(cfg);
  DatasetSplit split{0, 0, 0};
  Episode ep = generate_episode(cfg, split, Phase::train, 1, 13);
  std::vector<uint8_t> mask = predict_mask(params, ep, cfg, Variant::full);  // guard active inside
  CHECK(mask.size() == 256);
  EvalGuard guard;
  CHECK_THROWS_AS(ep.query_mask(), Error);
}

TEST_CASE("k-shot episodes run through the full graph") {
  ModelConfig cfg = tiny_cfg();
  cfg.k_shot = 5;
  ModelParams<float> params = make_model<float>(cfg);
  DatasetSplit split{0, 0, 0};
  Episode ep = generate_episode(cfg, split, Phase::train, 5, 17);
  CHECK(ep.support.size() == 5);
  Prediction<float> pred = catrans_forward(params, ep, cfg, Variant::full);
  CHECK(pred.logits.shape == Shape{16, 16, 2});
}

TEST_CASE("disabled levels keep their widths but carry no information") {
  ModelConfig cfg = tiny_cfg();
  cfg.levels = {4};
  ModelParams<float> params = make_model<float>(cfg);
  DatasetSplit split{0, 0, 0};
  Episode ep = generate_episode(cfg, split, Phase::train, 1, 19);
  Prediction<float> pred = catrans_forward(params, ep, cfg, Variant::full);
  CHECK(pred.logits.shape == Shape{16, 16, 2});
}

TEST_CASE("channel bookkeeping holds across a config matrix") {
  for (int image : {32, 64}) {
    for (int cm3 : {8, 16}) {
      ModelConfig cfg;
      cfg.image_size = image;
      cfg.mask_channels = {4, 8, cm3, cm3};
      cfg.channels = {8, 8, 16, 16};
      cfg.decoder_channels = 8;
      cfg.validate();
      const int n3 = (image / 8) * (image / 8), n4 = (image / 16) * (image / 16);
      CHECK(fused_width(cfg, 3) == cm3 + n3);
      CHECK(fused_width(cfg, 4) == cm3 + n4);
      ModelParams<float> params = make_model<float>(cfg);
      DatasetSplit split{0, 0, 0};
      Episode ep = generate_episode(cfg, split, Phase::train, 1, 23);
      Prediction<float> pred = catrans_forward(params, ep, cfg, Variant::full);
      CHECK(pred.logits.shape == Shape{image, image, 2});
    }
  }
}

TEST_CASE("parameter registry is stable and complete") {
  ModelConfig cfg = tiny_cfg();
  ModelParams<float> params = make_model<float>(cfg);
  NamedParams<float> a = collect_params(params);
  NamedParams<float> b = collect_params(params);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    CHECK(a[i].second.data.get() == b[i].second.data.get());
  }
}

}  // TEST_SUITE
