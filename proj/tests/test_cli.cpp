#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "catrans/checkpoint.hpp"
#include "catrans/config.hpp"
#include "catrans/model.hpp"
#include "test_util.hpp"

using namespace catrans;
using testutil::run_cli;

namespace {

std::string smoke_config_text() {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.channels = {4, 4, 8, 8};
  cfg.mask_channels = {2, 2, 4, 4};
  cfg.decoder_channels = 8;
  cfg.train_steps = 10;
  cfg.lr_decay_step = 5;
  cfg.eval_every = 5;
  cfg.val_episodes = 3;
  cfg.test_episodes = 4;
  cfg.test_runs = 2;
  cfg.base_lr = 1e-3;
  cfg.ablate_seeds = {0};
  cfg.ablate_eval_episodes = 4;
  return cfg.to_text();
}

std::filesystem::path write_smoke_config(const std::filesystem::path& dir) {
  const auto path = dir / "smoke.cfg";
  std::ofstream out(path, std::ios::binary);
  out << smoke_config_text();
  return path;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("missing config file exits 1 and names the path") {
  REQUIRE_FALSE(testutil::cli_path().empty());
  auto r = run_cli("train --config /no/such/file.cfg --out /tmp/ignored");
  CHECK(r.exit_code == 1);
  CHECK(r.out.find("/no/such/file.cfg") != std::string::npos);
}

TEST_CASE("smoke training run completes quickly and deterministically") {
  auto dir = testutil::fresh_dir("catrans_cli_smoke");
  const auto cfg_path = write_smoke_config(dir);
  const auto t0 = std::chrono::steady_clock::now();
  auto r1 = run_cli("train --config " + cfg_path.string() + " --out " + (dir / "run1").string());
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  REQUIRE(r1.exit_code == 0);
  CHECK(secs < 60.0);
  for (const char* f : {"metrics.csv", "manifest.txt", "config.txt", "last.ckpt", "best.ckpt"})
    CHECK(std::filesystem::exists(dir / "run1" / f));

  auto r2 = run_cli("train --config " + cfg_path.string() + " --out " + (dir / "run2").string());
  REQUIRE(r2.exit_code == 0);
  CHECK(testutil::read_file(dir / "run1" / "metrics.csv") ==
        testutil::read_file(dir / "run2" / "metrics.csv"));
  CHECK(testutil::read_file(dir / "run1" / "last.ckpt") ==
        testutil::read_file(dir / "run2" / "last.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("seed and variant overrides change the run") {
  auto dir = testutil::fresh_dir("catrans_cli_override");
  const auto cfg_path = write_smoke_config(dir);
  auto r1 = run_cli("train --config " + cfg_path.string() + " --out " + (dir / "a").string() +
                    " --seed 11 --variant baseline");
  REQUIRE(r1.exit_code == 0);
  const std::string cfg_text = testutil::read_file(dir / "a" / "config.txt");
  CHECK(cfg_text.find("variant=baseline") != std::string::npos);
  CHECK(cfg_text.find("seed=11") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("eval runs 1-shot and 5-shot on a trained checkpoint") {
  auto dir = testutil::fresh_dir("catrans_cli_eval");
  const auto cfg_path = write_smoke_config(dir);
  REQUIRE(run_cli("train --config " + cfg_path.string() + " --out " + (dir / "run").string())
              .exit_code == 0);
  for (int k : {1, 5}) {
    auto r = run_cli("eval --checkpoint " + (dir / "run" / "last.ckpt").string() +
                     " --k " + std::to_string(k) + " --episodes 3 --runs 2 --out " +
                     (dir / ("eval_k" + std::to_string(k) + ".csv")).string());
    REQUIRE(r.exit_code == 0);
    const std::string csv =
        testutil::read_file(dir / ("eval_k" + std::to_string(k) + ".csv"));
    CHECK(csv.rfind("fold,k,run,miou\n", 0) == 0);
    // header + folds x runs rows
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 1 * 2);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("eval on all folds emits folds x runs rows") {
  auto dir = testutil::fresh_dir("catrans_cli_eval_all");
  const auto cfg_path = write_smoke_config(dir);
  REQUIRE(run_cli("train --config " + cfg_path.string() + " --out " + (dir / "run").string())
              .exit_code == 0);
  auto r = run_cli("eval --checkpoint " + (dir / "run" / "last.ckpt").string() +
                   " --fold all --episodes 2 --runs 2 --out " + (dir / "eval.csv").string());
  REQUIRE(r.exit_code == 0);
  const std::string csv = testutil::read_file(dir / "eval.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 4 * 2);
  std::filesystem::remove_all(dir);
}

TEST_CASE("unreadable checkpoint exits 1") {
  auto r = run_cli("eval --checkpoint /no/such/model.ckpt");
  CHECK(r.exit_code == 1);
}

TEST_CASE("oracle fixture checkpoint scores a perfect miou") {
  auto dir = testutil::fresh_dir("catrans_cli_oracle");
  ModelConfig cfg = ModelConfig::parse(smoke_config_text());
  ModelParams<float> params = make_model<float>(cfg);
  NamedParams<float> named = collect_params(params);
  save_checkpoint<float>(dir / "oracle.ckpt", cfg, named, "oracle");
  auto r = run_cli("eval --checkpoint " + (dir / "oracle.ckpt").string() +
                   " --episodes 4 --runs 2 --out " + (dir / "eval.csv").string());
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.find("1.000000") != std::string::npos);
  const std::string csv = testutil::read_file(dir / "eval.csv");
  CHECK(csv.find(",1\n") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablate over the branch axis emits a five-row csv") {
  auto dir = testutil::fresh_dir("catrans_cli_ablate");
  const auto cfg_path = write_smoke_config(dir);
  auto r = run_cli("ablate --config " + cfg_path.string() + " --axis branch --out " +
                   dir.string() + " --jobs 2");
  REQUIRE(r.exit_code == 0);
  const std::string csv = testutil::read_file(dir / "ablation_branch.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);  // header + 5 variants
  for (const char* v : {"baseline", "rat_only", "rct_only", "rct_nosupport", "full"})
    CHECK(csv.find(v) != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ablate rejects an unknown axis") {
  auto dir = testutil::fresh_dir("catrans_cli_axis");
  const auto cfg_path = write_smoke_config(dir);
  CHECK(run_cli("ablate --config " + cfg_path.string() + " --axis bogus").exit_code == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("episode generation hashes identically across two processes") {
  auto a = run_cli("episode-hash --fold 2 --phase test --k 2 --seed 99 --count 6");
  auto b = run_cli("episode-hash --fold 2 --phase test --k 2 --seed 99 --count 6");
  REQUIRE(a.exit_code == 0);
  REQUIRE(b.exit_code == 0);
  CHECK(a.out == b.out);
  CHECK(a.out.size() > 10);
  auto c = run_cli("episode-hash --fold 2 --phase test --k 2 --seed 100 --count 6");
  CHECK(a.out != c.out);
}

TEST_CASE("precision env var overrides the config") {
  auto dir = testutil::fresh_dir("catrans_cli_prec");
  const auto cfg_path = write_smoke_config(dir);
  auto r = run_cli("train --config " + cfg_path.string() + " --out " + (dir / "runp").string(),
                   "");
  REQUIRE(r.exit_code == 0);
  // same run under CATRANS_PRECISION=f64 must also succeed
  const std::string bin = testutil::cli_path();
  const std::string cmd = "CATRANS_PRECISION=f64 '" + bin + "' train --config " +
                          cfg_path.string() + " --out " + (dir / "runq").string() +
                          " > /dev/null 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
