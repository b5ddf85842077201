#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "catrans/checkpoint.hpp"
#include "catrans/config.hpp"
#include "catrans/episodes.hpp"
#include "catrans/model.hpp"
#include "catrans/model_gradcheck.hpp"
#include "catrans/train.hpp"

namespace fs = std::filesystem;
using namespace catrans;

namespace {

// CATRANS_PRECISION={f32,f64} overrides the config file.
void apply_precision_env(ModelConfig& cfg) {
  const char* env = std::getenv("CATRANS_PRECISION");
  if (!env) return;
  const std::string v = env;
  if (v == "f32") cfg.precision = Precision::f32;
  else if (v == "f64") cfg.precision = Precision::f64;
  else throw ConfigError("CATRANS_PRECISION must be f32 or f64, got '" + v + "'");
}

template <typename T>
int run_train(const ModelConfig& cfg, const fs::path& out_dir) {
  TrainResult<T> res = train_run<T>(cfg, out_dir);
  std::cout << "train: " << cfg.train_steps << " steps, variant=" << to_string(cfg.variant)
            << ", seed=" << cfg.seed << "\n";
  std::cout << "train: final loss=" << fmt_g17(res.metrics.back().loss)
            << " best_val_miou=" << fmt_g17(res.best_val) << " wall=" << res.wall_seconds
            << "s\n";
  std::cout << "train: artifacts in " << out_dir.string() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, long long seed,
              const std::string& variant) {
  ModelConfig cfg = ModelConfig::load_file(config_path);
  if (seed >= 0) cfg.seed = static_cast<uint64_t>(seed);
  if (!variant.empty()) cfg.variant = parse_variant(variant);
  apply_precision_env(cfg);
  cfg.validate();
  if (cfg.precision == Precision::f64) return run_train<double>(cfg, out_dir);
  return run_train<float>(cfg, out_dir);
}

template <typename T>
std::vector<double> eval_runs_model(const Checkpoint& ck, const ModelConfig& cfg, int fold, int k,
                                    int episodes, int runs) {
  ModelParams<T> params = make_model<T>(cfg);
  NamedParams<T> named = collect_params(params);
  apply_checkpoint(ck, named);
  std::vector<double> mious;
  for (int r = 0; r < runs; ++r) {
    DatasetSplit split{fold, 0, episodes};
    ModelConfig c = cfg;
    c.fold = fold;
    const MiouResult m = evaluate_model(params, c, split, Phase::test, k, episodes,
                                        cfg.run_seeds[static_cast<std::size_t>(r)]);
    mious.push_back(m.mean);
  }
  return mious;
}

int cmd_eval(const std::string& ckpt_path, int fold_flag, bool all_folds, int k, int episodes,
             int runs, const std::string& csv_path, bool force) {
  Checkpoint ck = load_checkpoint(ckpt_path, force);
  ModelConfig cfg = ck.cfg;
  apply_precision_env(cfg);
  if (episodes <= 0) episodes = cfg.test_episodes;
  if (runs <= 0) runs = cfg.test_runs;
  if (runs > static_cast<int>(cfg.run_seeds.size()))
    throw ConfigError("eval: only " + std::to_string(cfg.run_seeds.size()) + " run seeds configured");
  std::vector<int> folds;
  if (all_folds)
    for (int f = 0; f < kNumFolds; ++f) folds.push_back(f);
  else
    folds.push_back(fold_flag >= 0 ? fold_flag : cfg.fold);

  std::string csv = "fold,k,run,miou\n";
  std::cout << "fold  k  run  miou\n";
  for (int fold : folds) {
    std::vector<double> mious;
    if (ck.fixture == "oracle") {
      Predictor oracle = [](const Episode& ep) {
        std::vector<uint8_t> m(ep.query_mask().size());
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = ep.query_mask()[i] == 1.0f ? 1 : 0;
        return m;
      };
      for (int r = 0; r < runs; ++r) {
        DatasetSplit split{fold, 0, episodes};
        mious.push_back(evaluate_predictor(cfg, split, Phase::test, k, episodes,
                                           cfg.run_seeds[static_cast<std::size_t>(r)], oracle,
                                           /*guard_query_mask=*/false)
                            .mean);
      }
    } else if (ck.fixture == "all_background") {
      Predictor allbg = [](const Episode& ep) {
        return std::vector<uint8_t>(ep.query_mask().size(), 0);
      };
      for (int r = 0; r < runs; ++r) {
        DatasetSplit split{fold, 0, episodes};
        mious.push_back(evaluate_predictor(cfg, split, Phase::test, k, episodes,
                                           cfg.run_seeds[static_cast<std::size_t>(r)], allbg,
                                           /*guard_query_mask=*/false)
                            .mean);
      }
    } else if (cfg.precision == Precision::f64) {
      mious = eval_runs_model<double>(ck, cfg, fold, k, episodes, runs);
    } else {
      mious = eval_runs_model<float>(ck, cfg, fold, k, episodes, runs);
    }
    for (int r = 0; r < runs; ++r) {
      std::printf("%4d %2d %4d  %.6f\n", fold, k, r, mious[static_cast<std::size_t>(r)]);
      csv += std::to_string(fold) + "," + std::to_string(k) + "," + std::to_string(r) + "," +
             fmt_g17(mious[static_cast<std::size_t>(r)]) + "\n";
    }
    const EvalSummary s = summarize_runs(mious);
    std::printf("fold %d summary: miou %.6f +- %.6f (min %.6f, max %.6f) over %d runs x %d episodes\n",
                fold, s.mean, s.stddev, s.min, s.max, runs, episodes);
  }
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw Error("cannot write eval csv '" + csv_path + "'");
  out << csv;
  std::cout << "eval: csv written to " << csv_path << "\n";
  return 0;
}

template <typename T>
int run_ablate(const ModelConfig& cfg, AblationAxis axis, const fs::path& out_dir, int jobs) {
  AblationTable table = ablate<T>(cfg, axis, jobs, [](const std::string& line) {
    std::cout << "ablate: " << line << "\n";
  });
  fs::create_directories(out_dir);
  const std::string axis_name = table.axis == "variant" ? "branch" : table.axis;
  const fs::path csv_path = out_dir / ("ablation_" + axis_name + ".csv");
  std::ofstream out(csv_path, std::ios::binary);
  if (!out) throw Error("cannot write '" + csv_path.string() + "'");
  out << table.csv();
  std::cout << table.csv();
  std::cout << "ablate: csv written to " << csv_path.string() << "\n";
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& axis_s,
               const std::string& out_dir, int jobs) {
  ModelConfig cfg = ModelConfig::load_file(config_path);
  apply_precision_env(cfg);
  const AblationAxis axis = parse_axis(axis_s);
  if (cfg.precision == Precision::f64) return run_ablate<double>(cfg, axis, out_dir, jobs);
  return run_ablate<float>(cfg, axis, out_dir, jobs);
}

int cmd_gradcheck(const std::string& size, double eps, bool corrupt) {
  const ModelConfig cfg = gradcheck_config(size);
  corrupt_backward_for_tests() = corrupt;
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport rep = full_model_gradcheck(cfg, eps);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("gradcheck size=%s coords=%zu elapsed=%.1fs\n", size.c_str(), rep.coords_checked,
              secs);
  std::printf("max_rel_err=%.3e\n", rep.max_rel_err);
  if (rep.max_rel_err >= 1e-4) {
    std::printf("FAIL: worst offender %s[%zu] analytic=%.6e finite-diff=%.6e\n",
                rep.worst_param.c_str(), rep.worst_index, rep.ad, rep.fd);
    return 3;
  }
  std::printf("OK: all gradients match finite differences below 1e-4\n");
  return 0;
}

int cmd_episode_hash(int fold, const std::string& phase_s, int k, long long seed, int count) {
  ModelConfig cfg;
  DatasetSplit split{fold, 0, 0};
  const Phase phase = parse_phase(phase_s);
  uint64_t h = 0xCBF29CE484222325ull;
  for (int i = 0; i < count; ++i) {
    Episode ep = generate_episode(cfg, split, phase, k,
                                  derive_seed(static_cast<uint64_t>(seed), "hash-audit",
                                              static_cast<uint64_t>(i)));
    h = mix_u64(h, hash_episode(ep));
  }
  std::printf("%016llx\n", static_cast<unsigned long long>(h));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CATrans few-shot segmentation: training, evaluation and ablations"};
  app.require_subcommand(1);

  auto* train = app.add_subcommand("train", "train a model and write run artifacts");
  std::string train_config, train_out = "run", train_variant;
  long long train_seed = -1;
  train->add_option("--config", train_config, "config file (key=value lines)")->required();
  train->add_option("--out", train_out, "output directory");
  train->add_option("--seed", train_seed, "override config seed");
  train->add_option("--variant", train_variant, "override config variant");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on test folds");
  std::string eval_ckpt, eval_csv = "eval.csv", eval_fold = "config";
  int eval_k = 1, eval_episodes = 0, eval_runs = 0;
  bool eval_force = false;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--fold", eval_fold, "fold index 0-3, or 'all', or 'config'");
  eval->add_option("--k", eval_k, "shots per episode (1 or 5)")->check(CLI::IsMember({1, 5}));
  eval->add_option("--episodes", eval_episodes, "episodes per run (default: config)");
  eval->add_option("--runs", eval_runs, "number of runs (default: config)");
  eval->add_option("--out", eval_csv, "csv output path");
  eval->add_flag("--force", eval_force, "load despite config-hash mismatch");

  auto* abl = app.add_subcommand("ablate", "train/evaluate an ablation grid");
  std::string abl_config, abl_axis, abl_out = ".";
  int abl_jobs = 0;
  abl->add_option("--config", abl_config, "config file")->required();
  abl->add_option("--axis", abl_axis, "branch | level | heads")->required();
  abl->add_option("--out", abl_out, "output directory for the csv");
  abl->add_option("--jobs", abl_jobs, "parallel training runs (default: hardware)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the full graph");
  std::string gc_size = "tiny";
  double gc_eps = 1e-4;
  bool gc_corrupt = false;
  gc->add_option("--size", gc_size, "tiny | small")->check(CLI::IsMember({"tiny", "small"}));
  gc->add_option("--eps", gc_eps, "finite-difference step");
  gc->add_flag("--corrupt-backward", gc_corrupt)->group("");  // test fixture, hidden

  auto* eh = app.add_subcommand("episode-hash", "hash generated episodes (determinism audit)");
  eh->group("");  // hidden
  int eh_fold = 0, eh_k = 1, eh_count = 8;
  long long eh_seed = 0;
  std::string eh_phase = "train";
  eh->add_option("--fold", eh_fold);
  eh->add_option("--phase", eh_phase);
  eh->add_option("--k", eh_k);
  eh->add_option("--seed", eh_seed);
  eh->add_option("--count", eh_count);

  try {
    app.parse(argc, argv);
    if (*train) return cmd_train(train_config, train_out, train_seed, train_variant);
    if (*eval) {
      int fold = -1;
      bool all = false;
      if (eval_fold == "all") all = true;
      else if (eval_fold != "config") fold = std::stoi(eval_fold);
      return cmd_eval(eval_ckpt, fold, all, eval_k, eval_episodes, eval_runs, eval_csv,
                      eval_force);
    }
    if (*abl) return cmd_ablate(abl_config, abl_axis, abl_out, abl_jobs);
    if (*gc) return cmd_gradcheck(gc_size, gc_eps, gc_corrupt);
    if (*eh) return cmd_episode_hash(eh_fold, eh_phase, eh_k, eh_seed, eh_count);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
