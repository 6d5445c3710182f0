#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "ehnet/experiment.h"

using namespace ehnet;

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

ExperimentConfig config_from(const std::string& path) {
  ExperimentConfig cfg = path.empty() ? ExperimentConfig{} : load_config(path);
  apply_seed_override(cfg);
  return cfg;
}

// Writes to `path`, or stdout when it is empty or "-".
template <typename F>
void emit(const std::string& path, F&& write) {
  if (path.empty() || path == "-") {
    write(std::cout);
    std::cout.flush();
    return;
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  write(os);
  if (!os) throw Error("write failed: " + path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Incremental few-shot segmentation on a synthetic benchmark"};
  app.require_subcommand(1);
  std::string config_path, out;

  auto* gen = app.add_subcommand("gen", "Render one schedule draw to PPM/PGM files");
  std::uint64_t draw = 0;
  gen->add_option("-c,--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  gen->add_option("-o,--out", out, "Output directory")->required();
  gen->add_option("--draw", draw, "Repeat draw index");

  auto* train = app.add_subcommand("train-base", "Train on the base session and save a checkpoint");
  train->add_option("-c,--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  train->add_option("-o,--out", out, "Checkpoint directory")->required();

  auto* run = app.add_subcommand("run", "Run every session and write the CSV report");
  std::string base_dir;
  run->add_option("-c,--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  run->add_option("-b,--base", base_dir, "Checkpoint from train-base (trains one if omitted)");
  run->add_option("-o,--out", out, "CSV report path (default stdout)");

  auto* ablate = app.add_subcommand("ablate", "Sweep one setting, all else fixed");
  std::string axis;
  ablate->add_option("-c,--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  ablate->add_option("--axis", axis, "embeddings | strategy | iterations")
      ->required()
      ->check(CLI::IsMember({"embeddings", "strategy", "iterations"}));
  ablate->add_option("-o,--out", out, "CSV path (default stdout)");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of the full training loss");
  std::size_t seeds = 3, coords = 8;
  double tol = 1e-4, step = 1e-3;
  grad->add_option("-c,--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
  grad->add_option("--seeds", seeds, "Number of seeded instances");
  grad->add_option("--coords", coords, "Coordinates checked per parameter tensor");
  grad->add_option("--tol", tol, "Maximum relative error");
  grad->add_option("--step", step, "Central-difference step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) {
      const ExperimentConfig cfg = config_from(config_path);
      export_dataset(cfg, out, draw);
    } else if (*train) {
      const ExperimentConfig cfg = config_from(config_path);
      const BaseState base = train_base(cfg);
      save_base(out, base);
      std::ofstream losses(out + "/losses.csv");
      losses << "epoch,loss\n";
      for (std::size_t i = 0; i < base.losses.size(); ++i) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu,%.6f\n", i, base.losses[i]);
        losses << buf;
      }
      std::ofstream(out + "/config.json") << config_to_json(cfg);
    } else if (*run) {
      const ExperimentConfig cfg = config_from(config_path);
      BaseState base;
      if (base_dir.empty()) {
        base = train_base(cfg);
      } else {
        base = load_base(base_dir);
        if (base.model.embed_dim() != cfg.model.embed_dim) {
          throw ConfigError("checkpoint embedding dimension does not match the config");
        }
      }
      const EvalReport rep = evaluate(cfg, base);
      emit(out, [&](std::ostream& os) { write_report_csv(os, rep); });
    } else if (*ablate) {
      const ExperimentConfig cfg = config_from(config_path);
      const AblationAxis a = parse_ablation_axis(axis);
      const auto rows = ablation_run(cfg, a);
      emit(out, [&](std::ostream& os) { write_ablation_csv(os, a, rows); });
    } else if (*grad) {
      const ExperimentConfig cfg = config_from(config_path);
      double worst = 0.0;
      std::size_t checked = 0, skipped = 0;
      for (std::size_t s = 0; s < seeds; ++s) {
        for (const auto& r : gradcheck_pipeline(cfg, cfg.seed + s, coords, step)) {
          worst = std::max(worst, r.result.max_rel_error);
          checked += r.result.checked;
          skipped += r.result.skipped_kinks;
        }
      }
      std::printf("checked=%zu skipped_kinks=%zu max_rel_error=%.3e tol=%.1e %s\n", checked, skipped, worst, tol,
                  worst < tol ? "PASS" : "FAIL");
      if (!(worst < tol)) return kExitNumeric;
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return 0;
}
