#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "ehnet/experiment.h"

using namespace ehnet;

namespace {

// Small enough to train in a fraction of a second.
ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seed = 5;
  c.model.embed_dim = 4;
  c.model.hidden_channels = 3;
  c.model.feat_channels = 3;
  c.model.aspp_channels = 2;
  c.model.iterations = 1;
  c.training.pretrain_epochs = 2;
  c.training.epochs = 2;
  c.training.episodes_per_epoch = 2;
  c.training.samples_per_class = 3;
  c.training.optimizer = OptimizerKind::adam;
  c.training.lr = 1e-3;
  c.protocol.queries_per_class = 1;
  c.repeat = 1;
  return c;
}

std::string tmp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("ehnet_test_" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST(Config, DefaultsAndRoundTrip) {
  const ExperimentConfig c = parse_config(R"({"schema_version": 1})");
  EXPECT_EQ(c.model.embed_dim, 64u);
  EXPECT_EQ(c.embeddings, EmbeddingSetting::keep_hyper);
  const std::string text = config_to_json(tiny_config());
  const ExperimentConfig back = parse_config(text);
  EXPECT_EQ(config_to_json(back), text);
}

TEST(Config, RejectsUnknownKeys) {
  EXPECT_THROW(parse_config(R"({"schema_version": 1, "sed": 3})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schema_version": 1, "model": {"embed_dims": 3}})"), ConfigError);
  EXPECT_THROW(parse_config(R"({"schema_version": 1, "strategy": {"kind": "eaus", "extra": 1}})"), ConfigError);
}

TEST(Config, RejectsBadValues) {
  const char* bad[] = {
      R"({})",
      R"({"schema_version": 2})",
      R"({"schema_version": 1, "seed": -1})",
      R"({"schema_version": 1, "model": {"embed_dim": 0}})",
      R"({"schema_version": 1, "model": {"embed_dim": 2.5}})",
      R"({"schema_version": 1, "model": {"tau": 1.5}})",
      R"({"schema_version": 1, "training": {"lr": 0}})",
      R"({"schema_version": 1, "training": {"optimizer": "rmsprop"}})",
      R"({"schema_version": 1, "strategy": {"kind": "lt"}})",
      R"({"schema_version": 1, "embeddings": "both"})",
      R"({"schema_version": 1, "protocol": {"new_per_session": [3, 3, 3]}})",
      R"({"schema_version": 1, "taxonomy": {"image_size": 30}})",
      R"({"schema_version": 1, "record_timing": 1})",
      R"({"schema_version": 1,)",
      R"([1, 2])",
  };
  for (const char* text : bad) EXPECT_THROW(parse_config(text), ConfigError) << text;
}

TEST(Config, ParsesEveryField) {
  const ExperimentConfig c = parse_config(R"({
    "schema_version": 1, "seed": 42,
    "taxonomy": {"groups": 3, "classes_per_group": 5, "image_size": 32},
    "protocol": {"base_classes": 6, "new_per_session": [2, 2], "shots": 5,
                 "base_support_per_class": 4, "queries_per_class": 3},
    "model": {"embed_dim": 12, "hidden_channels": 5, "feat_channels": 6, "aspp_channels": 3,
              "eaus_w_scale": 0.2, "clusters": 2, "kmeans_restarts": 3, "iterations": 2, "tau": 0.4},
    "training": {"pretrain_epochs": 7, "epochs": 9, "episodes_per_epoch": 4, "optimizer": "sgd",
                 "lr": 0.5, "lr_decay": 0.5, "decay_every": 3, "samples_per_class": 6,
                 "episode_sessions": [3, 3], "negatives": 1, "freeze_heads": false},
    "strategy": {"kind": "linear-transform", "scope": "new-only"},
    "embeddings": "both-updated", "schedule": "per-insertion", "repeat": 4, "record_timing": true})");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.taxonomy.classes_per_group, 5u);
  EXPECT_EQ(c.protocol.new_per_session, (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(c.protocol.shots, 5u);
  EXPECT_EQ(c.model.embed_dim, 12u);
  EXPECT_DOUBLE_EQ(c.model.tau, 0.4);
  EXPECT_EQ(c.training.pretrain_epochs, 7u);
  EXPECT_EQ(c.training.optimizer, OptimizerKind::sgd);
  EXPECT_EQ(c.training.episode_sessions, (std::vector<std::size_t>{3, 3}));
  EXPECT_FALSE(c.training.freeze_heads);
  EXPECT_EQ(c.strategy.kind, StrategyKind::linear_transform);
  EXPECT_EQ(c.strategy.scope, UpdateScope::new_only);
  EXPECT_EQ(c.embeddings, EmbeddingSetting::both_updated);
  EXPECT_EQ(c.schedule, UpdateSchedule::per_insertion);
  EXPECT_EQ(c.repeat, 4u);
  EXPECT_TRUE(c.record_timing);
}

TEST(Config, SeedOverride) {
  ExperimentConfig c;
  c.seed = 3;
  ::unsetenv(kSeedEnvVar);
  apply_seed_override(c);
  EXPECT_EQ(c.seed, 3u);
  ::setenv(kSeedEnvVar, "17", 1);
  apply_seed_override(c);
  EXPECT_EQ(c.seed, 17u);
  ::setenv(kSeedEnvVar, "x1", 1);
  EXPECT_THROW(apply_seed_override(c), ConfigError);
  ::setenv(kSeedEnvVar, "-4", 1);
  EXPECT_THROW(apply_seed_override(c), ConfigError);
  ::unsetenv(kSeedEnvVar);
}

TEST(Config, TrainingKeys) {
  ExperimentConfig a = tiny_config(), b = a;
  b.repeat = 9;
  b.model.tau = 0.3;
  b.record_timing = true;
  EXPECT_EQ(training_key(a), training_key(b));
  b.strategy.kind = StrategyKind::non_update;
  EXPECT_NE(training_key(a), training_key(b));
  EXPECT_EQ(pretrain_key(a), pretrain_key(b));
  b.seed = 6;
  EXPECT_NE(pretrain_key(a), pretrain_key(b));
}

TEST(Experiment, FrozenHeadsTrainOnlyStrategy) {
  ExperimentConfig cfg = tiny_config();
  const Taxonomy tax = gen_taxonomy(cfg.seed, cfg.taxonomy);
  const auto base = build_schedule(tax, cfg.protocol, cfg.seed).sessions.front().classes;
  const Model pre = pretrain_model(cfg, tax, base);
  cfg.strategy.kind = StrategyKind::non_update;
  EXPECT_EQ(train_model(cfg, tax, base, pre), pre);
  cfg.strategy.kind = StrategyKind::eaus;
  const Model tuned = train_model(cfg, tax, base, pre);
  EXPECT_EQ(tuned.casm.head.weight, pre.casm.head.weight);
  EXPECT_EQ(tuned.cim.hyper.fc1.weight, pre.cim.hyper.fc1.weight);
  EXPECT_NE(tuned.eaus.w.weight, pre.eaus.w.weight);
  cfg.training.freeze_heads = false;
  EXPECT_NE(train_model(cfg, tax, base, pre).casm.head.weight, pre.casm.head.weight);
}

TEST(ModelIo, BitExactRoundTrip) {
  ModelShape shape;
  shape.embed_dim = 5;
  const Model m = Model::init(shape, 12);
  std::stringstream ss;
  write_model(ss, m);
  const std::string bytes = ss.str();
  const Model back = read_model(ss);
  EXPECT_EQ(back, m);
  std::stringstream again;
  write_model(again, back);
  EXPECT_EQ(again.str(), bytes);

  std::stringstream truncated(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_model(truncated), Error);
  std::string corrupt = bytes;
  corrupt[0] = 'X';
  std::stringstream bad(corrupt);
  EXPECT_THROW(read_model(bad), Error);
}

TEST(Experiment, BaseCheckpointRoundTrip) {
  const ExperimentConfig cfg = tiny_config();
  const BaseState base = train_base(cfg);
  EXPECT_EQ(base.losses.size(), cfg.training.pretrain_epochs + cfg.training.epochs);
  EXPECT_EQ(base.pool.size(), cfg.protocol.base_classes);
  const std::string dir = tmp_dir("base");
  save_base(dir, base);
  const BaseState back = load_base(dir);
  EXPECT_EQ(back.model, base.model);
  for (std::size_t i = 0; i < base.pool.size(); ++i) {
    EXPECT_EQ(back.pool[i].category(), base.pool[i].category());
    EXPECT_EQ(back.pool[i].hyper(), base.pool[i].hyper());
    EXPECT_EQ(back.base_raw[i].category(), base.base_raw[i].category());
  }
  std::ostringstream a, b;
  write_report_csv(a, evaluate(cfg, base));
  write_report_csv(b, evaluate(cfg, back));
  EXPECT_EQ(a.str(), b.str());
  std::filesystem::remove_all(dir);
}

TEST(Experiment, ReportIsDeterministicAndWellFormed) {
  const ExperimentConfig cfg = tiny_config();
  std::ostringstream a, b;
  write_report_csv(a, run_experiment(cfg));
  write_report_csv(b, run_experiment(cfg));
  EXPECT_EQ(a.str(), b.str());

  std::istringstream in(a.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kReportHeader);
  std::size_t rows = 0;
  bool summary = false;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 7) << line;
    summary |= line.rfind("mean,all,", 0) == 0;
  }
  EXPECT_TRUE(summary);
  EXPECT_GT(rows, 16u);
}

TEST(Experiment, ReportValuesInRange) {
  const ExperimentConfig cfg = tiny_config();
  const EvalReport rep = run_experiment(cfg);
  ASSERT_EQ(rep.sessions.size(), 4u);
  EXPECT_FALSE(rep.sessions[0].new_miou.has_value());
  for (const auto& s : rep.sessions) {
    for (const auto& [c, v] : s.class_iou) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_FALSE(s.ms_per_frame.has_value());
  }
  EXPECT_EQ(rep.sessions.back().classes.size(), 16u);
}

TEST(Experiment, AblationConfigs) {
  const ExperimentConfig cfg = tiny_config();
  EXPECT_EQ(ablation_configs(cfg, AblationAxis::embeddings).size(), 5u);
  const auto strat = ablation_configs(cfg, AblationAxis::strategy);
  ASSERT_EQ(strat.size(), 7u);
  EXPECT_EQ(strat[0].first, "non-update");
  EXPECT_EQ(strat[6].first, "eaus-both");
  const auto iters = ablation_configs(cfg, AblationAxis::iterations);
  ASSERT_EQ(iters.size(), 6u);
  for (std::size_t t = 0; t < iters.size(); ++t) {
    EXPECT_EQ(iters[t].second.model.iterations, t);
    EXPECT_TRUE(iters[t].second.record_timing);
  }
  EXPECT_EQ(parse_ablation_axis("strategy"), AblationAxis::strategy);
  EXPECT_THROW(parse_ablation_axis("depth"), ConfigError);
}

TEST(Experiment, CacheSharesPretraining) {
  ExperimentConfig cfg = tiny_config();
  BaseCache cache;
  const auto rows = ablation_run(cfg, AblationAxis::embeddings, &cache);
  EXPECT_EQ(rows.size(), 5u);
  EXPECT_EQ(cache.size(), 5u);
  EXPECT_EQ(cache.pretrained_count(), 1u);
  std::ostringstream os;
  write_ablation_csv(os, AblationAxis::embeddings, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kAblationHeader);
}

TEST(Experiment, GradcheckPipeline) {
  ExperimentConfig cfg = tiny_config();
  cfg.taxonomy.image_size = 16;
  cfg.taxonomy.groups = 2;
  cfg.protocol.base_classes = 4;
  cfg.protocol.new_per_session = {2, 2};
  cfg.model.clusters = 2;
  cfg.training.episode_sessions = {2, 1, 1};
  for (auto kind : {StrategyKind::eaus, StrategyKind::linear_transform}) {
    cfg.strategy.kind = kind;
    for (const auto& r : gradcheck_pipeline(cfg, 3, 6)) {
      EXPECT_LT(r.result.max_rel_error, 1e-4) << r.tensor;
    }
  }
}
