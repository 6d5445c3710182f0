#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ehnet/bench.h"
#include "ehnet/pipeline.h"

namespace ehnet {

/// Invalid or unreadable experiment configuration (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kSeedEnvVar = "EHNET_SEED";

struct ModelConfig {
  std::size_t embed_dim = 64;
  std::size_t hidden_channels = 8;
  std::size_t feat_channels = 8;
  std::size_t aspp_channels = 4;
  double eaus_w_scale = 0.1;
  std::size_t clusters = 3;
  std::size_t kmeans_restarts = 5;
  std::size_t iterations = 4;
  double tau = 0.5;
};

/// Base training runs in two phases. Pretraining fits the extractor, CIM and
/// CASM without embedding updates; the extractor is then frozen and the
/// strategy's own parameters (plus CIM and CASM unless `freeze_heads`) are
/// trained for `epochs` more. Non-update with frozen heads skips phase two.
struct TrainingConfig {
  std::size_t pretrain_epochs = 150;
  std::size_t epochs = 50;
  std::size_t episodes_per_epoch = 10;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr = 1e-4;
  double lr_decay = 0.9;
  std::size_t decay_every = 20;
  std::size_t samples_per_class = 16;
  std::vector<std::size_t> episode_sessions = {4, 2, 2};  // pseudo-session sizes
  std::size_t negatives = 2;
  bool freeze_heads = true;
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  std::uint64_t seed = 0;
  TaxonomySpec taxonomy;
  ProtocolSpec protocol;
  ModelConfig model;
  TrainingConfig training;
  UpdateStrategy strategy;
  EmbeddingSetting embeddings = EmbeddingSetting::keep_hyper;
  UpdateSchedule schedule = UpdateSchedule::per_insertion;
  std::size_t repeat = 10;
  bool record_timing = false;

  ModelShape shape() const;
  PipelineOptions pipeline_options() const;
};

/// Parses JSON text. Missing keys keep their defaults; unknown keys, wrong
/// types, out-of-range values and unsupported schema versions throw
/// ConfigError.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_json(const ExperimentConfig& cfg);

/// Replaces the seed with the value of EHNET_SEED when that is set.
void apply_seed_override(ExperimentConfig& cfg);

/// Canonical text of every field that influences base training.
std::string training_key(const ExperimentConfig& cfg);

/// Same for the pretraining phase, which ignores strategy and embedding setting.
std::string pretrain_key(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Base session
// ---------------------------------------------------------------------------

/// Trained parameters plus the memory after session 0. `hyper_pool` holds
/// the aligned hyper-class embeddings in its category slot so that settings
/// which update E_h can do so without touching the immutable copy in `pool`.
/// `base_raw` stores each base class's raw category and raw hyper-class
/// embeddings; its categories are the clustering population for new classes.
struct BaseState {
  Model model;
  MemoryPool pool{0};
  MemoryPool hyper_pool{0};
  MemoryPool base_raw{0};
  std::vector<double> losses;  // mean episode loss per epoch
};

Model pretrain_model(const ExperimentConfig& cfg, const Taxonomy& tax, std::span<const int> base_classes,
                     std::vector<double>* epoch_losses = nullptr);

/// Second phase on top of `pretrained`, whose extractor stays frozen.
Model train_model(const ExperimentConfig& cfg, const Taxonomy& tax, std::span<const int> base_classes,
                  const Model& pretrained, std::vector<double>* epoch_losses = nullptr);

/// Pretrains unless `pretrained` is given, then trains and fills the
/// session-0 memory. `losses` covers both phases.
BaseState train_base(const ExperimentConfig& cfg, const Model* pretrained = nullptr);

void save_base(const std::string& dir, const BaseState& base);
BaseState load_base(const std::string& dir);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct SessionEval {
  std::size_t session = 0;
  std::vector<int> classes;           // every class seen so far
  std::map<int, double> class_iou;
  std::optional<double> base_miou;    // session-0 classes
  std::optional<double> new_miou;     // every incremental class so far
  std::optional<double> current_miou; // classes of this session (incremental only)
  std::optional<double> earlier_miou; // incremental classes of earlier sessions
  std::optional<double> mean_miou;    // all classes seen so far
  std::optional<double> ms_per_frame;
};

struct EvalSummary {
  std::optional<double> base_miou, new_miou, mean_miou, ms_per_frame;
};

struct EvalReport {
  std::vector<SessionEval> sessions;  // averaged over repeats
  std::map<int, int> class_group;
  EvalSummary summary;                // mean over incremental sessions
};

/// Runs every session on top of `base`, once per repeat draw, and averages.
EvalReport evaluate(const ExperimentConfig& cfg, const BaseState& base);

/// train_base followed by evaluate.
EvalReport run_experiment(const ExperimentConfig& cfg);

inline constexpr const char* kReportHeader =
    "session,class_id,group,iou,base_miou,new_miou,mean_miou,ms_per_frame";

void write_report_csv(std::ostream& os, const EvalReport& report);

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

enum class AblationAxis { embeddings, strategy, iterations };

std::string to_string(AblationAxis a);
AblationAxis parse_ablation_axis(const std::string& s);

struct AblationRow {
  std::string setting;
  EvalSummary summary;
};

/// Memoizes trained bases by training_key and pretrained models by
/// pretrain_key.
class BaseCache {
 public:
  const BaseState& get(const ExperimentConfig& cfg);
  std::size_t size() const { return bases_.size(); }
  std::size_t pretrained_count() const { return pretrained_.size(); }

 private:
  std::map<std::string, BaseState> bases_;
  std::map<std::string, Model> pretrained_;
};

/// The configurations swept along one axis, all else held fixed.
std::vector<std::pair<std::string, ExperimentConfig>> ablation_configs(const ExperimentConfig& cfg,
                                                                       AblationAxis axis);

std::vector<AblationRow> ablation_run(const ExperimentConfig& cfg, AblationAxis axis,
                                      BaseCache* cache = nullptr);

inline constexpr const char* kAblationHeader = "axis,setting,base_miou,new_miou,mean_miou,ms_per_frame";

void write_ablation_csv(std::ostream& os, AblationAxis axis, const std::vector<AblationRow>& rows);

// ---------------------------------------------------------------------------
// Dataset export and gradient check
// ---------------------------------------------------------------------------

/// Writes every support and query sample of one schedule draw as binary PPM
/// images and PGM masks (0/255), plus `index.csv` with columns
/// session,split,class_id,group,image,mask.
void export_dataset(const ExperimentConfig& cfg, const std::string& dir, std::uint64_t draw = 0);

struct PipelineGradCheck {
  std::string tensor;  // "slot <index>"
  GradCheckResult result;
};

/// Central-difference check of the full episode loss against backprop, on a
/// freshly initialized model of the configured shape and one benchmark
/// episode. At most `coords_per_tensor` coordinates per parameter tensor.
std::vector<PipelineGradCheck> gradcheck_pipeline(const ExperimentConfig& cfg, std::uint64_t seed,
                                                  std::size_t coords_per_tensor, double h = 1e-3);

}  // namespace ehnet
