#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ehnet/casm.h"
#include "ehnet/eaus.h"
#include "ehnet/featext.h"
#include "ehnet/membank.h"

namespace ehnet {

/// Which embeddings reach the segmentation head and which of them the update
/// strategy may move.
enum class EmbeddingSetting {
  hyper_only,     // E_c removed, E_h updated
  category_only,  // E_h removed, E_c updated
  both_updated,
  keep_category,  // E_c frozen, E_h updated
  keep_hyper,     // E_h frozen, E_c updated (default)
};

std::string to_string(EmbeddingSetting s);
EmbeddingSetting parse_embedding_setting(const std::string& s);

bool uses_category(EmbeddingSetting s);
bool uses_hyper(EmbeddingSetting s);
bool updates_category(EmbeddingSetting s);
bool updates_hyper(EmbeddingSetting s);

/// When the update strategy runs relative to class insertions.
enum class UpdateSchedule { per_insertion, per_session };

std::string to_string(UpdateSchedule s);
UpdateSchedule parse_update_schedule(const std::string& s);

struct ModelShape {
  std::size_t image_channels = 3;
  std::size_t hidden_channels = 8;
  std::size_t feat_channels = 8;
  std::size_t embed_dim = 16;
  std::size_t aspp_channels = 4;
  double eaus_w_scale = 0.1;

  std::size_t dense_channels() const { return feat_channels + 2 * embed_dim; }
};

/// Every trainable parameter of the pipeline.
struct Model {
  FeatExtParams featext;
  CimParams cim;
  EausParams eaus;
  AffineParams lt;  // shared map of the linear-transform baseline
  CasmParams casm;

  static Model init(const ModelShape& shape, std::uint64_t seed);
  Model zeros_like() const;

  std::size_t embed_dim() const { return cim.dim(); }

  friend bool operator==(const Model&, const Model&) = default;
};

enum class ParamGroup { featext, cim, eaus, lt, casm };

// Model stream, little-endian:
//   "EHMD" u32 version=1
//   u32 stage_count, per stage: u8 activation, u8 pool, u32 dilation
//   u32 dilation of compare_conv, inner_conv and each ASPP branch, u64 iterations
//   then every parameter slot in a fixed order: u32 rank, u32[rank] extents,
//   f64[size] values (rank 0 marks an absent bias)
void write_model(std::ostream& os, const Model& m);
Model read_model(std::istream& is);
void save_model(const std::string& path, const Model& m);
Model load_model(const std::string& path);

/// Parameter tensors of one group, in a fixed order.
std::vector<Tensor*> group_tensors(Model& m, ParamGroup g);
std::vector<Tensor*> all_tensors(Model& m);

struct Sample {
  RasterImage image;
  BinaryMask mask;
  int class_id = 0;
};

struct PipelineOptions {
  UpdateStrategy strategy;
  EmbeddingSetting setting = EmbeddingSetting::keep_hyper;
  UpdateSchedule schedule = UpdateSchedule::per_insertion;
  std::size_t iterations = 4;
};

struct EpisodeClass {
  Sample support;
  Embedding hyper_raw;  // treated as a constant
  int session = 0;      // pseudo-session; sessions must be non-decreasing
  std::optional<Embedding> ec_raw;  // precomputed by a frozen extractor
};

/// One training episode: embed every support, insert them in order applying
/// the update strategy, then segment the query once per target class. The
/// target is the query mask for the query's own class and empty otherwise.
/// Precomputed inputs bypass the extractor, which then receives no gradient.
struct Episode {
  std::vector<EpisodeClass> classes;
  Sample query;
  std::vector<int> targets;
  std::optional<FeatureMap> query_features;
};

/// Loss of one episode; accumulates parameter gradients into `grad` if given.
double episode_loss(const Model& model, const Episode& ep, const PipelineOptions& opt,
                    Model* grad = nullptr);

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer_kind(const std::string& s);

/// First-order update over selected parameter groups.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, const Model& like);

  void step(Model& model, Model& grad, double lr, const std::vector<ParamGroup>& groups);

 private:
  OptimizerKind kind_;
  Model m_, v_;
  std::size_t t_ = 0;
};

/// One gradient step on `ep`; throws NumericError (with context) if the loss
/// or a gradient is not finite. Returns the pre-step loss.
double train_step(Model& model, Optimizer& opt, const Episode& ep, const PipelineOptions& options,
                  double lr, const std::vector<ParamGroup>& groups);

}  // namespace ehnet
