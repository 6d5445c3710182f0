#pragma once

#include <array>
#include <map>
#include <utility>
#include <vector>

#include "ehnet/featext.h"
#include "ehnet/membank.h"
#include "ehnet/numkit.h"

namespace ehnet {

/// [C_feat + 2D x h x w] query features with the class embeddings tiled in.
using DenseFeat = Tensor;

/// [h x w] per-pixel class probability.
using ConfidenceMap = Tensor;

struct LabelMap {
  static constexpr int kBackground = -1;

  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, int fill = kBackground)
      : height(h), width(w), labels(h * w, fill) {}

  int at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  int& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

inline constexpr std::array<std::size_t, 3> kAsppDilations = {1, 2, 4};

struct CasmParams {
  ConvParams compare_conv;           // C -> C, residual block
  ConvParams inner_conv;             // C + 1 -> C
  std::array<ConvParams, 3> aspp;    // C -> A at dilations 1, 2, 4
  AffineParams head;                 // A -> 1 per pixel
  std::size_t iterations = 4;

  std::size_t channels() const { return compare_conv.in_channels(); }

  static CasmParams zeros(std::size_t channels, std::size_t aspp_channels, double head_bias = 0.0);
  static CasmParams init(std::size_t channels, std::size_t aspp_channels, Rng& rng);

  friend bool operator==(const CasmParams&, const CasmParams&) = default;
};

struct CompareTrace {
  Tensor concat;
  Tensor activated;  // relu(compare_conv(concat))
};

/// Tiles both embeddings over the query grid, concatenates them after the
/// query channels and applies the residual 3x3 block. Either embedding may be
/// empty, in which case its channels are zero.
DenseFeat dense_compare(const FeatureMap& qmap, std::span<const double> category,
                        std::span<const double> hyper, const CasmParams& p,
                        CompareTrace* trace = nullptr);
DenseFeat dense_compare(const FeatureMap& qmap, const ClassRecord& record, const CasmParams& p);

struct DenseGrads {
  Tensor dqmap;
  std::vector<double> dcategory;
  std::vector<double> dhyper;
};

DenseGrads dense_compare_backward(const CompareTrace& trace, const CasmParams& p,
                                  std::size_t feat_channels, std::size_t dim,
                                  const Tensor& dfeat, CasmParams& grad);

struct RefineTrace {
  Tensor input;       // [C + 1] channels: F then M_t
  Tensor inner;       // relu(inner_conv(input))
  Tensor combined;    // F + inner
  std::array<Tensor, 3> branches;  // relu(aspp_d(combined))
  Tensor pooled;      // sum of branches
  ConfidenceMap out;
};

/// M_{t+1} = sigmoid(head(sum_d relu(aspp_d(F + relu(conv([F; M_t])))))).
ConfidenceMap refine_step(const DenseFeat& feat, const ConfidenceMap& mask, const CasmParams& p,
                          RefineTrace* trace = nullptr);

/// Accumulates into `grad` and `dfeat`; returns d(mask).
ConfidenceMap refine_step_backward(const RefineTrace& trace, const CasmParams& p,
                                   const ConfidenceMap& dout, CasmParams& grad, Tensor& dfeat);

/// Starts from an all-zero mask and applies refine_step iterations + 1 times.
ConfidenceMap segment_class(const DenseFeat& feat, std::size_t iterations, const CasmParams& p,
                            std::vector<RefineTrace>* traces = nullptr);

/// Returns d(feat).
Tensor segment_class_backward(const std::vector<RefineTrace>& traces, const CasmParams& p,
                              const ConfidenceMap& dout, CasmParams& grad);

/// Per pixel: the class with the highest confidence if it reaches `tau`, else
/// background. Ties go to the smallest class id.
LabelMap nms_fuse(const std::map<int, ConfidenceMap>& conf, double tau);

/// Bilinear resize of an [h x w] map by an integer factor (half-pixel centres,
/// edge clamped).
Tensor upsample_bilinear(const Tensor& map, std::size_t factor);
Tensor upsample_bilinear_backward(const Tensor& dout, std::size_t factor);

/// Mean pixel-wise binary cross-entropy; writes d(loss)/d(pred) when asked.
double bce_loss(const Tensor& pred, const BinaryMask& target, Tensor* dpred = nullptr);

}  // namespace ehnet
