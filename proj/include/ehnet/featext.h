#pragma once

#include <cstdint>
#include <vector>

#include "ehnet/embedding.h"
#include "ehnet/numkit.h"

namespace ehnet {

/// Support mask with no foreground cells at the resolution it is used at.
class EmptyMaskError : public Error {
 public:
  using Error::Error;
};

/// [C x H x W] image with values in [0, 1].
struct RasterImage {
  Tensor pixels;

  RasterImage() = default;
  explicit RasterImage(Tensor px);

  std::size_t channels() const { return pixels.dim(0); }
  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }

  friend bool operator==(const RasterImage&, const RasterImage&) = default;
};

struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;  // row-major, each 0 or 1

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0);

  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::size_t count() const;

  static BinaryMask ones(std::size_t h, std::size_t w) { return {h, w, 1}; }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

/// [C_feat x H/4 x W/4] backbone output.
using FeatureMap = Tensor;

enum class Activation { relu, identity };

struct FeatStage {
  ConvParams conv;
  Activation activation = Activation::relu;
  bool pool = true;

  friend bool operator==(const FeatStage&, const FeatStage&) = default;
};

struct FeatExtParams {
  std::vector<FeatStage> stages;
  AffineParams projection;  // [D x 21*C_feat]

  std::size_t image_channels() const { return stages.front().conv.in_channels(); }
  std::size_t feat_channels() const { return stages.back().conv.out_channels(); }
  std::size_t embed_dim() const { return projection.out_dim(); }
  std::size_t downsample() const;

  /// Throws DimensionError unless stage count >= 2, channels chain, and the
  /// total downsample factor is 4.
  void validate() const;

  /// Two conv+relu+pool stages followed by the pyramid projection.
  static FeatExtParams init(std::size_t image_channels, std::size_t hidden_channels,
                            std::size_t feat_channels, std::size_t embed_dim, Rng& rng);

  friend bool operator==(const FeatExtParams&, const FeatExtParams&) = default;
};

/// Pyramid grid sizes pooled by pyramid_embed.
inline constexpr std::size_t kPyramidScales[] = {1, 2, 4};
inline constexpr std::size_t kPyramidCells = 1 + 4 + 16;

/// Intermediate values kept for the backward pass.
struct FeatExtTrace {
  std::vector<Tensor> conv_inputs;
  std::vector<Tensor> activated;  // post-activation, pre-pool
};

FeatureMap extract_features(const RasterImage& img, const FeatExtParams& p,
                            FeatExtTrace* trace = nullptr);

/// Accumulates parameter gradients; returns d(image).
Tensor extract_features_backward(const FeatExtTrace& trace, const FeatExtParams& p,
                                 const Tensor& dmap, FeatExtParams& grad);

/// Nearest-neighbour downsample: cell (y, x) takes pixel (y*f + f/2, x*f + f/2).
BinaryMask downsample_mask(const BinaryMask& mask, std::size_t factor);

/// Zeroes every channel where the downsampled mask is 0. Throws EmptyMaskError
/// when the mask (at either resolution) has no foreground.
FeatureMap mask_features(const FeatureMap& fmap, const BinaryMask& mask);

/// Masked average pools at 1x1, 2x2 and 4x4 grids, concatenated block by block
/// with channels innermost. Blocks with no foreground cell contribute 0.
std::vector<double> pyramid_pool(const FeatureMap& fmap, const BinaryMask& cell_mask);
Tensor pyramid_pool_backward(const FeatureMap& fmap, const BinaryMask& cell_mask,
                             std::span<const double> dpooled);

/// Raw category embedding of a masked feature map. `mask` is at image
/// resolution.
Embedding pyramid_embed(const FeatureMap& fmap, const BinaryMask& mask, const FeatExtParams& p);

/// Full support path: extract, mask, pool, project.
Embedding embed_support(const RasterImage& img, const BinaryMask& mask, const FeatExtParams& p);

}  // namespace ehnet
