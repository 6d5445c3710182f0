#include "ehnet/featext.h"

#include <algorithm>
#include <cmath>

namespace ehnet {

RasterImage::RasterImage(Tensor px) : pixels(std::move(px)) {
  if (pixels.rank() != 3) throw DimensionError("raster image must be [C x H x W]");
  for (double v : pixels.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("raster image values must lie in [0, 1]");
  }
}

BinaryMask::BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill)
    : height(h), width(w), values(h * w, fill) {}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

std::size_t FeatExtParams::downsample() const {
  std::size_t f = 1;
  for (const auto& s : stages)
    if (s.pool) f *= 2;
  return f;
}

void FeatExtParams::validate() const {
  if (stages.size() < 2) throw DimensionError("feature extractor needs at least 2 stages");
  for (std::size_t i = 1; i < stages.size(); ++i) {
    if (stages[i].conv.in_channels() != stages[i - 1].conv.out_channels()) {
      throw DimensionError("feature extractor stage channels do not chain");
    }
  }
  if (downsample() != 4) throw DimensionError("feature extractor must downsample by 4");
  if (projection.in_dim() != kPyramidCells * feat_channels()) {
    throw DimensionError("pyramid projection input must be 21 * C_feat");
  }
}

FeatExtParams FeatExtParams::init(std::size_t image_channels, std::size_t hidden_channels,
                                  std::size_t feat_channels, std::size_t embed_dim, Rng& rng) {
  FeatExtParams p;
  p.stages.push_back({ConvParams::init(hidden_channels, image_channels, rng), Activation::relu, true});
  p.stages.push_back({ConvParams::init(feat_channels, hidden_channels, rng), Activation::relu, true});
  p.projection = AffineParams::init(embed_dim, kPyramidCells * feat_channels, rng);
  return p;
}

FeatureMap extract_features(const RasterImage& img, const FeatExtParams& p, FeatExtTrace* trace) {
  p.validate();
  const std::size_t f = p.downsample();
  if (img.height() % f != 0 || img.width() % f != 0) {
    throw DimensionError("image extents " + std::to_string(img.height()) + "x" +
                         std::to_string(img.width()) + " are not divisible by " +
                         std::to_string(f));
  }
  if (trace) *trace = {};
  Tensor x = img.pixels;
  for (const auto& stage : p.stages) {
    if (trace) trace->conv_inputs.push_back(x);
    Tensor y = conv3x3(x, stage.conv);
    if (stage.activation == Activation::relu) y = relu(y);
    if (trace) trace->activated.push_back(y);
    x = stage.pool ? avg_pool2(y) : std::move(y);
  }
  return x;
}

Tensor extract_features_backward(const FeatExtTrace& trace, const FeatExtParams& p,
                                 const Tensor& dmap, FeatExtParams& grad) {
  Tensor g = dmap;
  for (std::size_t s = p.stages.size(); s-- > 0;) {
    const auto& stage = p.stages[s];
    if (stage.pool) g = avg_pool2_backward(g);
    if (stage.activation == Activation::relu) g = relu_backward(trace.activated[s], g);
    g = conv3x3_backward(trace.conv_inputs[s], stage.conv, g, grad.stages[s].conv);
  }
  return g;
}

BinaryMask downsample_mask(const BinaryMask& mask, std::size_t factor) {
  if (factor == 0 || mask.height % factor != 0 || mask.width % factor != 0) {
    throw DimensionError("mask extents are not divisible by the downsample factor");
  }
  BinaryMask out(mask.height / factor, mask.width / factor);
  const std::size_t c = factor / 2;
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) out.at(y, x) = mask.at(y * factor + c, x * factor + c);
  return out;
}

namespace {

// Brings a mask given at image (or feature) resolution to the map's grid.
BinaryMask cell_mask_for(const FeatureMap& fmap, const BinaryMask& mask) {
  if (fmap.rank() != 3) throw DimensionError("feature map must be [C x H x W]");
  const std::size_t h = fmap.dim(1), w = fmap.dim(2);
  if (mask.height % h != 0 || mask.width % w != 0 || mask.height / h != mask.width / w) {
    throw DimensionError("mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                         " does not match feature grid " + std::to_string(h) + "x" +
                         std::to_string(w));
  }
  if (mask.count() == 0) throw EmptyMaskError("support mask is empty");
  BinaryMask cells = downsample_mask(mask, mask.height / h);
  if (cells.count() == 0) throw EmptyMaskError("support mask vanishes at feature resolution");
  return cells;
}

struct Block {
  std::size_t y0, y1, x0, x1;
};

Block block_of(std::size_t s, std::size_t by, std::size_t bx, std::size_t h, std::size_t w) {
  return {by * h / s, (by + 1) * h / s, bx * w / s, (bx + 1) * w / s};
}

}  // namespace

FeatureMap mask_features(const FeatureMap& fmap, const BinaryMask& mask) {
  const BinaryMask cells = cell_mask_for(fmap, mask);
  FeatureMap out = fmap;
  const std::size_t hw = cells.values.size();
  for (std::size_t ch = 0; ch < fmap.dim(0); ++ch)
    for (std::size_t j = 0; j < hw; ++j)
      if (!cells.values[j]) out[ch * hw + j] = 0.0;
  return out;
}

std::vector<double> pyramid_pool(const FeatureMap& fmap, const BinaryMask& cell_mask) {
  const std::size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  if (cell_mask.height != h || cell_mask.width != w) throw DimensionError("cell mask extent mismatch");
  std::vector<double> pooled;
  pooled.reserve(kPyramidCells * c);
  for (std::size_t s : kPyramidScales) {
    for (std::size_t by = 0; by < s; ++by) {
      for (std::size_t bx = 0; bx < s; ++bx) {
        const Block b = block_of(s, by, bx, h, w);
        std::size_t n = 0;
        for (std::size_t y = b.y0; y < b.y1; ++y)
          for (std::size_t x = b.x0; x < b.x1; ++x) n += cell_mask.at(y, x);
        for (std::size_t ch = 0; ch < c; ++ch) {
          double acc = 0.0;
          for (std::size_t y = b.y0; y < b.y1; ++y)
            for (std::size_t x = b.x0; x < b.x1; ++x)
              if (cell_mask.at(y, x)) acc += fmap.at(ch, y, x);
          pooled.push_back(n ? acc / static_cast<double>(n) : 0.0);
        }
      }
    }
  }
  return pooled;
}

Tensor pyramid_pool_backward(const FeatureMap& fmap, const BinaryMask& cell_mask,
                             std::span<const double> dpooled) {
  const std::size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
  if (dpooled.size() != kPyramidCells * c) throw DimensionError("pyramid gradient length mismatch");
  Tensor d(fmap.shape());
  std::size_t k = 0;
  for (std::size_t s : kPyramidScales) {
    for (std::size_t by = 0; by < s; ++by) {
      for (std::size_t bx = 0; bx < s; ++bx) {
        const Block b = block_of(s, by, bx, h, w);
        std::size_t n = 0;
        for (std::size_t y = b.y0; y < b.y1; ++y)
          for (std::size_t x = b.x0; x < b.x1; ++x) n += cell_mask.at(y, x);
        for (std::size_t ch = 0; ch < c; ++ch, ++k) {
          if (!n) continue;
          const double g = dpooled[k] / static_cast<double>(n);
          for (std::size_t y = b.y0; y < b.y1; ++y)
            for (std::size_t x = b.x0; x < b.x1; ++x)
              if (cell_mask.at(y, x)) d.at(ch, y, x) += g;
        }
      }
    }
  }
  return d;
}

Embedding pyramid_embed(const FeatureMap& fmap, const BinaryMask& mask, const FeatExtParams& p) {
  const BinaryMask cells = cell_mask_for(fmap, mask);
  if (p.projection.in_dim() != kPyramidCells * fmap.dim(0)) {
    throw DimensionError("pyramid projection does not match feature channels");
  }
  return {affine(pyramid_pool(fmap, cells), p.projection), EmbeddingKind::category,
          EmbeddingStage::raw};
}

Embedding embed_support(const RasterImage& img, const BinaryMask& mask, const FeatExtParams& p) {
  if (mask.height != img.height() || mask.width != img.width()) {
    throw DimensionError("support mask and image extents differ");
  }
  const FeatureMap fmap = extract_features(img, p);
  return pyramid_embed(mask_features(fmap, mask), mask, p);
}

}  // namespace ehnet
