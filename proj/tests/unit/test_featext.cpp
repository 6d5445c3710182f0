#include <gtest/gtest.h>

#include "ehnet/featext.h"

using namespace ehnet;

namespace {

RasterImage random_image(std::size_t c, std::size_t h, std::size_t w, Rng& rng) {
  Tensor t({c, h, w});
  fill_uniform(t, rng, 0.0, 1.0);
  return RasterImage(t);
}

BinaryMask random_mask(std::size_t h, std::size_t w, Rng& rng) {
  BinaryMask m(h, w);
  for (auto& v : m.values) v = uniform(rng, 0, 1) < 0.5 ? 1 : 0;
  return m;
}

FeatExtParams small_params(std::uint64_t seed, std::size_t feat = 4, std::size_t dim = 6) {
  Rng rng(seed);
  return FeatExtParams::init(3, 4, feat, dim, rng);
}

}  // namespace

TEST(RasterImage, RejectsOutOfRange) {
  EXPECT_THROW(RasterImage(Tensor({3, 4, 4}, 1.5)), Error);
  EXPECT_THROW(RasterImage(Tensor({4, 4}, 0.5)), DimensionError);
}

TEST(ExtractFeatures, ZeroImageZeroBias) {
  FeatExtParams p = small_params(1);
  for (auto& s : p.stages) s.conv.bias.fill(0.0);
  const FeatureMap f = extract_features(RasterImage(Tensor({3, 8, 8})), p);
  for (double v : f.values()) EXPECT_EQ(v, 0.0);
}

TEST(ExtractFeatures, ShapeContract) {
  Rng rng(0);
  const FeatExtParams p = FeatExtParams::init(3, 8, 16, 64, rng);
  const FeatureMap f = extract_features(random_image(3, 32, 32, rng), p);
  EXPECT_EQ(f.shape(), (std::vector<std::size_t>{16, 8, 8}));
  EXPECT_EQ(p.downsample(), 4u);
}

TEST(ExtractFeatures, IndivisibleExtents) {
  Rng rng(0);
  EXPECT_THROW(extract_features(random_image(3, 10, 8, rng), small_params(0)), DimensionError);
}

TEST(ExtractFeatures, Deterministic) {
  Rng rng(3);
  const RasterImage img = random_image(3, 16, 16, rng);
  const FeatExtParams p = small_params(3);
  EXPECT_EQ(extract_features(img, p), extract_features(img, p));
}

TEST(FeatExtParams, ValidateRejectsBadStacks) {
  FeatExtParams p = small_params(0);
  p.stages.pop_back();
  EXPECT_THROW(p.validate(), DimensionError);
  p = small_params(0);
  p.stages[1].pool = false;
  EXPECT_THROW(p.validate(), DimensionError);
}

TEST(MaskFeatures, OnesIsIdentity) {
  Rng rng(4);
  const FeatureMap f = extract_features(random_image(3, 16, 16, rng), small_params(4));
  EXPECT_EQ(mask_features(f, BinaryMask::ones(16, 16)), f);
}

TEST(MaskFeatures, EmptyMaskErrors) {
  const FeatureMap f({2, 4, 4}, 1.0);
  EXPECT_THROW(mask_features(f, BinaryMask(16, 16)), EmptyMaskError);
  // Foreground that vanishes under nearest-neighbour sampling.
  BinaryMask m(16, 16);
  m.at(0, 0) = 1;
  EXPECT_THROW(mask_features(f, m), EmptyMaskError);
}

TEST(MaskFeatures, ExtentMismatch) {
  EXPECT_THROW(mask_features(FeatureMap({2, 4, 4}, 1.0), BinaryMask::ones(12, 16)), DimensionError);
}

TEST(MaskFeatures, HalfMaskCellCount) {
  const FeatureMap f({3, 4, 4}, 1.0);
  BinaryMask m(16, 16);
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 8; ++x) m.at(y, x) = 1;
  const FeatureMap out = mask_features(f, m);
  std::size_t nonzero = 0;
  for (double v : out.values()) nonzero += v != 0.0;
  EXPECT_EQ(nonzero, out.size() / 2);
}

TEST(MaskFeatures, BackgroundIsExactlyZero) {
  Rng rng(5);
  const FeatureMap f = extract_features(random_image(3, 16, 16, rng), small_params(5));
  const BinaryMask m = random_mask(16, 16, rng);
  const BinaryMask cells = downsample_mask(m, 4);
  const FeatureMap out = mask_features(f, m);
  for (std::size_t c = 0; c < out.dim(0); ++c)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        EXPECT_EQ(cells.at(y, x), m.at(y * 4 + 2, x * 4 + 2));
        if (!cells.at(y, x)) EXPECT_EQ(out.at(c, y, x), 0.0);
        else EXPECT_EQ(out.at(c, y, x), f.at(c, y, x));
      }
}

TEST(PyramidEmbed, ConstantMapPoolsToConstant) {
  const double c = 0.37;
  const FeatureMap f({2, 4, 4}, c);
  const auto pooled = pyramid_pool(f, BinaryMask::ones(4, 4));
  ASSERT_EQ(pooled.size(), 2 * kPyramidCells);
  for (double v : pooled) EXPECT_DOUBLE_EQ(v, c);
  FeatExtParams p = small_params(0, 2, 2 * kPyramidCells);
  p.projection = AffineParams::identity(2 * kPyramidCells, true);
  const Embedding e = pyramid_embed(f, BinaryMask::ones(16, 16), p);
  for (double v : e.values) EXPECT_DOUBLE_EQ(v, c);
}

TEST(PyramidEmbed, OutputLength) {
  Rng rng(6);
  const FeatExtParams p = FeatExtParams::init(3, 4, 4, 64, rng);
  const Embedding e = embed_support(random_image(3, 16, 16, rng), BinaryMask::ones(16, 16), p);
  EXPECT_EQ(e.dim(), 64u);
  EXPECT_EQ(e.kind, EmbeddingKind::category);
  EXPECT_EQ(e.stage, EmbeddingStage::raw);
}

TEST(PyramidEmbed, MaskedMeanMatchesBruteForce) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor f({3, 8, 8});
    fill_uniform(f, rng, -2, 2);
    BinaryMask cells = random_mask(8, 8, rng);
    cells.at(0, 0) = 1;
    const auto pooled = pyramid_pool(f, cells);
    std::size_t k = 0;
    for (std::size_t s : kPyramidScales)
      for (std::size_t by = 0; by < s; ++by)
        for (std::size_t bx = 0; bx < s; ++bx)
          for (std::size_t c = 0; c < 3; ++c, ++k) {
            double sum = 0;
            std::size_t n = 0;
            for (std::size_t y = by * 8 / s; y < (by + 1) * 8 / s; ++y)
              for (std::size_t x = bx * 8 / s; x < (bx + 1) * 8 / s; ++x)
                if (cells.at(y, x)) {
                  sum += f.at(c, y, x);
                  ++n;
                }
            EXPECT_NEAR(pooled[k], n ? sum / static_cast<double>(n) : 0.0, 1e-12);
          }
    EXPECT_EQ(k, pooled.size());
  }
}

TEST(PyramidEmbed, InvariantToBackgroundPixels) {
  Rng rng(8);
  const FeatExtParams p = small_params(8);
  for (int trial = 0; trial < 10; ++trial) {
    RasterImage img = random_image(3, 16, 16, rng);
    const BinaryMask m = random_mask(16, 16, rng);
    BinaryMask cells = downsample_mask(m, 4);
    if (!cells.count()) continue;
    const FeatureMap f = extract_features(img, p);
    FeatureMap g = f;
    for (std::size_t c = 0; c < g.dim(0); ++c)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x)
          if (!cells.at(y, x)) g.at(c, y, x) = uniform(rng, -5, 5);
    EXPECT_EQ(pyramid_embed(mask_features(f, m), m, p), pyramid_embed(mask_features(g, m), m, p));
  }
}

TEST(PyramidEmbed, EndToEndGradient) {
  Rng rng(9);
  const FeatExtParams p = FeatExtParams::init(3, 3, 3, 5, rng);
  const RasterImage img = random_image(3, 8, 8, rng);
  BinaryMask m(8, 8);
  m.at(2, 2) = m.at(6, 2) = m.at(6, 6) = 1;
  std::vector<double> r(5);
  for (double& v : r) v = uniform(rng, -1, 1);

  auto loss = [&](const FeatExtParams& q, const RasterImage& im) {
    const Embedding e = embed_support(im, m, q);
    double s = 0;
    for (std::size_t i = 0; i < 5; ++i) s += r[i] * e.values[i];
    return s;
  };

  FeatExtTrace tr;
  const FeatureMap f = extract_features(img, p, &tr);
  const FeatureMap masked = mask_features(f, m);
  const BinaryMask cells = downsample_mask(m, 4);
  const auto pooled = pyramid_pool(masked, cells);
  FeatExtParams g = p;
  for (auto& s : g.stages) {
    s.conv.kernels.fill(0);
    s.conv.bias.fill(0);
  }
  g.projection.weight.fill(0);
  g.projection.bias.fill(0);
  const auto dpooled = affine_backward(pooled, p.projection, r, g.projection);
  Tensor dmap = pyramid_pool_backward(masked, cells, dpooled);
  for (std::size_t c = 0; c < dmap.dim(0); ++c)
    for (std::size_t j = 0; j < 4; ++j)
      if (!cells.values[j]) dmap[c * 4 + j] = 0;
  const Tensor dimg = extract_features_backward(tr, p, dmap, g);

  auto fi = [&](const Tensor& t) { return loss(p, RasterImage(t)); };
  const auto ri = check_gradient(fi, img.pixels, dimg, 1e-3);
  EXPECT_LT(ri.max_rel_error, 1e-4);
  EXPECT_GT(ri.checked, ri.skipped_kinks);
  for (std::size_t s = 0; s < p.stages.size(); ++s) {
    auto fk = [&](const Tensor& k) {
      FeatExtParams q = p;
      q.stages[s].conv.kernels = k;
      return loss(q, img);
    };
    const auto rk = check_gradient(fk, p.stages[s].conv.kernels, g.stages[s].conv.kernels, 1e-3);
    EXPECT_LT(rk.max_rel_error, 1e-4);
    EXPECT_GT(rk.checked, rk.skipped_kinks);
  }
  auto fw = [&](const Tensor& w) {
    FeatExtParams q = p;
    q.projection.weight = w;
    return loss(q, img);
  };
  EXPECT_LT(check_gradient(fw, p.projection.weight, g.projection.weight, 1e-3).max_rel_error, 1e-4);
}
