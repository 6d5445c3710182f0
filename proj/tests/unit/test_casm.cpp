#include <gtest/gtest.h>

#include <cmath>

#include "ehnet/casm.h"

using namespace ehnet;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  fill_uniform(t, rng, lo, hi);
  return t;
}

std::vector<double> random_vec(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  for (auto& x : v) x = uniform(rng, -1, 1);
  return v;
}

// Brute-force NMS: scan classes in ascending id order, keep strictly greater.
LabelMap brute_nms(const std::map<int, ConfidenceMap>& conf, double tau) {
  const auto& first = conf.begin()->second;
  LabelMap out(first.dim(0), first.dim(1));
  for (std::size_t y = 0; y < out.height; ++y)
    for (std::size_t x = 0; x < out.width; ++x) {
      int best = LabelMap::kBackground;
      double bv = -1;
      for (const auto& [id, m] : conf)
        if (m.at(y, x) > bv) {
          bv = m.at(y, x);
          best = id;
        }
      out.at(y, x) = bv >= tau ? best : LabelMap::kBackground;
    }
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(DenseCompare, ShapeAndResidualIdentity) {
  Rng rng(1);
  const Tensor q = random_tensor({3, 4, 5}, rng);
  const auto c = random_vec(2, rng), h = random_vec(2, rng);
  const CasmParams zero = CasmParams::zeros(7, 2);
  const DenseFeat f = dense_compare(q, c, h, zero);
  EXPECT_EQ(f.shape(), (std::vector<std::size_t>{7, 4, 5}));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 5; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_EQ(f.at(ch, y, x), q.at(ch, y, x));
      for (std::size_t k = 0; k < 2; ++k) {
        EXPECT_EQ(f.at(3 + k, y, x), c[k]);
        EXPECT_EQ(f.at(5 + k, y, x), h[k]);
      }
    }
  EXPECT_THROW(dense_compare(q, random_vec(3, rng), h, zero), DimensionError);
}

TEST(DenseCompare, EmbeddingChannelsTiledBeforeBlock) {
  Rng rng(2);
  const Tensor q = random_tensor({2, 3, 3}, rng);
  CompareTrace tr;
  dense_compare(q, random_vec(3, rng), random_vec(3, rng), CasmParams::init(8, 2, rng), &tr);
  for (std::size_t ch = 2; ch < 8; ++ch)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 3; ++x) EXPECT_EQ(tr.concat.at(ch, y, x), tr.concat.at(ch, 0, 0));
}

TEST(DenseCompare, RecordOverload) {
  Rng rng(3);
  const Tensor q = random_tensor({2, 3, 3}, rng);
  const auto c = random_vec(2, rng), h = random_vec(2, rng);
  const ClassRecord rec(5, Embedding{c}, Embedding{h, EmbeddingKind::hyperclass}, 0);
  const CasmParams p = CasmParams::init(6, 2, rng);
  EXPECT_EQ(dense_compare(q, rec, p), dense_compare(q, c, h, p));
}

TEST(RefineStep, ZeroParamsGiveConstantSigmoid) {
  Rng rng(4);
  const double b = 0.7;
  const CasmParams p = CasmParams::zeros(4, 3, b);
  const Tensor f = random_tensor({4, 5, 6}, rng);
  const ConfidenceMap m = refine_step(f, Tensor({5, 6}), p);
  EXPECT_EQ(m.shape(), (std::vector<std::size_t>{5, 6}));
  for (double v : m.values()) EXPECT_EQ(v, sigmoid(b));
  for (std::size_t t = 0; t <= 5; ++t) {
    const ConfidenceMap s = segment_class(f, t, p);
    for (double v : s.values()) EXPECT_EQ(v, sigmoid(b));
  }
  EXPECT_THROW(refine_step(f, Tensor({5, 5}), p), DimensionError);
}

TEST(RefineStep, UnrolledCompositionOracle) {
  Rng rng(5);
  const CasmParams p = CasmParams::init(5, 3, rng);
  const Tensor f = random_tensor({5, 4, 4}, rng);
  for (std::size_t T = 0; T <= 4; ++T) {
    ConfidenceMap m({4, 4});
    for (std::size_t t = 0; t <= T; ++t) {
      // Independent re-evaluation of one step from the primitives.
      Tensor in({6, 4, 4});
      for (std::size_t i = 0; i < f.size(); ++i) in[i] = f[i];
      for (std::size_t i = 0; i < 16; ++i) in[f.size() + i] = m[i];
      Tensor comb = relu(conv3x3(in, p.inner_conv));
      axpy(1.0, f, comb);
      Tensor pooled({3, 4, 4});
      for (const auto& a : p.aspp) axpy(1.0, relu(conv3x3(comb, a)), pooled);
      ConfidenceMap next({4, 4});
      for (std::size_t j = 0; j < 16; ++j) {
        std::vector<double> px(3);
        for (std::size_t c = 0; c < 3; ++c) px[c] = pooled[c * 16 + j];
        next[j] = sigmoid(affine(px, p.head)[0]);
      }
      m = next;
    }
    const ConfidenceMap got = segment_class(f, T, p);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(got[i], m[i], 1e-12);
  }
}

TEST(SegmentClass, RangeAndDeterminism) {
  Rng rng(6);
  for (int t = 0; t < 5; ++t) {
    const CasmParams p = CasmParams::init(6, 3, rng);
    const Tensor f = random_tensor({6, 5, 5}, rng, -3, 3);
    const ConfidenceMap m = segment_class(f, 3, p);
    for (double v : m.values()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_EQ(m, segment_class(f, 3, p));
  }
}

TEST(SegmentClass, ClassAgnostic) {
  Rng rng(7);
  const CasmParams p = CasmParams::init(6, 2, rng);
  const Tensor q = random_tensor({2, 4, 4}, rng);
  const auto c1 = random_vec(2, rng), h1 = random_vec(2, rng), c2 = random_vec(2, rng), h2 = random_vec(2, rng);
  const ClassRecord a(1, Embedding{c1}, Embedding{h1}, 0), b(2, Embedding{c2}, Embedding{h2}, 0);
  const ClassRecord a_sw(2, Embedding{c1}, Embedding{h1}, 0), b_sw(1, Embedding{c2}, Embedding{h2}, 0);
  EXPECT_EQ(segment_class(dense_compare(q, a, p), 4, p), segment_class(dense_compare(q, a_sw, p), 4, p));
  EXPECT_EQ(segment_class(dense_compare(q, b, p), 4, p), segment_class(dense_compare(q, b_sw, p), 4, p));
}

TEST(SegmentClass, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  const CasmParams p = CasmParams::init(4, 2, rng);
  const Tensor qmap = random_tensor({2, 3, 3}, rng);
  const auto c = random_vec(1, rng), h = random_vec(1, rng);
  const Tensor r = random_tensor({3, 3}, rng);
  auto loss = [&](const CasmParams& q, const Tensor& qm) {
    return dot(segment_class(dense_compare(qm, c, h, q), 2, q), r);
  };
  CompareTrace ct;
  std::vector<RefineTrace> tr;
  const DenseFeat f = dense_compare(qmap, c, h, p, &ct);
  segment_class(f, 2, p, &tr);
  CasmParams g = CasmParams::zeros(4, 2);
  const Tensor df = segment_class_backward(tr, p, r, g);
  const DenseGrads dg = dense_compare_backward(ct, p, 2, 1, df, g);
  auto fq = [&](const Tensor& t) { return loss(p, t); };
  const auto rq = check_gradient(fq, qmap, dg.dqmap, 1e-3);
  EXPECT_LT(rq.max_rel_error, 1e-4);
  EXPECT_GT(rq.checked, 0u);

  CasmParams probe = p;
  auto list = [](CasmParams& q) {
    std::vector<Tensor*> v{&q.compare_conv.kernels, &q.compare_conv.bias, &q.inner_conv.kernels,
                           &q.inner_conv.bias, &q.head.weight, &q.head.bias};
    for (auto& a : q.aspp) {
      v.push_back(&a.kernels);
      v.push_back(&a.bias);
    }
    return v;
  };
  const auto pt = list(probe), gt = list(g);
  std::size_t checked = 0, skipped = 0;
  for (std::size_t i = 0; i < pt.size(); ++i) {
    const Tensor base = *pt[i];
    auto f2 = [&](const Tensor& t) {
      *pt[i] = t;
      const double v = loss(probe, qmap);
      *pt[i] = base;
      return v;
    };
    const auto res = check_gradient(f2, base, *gt[i], 1e-3);
    EXPECT_LT(res.max_rel_error, 1e-4) << "tensor " << i;
    checked += res.checked;
    skipped += res.skipped_kinks;
  }
  EXPECT_GT(checked, 4 * skipped);
}

TEST(NmsFuse, Examples) {
  std::map<int, ConfidenceMap> one{{3, Tensor({4, 4}, 0.9)}};
  const LabelMap l1 = nms_fuse(one, 0.5);
  for (int v : l1.labels) EXPECT_EQ(v, 3);
  std::map<int, ConfidenceMap> low{{1, Tensor({4, 4}, 0.2)}, {2, Tensor({4, 4}, 0.4)}};
  const LabelMap l2 = nms_fuse(low, 0.5);
  for (int v : l2.labels) EXPECT_EQ(v, LabelMap::kBackground);
  std::map<int, ConfidenceMap> tie{{7, Tensor({2, 2}, 0.6)}, {4, Tensor({2, 2}, 0.6)}};
  const LabelMap l3 = nms_fuse(tie, 0.5);
  for (int v : l3.labels) EXPECT_EQ(v, 4);
  std::map<int, ConfidenceMap> bad{{1, Tensor({2, 2}, 0.6)}, {2, Tensor({2, 3}, 0.6)}};
  EXPECT_THROW(nms_fuse(bad, 0.5), DimensionError);
  EXPECT_THROW(nms_fuse({}, 0.5), Error);
}

TEST(NmsFuse, MatchesBruteForceOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 1 + trial % 8, h = 1 + trial % 32, w = 32 - trial % 32;
    std::map<int, ConfidenceMap> conf;
    for (std::size_t c = 0; c < n; ++c) {
      Tensor m({h, w});
      // Coarse quantization forces ties.
      for (auto& v : m.values()) v = std::floor(uniform(rng, 0, 1) * 5) / 4.0;
      conf.emplace(static_cast<int>(uniform(rng, 0, 100)) * 10 + static_cast<int>(c), m);
    }
    EXPECT_EQ(nms_fuse(conf, 0.5), brute_nms(conf, 0.5));
  }
}

TEST(Upsample, ConstantAndGradient) {
  const Tensor c({2, 3}, 0.4);
  const Tensor up = upsample_bilinear(c, 4);
  EXPECT_EQ(up.shape(), (std::vector<std::size_t>{8, 12}));
  for (double v : up.values()) EXPECT_NEAR(v, 0.4, 1e-15);
  Rng rng(10);
  const Tensor m = random_tensor({3, 2}, rng);
  const Tensor r = random_tensor({12, 8}, rng);
  auto f = [&](const Tensor& t) { return dot(upsample_bilinear(t, 4), r); };
  EXPECT_LT(check_gradient(f, m, upsample_bilinear_backward(r, 4), 1e-3).max_rel_error, 1e-4);
}

TEST(Bce, PerfectPredictionAndGradient) {
  BinaryMask t(4, 4);
  t.at(1, 1) = t.at(2, 3) = 1;
  Tensor pred({4, 4});
  for (std::size_t i = 0; i < 16; ++i) pred[i] = t.values[i] ? 1.0 - 1e-7 : 1e-7;
  EXPECT_LT(bce_loss(pred, t), 1e-5);
  Rng rng(11);
  const Tensor p = random_tensor({4, 4}, rng, 0.05, 0.95);
  Tensor dp;
  bce_loss(p, t, &dp);
  auto f = [&](const Tensor& x) { return bce_loss(x, t); };
  EXPECT_LT(check_gradient(f, p, dp, 1e-4).max_rel_error, 1e-4);
  EXPECT_THROW(bce_loss(Tensor({3, 4}), t), DimensionError);
}
