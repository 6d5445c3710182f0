#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ehnet/eaus.h"

using namespace ehnet;

namespace {

Embedding emb(std::vector<double> v) { return Embedding{std::move(v)}; }

std::vector<double> random_vec(std::size_t d, Rng& rng) {
  std::vector<double> v(d);
  for (auto& x : v) x = uniform(rng, -1, 1);
  return v;
}

MemoryPool random_pool(std::size_t n, std::size_t d, Rng& rng, int split = 0) {
  MemoryPool pool(d);
  for (std::size_t i = 0; i < n; ++i)
    pool.insert(static_cast<int>(i) * 3 + 1, emb(random_vec(d, rng)), emb(random_vec(d, rng)),
                static_cast<int>(i) < split ? 0 : 1);
  return pool;
}

std::vector<double> matvec(const Tensor& m, const std::vector<double>& x) {
  std::vector<double> y(m.dim(0), 0.0);
  for (std::size_t r = 0; r < m.dim(0); ++r)
    for (std::size_t c = 0; c < m.dim(1); ++c) y[r] += m.at(r, c) * x[c];
  return y;
}

// Independent evaluation of one class's update from a frozen snapshot.
std::vector<double> naive_update(const MemoryPool& snap, std::size_t i, const EausParams& p) {
  const std::size_t n = snap.size();
  const auto& ei = snap[i].category().values;
  std::vector<double> e(n);
  const auto u = matvec(p.phi.weight, ei);
  for (std::size_t l = 0; l < n; ++l) {
    const auto v = matvec(p.psi.weight, snap[l].category().values);
    double s = 0;
    for (std::size_t k = 0; k < u.size(); ++k) s += u[k] * v[k];
    e[l] = s;
  }
  const double mx = *std::max_element(e.begin(), e.end());
  double z = 0;
  for (auto& x : e) z += (x = std::exp(x - mx));
  std::vector<double> out = ei;
  for (std::size_t l = 0; l < n; ++l) {
    std::vector<double> diff(ei.size());
    for (std::size_t k = 0; k < ei.size(); ++k) diff[k] = ei[k] - snap[l].category().values[k];
    const auto wd = matvec(p.w.weight, diff);
    for (std::size_t k = 0; k < ei.size(); ++k) out[k] += e[l] / z * wd[k];
  }
  return out;
}

MemoryPool scalar_pool() {
  MemoryPool pool(1);
  pool.insert(1, emb({1.0}), emb({0.0}), 0);
  pool.insert(2, emb({0.0}), emb({0.0}), 0);
  return pool;
}

}  // namespace

TEST(RelationCoeff, Examples) {
  const EausParams id = EausParams::identity(2);
  EXPECT_EQ(relation_coeff(emb({1, 2}), emb({3, 4}), id), 11.0);
  EXPECT_EQ(relation_coeff(emb({1, 2}), emb({3, 4}), EausParams::zeros(2)), 0.0);
  EXPECT_THROW(relation_coeff(emb({1, 2}), emb({3}), id), DimensionError);
}

TEST(RelationCoeff, MatchesNaiveDoubleLoop) {
  Rng rng(1);
  const EausParams p = EausParams::init(5, rng);
  for (int t = 0; t < 10; ++t) {
    const auto a = random_vec(5, rng), b = random_vec(5, rng);
    double s = 0;
    for (std::size_t k = 0; k < 5; ++k) {
      double u = 0, v = 0;
      for (std::size_t j = 0; j < 5; ++j) {
        u += p.phi.weight.at(k, j) * a[j];
        v += p.psi.weight.at(k, j) * b[j];
      }
      s += u * v;
    }
    EXPECT_NEAR(relation_coeff(emb(a), emb(b), p), s, 1e-12);
  }
}

TEST(AttentionMatrix, Examples) {
  MemoryPool one(2);
  one.insert(0, emb({1, 2}), emb({0, 0}), 0);
  const auto a1 = attention_matrix(one, EausParams::identity(2));
  EXPECT_EQ(a1.size(), 1u);
  EXPECT_EQ(a1.at(0, 0), 1.0);
  EXPECT_THROW(attention_matrix(MemoryPool(2), EausParams::identity(2)), PoolError);

  const auto a = attention_matrix(scalar_pool(), EausParams::identity(1));
  const double s = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(a.at(0, 0), s, 1e-15);
  EXPECT_NEAR(a.at(0, 1), 1.0 - s, 1e-15);
  EXPECT_NEAR(a.at(0, 0), 0.73106, 1e-5);
  EXPECT_EQ(a.at(1, 0), 0.5);
  EXPECT_EQ(a.at(1, 1), 0.5);
}

TEST(AttentionMatrix, RowStochastic) {
  Rng rng(2);
  for (std::size_t n : {1u, 2u, 7u, 32u}) {
    const MemoryPool pool = random_pool(n, 4, rng);
    const auto a = attention_matrix(pool, EausParams::init(4, rng));
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t l = 0; l < n; ++l) {
        EXPECT_GT(a.at(i, l), 0.0);
        EXPECT_LE(a.at(i, l), 1.0);
        s += a.at(i, l);
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(AdaptiveUpdate, IdentityCases) {
  Rng rng(3);
  const MemoryPool pool = random_pool(5, 3, rng);
  EausParams p = EausParams::init(3, rng);
  p.w = AffineParams::zeros(3, 3, false);
  const auto [same, trace] = adaptive_update(pool, p);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_NEAR(same[i].category().values[k], pool[i].category().values[k], 1e-12);
    for (double v : trace.displacements[i]) EXPECT_EQ(v, 0.0);
  }
  const MemoryPool single = random_pool(1, 3, rng);
  EXPECT_EQ(adaptive_update(single, EausParams::init(3, rng)).first, single);
}

TEST(AdaptiveUpdate, ScalarExample) {
  const auto [out, trace] = adaptive_update(scalar_pool(), EausParams::identity(1));
  const double s = 1.0 / (1.0 + std::exp(-1.0));
  EXPECT_NEAR(out[0].category().values[0], 1.0 + (1.0 - s), 1e-12);
  EXPECT_NEAR(out[0].category().values[0], 1.26894, 1e-5);
  EXPECT_NEAR(out[1].category().values[0], -0.5, 1e-12);
  EXPECT_NEAR(out[0].category().values[0] - out[1].category().values[0], 1.76894, 1e-5);
  EXPECT_EQ(trace.class_ids, (std::vector<int>{1, 2}));
}

TEST(AdaptiveUpdate, SnapshotSemanticsAndTrace) {
  Rng rng(4);
  const MemoryPool pool = random_pool(6, 4, rng);
  const EausParams p = EausParams::init(4, rng, 0.7);
  const auto [out, trace] = adaptive_update(pool, p);
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const auto ref = naive_update(pool, i, p);
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_NEAR(out[i].category().values[k], ref[k], 1e-12);
      EXPECT_NEAR(trace.displacements[i][k], ref[k] - pool[i].category().values[k], 1e-12);
    }
    EXPECT_EQ(out[i].hyper(), pool[i].hyper());
  }
}

TEST(AdaptiveUpdate, PermutationEquivariant) {
  Rng rng(5);
  const MemoryPool pool = random_pool(5, 3, rng);
  const EausParams p = EausParams::init(3, rng);
  std::vector<std::size_t> order{3, 0, 4, 1, 2};
  MemoryPool shuffled(3);
  for (auto i : order)
    shuffled.insert(pool[i].class_id(), pool[i].category(), pool[i].hyper(), pool[i].session_id());
  const MemoryPool a = adaptive_update(pool, p).first, b = adaptive_update(shuffled, p).first;
  for (std::size_t j = 0; j < order.size(); ++j)
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_NEAR(b[j].category().values[k], a[order[j]].category().values[k], 1e-12);
}

TEST(KshotAbsorb, Examples) {
  MemoryPool single(1);
  single.insert(4, emb({0.0}), emb({0.0}), 1);
  const EausParams id = EausParams::identity(1);
  EXPECT_NEAR(kshot_absorb(single, 4, emb({1.0}), id)[0].category().values[0], 0.5, 1e-15);
  EXPECT_THROW(kshot_absorb(single, 9, emb({1.0}), id), PoolError);

  Rng rng(6);
  const MemoryPool pool = random_pool(1, 3, rng);
  const MemoryPool same = kshot_absorb(pool, pool[0].class_id(), pool[0].category(), EausParams::init(3, rng));
  EXPECT_EQ(same[0].category().values, pool[0].category().values);
}

TEST(KshotAbsorb, StaysOnSegmentGridScan) {
  const EausParams id = EausParams::identity(1);
  for (int s = -2; s <= 2; ++s)
    for (int n = -2; n <= 2; ++n) {
      MemoryPool pool(1);
      pool.insert(0, emb({double(s)}), emb({0.0}), 1);
      const double out = kshot_absorb(pool, 0, emb({double(n)}), id)[0].category().values[0];
      EXPECT_GE(out, std::min(s, n) - 1e-12) << s << " " << n;
      EXPECT_LE(out, std::max(s, n) + 1e-12) << s << " " << n;
    }
}

TEST(KshotAbsorb, OnlyTargetChangesAndHyperUntouched) {
  Rng rng(7);
  const MemoryPool pool = random_pool(4, 3, rng);
  const MemoryPool out = kshot_absorb(pool, pool[2].class_id(), emb(random_vec(3, rng)), EausParams::init(3, rng));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(out[i].hyper(), pool[i].hyper());
    if (i != 2) EXPECT_EQ(out[i].category(), pool[i].category());
  }
  EXPECT_NE(out[2].category(), pool[2].category());
}

TEST(ApplyStrategy, Examples) {
  Rng rng(8);
  const MemoryPool pool = random_pool(5, 3, rng, 3);
  const EausParams ep = EausParams::init(3, rng);
  const AffineParams id = AffineParams::identity(3);
  EXPECT_EQ(apply_strategy(pool, {StrategyKind::non_update, UpdateScope::both}, ep, id, 1), pool);
  EXPECT_EQ(apply_strategy(pool, {StrategyKind::linear_transform, UpdateScope::both}, ep, id, 1), pool);
  EXPECT_EQ(apply_strategy(pool, {StrategyKind::eaus, UpdateScope::both}, ep, id, 1),
            adaptive_update(pool, ep).first);
}

TEST(ApplyStrategy, ScopeRestrictsChanges) {
  Rng rng(9);
  const MemoryPool pool = random_pool(5, 3, rng, 3);
  const EausParams ep = EausParams::init(3, rng);
  const AffineParams lt = AffineParams::init(3, 3, rng, false);
  const MemoryPool full = adaptive_update(pool, ep).first;
  for (auto kind : {StrategyKind::eaus, StrategyKind::linear_transform})
    for (auto scope : {UpdateScope::base_only, UpdateScope::new_only}) {
      const MemoryPool out = apply_strategy(pool, {kind, scope}, ep, lt, 1);
      for (std::size_t i = 0; i < 5; ++i) {
        const bool base = i < 3;
        const bool active = scope == UpdateScope::base_only ? base : !base;
        if (!active) EXPECT_EQ(out[i].category(), pool[i].category());
        else if (kind == StrategyKind::eaus) EXPECT_EQ(out[i].category().values, full[i].category().values);
        else EXPECT_EQ(out[i].category().values, affine(pool[i].category().values, lt));
      }
    }
}

TEST(Strategy, StringRoundTrip) {
  for (auto k : {StrategyKind::non_update, StrategyKind::linear_transform, StrategyKind::eaus})
    EXPECT_EQ(parse_strategy_kind(to_string(k)), k);
  for (auto s : {UpdateScope::base_only, UpdateScope::new_only, UpdateScope::both})
    EXPECT_EQ(parse_update_scope(to_string(s)), s);
  EXPECT_THROW(parse_strategy_kind("bogus"), Error);
}

TEST(EausForward, MatchesPoolPath) {
  Rng rng(10);
  const MemoryPool pool = random_pool(4, 3, rng);
  const EausParams p = EausParams::init(3, rng);
  const std::vector<char> active(4, 1);
  const Tensor out = eaus_forward(pool.category_matrix(), p, active);
  EXPECT_EQ(out, adaptive_update(pool, p).first.category_matrix());
}

TEST(EausForward, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  const std::size_t n = 3, d = 4;
  Tensor e({n, d});
  fill_uniform(e, rng, -1, 1);
  const EausParams p = EausParams::init(d, rng);
  Tensor r({n, d});
  fill_uniform(r, rng, -1, 1);
  const std::vector<char> active{1, 0, 1};
  auto loss = [&](const EausParams& q, const Tensor& x) {
    const Tensor y = eaus_forward(x, q, active);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  EausStep step;
  eaus_forward(e, p, active, &step);
  EausParams g = EausParams::zeros(d);
  const Tensor de = eaus_backward(step, p, r, g);
  EXPECT_LT(check_gradient([&](const Tensor& x) { return loss(p, x); }, e, de, 1e-3).max_rel_error, 1e-4);
  for (int which = 0; which < 3; ++which) {
    auto f = [&](const Tensor& t) {
      EausParams q = p;
      (which == 0 ? q.phi : which == 1 ? q.psi : q.w).weight = t;
      return loss(q, e);
    };
    const Tensor& base = (which == 0 ? p.phi : which == 1 ? p.psi : p.w).weight;
    const Tensor& an = (which == 0 ? g.phi : which == 1 ? g.psi : g.w).weight;
    EXPECT_LT(check_gradient(f, base, an, 1e-3).max_rel_error, 1e-4) << which;
  }
}

TEST(LtForward, GradientMatchesFiniteDifferences) {
  Rng rng(12);
  Tensor e({3, 4}), r({3, 4});
  fill_uniform(e, rng, -1, 1);
  fill_uniform(r, rng, -1, 1);
  const AffineParams lt = AffineParams::init(4, 4, rng, false);
  const std::vector<char> active{0, 1, 1};
  auto loss = [&](const AffineParams& q, const Tensor& x) {
    const Tensor y = lt_forward(x, q, active);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  AffineParams g = AffineParams::zeros(4, 4, false);
  const Tensor de = lt_backward(e, lt, active, r, g);
  EXPECT_LT(check_gradient([&](const Tensor& x) { return loss(lt, x); }, e, de, 1e-3).max_rel_error, 1e-4);
  auto fw = [&](const Tensor& w) {
    AffineParams q = lt;
    q.weight = w;
    return loss(q, e);
  };
  EXPECT_LT(check_gradient(fw, lt.weight, g.weight, 1e-3).max_rel_error, 1e-4);
}
