#include "ehnet/membank.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>

#include "binio.h"

namespace ehnet {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

struct LloydRun {
  std::vector<std::size_t> assign;
  std::vector<std::vector<double>> centroids;
  double sse;
};

std::vector<std::vector<double>> kmeanspp_seeds(std::span<const std::vector<double>> pts,
                                                std::size_t k, Rng& rng) {
  const std::size_t n = pts.size();
  std::vector<std::vector<double>> c;
  c.push_back(pts[rng() % n]);
  std::vector<double> d2(n);
  while (c.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& cc : c) best = std::min(best, sq_dist(pts[i], cc));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = uniform(rng, 0.0, total);
      for (pick = 0; pick + 1 < n; ++pick) {
        if (r < d2[pick]) break;
        r -= d2[pick];
      }
    } else {
      pick = rng() % n;
    }
    c.push_back(pts[pick]);
  }
  return c;
}

LloydRun lloyd(std::span<const std::vector<double>> pts, std::size_t k, Rng& rng) {
  const std::size_t n = pts.size(), dim = pts[0].size();
  LloydRun run{std::vector<std::size_t>(n, k), kmeanspp_seeds(pts, k, rng), 0.0};
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double d = sq_dist(pts[i], run.centroids[j]);
        if (d < bd) {
          bd = d;
          best = j;
        }
      }
      if (run.assign[i] != best) {
        run.assign[i] = best;
        changed = true;
      }
    }
    // Empty-cluster repair: move the point farthest from its centroid.
    for (std::size_t j = 0; j < k; ++j) {
      if (std::find(run.assign.begin(), run.assign.end(), j) != run.assign.end()) continue;
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = sq_dist(pts[i], run.centroids[run.assign[i]]);
        const auto owner = run.assign[i];
        const bool owner_shared = std::count(run.assign.begin(), run.assign.end(), owner) > 1;
        if (owner_shared && d > fd) {
          fd = d;
          far = i;
        }
      }
      run.assign[far] = j;
      run.centroids[j] = pts[far];
      changed = true;
    }
    for (std::size_t j = 0; j < k; ++j) {
      std::vector<double> m(dim, 0.0);
      std::size_t cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (run.assign[i] != j) continue;
        for (std::size_t d = 0; d < dim; ++d) m[d] += pts[i][d];
        ++cnt;
      }
      for (auto& v : m) v /= static_cast<double>(cnt);
      run.centroids[j] = std::move(m);
    }
    if (!changed) break;
  }
  run.sse = clustering_sse(pts, run.assign, k);
  return run;
}

}  // namespace

double clustering_sse(std::span<const std::vector<double>> points,
                      std::span<const std::size_t> assignments, std::size_t k) {
  if (points.empty()) return 0.0;
  const std::size_t dim = points[0].size();
  std::vector<std::vector<double>> mean(k, std::vector<double>(dim, 0.0));
  std::vector<std::size_t> cnt(k, 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t d = 0; d < dim; ++d) mean[assignments[i]][d] += points[i][d];
    ++cnt[assignments[i]];
  }
  for (std::size_t j = 0; j < k; ++j)
    if (cnt[j])
      for (auto& v : mean[j]) v /= static_cast<double>(cnt[j]);
  double sse = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) sse += sq_dist(points[i], mean[assignments[i]]);
  return sse;
}

KMeansResult kmeans(std::span<const std::vector<double>> points, std::size_t k,
                    std::size_t restarts, std::uint64_t seed) {
  if (k == 0) throw PoolError("kmeans: cluster count must be positive");
  if (k > points.size()) {
    throw PoolError("kmeans: " + std::to_string(k) + " clusters requested for " +
                    std::to_string(points.size()) + " points");
  }
  const std::size_t dim = points[0].size();
  for (const auto& p : points)
    if (p.size() != dim) throw DimensionError("kmeans: points differ in dimension");

  // Canonical order makes the result independent of how the caller listed points.
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return points[a] < points[b]; });
  std::vector<std::vector<double>> sorted;
  sorted.reserve(points.size());
  for (auto i : order) sorted.push_back(points[i]);

  LloydRun best{{}, {}, std::numeric_limits<double>::infinity()};
  for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
    Rng rng(derive_seed(seed, {0x6b6d65616e73ULL, r}));
    LloydRun run = lloyd(sorted, k, rng);
    if (run.sse < best.sse) best = std::move(run);
  }
  KMeansResult res;
  res.assignments.resize(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) res.assignments[order[i]] = best.assign[i];
  res.centroids = std::move(best.centroids);
  res.sse = best.sse;
  return res;
}

Embedding raw_hyperclass(const Embedding& ec_raw, std::span<const Embedding> population,
                         std::size_t k, std::size_t restarts, std::uint64_t seed) {
  if (population.empty()) throw PoolError("raw_hyperclass: empty pool");
  std::vector<std::vector<double>> pts;
  pts.reserve(population.size());
  for (const auto& e : population) {
    if (e.dim() != ec_raw.dim()) throw DimensionError("raw_hyperclass: dimension mismatch");
    pts.push_back(e.values);
  }
  const KMeansResult km = kmeans(pts, k, restarts, seed);
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < km.centroids.size(); ++j) {
    const double d = sq_dist(ec_raw.values, km.centroids[j]);
    if (d < bd) {
      bd = d;
      best = j;
    }
  }
  return {km.centroids[best], EmbeddingKind::hyperclass, EmbeddingStage::raw};
}

// ---------------------------------------------------------------------------

CimParams CimParams::zeros(std::size_t dim) {
  CimParams p;
  for (CimBranch* b : {&p.hyper, &p.category}) {
    b->fc1 = AffineParams::zeros(dim, dim);
    b->fc2 = AffineParams::zeros(dim, dim);
  }
  return p;
}

CimParams CimParams::init(std::size_t dim, Rng& rng) {
  CimParams p;
  for (CimBranch* b : {&p.hyper, &p.category}) {
    b->fc1 = AffineParams::init(dim, dim, rng);
    b->fc2 = AffineParams::init(dim, dim, rng);
  }
  return p;
}

AlignedPair cim_align(const Embedding& eh_raw, const Embedding& ec_raw, const CimParams& p,
                      CimTrace* trace) {
  const std::size_t d = p.dim();
  if (eh_raw.dim() != d || ec_raw.dim() != d) {
    throw DimensionError("cim_align: embeddings must have dimension " + std::to_string(d));
  }
  CimTrace t;
  t.eh_raw = eh_raw.values;
  t.ec_raw = ec_raw.values;
  t.h_hidden = affine(eh_raw.values, p.hyper.fc1);
  t.h_gate = sigmoid(affine(t.h_hidden, p.hyper.fc2));
  t.c_hidden = affine(ec_raw.values, p.category.fc1);
  t.c_gate = sigmoid(affine(t.c_hidden, p.category.fc2));
  t.fused.resize(d);
  AlignedPair out{{std::vector<double>(d), EmbeddingKind::hyperclass, EmbeddingStage::aligned},
                  {std::vector<double>(d), EmbeddingKind::category, EmbeddingStage::aligned}};
  for (std::size_t i = 0; i < d; ++i) {
    t.fused[i] = t.h_gate[i] * t.c_gate[i];
    out.hyper.values[i] = t.fused[i] * eh_raw.values[i];
    out.category.values[i] = t.fused[i] * ec_raw.values[i];
  }
  if (trace) *trace = std::move(t);
  return out;
}

std::pair<std::vector<double>, std::vector<double>> cim_align_backward(
    const CimTrace& t, const CimParams& p, std::span<const double> d_hyper,
    std::span<const double> d_category, CimParams& grad) {
  const std::size_t d = p.dim();
  if (d_hyper.size() != d || d_category.size() != d) {
    throw DimensionError("cim_align_backward: gradient dimension mismatch");
  }
  std::vector<double> dfused(d), deh(d), dec(d), dhg(d), dcg(d);
  for (std::size_t i = 0; i < d; ++i) {
    dfused[i] = d_hyper[i] * t.eh_raw[i] + d_category[i] * t.ec_raw[i];
    deh[i] = d_hyper[i] * t.fused[i];
    dec[i] = d_category[i] * t.fused[i];
    dhg[i] = dfused[i] * t.c_gate[i];
    dcg[i] = dfused[i] * t.h_gate[i];
  }
  auto branch = [&](const CimBranch& b, CimBranch& g, const std::vector<double>& in,
                    const std::vector<double>& hidden, const std::vector<double>& gate,
                    const std::vector<double>& dgate, std::vector<double>& din) {
    const auto dz2 = sigmoid_backward(gate, dgate);
    const auto dh = affine_backward(hidden, b.fc2, dz2, g.fc2);
    const auto dx = affine_backward(in, b.fc1, dh, g.fc1);
    for (std::size_t i = 0; i < d; ++i) din[i] += dx[i];
  };
  branch(p.hyper, grad.hyper, t.eh_raw, t.h_hidden, t.h_gate, dhg, deh);
  branch(p.category, grad.category, t.ec_raw, t.c_hidden, t.c_gate, dcg, dec);
  return {std::move(deh), std::move(dec)};
}

// ---------------------------------------------------------------------------

ClassRecord::ClassRecord(int class_id, Embedding category, Embedding hyper, int session_id)
    : class_id_(class_id),
      category_(std::move(category)),
      hyper_(std::move(hyper)),
      session_id_(session_id) {}

std::optional<std::size_t> MemoryPool::index_of(int class_id) const {
  for (std::size_t i = 0; i < records_.size(); ++i)
    if (records_[i].class_id_ == class_id) return i;
  return std::nullopt;
}

const ClassRecord& MemoryPool::at(int class_id) const {
  const auto i = index_of(class_id);
  if (!i) throw PoolError("class " + std::to_string(class_id) + " is not in the pool");
  return records_[*i];
}

void MemoryPool::insert(int class_id, Embedding category, Embedding hyper, int session_id) {
  if (contains(class_id)) throw PoolError("class " + std::to_string(class_id) + " already stored");
  if (category.dim() != dim_ || hyper.dim() != dim_) {
    throw DimensionError("pool stores dimension " + std::to_string(dim_) + " embeddings");
  }
  for (double v : category.values)
    if (!std::isfinite(v)) throw NumericError("non-finite category embedding");
  for (double v : hyper.values)
    if (!std::isfinite(v)) throw NumericError("non-finite hyper-class embedding");
  category.kind = EmbeddingKind::category;
  hyper.kind = EmbeddingKind::hyperclass;
  records_.emplace_back(class_id, std::move(category), std::move(hyper), session_id);
}

void MemoryPool::set_category(std::size_t index, std::vector<double> values) {
  if (values.size() != dim_) throw DimensionError("set_category: dimension mismatch");
  records_.at(index).category_.values = std::move(values);
}

Tensor MemoryPool::category_matrix() const {
  if (records_.empty()) throw PoolError("empty pool");
  Tensor m({records_.size(), dim_});
  for (std::size_t i = 0; i < records_.size(); ++i)
    std::copy(records_[i].category_.values.begin(), records_[i].category_.values.end(),
              m.data() + i * dim_);
  return m;
}

MemoryPool insert_class(const MemoryPool& pool, int class_id, Embedding category, Embedding hyper,
                        int session_id) {
  MemoryPool out = pool;
  out.insert(class_id, std::move(category), std::move(hyper), session_id);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kPoolMagic[4] = {'E', 'H', 'P', 'L'};
constexpr std::uint32_t kPoolVersion = 1;

using binio::put_le;

template <typename T>
T get_le(std::istream& is) {
  return binio::get_le<T>(is, "pool checkpoint");
}

}  // namespace

void write_pool(std::ostream& os, const MemoryPool& pool) {
  os.write(kPoolMagic, 4);
  put_le<std::uint32_t>(os, kPoolVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(pool.dim()));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(pool.size()));
  for (const auto& r : pool.records()) {
    put_le<std::int32_t>(os, r.class_id());
    put_le<std::int32_t>(os, r.session_id());
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(pool.dim()));
    for (double v : r.category().values) put_le<double>(os, v);
    for (double v : r.hyper().values) put_le<double>(os, v);
  }
}

MemoryPool read_pool(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kPoolMagic, 4) != 0) {
    throw Error("not a pool checkpoint (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(is);
  if (version != kPoolVersion) throw Error("unsupported pool checkpoint version " + std::to_string(version));
  const auto pool_dim = get_le<std::uint32_t>(is);
  const auto count = get_le<std::uint32_t>(is);
  MemoryPool pool(pool_dim);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto id = get_le<std::int32_t>(is);
    const auto session = get_le<std::int32_t>(is);
    const auto dim = get_le<std::uint32_t>(is);
    if (dim != pool.dim()) throw Error("pool checkpoint record dimension disagrees with header");
    Embedding c{std::vector<double>(dim), EmbeddingKind::category, EmbeddingStage::aligned};
    Embedding h{std::vector<double>(dim), EmbeddingKind::hyperclass, EmbeddingStage::aligned};
    for (auto& v : c.values) v = get_le<double>(is);
    for (auto& v : h.values) v = get_le<double>(is);
    pool.insert(id, std::move(c), std::move(h), session);
  }
  return pool;
}

void save_pool(const std::string& path, const MemoryPool& pool) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_pool(os, pool);
}

MemoryPool load_pool(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return read_pool(is);
}

}  // namespace ehnet
