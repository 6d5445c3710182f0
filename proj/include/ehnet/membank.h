#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ehnet/embedding.h"
#include "ehnet/numkit.h"

namespace ehnet {

/// Invalid pool operation: duplicate or unknown class id, empty pool, bad K.
class PoolError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// K-means
// ---------------------------------------------------------------------------

struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<std::vector<double>> centroids;
  double sse = 0.0;
};

/// Lloyd's algorithm from k-means++ seeds, best of `restarts` runs by SSE.
/// Points are canonically ordered before clustering, so the result does not
/// depend on input order. Empty clusters are reseeded with the point farthest
/// from its centroid.
KMeansResult kmeans(std::span<const std::vector<double>> points, std::size_t k,
                    std::size_t restarts, std::uint64_t seed);

double clustering_sse(std::span<const std::vector<double>> points,
                      std::span<const std::size_t> assignments, std::size_t k);

/// Clusters `population` and returns the centroid nearest to `ec_raw`.
Embedding raw_hyperclass(const Embedding& ec_raw, std::span<const Embedding> population,
                         std::size_t k, std::size_t restarts, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Cross information module
// ---------------------------------------------------------------------------

struct CimBranch {
  AffineParams fc1;
  AffineParams fc2;

  friend bool operator==(const CimBranch&, const CimBranch&) = default;
};

struct CimParams {
  CimBranch hyper;
  CimBranch category;

  std::size_t dim() const { return hyper.fc1.in_dim(); }

  static CimParams zeros(std::size_t dim);
  static CimParams init(std::size_t dim, Rng& rng);

  friend bool operator==(const CimParams&, const CimParams&) = default;
};

struct CimTrace {
  std::vector<double> eh_raw, ec_raw;
  std::vector<double> h_hidden, c_hidden;
  std::vector<double> h_gate, c_gate;
  std::vector<double> fused;
};

struct AlignedPair {
  Embedding hyper;
  Embedding category;
};

AlignedPair cim_align(const Embedding& eh_raw, const Embedding& ec_raw, const CimParams& p,
                      CimTrace* trace = nullptr);

/// Accumulates parameter gradients into `grad`; returns (d eh_raw, d ec_raw).
std::pair<std::vector<double>, std::vector<double>> cim_align_backward(
    const CimTrace& trace, const CimParams& p, std::span<const double> d_hyper,
    std::span<const double> d_category, CimParams& grad);

// ---------------------------------------------------------------------------
// Memory pool
// ---------------------------------------------------------------------------

class ClassRecord {
 public:
  ClassRecord(int class_id, Embedding category, Embedding hyper, int session_id);

  int class_id() const { return class_id_; }
  int session_id() const { return session_id_; }
  const Embedding& category() const { return category_; }
  const Embedding& hyper() const { return hyper_; }

  friend bool operator==(const ClassRecord&, const ClassRecord&) = default;

 private:
  friend class MemoryPool;

  int class_id_;
  Embedding category_;
  Embedding hyper_;  // never written after construction
  int session_id_;
};

/// Ordered per-class store. Only category embeddings are mutable, and only
/// through set_category (the update strategies are its sole callers).
class MemoryPool {
 public:
  explicit MemoryPool(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::span<const ClassRecord> records() const { return records_; }
  const ClassRecord& operator[](std::size_t i) const { return records_[i]; }

  bool contains(int class_id) const { return index_of(class_id).has_value(); }
  std::optional<std::size_t> index_of(int class_id) const;
  const ClassRecord& at(int class_id) const;

  void insert(int class_id, Embedding category, Embedding hyper, int session_id);
  void set_category(std::size_t index, std::vector<double> values);

  /// [size x dim] matrix of category embeddings in record order.
  Tensor category_matrix() const;

  friend bool operator==(const MemoryPool&, const MemoryPool&) = default;

 private:
  std::size_t dim_;
  std::vector<ClassRecord> records_;
};

MemoryPool insert_class(const MemoryPool& pool, int class_id, Embedding category, Embedding hyper,
                        int session_id);

// Checkpoint stream, little-endian:
//   "EHPL" u32 version=1 u32 dim u32 record_count
//   per record: i32 class_id, i32 session_id, u32 dim, f64[dim] category, f64[dim] hyper
void write_pool(std::ostream& os, const MemoryPool& pool);
MemoryPool read_pool(std::istream& is);
void save_pool(const std::string& path, const MemoryPool& pool);
MemoryPool load_pool(const std::string& path);

}  // namespace ehnet
