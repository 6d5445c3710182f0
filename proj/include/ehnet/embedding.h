#pragma once

#include <cstddef>
#include <vector>

namespace ehnet {

enum class EmbeddingKind { category, hyperclass };
enum class EmbeddingStage { raw, aligned };

/// Fixed-length class descriptor stored in the memory pool.
struct Embedding {
  std::vector<double> values;
  EmbeddingKind kind = EmbeddingKind::category;
  EmbeddingStage stage = EmbeddingStage::raw;

  std::size_t dim() const { return values.size(); }

  friend bool operator==(const Embedding&, const Embedding&) = default;
};

}  // namespace ehnet
