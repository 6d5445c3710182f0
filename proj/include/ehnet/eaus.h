#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ehnet/membank.h"
#include "ehnet/numkit.h"

namespace ehnet {

/// The three bias-free D x D maps of the update: two projections into the
/// relation metric space and the displacement transform.
struct EausParams {
  AffineParams phi;
  AffineParams psi;
  AffineParams w;

  std::size_t dim() const { return phi.in_dim(); }

  static EausParams identity(std::size_t dim);
  static EausParams zeros(std::size_t dim);
  /// phi, psi uniform in +-1/sqrt(D); w additionally scaled by `w_scale`.
  static EausParams init(std::size_t dim, Rng& rng, double w_scale = 1.0);

  friend bool operator==(const EausParams&, const EausParams&) = default;
};

/// Row-stochastic [n x n] matrix; entry (i, l) is class i's weight on class l.
struct AttentionMatrix {
  Tensor weights;

  std::size_t size() const { return weights.empty() ? 0 : weights.dim(0); }
  double at(std::size_t i, std::size_t l) const { return weights.at(i, l); }
};

struct UpdateTrace {
  std::vector<int> class_ids;
  std::vector<std::vector<double>> displacements;
  AttentionMatrix attention;
};

enum class StrategyKind { non_update, linear_transform, eaus };
enum class UpdateScope { base_only, new_only, both };

struct UpdateStrategy {
  StrategyKind kind = StrategyKind::eaus;
  UpdateScope scope = UpdateScope::both;

  friend bool operator==(const UpdateStrategy&, const UpdateStrategy&) = default;
};

std::string to_string(StrategyKind k);
std::string to_string(UpdateScope s);
StrategyKind parse_strategy_kind(const std::string& s);
UpdateScope parse_update_scope(const std::string& s);

/// A record is in scope when it belongs to the current session (new) or an
/// earlier one (base), as selected by `scope`.
bool in_scope(UpdateScope scope, int record_session, int current_session);

double relation_coeff(const Embedding& ei, const Embedding& ej, const EausParams& p);

AttentionMatrix attention_matrix(const MemoryPool& pool, const EausParams& p);

/// Simultaneous update of every category embedding from a snapshot.
std::pair<MemoryPool, UpdateTrace> adaptive_update(const MemoryPool& pool, const EausParams& p);

/// Fuses one more sample of `class_id` into its stored embedding. The sample
/// joins the attention row as a same-class entry whose subtraction vector is
/// reversed; only the stored record changes.
MemoryPool kshot_absorb(const MemoryPool& pool, int class_id, const Embedding& new_ec,
                        const EausParams& p);

/// Applies `strategy` to the records in scope. EAUS still lets every record
/// take part in attention; `lt` is the shared map of the linear-transform
/// baseline.
MemoryPool apply_strategy(const MemoryPool& pool, const UpdateStrategy& strategy,
                          const EausParams& eaus, const AffineParams& lt, int current_session,
                          UpdateTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Matrix forms for training: rows of `e` are category embeddings, `active`
// marks the rows that receive their update (all rows attend).
// ---------------------------------------------------------------------------

struct EausStep {
  Tensor input;      // [n x D]
  Tensor u, v;       // phi(E), psi(E)
  Tensor attention;  // [n x n]
  Tensor resid;      // sum_l a_il (E_i - E_l)
  std::vector<char> active;
};

Tensor eaus_forward(const Tensor& e, const EausParams& p, std::span<const char> active,
                    EausStep* step = nullptr);
Tensor eaus_backward(const EausStep& step, const EausParams& p, const Tensor& dout,
                     EausParams& grad);

Tensor lt_forward(const Tensor& e, const AffineParams& lt, std::span<const char> active);
Tensor lt_backward(const Tensor& e, const AffineParams& lt, std::span<const char> active,
                   const Tensor& dout, AffineParams& grad);

}  // namespace ehnet
