#include "ehnet/eaus.h"

#include <cmath>

namespace ehnet {

namespace {

void check_square(const AffineParams& m, std::size_t d, const char* name) {
  if (m.weight.rank() != 2 || m.out_dim() != d || m.in_dim() != d) {
    throw DimensionError(std::string("EAUS map ") + name + " must be " + std::to_string(d) + "x" +
                         std::to_string(d));
  }
}

void check_params(const EausParams& p, std::size_t d) {
  check_square(p.phi, d, "phi");
  check_square(p.psi, d, "psi");
  check_square(p.w, d, "W");
}

std::span<const double> row(const Tensor& m, std::size_t i) {
  return {m.data() + i * m.dim(1), m.dim(1)};
}

Tensor rows_affine(const Tensor& e, const AffineParams& p) {
  const std::size_t n = e.dim(0), d = p.out_dim();
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = affine(row(e, i), p);
    std::copy(y.begin(), y.end(), out.data() + i * d);
  }
  return out;
}

Tensor pool_matrix(const MemoryPool& pool) { return pool.category_matrix(); }

}  // namespace

EausParams EausParams::identity(std::size_t dim) {
  return {AffineParams::identity(dim), AffineParams::identity(dim), AffineParams::identity(dim)};
}

EausParams EausParams::zeros(std::size_t dim) {
  return {AffineParams::zeros(dim, dim, false), AffineParams::zeros(dim, dim, false),
          AffineParams::zeros(dim, dim, false)};
}

EausParams EausParams::init(std::size_t dim, Rng& rng, double w_scale) {
  EausParams p{AffineParams::init(dim, dim, rng, false), AffineParams::init(dim, dim, rng, false),
               AffineParams::init(dim, dim, rng, false)};
  for (auto& v : p.w.weight.values()) v *= w_scale;
  return p;
}

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::non_update: return "non-update";
    case StrategyKind::linear_transform: return "linear-transform";
    case StrategyKind::eaus: return "eaus";
  }
  return "?";
}

std::string to_string(UpdateScope s) {
  switch (s) {
    case UpdateScope::base_only: return "base-only";
    case UpdateScope::new_only: return "new-only";
    case UpdateScope::both: return "both";
  }
  return "?";
}

StrategyKind parse_strategy_kind(const std::string& s) {
  if (s == "non-update") return StrategyKind::non_update;
  if (s == "linear-transform") return StrategyKind::linear_transform;
  if (s == "eaus") return StrategyKind::eaus;
  throw Error("unknown update strategy '" + s + "' (expected non-update, linear-transform, eaus)");
}

UpdateScope parse_update_scope(const std::string& s) {
  if (s == "base-only") return UpdateScope::base_only;
  if (s == "new-only") return UpdateScope::new_only;
  if (s == "both") return UpdateScope::both;
  throw Error("unknown update scope '" + s + "' (expected base-only, new-only, both)");
}

bool in_scope(UpdateScope scope, int record_session, int current_session) {
  switch (scope) {
    case UpdateScope::base_only: return record_session < current_session;
    case UpdateScope::new_only: return record_session == current_session;
    case UpdateScope::both: return true;
  }
  return false;
}

double relation_coeff(const Embedding& ei, const Embedding& ej, const EausParams& p) {
  if (ei.dim() != ej.dim()) throw DimensionError("relation_coeff: embeddings differ in dimension");
  check_params(p, ei.dim());
  const auto u = affine(ei.values, p.phi);
  const auto v = affine(ej.values, p.psi);
  double s = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) s += u[k] * v[k];
  return s;
}

// ---------------------------------------------------------------------------

Tensor eaus_forward(const Tensor& e, const EausParams& p, std::span<const char> active,
                    EausStep* step) {
  if (e.rank() != 2) throw DimensionError("eaus_forward expects an [n x D] matrix");
  const std::size_t n = e.dim(0), d = e.dim(1);
  check_params(p, d);
  if (active.size() != n) throw DimensionError("eaus_forward: active mask length mismatch");

  EausStep s;
  s.input = e;
  s.u = rows_affine(e, p.phi);
  s.v = rows_affine(e, p.psi);
  s.attention = Tensor({n, n});
  s.resid = Tensor({n, d});
  s.active.assign(active.begin(), active.end());

  std::vector<double> coeff(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto ui = row(s.u, i);
    for (std::size_t l = 0; l < n; ++l) {
      const auto vl = row(s.v, l);
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += ui[k] * vl[k];
      coeff[l] = dot;
    }
    const auto a = softmax(coeff);
    std::copy(a.begin(), a.end(), s.attention.data() + i * n);
    double* ri = s.resid.data() + i * d;
    const auto ei = row(e, i);
    for (std::size_t l = 0; l < n; ++l) {
      const auto el = row(e, l);
      for (std::size_t k = 0; k < d; ++k) ri[k] += a[l] * (ei[k] - el[k]);
    }
  }

  Tensor out = e;
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    const auto disp = affine(row(s.resid, i), p.w);
    double* oi = out.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) oi[k] += disp[k];
  }
  if (step) *step = std::move(s);
  return out;
}

Tensor eaus_backward(const EausStep& s, const EausParams& p, const Tensor& dout,
                     EausParams& grad) {
  const Tensor& e = s.input;
  const std::size_t n = e.dim(0), d = e.dim(1);
  if (dout.shape() != e.shape()) throw DimensionError("eaus_backward gradient shape mismatch");

  Tensor de = dout;
  Tensor du({n, d}), dv({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (!s.active[i]) continue;
    // out_i = e_i + W r_i,  r_i = sum_l a_il (e_i - e_l)
    const auto dr = affine_backward(row(s.resid, i), p.w, row(dout, i), grad.w);
    const auto ei = row(e, i);
    std::vector<double> da(n);
    double asum = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
      const double a = s.attention.at(i, l);
      asum += a;
      const auto el = row(e, l);
      double g = 0.0;
      for (std::size_t k = 0; k < d; ++k) g += dr[k] * (ei[k] - el[k]);
      da[l] = g;
      double* del = de.data() + l * d;
      for (std::size_t k = 0; k < d; ++k) del[k] -= a * dr[k];
    }
    double* dei = de.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) dei[k] += asum * dr[k];

    const auto dcoeff = softmax_backward(row(s.attention, i), da);
    const auto ui = row(s.u, i);
    double* dui = du.data() + i * d;
    for (std::size_t l = 0; l < n; ++l) {
      const auto vl = row(s.v, l);
      double* dvl = dv.data() + l * d;
      for (std::size_t k = 0; k < d; ++k) {
        dui[k] += dcoeff[l] * vl[k];
        dvl[k] += dcoeff[l] * ui[k];
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto a = affine_backward(row(e, i), p.phi, row(du, i), grad.phi);
    const auto b = affine_backward(row(e, i), p.psi, row(dv, i), grad.psi);
    double* dei = de.data() + i * d;
    for (std::size_t k = 0; k < d; ++k) dei[k] += a[k] + b[k];
  }
  return de;
}

Tensor lt_forward(const Tensor& e, const AffineParams& lt, std::span<const char> active) {
  const std::size_t n = e.dim(0), d = e.dim(1);
  check_square(lt, d, "LT");
  if (active.size() != n) throw DimensionError("lt_forward: active mask length mismatch");
  Tensor out = e;
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    const auto y = affine(row(e, i), lt);
    std::copy(y.begin(), y.end(), out.data() + i * d);
  }
  return out;
}

Tensor lt_backward(const Tensor& e, const AffineParams& lt, std::span<const char> active,
                   const Tensor& dout, AffineParams& grad) {
  const std::size_t n = e.dim(0), d = e.dim(1);
  Tensor de = dout;
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    const auto dx = affine_backward(row(e, i), lt, row(dout, i), grad);
    std::copy(dx.begin(), dx.end(), de.data() + i * d);
  }
  return de;
}

// ---------------------------------------------------------------------------

AttentionMatrix attention_matrix(const MemoryPool& pool, const EausParams& p) {
  if (pool.empty()) throw PoolError("attention_matrix: empty pool");
  check_params(p, pool.dim());
  const Tensor e = pool_matrix(pool);
  const std::size_t n = e.dim(0);
  AttentionMatrix am{Tensor({n, n})};
  std::vector<double> coeff(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < n; ++l)
      coeff[l] = relation_coeff(pool[i].category(), pool[l].category(), p);
    const auto a = softmax(coeff);
    std::copy(a.begin(), a.end(), am.weights.data() + i * n);
  }
  return am;
}

namespace {

std::pair<MemoryPool, UpdateTrace> scoped_update(const MemoryPool& pool, const EausParams& p,
                                                 std::span<const char> active) {
  if (pool.empty()) throw PoolError("adaptive_update: empty pool");
  EausStep step;
  const Tensor e = pool_matrix(pool);
  const Tensor out = eaus_forward(e, p, active, &step);
  MemoryPool next = pool;
  UpdateTrace trace;
  trace.attention.weights = step.attention;
  const std::size_t d = pool.dim();
  for (std::size_t i = 0; i < pool.size(); ++i) {
    trace.class_ids.push_back(pool[i].class_id());
    if (active[i]) {
      trace.displacements.push_back(affine(row(step.resid, i), p.w));
      next.set_category(i, {out.data() + i * d, out.data() + (i + 1) * d});
    } else {
      trace.displacements.emplace_back(d, 0.0);
    }
  }
  return {std::move(next), std::move(trace)};
}

}  // namespace

std::pair<MemoryPool, UpdateTrace> adaptive_update(const MemoryPool& pool, const EausParams& p) {
  const std::vector<char> all(pool.size(), 1);
  return scoped_update(pool, p, all);
}

MemoryPool kshot_absorb(const MemoryPool& pool, int class_id, const Embedding& new_ec,
                        const EausParams& p) {
  const auto idx = pool.index_of(class_id);
  if (!idx) throw PoolError("kshot_absorb: class " + std::to_string(class_id) + " is not stored");
  const std::size_t d = pool.dim();
  if (new_ec.dim() != d) throw DimensionError("kshot_absorb: embedding dimension mismatch");
  check_params(p, d);

  // Extended row: every stored record followed by the new same-class sample.
  std::vector<const std::vector<double>*> ext;
  std::vector<double> sign;
  for (const auto& r : pool.records()) {
    ext.push_back(&r.category().values);
    sign.push_back(r.class_id() == class_id ? -1.0 : 1.0);
  }
  ext.push_back(&new_ec.values);
  sign.push_back(-1.0);

  const auto& ei = pool[*idx].category().values;
  const auto ui = affine(ei, p.phi);
  std::vector<double> coeff(ext.size());
  for (std::size_t l = 0; l < ext.size(); ++l) {
    const auto vl = affine(*ext[l], p.psi);
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k) dot += ui[k] * vl[k];
    coeff[l] = dot;
  }
  const auto a = softmax(coeff);
  // Cross-class entries push away (E_i - E_l); same-class entries pull (E_l - E_i).
  std::vector<double> resid(d, 0.0);
  for (std::size_t l = 0; l < ext.size(); ++l)
    for (std::size_t k = 0; k < d; ++k) resid[k] += a[l] * sign[l] * (ei[k] - (*ext[l])[k]);
  const auto disp = affine(resid, p.w);
  std::vector<double> updated = ei;
  for (std::size_t k = 0; k < d; ++k) updated[k] += disp[k];

  MemoryPool next = pool;
  next.set_category(*idx, std::move(updated));
  return next;
}

MemoryPool apply_strategy(const MemoryPool& pool, const UpdateStrategy& strategy,
                          const EausParams& eaus, const AffineParams& lt, int current_session,
                          UpdateTrace* trace) {
  if (strategy.kind == StrategyKind::non_update || pool.empty()) return pool;
  std::vector<char> active(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i)
    active[i] = in_scope(strategy.scope, pool[i].session_id(), current_session) ? 1 : 0;

  if (strategy.kind == StrategyKind::eaus) {
    auto [next, tr] = scoped_update(pool, eaus, active);
    if (trace) *trace = std::move(tr);
    return next;
  }
  const Tensor out = lt_forward(pool_matrix(pool), lt, active);
  MemoryPool next = pool;
  const std::size_t d = pool.dim();
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (active[i]) next.set_category(i, {out.data() + i * d, out.data() + (i + 1) * d});
  return next;
}

}  // namespace ehnet
