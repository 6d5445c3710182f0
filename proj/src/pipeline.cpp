#include "ehnet/pipeline.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "binio.h"

namespace ehnet {

std::string to_string(EmbeddingSetting s) {
  switch (s) {
    case EmbeddingSetting::hyper_only: return "hyper-only";
    case EmbeddingSetting::category_only: return "category-only";
    case EmbeddingSetting::both_updated: return "both-updated";
    case EmbeddingSetting::keep_category: return "keep-category";
    case EmbeddingSetting::keep_hyper: return "keep-hyper";
  }
  return "?";
}

EmbeddingSetting parse_embedding_setting(const std::string& s) {
  for (auto e : {EmbeddingSetting::hyper_only, EmbeddingSetting::category_only,
                 EmbeddingSetting::both_updated, EmbeddingSetting::keep_category,
                 EmbeddingSetting::keep_hyper})
    if (to_string(e) == s) return e;
  throw Error("unknown embedding setting '" + s + "'");
}

bool uses_category(EmbeddingSetting s) { return s != EmbeddingSetting::hyper_only; }
bool uses_hyper(EmbeddingSetting s) { return s != EmbeddingSetting::category_only; }
bool updates_category(EmbeddingSetting s) {
  return s == EmbeddingSetting::category_only || s == EmbeddingSetting::both_updated ||
         s == EmbeddingSetting::keep_hyper;
}
bool updates_hyper(EmbeddingSetting s) {
  return s == EmbeddingSetting::hyper_only || s == EmbeddingSetting::both_updated ||
         s == EmbeddingSetting::keep_category;
}

std::string to_string(UpdateSchedule s) {
  return s == UpdateSchedule::per_insertion ? "per-insertion" : "per-session";
}

UpdateSchedule parse_update_schedule(const std::string& s) {
  if (s == "per-insertion") return UpdateSchedule::per_insertion;
  if (s == "per-session") return UpdateSchedule::per_session;
  throw Error("unknown update schedule '" + s + "'");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw Error("unknown optimizer '" + s + "' (expected sgd, adam)");
}

// ---------------------------------------------------------------------------

Model Model::init(const ModelShape& shape, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x6d6f64656cULL}));
  Model m;
  m.featext = FeatExtParams::init(shape.image_channels, shape.hidden_channels, shape.feat_channels,
                                  shape.embed_dim, rng);
  m.cim = CimParams::init(shape.embed_dim, rng);
  m.eaus = EausParams::init(shape.embed_dim, rng, shape.eaus_w_scale);
  m.lt = AffineParams::identity(shape.embed_dim);
  m.casm = CasmParams::init(shape.dense_channels(), shape.aspp_channels, rng);
  return m;
}

namespace {

void push(std::vector<Tensor*>& out, AffineParams& a) {
  out.push_back(&a.weight);
  if (a.has_bias()) out.push_back(&a.bias);
}

void push(std::vector<Tensor*>& out, ConvParams& c) {
  out.push_back(&c.kernels);
  out.push_back(&c.bias);
}

}  // namespace

std::vector<Tensor*> group_tensors(Model& m, ParamGroup g) {
  std::vector<Tensor*> out;
  switch (g) {
    case ParamGroup::featext:
      for (auto& s : m.featext.stages) push(out, s.conv);
      push(out, m.featext.projection);
      break;
    case ParamGroup::cim:
      for (CimBranch* b : {&m.cim.hyper, &m.cim.category}) {
        push(out, b->fc1);
        push(out, b->fc2);
      }
      break;
    case ParamGroup::eaus:
      push(out, m.eaus.phi);
      push(out, m.eaus.psi);
      push(out, m.eaus.w);
      break;
    case ParamGroup::lt:
      push(out, m.lt);
      break;
    case ParamGroup::casm:
      push(out, m.casm.compare_conv);
      push(out, m.casm.inner_conv);
      for (auto& a : m.casm.aspp) push(out, a);
      push(out, m.casm.head);
      break;
  }
  return out;
}

std::vector<Tensor*> all_tensors(Model& m) {
  std::vector<Tensor*> out;
  for (auto g : {ParamGroup::featext, ParamGroup::cim, ParamGroup::eaus, ParamGroup::lt,
                 ParamGroup::casm}) {
    auto t = group_tensors(m, g);
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

Model Model::zeros_like() const {
  Model z = *this;
  for (Tensor* t : all_tensors(z)) t->fill(0.0);
  return z;
}

// ---------------------------------------------------------------------------

namespace {

// Sequential insertion of rows with the update strategy applied after each
// insertion (or after each pseudo-session), recorded for the backward pass.
struct Chain {
  struct Event {
    bool is_update = false;
    std::size_t row = 0;  // inserted row for insert events
    StrategyKind kind = StrategyKind::non_update;
    EausStep eaus;
    Tensor lt_input;
    std::vector<char> active;
  };
  std::vector<Event> events;
  Tensor out;  // [n x D]
};

Tensor stack_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t d = rows.front().size();
  Tensor m({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), m.data() + i * d);
  return m;
}

Chain run_chain(const std::vector<std::vector<double>>& inputs, const std::vector<int>& sessions,
                const Model& model, const PipelineOptions& opt, bool enabled) {
  Chain chain;
  const std::size_t n = inputs.size();
  const bool updating = enabled && opt.strategy.kind != StrategyKind::non_update;
  std::vector<std::vector<double>> rows;
  for (std::size_t k = 0; k < n; ++k) {
    rows.push_back(inputs[k]);
    Chain::Event ins;
    ins.row = k;
    chain.events.push_back(std::move(ins));
    const bool boundary = k + 1 == n || sessions[k + 1] != sessions[k];
    if (!updating || (opt.schedule == UpdateSchedule::per_session && !boundary)) continue;
    Chain::Event ev;
    ev.is_update = true;
    ev.kind = opt.strategy.kind;
    ev.active.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      ev.active[i] = in_scope(opt.strategy.scope, sessions[i], sessions[k]) ? 1 : 0;
    const Tensor e = stack_rows(rows);
    Tensor next;
    if (ev.kind == StrategyKind::eaus) {
      next = eaus_forward(e, model.eaus, ev.active, &ev.eaus);
    } else {
      next = lt_forward(e, model.lt, ev.active);
      ev.lt_input = e;
    }
    const std::size_t d = e.dim(1);
    for (std::size_t i = 0; i < rows.size(); ++i)
      rows[i].assign(next.data() + i * d, next.data() + (i + 1) * d);
    chain.events.push_back(std::move(ev));
  }
  chain.out = stack_rows(rows);
  return chain;
}

// Returns the gradient with respect to each inserted row.
std::vector<std::vector<double>> chain_backward(const Chain& chain, const Model& model,
                                                const Tensor& dout, Model& grad) {
  const std::size_t n = dout.dim(0), d = dout.dim(1);
  std::vector<std::vector<double>> drows(n);
  for (std::size_t i = 0; i < n; ++i) drows[i].assign(dout.data() + i * d, dout.data() + (i + 1) * d);
  std::vector<std::vector<double>> dinputs(n);
  for (std::size_t e = chain.events.size(); e-- > 0;) {
    const auto& ev = chain.events[e];
    if (!ev.is_update) {
      dinputs[ev.row] = std::move(drows.back());
      drows.pop_back();
      continue;
    }
    const Tensor dm = stack_rows(drows);
    const Tensor din = ev.kind == StrategyKind::eaus
                           ? eaus_backward(ev.eaus, model.eaus, dm, grad.eaus)
                           : lt_backward(ev.lt_input, model.lt, ev.active, dm, grad.lt);
    for (std::size_t i = 0; i < drows.size(); ++i)
      drows[i].assign(din.data() + i * d, din.data() + (i + 1) * d);
  }
  return dinputs;
}

std::span<const double> row_of(const Tensor& m, std::size_t i) {
  return {m.data() + i * m.dim(1), m.dim(1)};
}

}  // namespace

double episode_loss(const Model& model, const Episode& ep, const PipelineOptions& opt, Model* grad) {
  const std::size_t n = ep.classes.size();
  if (n == 0) throw Error("episode has no classes");
  if (ep.targets.empty()) throw Error("episode has no target classes");
  const std::size_t dim = model.embed_dim();
  std::vector<int> sessions(n);
  for (std::size_t k = 0; k < n; ++k) {
    sessions[k] = ep.classes[k].session;
    if (k && sessions[k] < sessions[k - 1]) throw Error("episode sessions must be non-decreasing");
  }
  auto index_of = [&](int cid) {
    for (std::size_t k = 0; k < n; ++k)
      if (ep.classes[k].support.class_id == cid) return k;
    throw Error("episode target class " + std::to_string(cid) + " has no support");
  };

  struct SupportPass {
    FeatExtTrace ft;
    Tensor masked;
    BinaryMask cells;
    std::vector<double> pooled;
    CimTrace cim;
  };
  std::vector<SupportPass> sp(n);
  std::vector<std::vector<double>> cat_in(n), hyp_in(n);
  for (std::size_t k = 0; k < n; ++k) {
    const Sample& s = ep.classes[k].support;
    Embedding ec_raw;
    if (ep.classes[k].ec_raw) {
      ec_raw = *ep.classes[k].ec_raw;
    } else {
      const FeatureMap fmap = extract_features(s.image, model.featext, &sp[k].ft);
      sp[k].masked = mask_features(fmap, s.mask);
      sp[k].cells = downsample_mask(s.mask, s.mask.height / fmap.dim(1));
      sp[k].pooled = pyramid_pool(sp[k].masked, sp[k].cells);
      ec_raw = Embedding{affine(sp[k].pooled, model.featext.projection)};
    }
    const AlignedPair al = cim_align(ep.classes[k].hyper_raw, ec_raw, model.cim, &sp[k].cim);
    cat_in[k] = al.category.values;
    hyp_in[k] = al.hyper.values;
  }
  const Chain cat_chain = run_chain(cat_in, sessions, model, opt, updates_category(opt.setting));
  const Chain hyp_chain = run_chain(hyp_in, sessions, model, opt, updates_hyper(opt.setting));

  FeatExtTrace qtrace;
  const FeatureMap qmap =
      ep.query_features ? *ep.query_features : extract_features(ep.query.image, model.featext, &qtrace);
  const std::size_t factor = ep.query.image.height() / qmap.dim(1);
  const BinaryMask empty_target(ep.query.mask.height, ep.query.mask.width, 0);

  Tensor dqmap(qmap.shape());
  Tensor dcat(cat_chain.out.shape()), dhyp(hyp_chain.out.shape());
  const bool use_c = uses_category(opt.setting), use_h = uses_hyper(opt.setting);
  const double scale = 1.0 / static_cast<double>(ep.targets.size());
  double loss = 0.0;
  for (int cid : ep.targets) {
    const std::size_t k = index_of(cid);
    const auto cat = use_c ? row_of(cat_chain.out, k) : std::span<const double>{};
    const auto hyp = use_h ? row_of(hyp_chain.out, k) : std::span<const double>{};
    CompareTrace ct;
    const DenseFeat feat = dense_compare(qmap, cat, hyp, model.casm, &ct);
    std::vector<RefineTrace> traces;
    const ConfidenceMap m = segment_class(feat, opt.iterations, model.casm, &traces);
    const Tensor up = upsample_bilinear(m, factor);
    const BinaryMask& target = cid == ep.query.class_id ? ep.query.mask : empty_target;
    Tensor dup;
    loss += scale * bce_loss(up, target, grad ? &dup : nullptr);
    if (!grad) continue;
    for (auto& v : dup.values()) v *= scale;
    const Tensor dm = upsample_bilinear_backward(dup, factor);
    const Tensor dfeat = segment_class_backward(traces, model.casm, dm, grad->casm);
    const DenseGrads dg =
        dense_compare_backward(ct, model.casm, qmap.dim(0), dim, dfeat, grad->casm);
    axpy(1.0, dg.dqmap, dqmap);
    for (std::size_t j = 0; j < dim; ++j) {
      if (use_c) dcat[k * dim + j] += dg.dcategory[j];
      if (use_h) dhyp[k * dim + j] += dg.dhyper[j];
    }
  }
  if (!grad) return loss;

  if (!ep.query_features) extract_features_backward(qtrace, model.featext, dqmap, grad->featext);
  const auto dcat_in = chain_backward(cat_chain, model, dcat, *grad);
  const auto dhyp_in = chain_backward(hyp_chain, model, dhyp, *grad);
  for (std::size_t k = 0; k < n; ++k) {
    const auto [deh_raw, dec_raw] = cim_align_backward(sp[k].cim, model.cim, dhyp_in[k], dcat_in[k], grad->cim);
    (void)deh_raw;  // hyper-class input is a clustering result, held constant
    if (ep.classes[k].ec_raw) continue;
    const auto dpooled = affine_backward(sp[k].pooled, model.featext.projection, dec_raw,
                                         grad->featext.projection);
    Tensor dfmap = pyramid_pool_backward(sp[k].masked, sp[k].cells, dpooled);
    const std::size_t hw = sp[k].cells.values.size();
    for (std::size_t c = 0; c < dfmap.dim(0); ++c)
      for (std::size_t j = 0; j < hw; ++j)
        if (!sp[k].cells.values[j]) dfmap[c * hw + j] = 0.0;
    extract_features_backward(sp[k].ft, model.featext, dfmap, grad->featext);
  }
  return loss;
}

// ---------------------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, const Model& like)
    : kind_(kind), m_(like.zeros_like()), v_(like.zeros_like()) {}

void Optimizer::step(Model& model, Model& grad, double lr, const std::vector<ParamGroup>& groups) {
  ++t_;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto g : groups) {
    auto ps = group_tensors(model, g);
    auto gs = group_tensors(grad, g);
    auto ms = group_tensors(m_, g);
    auto vs = group_tensors(v_, g);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Tensor& p = *ps[i];
      const Tensor& gr = *gs[i];
      if (kind_ == OptimizerKind::sgd) {
        axpy(-lr, gr, p);
        continue;
      }
      Tensor& m = *ms[i];
      Tensor& v = *vs[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (1 - b1) * gr[j];
        v[j] = b2 * v[j] + (1 - b2) * gr[j] * gr[j];
        p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
  }
}

double train_step(Model& model, Optimizer& opt, const Episode& ep, const PipelineOptions& options,
                  double lr, const std::vector<ParamGroup>& groups) {
  Model grad = model.zeros_like();
  const double loss = episode_loss(model, ep, options, &grad);
  if (!std::isfinite(loss)) {
    throw NumericError("train_step: non-finite loss on query of class " +
                       std::to_string(ep.query.class_id));
  }
  for (Tensor* t : all_tensors(grad)) {
    if (!t->all_finite()) {
      throw NumericError("train_step: non-finite gradient on query of class " +
                         std::to_string(ep.query.class_id) + " (loss " + std::to_string(loss) + ")");
    }
  }
  opt.step(model, grad, lr, groups);
  return loss;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kModelMagic[4] = {'E', 'H', 'M', 'D'};
constexpr std::uint32_t kModelVersion = 1;

// Every parameter slot, including absent biases, in stream order.
template <typename M>
auto model_slots(M& m) {
  using T = std::conditional_t<std::is_const_v<M>, const Tensor*, Tensor*>;
  std::vector<T> out;
  auto aff = [&](auto& a) {
    out.push_back(&a.weight);
    out.push_back(&a.bias);
  };
  auto conv = [&](auto& c) {
    out.push_back(&c.kernels);
    out.push_back(&c.bias);
  };
  for (auto& s : m.featext.stages) conv(s.conv);
  aff(m.featext.projection);
  for (auto* b : {&m.cim.hyper, &m.cim.category}) {
    aff(b->fc1);
    aff(b->fc2);
  }
  aff(m.eaus.phi);
  aff(m.eaus.psi);
  aff(m.eaus.w);
  aff(m.lt);
  conv(m.casm.compare_conv);
  conv(m.casm.inner_conv);
  for (auto& a : m.casm.aspp) conv(a);
  aff(m.casm.head);
  return out;
}

std::uint32_t get_u32(std::istream& is) { return binio::get_le<std::uint32_t>(is, "model file"); }

}  // namespace

void write_model(std::ostream& os, const Model& m) {
  using binio::put_le;
  os.write(kModelMagic, 4);
  put_le<std::uint32_t>(os, kModelVersion);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.featext.stages.size()));
  for (const auto& s : m.featext.stages) {
    put_le<std::uint8_t>(os, s.activation == Activation::relu ? 0 : 1);
    put_le<std::uint8_t>(os, s.pool ? 1 : 0);
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.conv.dilation));
  }
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.casm.compare_conv.dilation));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(m.casm.inner_conv.dilation));
  for (const auto& a : m.casm.aspp) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(a.dilation));
  put_le<std::uint64_t>(os, m.casm.iterations);
  for (const Tensor* t : model_slots(m)) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t->empty() ? 0 : t->rank()));
    if (t->empty()) continue;
    for (auto e : t->shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    for (double v : t->values()) put_le<double>(os, v);
  }
}

Model read_model(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0) {
    throw Error("not a model file (bad magic)");
  }
  const auto version = get_u32(is);
  if (version != kModelVersion) throw Error("unsupported model file version " + std::to_string(version));
  Model m;
  m.featext.stages.resize(get_u32(is));
  for (auto& s : m.featext.stages) {
    s.activation = binio::get_le<std::uint8_t>(is, "model file") == 0 ? Activation::relu : Activation::identity;
    s.pool = binio::get_le<std::uint8_t>(is, "model file") != 0;
    s.conv.dilation = get_u32(is);
  }
  m.casm.compare_conv.dilation = get_u32(is);
  m.casm.inner_conv.dilation = get_u32(is);
  for (auto& a : m.casm.aspp) a.dilation = get_u32(is);
  m.casm.iterations = binio::get_le<std::uint64_t>(is, "model file");
  for (Tensor* t : model_slots(m)) {
    const auto rank = get_u32(is);
    if (rank == 0) continue;
    if (rank > 4) throw Error("model file: implausible tensor rank " + std::to_string(rank));
    std::vector<std::size_t> shape(rank);
    for (auto& e : shape) e = get_u32(is);
    Tensor x(shape);
    for (auto& v : x.values()) v = binio::get_le<double>(is, "model file");
    *t = std::move(x);
  }
  m.featext.validate();
  return m;
}

void save_model(const std::string& path, const Model& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_model(os, m);
}

Model load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path);
  return read_model(is);
}

}  // namespace ehnet
