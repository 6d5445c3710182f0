#include "ehnet/casm.h"

#include <algorithm>
#include <cmath>

namespace ehnet {

CasmParams CasmParams::zeros(std::size_t channels, std::size_t aspp_channels, double head_bias) {
  CasmParams p;
  p.compare_conv = ConvParams::zeros(channels, channels);
  p.inner_conv = ConvParams::zeros(channels, channels + 1);
  for (std::size_t i = 0; i < p.aspp.size(); ++i)
    p.aspp[i] = ConvParams::zeros(aspp_channels, channels, kAsppDilations[i]);
  p.head = AffineParams::zeros(1, aspp_channels);
  p.head.bias[0] = head_bias;
  return p;
}

// Objects cover a small part of each frame; start the head near that prior.
constexpr double kHeadPriorLogit = -2.0;

CasmParams CasmParams::init(std::size_t channels, std::size_t aspp_channels, Rng& rng) {
  CasmParams p;
  p.compare_conv = ConvParams::init(channels, channels, rng);
  p.inner_conv = ConvParams::init(channels, channels + 1, rng);
  for (std::size_t i = 0; i < p.aspp.size(); ++i)
    p.aspp[i] = ConvParams::init(aspp_channels, channels, rng, kAsppDilations[i]);
  p.head = AffineParams::init(1, aspp_channels, rng);
  // A full-scale head can start far from the prior and kill the ReLUs below it.
  for (double& v : p.head.weight.values()) v *= 0.1;
  p.head.bias[0] = kHeadPriorLogit;
  return p;
}

// ---------------------------------------------------------------------------

DenseFeat dense_compare(const FeatureMap& qmap, std::span<const double> category,
                        std::span<const double> hyper, const CasmParams& p,
                        CompareTrace* trace) {
  if (qmap.rank() != 3) throw DimensionError("dense_compare: query map must be [C x H x W]");
  const std::size_t c = qmap.dim(0), h = qmap.dim(1), w = qmap.dim(2), hw = h * w;
  const std::size_t dim = std::max(category.size(), hyper.size());
  if ((!category.empty() && category.size() != dim) || (!hyper.empty() && hyper.size() != dim)) {
    throw DimensionError("dense_compare: category and hyper-class embeddings differ in dimension");
  }
  if (c + 2 * dim != p.channels()) {
    throw DimensionError("dense_compare: " + std::to_string(c) + " query channels + 2x" +
                         std::to_string(dim) + " embedding channels do not match the block's " +
                         std::to_string(p.channels()));
  }
  Tensor concat({p.channels(), h, w});
  std::copy(qmap.data(), qmap.data() + c * hw, concat.data());
  double* out = concat.data() + c * hw;
  for (std::size_t k = 0; k < category.size(); ++k) std::fill(out + k * hw, out + (k + 1) * hw, category[k]);
  out += dim * hw;
  for (std::size_t k = 0; k < hyper.size(); ++k) std::fill(out + k * hw, out + (k + 1) * hw, hyper[k]);

  Tensor act = relu(conv3x3(concat, p.compare_conv));
  DenseFeat feat = concat;
  axpy(1.0, act, feat);
  if (trace) *trace = {std::move(concat), std::move(act)};
  return feat;
}

DenseFeat dense_compare(const FeatureMap& qmap, const ClassRecord& record, const CasmParams& p) {
  return dense_compare(qmap, record.category().values, record.hyper().values, p);
}

DenseGrads dense_compare_backward(const CompareTrace& trace, const CasmParams& p,
                                  std::size_t feat_channels, std::size_t dim,
                                  const Tensor& dfeat, CasmParams& grad) {
  Tensor dconcat = dfeat;
  const Tensor dpre = relu_backward(trace.activated, dfeat);
  axpy(1.0, conv3x3_backward(trace.concat, p.compare_conv, dpre, grad.compare_conv), dconcat);
  const std::size_t h = dfeat.dim(1), w = dfeat.dim(2), hw = h * w;
  DenseGrads g;
  g.dqmap = Tensor({feat_channels, h, w});
  std::copy(dconcat.data(), dconcat.data() + feat_channels * hw, g.dqmap.data());
  g.dcategory.assign(dim, 0.0);
  g.dhyper.assign(dim, 0.0);
  const double* src = dconcat.data() + feat_channels * hw;
  for (std::size_t k = 0; k < dim; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += src[k * hw + j];
    g.dcategory[k] = s;
  }
  src += dim * hw;
  for (std::size_t k = 0; k < dim; ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < hw; ++j) s += src[k * hw + j];
    g.dhyper[k] = s;
  }
  return g;
}

// ---------------------------------------------------------------------------

ConfidenceMap refine_step(const DenseFeat& feat, const ConfidenceMap& mask, const CasmParams& p,
                          RefineTrace* trace) {
  if (feat.rank() != 3 || feat.dim(0) != p.channels()) {
    throw DimensionError("refine_step: dense features must have " + std::to_string(p.channels()) +
                         " channels");
  }
  const std::size_t c = feat.dim(0), h = feat.dim(1), w = feat.dim(2), hw = h * w;
  if (mask.rank() != 2 || mask.dim(0) != h || mask.dim(1) != w) {
    throw DimensionError("refine_step: mask extents " + shape_string(mask.shape()) +
                         " differ from feature grid " + std::to_string(h) + "x" + std::to_string(w));
  }
  RefineTrace t;
  t.input = Tensor({c + 1, h, w});
  std::copy(feat.data(), feat.data() + c * hw, t.input.data());
  std::copy(mask.data(), mask.data() + hw, t.input.data() + c * hw);
  t.inner = relu(conv3x3(t.input, p.inner_conv));
  t.combined = feat;
  axpy(1.0, t.inner, t.combined);
  const std::size_t a = p.head.in_dim();
  t.pooled = Tensor({a, h, w});
  for (std::size_t b = 0; b < p.aspp.size(); ++b) {
    t.branches[b] = relu(conv3x3(t.combined, p.aspp[b]));
    axpy(1.0, t.branches[b], t.pooled);
  }
  t.out = Tensor({h, w});
  for (std::size_t j = 0; j < hw; ++j) {
    double z = p.head.bias[0];
    for (std::size_t k = 0; k < a; ++k) z += p.head.weight[k] * t.pooled[k * hw + j];
    t.out[j] = sigmoid(z);
  }
  ConfidenceMap out = t.out;
  if (trace) *trace = std::move(t);
  return out;
}

ConfidenceMap refine_step_backward(const RefineTrace& t, const CasmParams& p,
                                   const ConfidenceMap& dout, CasmParams& grad, Tensor& dfeat) {
  const std::size_t c = p.channels(), h = t.out.dim(0), w = t.out.dim(1), hw = h * w;
  const std::size_t a = p.head.in_dim();
  Tensor dpooled({a, h, w});
  for (std::size_t j = 0; j < hw; ++j) {
    const double dz = dout[j] * t.out[j] * (1.0 - t.out[j]);
    grad.head.bias[0] += dz;
    for (std::size_t k = 0; k < a; ++k) {
      grad.head.weight[k] += dz * t.pooled[k * hw + j];
      dpooled[k * hw + j] = dz * p.head.weight[k];
    }
  }
  Tensor dcombined({c, h, w});
  for (std::size_t b = 0; b < p.aspp.size(); ++b) {
    const Tensor dpre = relu_backward(t.branches[b], dpooled);
    axpy(1.0, conv3x3_backward(t.combined, p.aspp[b], dpre, grad.aspp[b]), dcombined);
  }
  axpy(1.0, dcombined, dfeat);
  const Tensor dinner = relu_backward(t.inner, dcombined);
  const Tensor dinput = conv3x3_backward(t.input, p.inner_conv, dinner, grad.inner_conv);
  double* df = dfeat.data();
  for (std::size_t j = 0; j < c * hw; ++j) df[j] += dinput[j];
  ConfidenceMap dmask({h, w});
  std::copy(dinput.data() + c * hw, dinput.data() + (c + 1) * hw, dmask.data());
  return dmask;
}

ConfidenceMap segment_class(const DenseFeat& feat, std::size_t iterations, const CasmParams& p,
                            std::vector<RefineTrace>* traces) {
  if (feat.rank() != 3) throw DimensionError("segment_class: dense features must be [C x H x W]");
  ConfidenceMap m({feat.dim(1), feat.dim(2)});
  if (traces) traces->assign(iterations + 1, RefineTrace{});
  for (std::size_t t = 0; t <= iterations; ++t)
    m = refine_step(feat, m, p, traces ? &(*traces)[t] : nullptr);
  return m;
}

Tensor segment_class_backward(const std::vector<RefineTrace>& traces, const CasmParams& p,
                              const ConfidenceMap& dout, CasmParams& grad) {
  const auto& first = traces.front().input;
  Tensor dfeat({p.channels(), first.dim(1), first.dim(2)});
  ConfidenceMap dm = dout;
  for (std::size_t t = traces.size(); t-- > 0;) dm = refine_step_backward(traces[t], p, dm, grad, dfeat);
  return dfeat;
}

// ---------------------------------------------------------------------------

LabelMap nms_fuse(const std::map<int, ConfidenceMap>& conf, double tau) {
  if (conf.empty()) throw Error("nms_fuse: no classes to fuse");
  const auto& ref = conf.begin()->second;
  if (ref.rank() != 2) throw DimensionError("nms_fuse: confidence maps must be [H x W]");
  for (const auto& [id, m] : conf) {
    if (m.shape() != ref.shape()) {
      throw DimensionError("nms_fuse: confidence map of class " + std::to_string(id) +
                           " has extents " + shape_string(m.shape()));
    }
  }
  LabelMap out(ref.dim(0), ref.dim(1));
  for (std::size_t j = 0; j < out.labels.size(); ++j) {
    int best = LabelMap::kBackground;
    double bv = -1.0;
    for (const auto& [id, m] : conf) {
      if (m[j] > bv) {
        bv = m[j];
        best = id;
      }
    }
    out.labels[j] = bv >= tau ? best : LabelMap::kBackground;
  }
  return out;
}

namespace {

struct Taps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

Taps bilinear_taps(std::size_t n, std::size_t factor) {
  Taps t;
  const std::size_t big = n * factor;
  for (std::size_t i = 0; i < big; ++i) {
    double src = (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    t.lo.push_back(lo);
    t.hi.push_back(std::min(lo + 1, n - 1));
    t.frac.push_back(src - static_cast<double>(lo));
  }
  return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& map, std::size_t factor) {
  if (map.rank() != 2 || factor == 0) throw DimensionError("upsample_bilinear expects an [H x W] map");
  const std::size_t h = map.dim(0), w = map.dim(1);
  const Taps ty = bilinear_taps(h, factor), tx = bilinear_taps(w, factor);
  Tensor out({h * factor, w * factor});
  for (std::size_t y = 0; y < h * factor; ++y) {
    const double fy = ty.frac[y];
    for (std::size_t x = 0; x < w * factor; ++x) {
      const double fx = tx.frac[x];
      const double top = (1 - fx) * map.at(ty.lo[y], tx.lo[x]) + fx * map.at(ty.lo[y], tx.hi[x]);
      const double bot = (1 - fx) * map.at(ty.hi[y], tx.lo[x]) + fx * map.at(ty.hi[y], tx.hi[x]);
      out.at(y, x) = (1 - fy) * top + fy * bot;
    }
  }
  return out;
}

Tensor upsample_bilinear_backward(const Tensor& dout, std::size_t factor) {
  const std::size_t h = dout.dim(0) / factor, w = dout.dim(1) / factor;
  const Taps ty = bilinear_taps(h, factor), tx = bilinear_taps(w, factor);
  Tensor d({h, w});
  for (std::size_t y = 0; y < h * factor; ++y) {
    const double fy = ty.frac[y];
    for (std::size_t x = 0; x < w * factor; ++x) {
      const double fx = tx.frac[x];
      const double g = dout.at(y, x);
      d.at(ty.lo[y], tx.lo[x]) += (1 - fy) * (1 - fx) * g;
      d.at(ty.lo[y], tx.hi[x]) += (1 - fy) * fx * g;
      d.at(ty.hi[y], tx.lo[x]) += fy * (1 - fx) * g;
      d.at(ty.hi[y], tx.hi[x]) += fy * fx * g;
    }
  }
  return d;
}

double bce_loss(const Tensor& pred, const BinaryMask& target, Tensor* dpred) {
  if (pred.rank() != 2 || pred.dim(0) != target.height || pred.dim(1) != target.width) {
    throw DimensionError("bce_loss: prediction and target extents differ");
  }
  constexpr double eps = 1e-12;
  const double n = static_cast<double>(pred.size());
  double loss = 0.0;
  if (dpred) *dpred = Tensor(pred.shape());
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const double p = std::clamp(pred[j], eps, 1.0 - eps);
    const double y = target.values[j];
    loss -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
    if (dpred) (*dpred)[j] = (p - y) / (p * (1.0 - p)) / n;
  }
  loss /= n;
  if (!std::isfinite(loss)) throw NumericError("bce_loss: non-finite loss");
  return loss;
}

}  // namespace ehnet
