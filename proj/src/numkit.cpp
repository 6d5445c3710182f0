#include "ehnet/numkit.h"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <sstream>

namespace ehnet {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    n *= e;
  }
  return n;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

thread_local KinkProbe* active_probe = nullptr;

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != product(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string(shape_));
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

void axpy(double scale, const Tensor& in, Tensor& out) {
  if (in.shape() != out.shape()) {
    throw DimensionError("axpy shape mismatch " + shape_string(in.shape()) + " vs " +
                         shape_string(out.shape()));
  }
  const double* a = in.data();
  double* b = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) b[i] += scale * a[i];
}

std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = splitmix64(parent);
  for (auto t : tags) h = splitmix64(h ^ splitmix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

double uniform(Rng& rng, double lo, double hi) {
  // 53 random bits; avoids implementation-defined distribution behaviour.
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.values()) v = uniform(rng, lo, hi);
}

// ---------------------------------------------------------------------------

AffineParams AffineParams::zeros(std::size_t out, std::size_t in, bool with_bias) {
  AffineParams p;
  p.weight = Tensor({out, in});
  if (with_bias) p.bias = Tensor({out});
  return p;
}

AffineParams AffineParams::identity(std::size_t n, bool with_bias) {
  AffineParams p = zeros(n, n, with_bias);
  for (std::size_t i = 0; i < n; ++i) p.weight.at(i, i) = 1.0;
  return p;
}

AffineParams AffineParams::init(std::size_t out, std::size_t in, Rng& rng, bool with_bias) {
  AffineParams p = zeros(out, in, with_bias);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  fill_uniform(p.weight, rng, -bound, bound);
  if (with_bias) fill_uniform(p.bias, rng, -bound, bound);
  return p;
}

ConvParams ConvParams::zeros(std::size_t out, std::size_t in, std::size_t dilation) {
  if (dilation == 0) throw DimensionError("conv dilation must be positive");
  ConvParams p;
  p.kernels = Tensor({out, in, 3, 3});
  p.bias = Tensor({out});
  p.dilation = dilation;
  return p;
}

ConvParams ConvParams::init(std::size_t out, std::size_t in, Rng& rng, std::size_t dilation) {
  ConvParams p = zeros(out, in, dilation);
  const double bound = std::sqrt(6.0 / static_cast<double>(in * 9));  // He-uniform
  fill_uniform(p.kernels, rng, -bound, bound);
  fill_uniform(p.bias, rng, -bound, bound);
  return p;
}

std::vector<double> affine(std::span<const double> x, const AffineParams& p) {
  const std::size_t m = p.out_dim();
  const std::size_t n = p.in_dim();
  if (x.size() != n) {
    throw DimensionError("affine expects input of length " + std::to_string(n) + ", got " +
                         std::to_string(x.size()));
  }
  if (p.has_bias() && p.bias.size() != m) throw DimensionError("affine bias length mismatch");
  std::vector<double> y(m, 0.0);
  const double* w = p.weight.data();
  for (std::size_t r = 0; r < m; ++r) {
    double acc = p.has_bias() ? p.bias[r] : 0.0;
    const double* row = w + r * n;
    for (std::size_t c = 0; c < n; ++c) acc += row[c] * x[c];
    y[r] = acc;
  }
  return y;
}

std::vector<double> affine_backward(std::span<const double> x, const AffineParams& p,
                                    std::span<const double> dy, AffineParams& grad) {
  const std::size_t m = p.out_dim();
  const std::size_t n = p.in_dim();
  if (x.size() != n || dy.size() != m) throw DimensionError("affine_backward extent mismatch");
  std::vector<double> dx(n, 0.0);
  const double* w = p.weight.data();
  double* gw = grad.weight.data();
  for (std::size_t r = 0; r < m; ++r) {
    const double g = dy[r];
    const double* row = w + r * n;
    double* grow = gw + r * n;
    for (std::size_t c = 0; c < n; ++c) {
      grow[c] += g * x[c];
      dx[c] += row[c] * g;
    }
    if (p.has_bias()) grad.bias[r] += g;
  }
  return dx;
}

// ---------------------------------------------------------------------------

namespace {

void check_conv_input(const Tensor& fmap, const ConvParams& p) {
  if (fmap.rank() != 3) throw DimensionError("conv3x3 expects a [C x H x W] map");
  if (p.kernels.rank() != 4 || p.kernels.dim(2) != 3 || p.kernels.dim(3) != 3) {
    throw DimensionError("conv3x3 kernels must be [out x in x 3 x 3]");
  }
  if (fmap.dim(0) != p.in_channels()) {
    throw DimensionError("conv3x3 channel mismatch: map has " + std::to_string(fmap.dim(0)) +
                         ", kernels expect " + std::to_string(p.in_channels()));
  }
}

using v4d = double __attribute__((vector_size(32)));

// C[M x N] += A[M x K] * B[K x N], all row-major and contiguous.
void gemm_acc(std::size_t m, std::size_t n, std::size_t k, const double* __restrict a,
              const double* __restrict b, double* __restrict c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      v4d acc[4][2] = {};
      for (std::size_t q = 0; q < k; ++q) {
        v4d b0, b1;
        std::memcpy(&b0, b + q * n + j, sizeof b0);
        std::memcpy(&b1, b + q * n + j + 4, sizeof b1);
        for (std::size_t r = 0; r < 4; ++r) {
          const double av = a[(i + r) * k + q];
          acc[r][0] += av * b0;
          acc[r][1] += av * b1;
        }
      }
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t t = 0; t < 8; ++t) c[(i + r) * n + j + t] += acc[r][t / 4][t % 4];
    }
    for (; j < n; ++j)
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t q = 0; q < k; ++q) s += a[(i + r) * k + q] * b[q * n + j];
        c[(i + r) * n + j] += s;
      }
  }
  for (; i < m; ++i)
    for (std::size_t q = 0; q < k; ++q) {
      const double av = a[i * k + q];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * b[q * n + j];
    }
}

std::vector<double> transpose(const double* x, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = x[r * cols + c];
  return t;
}

// Rows (channel, ky, kx), columns output pixels; out-of-range taps read zero.
std::vector<double> im2col(const Tensor& fmap, std::ptrdiff_t d) {
  const std::size_t cin = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2), hw = h * w;
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  std::vector<double> col(cin * 9 * hw, 0.0);
  for (std::size_t i = 0; i < cin; ++i)
    for (std::ptrdiff_t t = 0; t < 9; ++t) {
      const std::ptrdiff_t dy = (t / 3 - 1) * d, dx = (t % 3 - 1) * d;
      double* cp = col.data() + (i * 9 + static_cast<std::size_t>(t)) * hw;
      for (std::ptrdiff_t y = 0; y < sh; ++y) {
        const std::ptrdiff_t sy = y + dy;
        if (sy < 0 || sy >= sh) continue;
        const double* ip = fmap.data() + i * hw + static_cast<std::size_t>(sy * sw);
        for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, -dx); x < std::min(sw, sw - dx); ++x)
          cp[y * sw + x] = ip[x + dx];
      }
    }
  return col;
}

void col2im_add(const std::vector<double>& col, std::ptrdiff_t d, Tensor& out) {
  const std::size_t cin = out.dim(0), h = out.dim(1), w = out.dim(2), hw = h * w;
  const auto sh = static_cast<std::ptrdiff_t>(h), sw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t i = 0; i < cin; ++i)
    for (std::ptrdiff_t t = 0; t < 9; ++t) {
      const std::ptrdiff_t dy = (t / 3 - 1) * d, dx = (t % 3 - 1) * d;
      const double* cp = col.data() + (i * 9 + static_cast<std::size_t>(t)) * hw;
      for (std::ptrdiff_t y = 0; y < sh; ++y) {
        const std::ptrdiff_t sy = y + dy;
        if (sy < 0 || sy >= sh) continue;
        double* op = out.data() + i * hw + static_cast<std::size_t>(sy * sw);
        for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, -dx); x < std::min(sw, sw - dx); ++x)
          op[x + dx] += cp[y * sw + x];
      }
    }
}

}  // namespace

Tensor conv3x3(const Tensor& fmap, const ConvParams& p) {
  check_conv_input(fmap, p);
  const std::size_t cin = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2), hw = h * w;
  const std::size_t cout = p.out_channels();
  const std::vector<double> col = im2col(fmap, static_cast<std::ptrdiff_t>(p.dilation));
  Tensor out({cout, h, w});
  for (std::size_t o = 0; o < cout; ++o) std::fill(out.data() + o * hw, out.data() + (o + 1) * hw, p.bias[o]);
  gemm_acc(cout, hw, cin * 9, p.kernels.data(), col.data(), out.data());
  return out;
}

Tensor conv3x3_backward(const Tensor& fmap, const ConvParams& p, const Tensor& dout,
                        ConvParams& grad) {
  check_conv_input(fmap, p);
  const std::size_t cin = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2), hw = h * w;
  const std::size_t cout = p.out_channels();
  if (dout.rank() != 3 || dout.dim(0) != cout || dout.dim(1) != h || dout.dim(2) != w) {
    throw DimensionError("conv3x3_backward gradient shape mismatch");
  }
  const auto d = static_cast<std::ptrdiff_t>(p.dilation);
  const std::size_t r = cin * 9;
  for (std::size_t o = 0; o < cout; ++o) {
    const double* gp = dout.data() + o * hw;
    double bsum = 0.0;
    for (std::size_t j = 0; j < hw; ++j) bsum += gp[j];
    grad.bias[o] += bsum;
  }
  const std::vector<double> col_t = transpose(im2col(fmap, d).data(), r, hw);
  gemm_acc(cout, r, hw, dout.data(), col_t.data(), grad.kernels.data());
  const std::vector<double> k_t = transpose(p.kernels.data(), cout, r);
  std::vector<double> dcol(r * hw, 0.0);
  gemm_acc(r, hw, cout, k_t.data(), dout.data(), dcol.data());
  Tensor din({cin, h, w});
  col2im_add(dcol, d, din);
  return din;
}

// ---------------------------------------------------------------------------

std::vector<double> softmax(std::span<const double> v) {
  if (v.empty()) throw DimensionError("softmax of an empty vector");
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (auto& o : out) o /= sum;
  return out;
}

std::vector<double> softmax_backward(std::span<const double> y, std::span<const double> dy) {
  if (y.size() != dy.size()) throw DimensionError("softmax_backward extent mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * dy[i];
  std::vector<double> dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] * (dy[i] - dot);
  return dx;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> sigmoid(std::span<const double> v) {
  std::vector<double> out(v.size());
  std::transform(v.begin(), v.end(), out.begin(), [](double x) { return sigmoid(x); });
  return out;
}

std::vector<double> sigmoid_backward(std::span<const double> y, std::span<const double> dy) {
  if (y.size() != dy.size()) throw DimensionError("sigmoid_backward extent mismatch");
  std::vector<double> dx(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) dx[i] = dy[i] * y[i] * (1.0 - y[i]);
  return dx;
}

KinkProbe::KinkProbe() : previous_(active_probe) { active_probe = this; }
KinkProbe::~KinkProbe() { active_probe = previous_; }

void KinkProbe::record(std::span<const double> preact) {
  if (active_probe == nullptr) return;
  auto& pat = active_probe->pattern_;
  for (double v : preact) pat.push_back(v > 0.0);
}

Tensor relu(const Tensor& t) {
  KinkProbe::record(t.values());
  Tensor out = t;
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& out, const Tensor& dout) {
  if (out.shape() != dout.shape()) throw DimensionError("relu_backward shape mismatch");
  Tensor din = dout;
  for (std::size_t i = 0; i < din.size(); ++i)
    if (!(out[i] > 0.0)) din[i] = 0.0;
  return din;
}

Tensor avg_pool2(const Tensor& fmap) {
  if (fmap.rank() != 3 || fmap.dim(1) % 2 != 0 || fmap.dim(2) % 2 != 0) {
    throw DimensionError("avg_pool2 expects [C x H x W] with even H, W; got " +
                         shape_string(fmap.shape()));
  }
  const std::size_t c = fmap.dim(0), h = fmap.dim(1) / 2, w = fmap.dim(2) / 2;
  Tensor out({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out.at(ch, y, x) = 0.25 * (fmap.at(ch, 2 * y, 2 * x) + fmap.at(ch, 2 * y, 2 * x + 1) +
                                   fmap.at(ch, 2 * y + 1, 2 * x) +
                                   fmap.at(ch, 2 * y + 1, 2 * x + 1));
  return out;
}

Tensor avg_pool2_backward(const Tensor& dout) {
  const std::size_t c = dout.dim(0), h = dout.dim(1), w = dout.dim(2);
  Tensor din({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t x = 0; x < 2 * w; ++x) din.at(ch, y, x) = 0.25 * dout.at(ch, y / 2, x / 2);
  return din;
}

// ---------------------------------------------------------------------------

Tensor fd_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw Error("fd_grad step must be positive");
  Tensor probe = x;
  Tensor g(x.shape());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = probe[k];
    probe[k] = orig + h;
    const double fp = f(probe);
    probe[k] = orig - h;
    const double fm = f(probe);
    probe[k] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("fd_grad: non-finite function value at coordinate " + std::to_string(k));
    }
    g[k] = (fp - fm) / (2.0 * h);
  }
  return g;
}

GradCheckResult check_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               const Tensor& analytic, double h,
                               std::span<const std::size_t> coords) {
  if (analytic.size() != x.size()) throw DimensionError("check_gradient: gradient size mismatch");
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(x.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    coords = all;
  }
  GradCheckResult res;
  KinkProbe probe;
  f(x);
  const std::vector<bool> base = probe.pattern();
  Tensor xs = x;
  for (std::size_t k : coords) {
    const double orig = xs[k];
    probe.clear();
    xs[k] = orig + h;
    const double fp = f(xs);
    const bool same_p = probe.pattern() == base;
    probe.clear();
    xs[k] = orig - h;
    const double fm = f(xs);
    const bool same_m = probe.pattern() == base;
    xs[k] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("check_gradient: non-finite value at coordinate " + std::to_string(k));
    }
    if (!same_p || !same_m) {
      ++res.skipped_kinks;
      continue;
    }
    const double fd = (fp - fm) / (2.0 * h);
    const double a = analytic[k];
    res.max_rel_error = std::max(res.max_rel_error, max_relative_error({&a, 1}, {&fd, 1}));
    ++res.checked;
  }
  return res;
}

double max_relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  if (a.size() != b.size()) throw DimensionError("max_relative_error extent mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace ehnet
