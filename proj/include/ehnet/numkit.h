#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ehnet {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or extent mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A function evaluated to NaN/Inf where a finite value was required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

/// Dense row-major array of doubles. Extents are always positive.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D and 3-D element access, no bounds checks.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  double& at(std::size_t ch, std::size_t y, std::size_t x) {
    return data_[(ch * shape_[1] + y) * shape_[2] + x];
  }
  double at(std::size_t ch, std::size_t y, std::size_t x) const {
    return data_[(ch * shape_[1] + y) * shape_[2] + x];
  }

  void fill(double v);
  bool all_finite() const;

  /// Bitwise equality of shape and data.
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

/// out += scale * in, shapes must match.
void axpy(double scale, const Tensor& in, Tensor& out);

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

/// Derive an independent stream seed from a parent seed and a tag sequence.
std::uint64_t derive_seed(std::uint64_t parent, std::initializer_list<std::uint64_t> tags);

double uniform(Rng& rng, double lo, double hi);
void fill_uniform(Tensor& t, Rng& rng, double lo, double hi);

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// y = W x + b. An empty bias tensor means the map has no bias term.
struct AffineParams {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out] or empty

  std::size_t in_dim() const { return weight.dim(1); }
  std::size_t out_dim() const { return weight.dim(0); }
  bool has_bias() const { return !bias.empty(); }

  static AffineParams zeros(std::size_t out, std::size_t in, bool with_bias = true);
  static AffineParams identity(std::size_t n, bool with_bias = false);
  /// Uniform in [-1/sqrt(in), 1/sqrt(in)].
  static AffineParams init(std::size_t out, std::size_t in, Rng& rng, bool with_bias = true);

  friend bool operator==(const AffineParams&, const AffineParams&) = default;
};

/// 3x3 kernels, stride 1, zero padding equal to the dilation (shape preserving).
struct ConvParams {
  Tensor kernels;  // [out x in x 3 x 3]
  Tensor bias;     // [out]
  std::size_t dilation = 1;

  std::size_t in_channels() const { return kernels.dim(1); }
  std::size_t out_channels() const { return kernels.dim(0); }

  static ConvParams zeros(std::size_t out, std::size_t in, std::size_t dilation = 1);
  static ConvParams init(std::size_t out, std::size_t in, Rng& rng, std::size_t dilation = 1);

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

std::vector<double> affine(std::span<const double> x, const AffineParams& p);

/// Accumulates dW, db into `grad` and returns dx.
std::vector<double> affine_backward(std::span<const double> x, const AffineParams& p,
                                    std::span<const double> dy, AffineParams& grad);

Tensor conv3x3(const Tensor& fmap, const ConvParams& p);

/// Accumulates kernel/bias gradients into `grad`; returns d(fmap).
Tensor conv3x3_backward(const Tensor& fmap, const ConvParams& p, const Tensor& dout,
                        ConvParams& grad);

std::vector<double> softmax(std::span<const double> v);
std::vector<double> softmax_backward(std::span<const double> y, std::span<const double> dy);

double sigmoid(double x);
std::vector<double> sigmoid(std::span<const double> v);
/// Gradient given the forward output y = sigmoid(x).
std::vector<double> sigmoid_backward(std::span<const double> y, std::span<const double> dy);

Tensor relu(const Tensor& t);

/// Records the sign pattern of every relu input evaluated on this thread
/// while alive. Used by gradient checks to detect steps that cross a kink.
class KinkProbe {
 public:
  KinkProbe();
  ~KinkProbe();
  KinkProbe(const KinkProbe&) = delete;
  KinkProbe& operator=(const KinkProbe&) = delete;

  void clear() { pattern_.clear(); }
  const std::vector<bool>& pattern() const { return pattern_; }

  static void record(std::span<const double> preact);

 private:
  std::vector<bool> pattern_;
  KinkProbe* previous_;
};

/// Zeroes gradient where the forward output was not positive.
Tensor relu_backward(const Tensor& out, const Tensor& dout);

/// 2x2 average pooling over the last two axes of a [C x H x W] tensor.
Tensor avg_pool2(const Tensor& fmap);
Tensor avg_pool2_backward(const Tensor& dout);

// ---------------------------------------------------------------------------
// Gradient oracle
// ---------------------------------------------------------------------------

/// Central finite differences, one coordinate at a time.
Tensor fd_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
};

/// Compares an analytic gradient against central differences of `f` at `x`.
/// Coordinates whose +/-h step changes any relu sign pattern are skipped and
/// counted. `coords` selects the coordinates to test; empty means all.
GradCheckResult check_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               const Tensor& analytic, double h,
                               std::span<const std::size_t> coords = {});

/// max_k |a_k - b_k| / max(|a_k|, |b_k|, floor)
double max_relative_error(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-6);

}  // namespace ehnet
