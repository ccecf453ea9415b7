#include "spd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <limits>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace spd {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return 1;
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return shape_[0];
  return data_.size() / shape_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::transposed() const {
  Tensor out({cols(), rows()});
  for (std::size_t i = 0; i < rows(); ++i)
    for (std::size_t j = 0; j < cols(); ++j) out(j, i) = (*this)(i, j);
  return out;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace kernels {

namespace {

void check_matmul(const Tensor& a, const Tensor& b, bool ta, bool tb, std::size_t& m,
                  std::size_t& n) {
  const std::size_t ak = ta ? a.rows() : a.cols();
  const std::size_t bk = tb ? b.cols() : b.rows();
  if (ak != bk) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) +
                         (ta ? "^T" : "") + " x " + shape_str(b.shape()) + (tb ? "^T" : ""));
  }
  m = ta ? a.cols() : a.rows();
  n = tb ? b.rows() : b.cols();
}

}  // namespace

void matmul_acc(Tensor& out, const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  std::size_t m = 0, n = 0;
  check_matmul(a, b, trans_a, trans_b, m, n);
  if (out.rows() != m || out.cols() != n) throw DimensionError("matmul_acc output shape");
  ConstMap A(a.raw(), a.rows(), a.cols());
  ConstMap B(b.raw(), b.rows(), b.cols());
  MutMap C(out.raw(), m, n);
  if (trans_a && trans_b) {
    C.noalias() += A.transpose() * B.transpose();
  } else if (trans_a) {
    C.noalias() += A.transpose() * B;
  } else if (trans_b) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() += A * B;
  }
}

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  std::size_t m = 0, n = 0;
  check_matmul(a, b, trans_a, trans_b, m, n);
  Tensor out({m, n});
  matmul_acc(out, a, b, trans_a, trans_b);
  return out;
}

void softmax_row(std::span<const double> in, std::span<double> out, std::size_t valid) {
  valid = std::min(valid, in.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < valid; ++j) mx = std::max(mx, in[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < valid; ++j) {
    out[j] = std::exp(in[j] - mx);
    sum += out[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < valid; ++j) out[j] *= inv;
  for (std::size_t j = valid; j < in.size(); ++j) out[j] = 0.0;
}

namespace {
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;
}  // namespace

double gelu(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  const double th = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  Tensor* xhat, std::vector<double>* inv_std) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm affine size");
  Tensor out({n, d});
  if (xhat) *xhat = Tensor({n, d});
  if (inv_std) inv_std->assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    if (inv_std) (*inv_std)[i] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (r[j] - mean) * is;
      if (xhat) (*xhat)(i, j) = h;
      out(i, j) = h * gamma[j] + beta[j];
    }
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double frobenius(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

}  // namespace kernels

std::uint64_t fnv1a(std::span<const std::byte> bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (std::byte b : bytes) {
    h ^= static_cast<std::uint64_t>(b);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t checksum(const Tensor& t, std::uint64_t seed) {
  return fnv1a(std::as_bytes(std::span(t.data())), seed);
}

}  // namespace spd
