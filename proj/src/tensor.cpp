#include "medthink/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "medthink/errors.hpp"

namespace medthink {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size())
    throw DimensionError("shape " + shape_string(shape_) + " does not match " +
                         std::to_string(data_.size()) + " values");
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

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.size() <= 1) return 1;
  return shape_[0];
}

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return 1;
  if (shape_.size() == 1) return shape_[0];
  return data_.size() / shape_[0];
}

std::span<double> Tensor::grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
  return *grad_;
}

std::span<const double> Tensor::grad() const {
  if (!grad_) return {};
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

namespace {

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_string(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ for " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()));
  const std::size_t p = a.rows(), q = a.cols(), r = b.cols();
  Tensor out({p, r});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < p; ++i) {
    double* crow = C + i * r;
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = A[i * q + k];
      if (aik == 0.0) continue;
      const double* brow = B + k * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: inner dimensions differ for " +
                         shape_string(a.shape()) + " and " + shape_string(b.shape()) + "^T");
  const std::size_t p = a.rows(), q = a.cols(), r = b.rows();
  Tensor out({p, r});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < r; ++j) {
      double s = 0.0;
      const double* arow = A + i * q;
      const double* brow = B + j * q;
      for (std::size_t k = 0; k < q; ++k) s += arow[k] * brow[k];
      C[i * r + j] = s;
    }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  if (a.rows() != b.rows())
    throw DimensionError("matmul_tn: inner dimensions differ for " +
                         shape_string(a.shape()) + "^T and " + shape_string(b.shape()));
  const std::size_t q = a.rows(), p = a.cols(), r = b.cols();
  Tensor out({p, r});
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out.data().data();
  for (std::size_t k = 0; k < q; ++k) {
    const double* brow = B + k * r;
    for (std::size_t i = 0; i < p; ++i) {
      const double aki = A[k * p + i];
      if (aki == 0.0) continue;
      double* crow = C + i * r;
      for (std::size_t j = 0; j < r; ++j) crow[j] += aki * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t p = x.rows(), q = x.cols();
  for (std::size_t i = 0; i < p; ++i) {
    const double* in = x.data().data() + i * q;
    double* o = out.data().data() + i * q;
    const double mx = *std::max_element(in, in + q);
    double total = 0.0;
    for (std::size_t j = 0; j < q; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < q; ++j) o[j] /= total;
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigmoid(x[i]);
  return out;
}

}  // namespace medthink
