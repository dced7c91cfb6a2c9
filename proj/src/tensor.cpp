#include "idforget/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "idforget/errors.hpp"

namespace idf {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_string(shape));
  }
}

void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": size mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_string(shape_));
  }
}

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) { return vector(std::vector<double>(values)); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::stack(std::span<const Tensor> rows) {
  if (rows.empty()) throw ShapeError("cannot stack an empty list of rows");
  const std::size_t n = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw ShapeError("stack: rows have different lengths");
    data.insert(data.end(), r.values().begin(), r.values().end());
  }
  return matrix(rows.size(), n, std::move(data));
}

std::size_t Tensor::rows() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? 1 : shape_[0];
}

std::size_t Tensor::cols() const noexcept {
  if (shape_.empty()) return 0;
  return shape_.size() == 1 ? shape_[0] : data_.size() / shape_[0];
}

Tensor Tensor::row(std::size_t r) const {
  const std::size_t n = cols();
  return vector(std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(r * n),
                                    data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * n)));
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

Tensor Tensor::as_matrix() const { return matrix(rows(), cols(), data_); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

void Tensor::fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

Tensor operator+(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

Tensor operator-(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

Tensor operator*(double k, const Tensor& a) {
  Tensor out = a;
  for (double& x : out.values()) x *= k;
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

double squared_distance(const Tensor& a, const Tensor& b) {
  require_same_size(a, b, "squared_distance");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double mean_squared_error(const Tensor& a, const Tensor& b) {
  return squared_distance(a, b) / static_cast<double>(a.size());
}

void require_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericalError("non-finite value in " + what);
}

}  // namespace idf
