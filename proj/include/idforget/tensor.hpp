#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace idf {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

// Dense row-major array of doubles.
//
// A 1-D tensor of length n behaves as a 1 x n matrix wherever a matrix is
// expected; tensors with more than two dimensions are viewed as
// shape[0] x (product of the rest).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor vector(std::vector<double> values);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  // Stacks equally sized 1-D tensors into a rows x n matrix.
  static Tensor stack(std::span<const Tensor> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }

  // Copy of row r as a 1-D tensor.
  Tensor row(std::size_t r) const;
  Tensor reshaped(Shape shape) const;
  // Same data viewed as rows() x cols().
  Tensor as_matrix() const;

  bool all_finite() const noexcept;
  void fill(double value) noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t element_count(const Shape& shape);

// Elementwise helpers for plain (non-differentiated) arithmetic. All of them
// require identical sizes and throw ShapeError otherwise.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(double k, const Tensor& a);
double dot(const Tensor& a, const Tensor& b);
double norm(const Tensor& a);
double squared_distance(const Tensor& a, const Tensor& b);
double mean_squared_error(const Tensor& a, const Tensor& b);

// Throws NumericalError naming `what` if any entry is NaN or infinite.
void require_finite(const Tensor& t, const std::string& what);

}  // namespace idf
