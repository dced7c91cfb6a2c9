#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "idforget/tensor.hpp"

namespace idf {

struct EigenDecomposition {
  Tensor values;   // n
  Tensor vectors;  // n x n, column k is the eigenvector of values[k]
};

// Cyclic Jacobi eigendecomposition of a symmetric matrix.
EigenDecomposition jacobi_eigen(const Tensor& symmetric, double tolerance = 1e-14, std::size_t max_sweeps = 100);
// Square root of a symmetric PSD matrix; eigenvalues in [-tolerance, 0) are
// floored to 0, anything more negative throws NumericalError.
Tensor sqrt_psd(const Tensor& symmetric, double tolerance = 1e-8);

// Throws ShapeError unless `m` is a square matrix.
void require_square(const Tensor& m, const std::string& what);
// (m + m^T) / 2.
Tensor symmetrized(const Tensor& m);
// max(lambda, 0); throws NumericalError when lambda < -tolerance.
double floored_eigenvalue(double lambda, double tolerance);
// Dense matrix product.
Tensor matmul(const Tensor& a, const Tensor& b);
// V diag(f(lambda)) V^T for a symmetric matrix with eigenpairs (lambda, V).
Tensor spectral_map(const Tensor& symmetric, const std::function<double(double)>& f);

}  // namespace idf
