#include "idforget/linalg.hpp"

#include <algorithm>
#include <cmath>

#include "idforget/errors.hpp"
#include "idforget/params.hpp"

namespace idf {

void require_square(const Tensor& m, const std::string& what) {
  if (m.ndim() != 2 || m.shape()[0] != m.shape()[1]) {
    throw ShapeError(what + ": expected a square matrix, got " + shape_string(m.shape()));
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor out({n, m}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      for (std::size_t j = 0; j < m; ++j) out(i, j) += aip * b(p, j);
    }
  }
  return out;
}

Tensor symmetrized(const Tensor& m) {
  Tensor out = m;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = 0.5 * (m(i, j) + m(j, i));
  }
  return out;
}

double floored_eigenvalue(double lambda, double tolerance) {
  if (lambda < -tolerance) {
    throw NumericalError("matrix is not positive semidefinite (eigenvalue " + format_double(lambda) + ")");
  }
  return std::max(lambda, 0.0);
}

EigenDecomposition jacobi_eigen(const Tensor& symmetric, double tolerance, std::size_t max_sweeps) {
  require_square(symmetric, "jacobi_eigen");
  const std::size_t n = symmetric.rows();
  Tensor a = symmetrized(symmetric);
  Tensor v({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

  double total = 0.0;
  for (double x : a.values()) total += x * x;
  const double threshold = tolerance * tolerance * total;

  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += 2.0 * a(p, q) * a(p, q);
    }
    if (off <= threshold) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  EigenDecomposition out;
  out.values = Tensor({n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) out.values[i] = a(i, i);
  out.vectors = std::move(v);
  return out;
}

Tensor sqrt_psd(const Tensor& symmetric, double tolerance) {
  const EigenDecomposition eig = jacobi_eigen(symmetric);
  const std::size_t n = eig.values.size();
  Tensor out({n, n}, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double root = std::sqrt(floored_eigenvalue(eig.values[k], tolerance));
    if (root == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = eig.vectors(i, k) * root;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * eig.vectors(j, k);
    }
  }
  return out;
}

Tensor spectral_map(const Tensor& symmetric, const std::function<double(double)>& f) {
  const EigenDecomposition eig = jacobi_eigen(symmetric);
  const std::size_t n = eig.values.size();
  Tensor out({n, n}, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double fk = f(eig.values[k]);
    if (fk == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = eig.vectors(i, k) * fk;
      for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * eig.vectors(j, k);
    }
  }
  return out;
}

}  // namespace idf
