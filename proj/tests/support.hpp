#pragma once

// Random generators and reference oracles shared by the test binaries. The
// oracles work from definitions (dense solves, eigendecompositions, finite
// differences) and never call the code under test.

#include "pdpi/hilbert.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>

namespace pdpi::testing {

inline constexpr int kSamples = 100;

struct Rng {
  std::mt19937_64 eng;
  explicit Rng(std::uint64_t seed) : eng(seed) {}

  double normal() { return std::normal_distribution<double>{}(eng); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>{lo, hi}(eng); }
  long integer(long lo, long hi) { return std::uniform_int_distribution<long>{lo, hi}(eng); }

  Vector vec(Index n, double scale = 1.0) {
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = scale * normal();
    return v;
  }
  Matrix mat(Index r, Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Index j = 0; j < c; ++j)
      for (Index i = 0; i < r; ++i) m(i, j) = scale * normal();
    return m;
  }
};

/// Orthogonal projector matrix onto the column span of B via the normal
/// equations pseudoinverse.
inline Matrix projector_matrix(const Matrix& B) {
  if (B.cols() == 0) return Matrix::Zero(B.rows(), B.rows());
  return B * (B.transpose() * B).ldlt().solve(B.transpose());
}

/// Projector onto ker R computed from a full SVD.
inline Matrix kernel_projector_svd(const Matrix& R) {
  const Index n = R.cols();
  if (R.rows() == 0) return Matrix::Identity(n, n);
  Eigen::JacobiSVD<Matrix> svd(R, Eigen::ComputeFullV);
  const Index r = (svd.singularValues().array() > 1e-12 * svd.singularValues()(0)).count();
  const Matrix Vn = svd.matrixV().rightCols(n - r);
  return Vn * Vn.transpose();
}

/// Largest singular value from the eigendecomposition of the Gram matrix.
inline double spectral_norm_gram(const Matrix& A) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(A.transpose() * A);
  return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
}

/// Central finite-difference gradient.
inline Vector fd_gradient(const std::function<double(const Vector&)>& f, const Vector& x, double h = 1e-6) {
  Vector g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    Vector a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

inline double rel_err(const Vector& a, const Vector& b) {
  return (a - b).norm() / std::max(1.0, b.norm());
}

}  // namespace pdpi::testing
