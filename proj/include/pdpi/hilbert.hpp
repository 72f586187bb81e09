#pragma once

// Finite-dimensional Hilbert-space primitives: dense vectors, matrix-free
// linear maps with adjoints, subspace projectors and operator-norm estimation.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>

namespace pdpi {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Hybrid absolute/relative comparison: |a - b| <= tol * (1 + |a| + |b|).
inline bool approx_equal(double a, double b, double tol = 1e-10) {
  return std::abs(a - b) <= tol * (1.0 + std::abs(a) + std::abs(b));
}

inline void require_same_dim(const Vector& a, const Vector& b, const char* where) {
  if (a.size() != b.size()) {
    throw std::invalid_argument(std::string(where) + ": dimension mismatch (" +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
}

inline double inner(const Vector& x, const Vector& y) {
  require_same_dim(x, y, "inner");
  return x.dot(y);
}

using VectorMap = std::function<Vector(const Vector&)>;

/// Bounded linear map H -> G given by its action and the action of its adjoint.
struct LinearMap {
  VectorMap forward;
  VectorMap adjoint;
  Index domain_dim = 0;
  Index codomain_dim = 0;
  std::optional<double> norm_bound;

  Vector apply(const Vector& x) const {
    if (x.size() != domain_dim) throw std::invalid_argument("LinearMap::apply: dimension mismatch");
    return forward(x);
  }
  Vector apply_adjoint(const Vector& y) const {
    if (y.size() != codomain_dim) {
      throw std::invalid_argument("LinearMap::apply_adjoint: dimension mismatch");
    }
    return adjoint(y);
  }

  static LinearMap identity(Index dim) {
    return {[](const Vector& x) { return x; }, [](const Vector& x) { return x; }, dim, dim, 1.0};
  }

  static LinearMap zero(Index domain, Index codomain) {
    return {[codomain](const Vector&) { return Vector::Zero(codomain); },
            [domain](const Vector&) { return Vector::Zero(domain); }, domain, codomain, 0.0};
  }

  /// Dense matrix; the matrix is copied into the closures.
  static LinearMap from_matrix(Matrix m) {
    const Index rows = m.rows();
    const Index cols = m.cols();
    auto shared = std::make_shared<const Matrix>(std::move(m));
    return {[shared](const Vector& x) -> Vector { return (*shared) * x; },
            [shared](const Vector& y) -> Vector { return shared->transpose() * y; }, cols, rows,
            std::nullopt};
  }
};

/// Orthogonal projector onto a closed subspace; Id - P is the projector onto
/// the orthogonal complement.
struct SubspaceProjector {
  VectorMap project;
  Index dim = 0;

  Vector operator()(const Vector& x) const { return project(x); }

  Vector complement(const Vector& x) const { return x - project(x); }

  static SubspaceProjector identity(Index dim) {
    return {[](const Vector& x) { return x; }, dim};
  }

  static SubspaceProjector zero(Index dim) {
    return {[dim](const Vector&) { return Vector::Zero(dim); }, dim};
  }

  /// Projector onto span of the columns of `basis` (columns need not be
  /// orthonormal, but must be linearly independent).
  static SubspaceProjector from_basis(const Matrix& basis) {
    Eigen::HouseholderQR<Matrix> qr(basis);
    Matrix q = qr.householderQ() * Matrix::Identity(basis.rows(), basis.cols());
    auto shared = std::make_shared<const Matrix>(std::move(q));
    return {[shared](const Vector& x) -> Vector {
              return (*shared) * (shared->transpose() * x);
            },
            basis.rows()};
  }
};

inline Vector subspace_project(const SubspaceProjector& p, const Vector& x) {
  if (x.size() != p.dim) throw std::invalid_argument("subspace_project: dimension mismatch");
  return p.project(x);
}

struct OpNormEstimate {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// Power iteration on L*L. The returned value is the Rayleigh quotient
/// ||L x|| / ||x||, hence never larger than ||L||.
inline OpNormEstimate op_norm(const LinearMap& L, int max_iters = 1000, double tol = 1e-12,
                              std::uint64_t seed = 0x5eedULL) {
  if (max_iters < 1) throw std::invalid_argument("op_norm: max_iters must be >= 1");
  if (tol <= 0.0) throw std::invalid_argument("op_norm: tol must be positive");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Vector x(L.domain_dim);
  for (Index i = 0; i < x.size(); ++i) x[i] = normal(rng);
  const double x0_norm = x.norm();
  if (x0_norm == 0.0) return {0.0, true, 0};
  x /= x0_norm;

  OpNormEstimate est;
  double previous = 0.0;
  for (int k = 1; k <= max_iters; ++k) {
    const Vector lx = L.apply(x);
    const double current = std::sqrt(lx.squaredNorm() / x.squaredNorm());
    est.value = std::max(est.value, current);
    est.iterations = k;
    if (current == 0.0) {
      est.converged = true;
      break;
    }
    if (k > 1 && std::abs(current - previous) <= tol * current) {
      est.converged = true;
      break;
    }
    previous = current;
    Vector next = L.apply_adjoint(lx);
    const double nn = next.norm();
    if (nn == 0.0) {
      est.converged = true;
      break;
    }
    x = next / nn;
  }
  return est;
}

}  // namespace pdpi
