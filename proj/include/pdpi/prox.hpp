#pragma once

// Closed-form proximal operators and projections used by the benchmarks.

#include "pdpi/hilbert.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pdpi {

/// Raised when problem data violates a structural precondition (rank,
/// partition coverage, ...).
class InvalidInstance : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// prox_{step * f}, evaluated at a point.
struct ProxFn {
  std::function<Vector(const Vector&, double)> evaluate;
  std::string descriptor;

  Vector operator()(const Vector& x, double step) const { return evaluate(x, step); }
};

/// prox_{gamma f*} from prox_f via the Moreau decomposition
/// prox_{gamma f*}(x) = x - gamma prox_{f/gamma}(x / gamma).
inline ProxFn moreau_conjugate(ProxFn f) {
  auto desc = f.descriptor + "*";
  return {[f = std::move(f)](const Vector& x, double gamma) -> Vector {
            return x - gamma * f.evaluate(x / gamma, 1.0 / gamma);
          },
          std::move(desc)};
}

inline Vector soft_threshold(const Vector& x, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("soft_threshold: tau must be positive");
  Vector out(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const double mag = std::abs(x[i]) - tau;
    out[i] = mag > 0.0 ? std::copysign(mag, x[i]) : 0.0;
  }
  return out;
}

/// prox of gamma * g* for g = (s/2)||. - b||^2.
inline Vector prox_conj_scaled_quadratic(const Vector& x, double gamma, const Vector& b,
                                         double s) {
  if (!(gamma > 0.0) || !(s > 0.0)) {
    throw std::invalid_argument("prox_conj_scaled_quadratic: gamma and s must be positive");
  }
  require_same_dim(x, b, "prox_conj_scaled_quadratic");
  return s * (x - gamma * b) / (gamma + s);
}

namespace prox_fns {

inline ProxFn l1_norm(double alpha) {
  return {[alpha](const Vector& x, double step) { return soft_threshold(x, step * alpha); },
          "l1"};
}

/// g = (s/2)||. - b||^2.
inline ProxFn scaled_quadratic(Vector b, double s) {
  return {[b = std::move(b), s](const Vector& x, double step) -> Vector {
            return (x + step * s * b) / (1.0 + step * s);
          },
          "quadratic"};
}

/// Conjugate of (s/2)||. - b||^2, closed form.
inline ProxFn scaled_quadratic_conjugate(Vector b, double s) {
  return {[b = std::move(b), s](const Vector& x, double step) -> Vector {
            return prox_conj_scaled_quadratic(x, step, b, s);
          },
          "quadratic*"};
}

inline ProxFn zero_function() {
  return {[](const Vector& x, double) { return x; }, "zero"};
}

/// Indicator of {0}; its conjugate is the zero function.
inline ProxFn indicator_origin() {
  return {[](const Vector& x, double) -> Vector { return Vector::Zero(x.size()); }, "iota_0"};
}

inline ProxFn indicator_box(Vector lower, Vector upper) {
  return {[lower = std::move(lower), upper = std::move(upper)](const Vector& x, double) -> Vector {
            return x.cwiseMax(lower).cwiseMin(upper);
          },
          "iota_box"};
}

inline ProxFn indicator_nonnegative() {
  return {[](const Vector& x, double) -> Vector { return x.cwiseMax(0.0); }, "iota_+"};
}

}  // namespace prox_fns

/// Orthogonal projector onto ker R for R with linearly independent rows:
/// P = Id - R^T (R R^T)^{-1} R, with R R^T factorized once.
inline SubspaceProjector kernel_projector(const Matrix& R) {
  if (R.rows() == 0) return SubspaceProjector::identity(R.cols());
  if (R.rows() > R.cols()) {
    throw InvalidInstance("kernel_projector: more rows than columns, rows cannot be independent");
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(R.transpose());
  qr.setThreshold(1e-12);
  if (qr.rank() < R.rows()) {
    throw InvalidInstance("kernel_projector: R is rank deficient (rank " +
                          std::to_string(qr.rank()) + " < " + std::to_string(R.rows()) + ")");
  }
  struct Factor {
    Matrix r;
    Eigen::LLT<Matrix> gram;
  };
  auto f = std::make_shared<Factor>();
  f->r = R;
  f->gram.compute(R * R.transpose());
  if (f->gram.info() != Eigen::Success) {
    throw InvalidInstance("kernel_projector: R R^T is not positive definite");
  }
  return {[f](const Vector& x) -> Vector {
            return x - f->r.transpose() * f->gram.solve(f->r * x);
          },
          R.cols()};
}

/// Euclidean projection onto {f >= 0, sum f = mass} by sorting.
inline Vector project_simplex_mass(const Vector& f, double mass) {
  if (mass < 0.0) throw std::invalid_argument("project_simplex_mass: negative mass");
  if (f.size() == 0) throw std::invalid_argument("project_simplex_mass: empty vector");
  if (mass == 0.0) return Vector::Zero(f.size());

  std::vector<double> sorted(f.data(), f.data() + f.size());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double cumulative = 0.0;
  double theta = 0.0;
  for (std::size_t j = 0; j < sorted.size(); ++j) {
    cumulative += sorted[j];
    const double candidate = (cumulative - mass) / static_cast<double>(j + 1);
    if (sorted[j] - candidate > 0.0) theta = candidate;
  }
  return (f.array() - theta).cwiseMax(0.0).matrix();
}

/// Projection of (x, u) onto {u - x <= c}.
inline std::pair<double, double> project_theta(double x, double u, double c) {
  if (u - x - c > 0.0) return {(x + u - c) / 2.0, (x + u + c) / 2.0};
  return {x, u};
}

inline double mid(double a, double b, double c) {
  return std::max(std::min(a, b), std::min(std::max(a, b), c));
}

/// Projection onto {t 1 : t in [0, M]}.
inline Vector project_capacity_consensus(const Vector& y, double upper) {
  if (y.size() < 1) throw std::invalid_argument("project_capacity_consensus: empty vector");
  if (!(upper > 0.0)) throw std::invalid_argument("project_capacity_consensus: M must be positive");
  return Vector::Constant(y.size(), mid(0.0, y.mean(), upper));
}

/// Scenario families are stored column-per-scenario: X(:, xi) is the block of
/// scenario xi.
inline Matrix project_nonanticipativity(const Matrix& x) {
  if (x.cols() == 0) return x;
  const Vector mean = x.rowwise().mean();
  return mean.replicate(1, x.cols());
}

/// Route groups, one per origin-destination pair.
using OdPartition = std::vector<std::vector<Index>>;

inline void validate_partition(const OdPartition& groups, Index num_routes) {
  std::vector<int> seen(static_cast<std::size_t>(num_routes), 0);
  for (const auto& g : groups) {
    if (g.empty()) throw InvalidInstance("OD partition contains an empty group");
    for (Index r : g) {
      if (r < 0 || r >= num_routes) throw InvalidInstance("OD partition: route index out of range");
      if (seen[static_cast<std::size_t>(r)]++ != 0) {
        throw InvalidInstance("OD partition: route " + std::to_string(r) + " listed twice");
      }
    }
  }
  for (Index r = 0; r < num_routes; ++r) {
    if (seen[static_cast<std::size_t>(r)] == 0) {
      throw InvalidInstance("OD partition: route " + std::to_string(r) + " not covered");
    }
  }
}

/// Subtracts, per scenario column and per OD group, the group mean.
inline Matrix project_demand_centering(const Matrix& f, const OdPartition& groups) {
  validate_partition(groups, f.rows());
  Matrix out = f;
  for (const auto& g : groups) {
    const double inv = 1.0 / static_cast<double>(g.size());
    for (Index xi = 0; xi < f.cols(); ++xi) {
      double s = 0.0;
      for (Index r : g) s += f(r, xi);
      for (Index r : g) out(r, xi) = f(r, xi) - s * inv;
    }
  }
  return out;
}

using Vector4 = Eigen::Vector4d;

/// C = [0,inf) x (-inf,0] x [0,inf) x (-inf,0].
inline Vector4 project_cone_C(const Vector4& w) {
  return {std::max(w[0], 0.0), std::min(w[1], 0.0), std::max(w[2], 0.0), std::min(w[3], 0.0)};
}

struct MfgCellProx {
  double m = 0.0;
  Vector4 w = Vector4::Zero();
};

/// prox_{gamma f} for f(eta, omega) = b(eta, omega) + k0 * eta, where
/// b = |omega|^2 / (2 eta) on (0, inf) x C, 0 at the origin, +inf elsewhere.
inline MfgCellProx prox_mfg_cell(double eta, const Vector4& omega, double gamma, double k0) {
  if (!(gamma > 0.0)) throw std::invalid_argument("prox_mfg_cell: gamma must be positive");
  const Vector4 pw = project_cone_C(omega);
  const double s = pw.squaredNorm();
  if (gamma * k0 >= eta + s / (2.0 * gamma)) return {};

  // Unique positive root of (p + a)(p + gamma)^2 - c.
  const double a = gamma * k0 - eta;
  const double c = 0.5 * gamma * s;
  auto poly = [&](double p) { return (p + a) * (p + gamma) * (p + gamma) - c; };
  auto deriv = [&](double p) { return (p + gamma) * (p + gamma) + 2.0 * (p + a) * (p + gamma); };

  double lo = 0.0;
  double hi = -a + s / (2.0 * gamma) + gamma;
  double p = std::clamp(std::max(eta, gamma), lo, hi);
  constexpr int kMaxIter = 300;
  bool done = false;
  for (int it = 0; it < kMaxIter; ++it) {
    const double v = poly(p);
    if (v == 0.0) {
      done = true;
      break;
    }
    (v < 0.0 ? lo : hi) = p;
    const double d = deriv(p);
    double next = (d > 0.0) ? p - v / d : 0.5 * (lo + hi);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    const double step = std::abs(next - p);
    p = next;
    if (step <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, p) ||
        hi - lo <= 4.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, hi)) {
      done = true;
      break;
    }
  }
  if (!done || !(p > 0.0)) {
    throw std::runtime_error("prox_mfg_cell: root solver failed to converge");
  }
  return {p, (p / (p + gamma)) * pw};
}

}  // namespace pdpi
