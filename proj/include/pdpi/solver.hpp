#pragma once

// Primal-dual partial-inverse splitting for
//
//   find (x, u) in (V cap Fix T) x W  with  0 in Ax + Cx + L*u + N_V x
//                                           0 in B^{-1}u + D^{-1}u - Lx,
//
// together with the reduced methods it contains (Condat-Vu, forward-backward
// with partial inverse) and the two-dual-block primal-dual method used as a
// baseline on the LASSO benchmark.

#include "pdpi/hilbert.hpp"
#include "pdpi/prox.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace pdpi {

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Data of the monotone inclusion. Empty `C`, `Dinv` mean the zero map, empty
/// `T` means the identity.
struct PdpiProblem {
  ProxFn resolvent_A;     // (z, tau)   -> J_{tau A} z
  ProxFn resolvent_Binv;  // (v, gamma) -> J_{gamma B^{-1}} v
  VectorMap Dinv;
  VectorMap C;
  LinearMap L;
  SubspaceProjector P_V;
  SubspaceProjector P_W;
  VectorMap T;
  double alpha = 0.5;  // averagedness of T; informational only
  double beta = kInfinity;
  double delta = kInfinity;

  Index primal_dim() const { return L.domain_dim; }
  Index dual_dim() const { return L.codomain_dim; }
};

struct PdpiState {
  Vector x;      // in V
  Vector x_bar;
  Vector y;      // in V-perp
  Vector u;
  Vector r;      // last P_V w, T r is the feasible primal estimate
  long k = 0;
};

struct StepSizes {
  double tau = 0.0;
  double gamma = 0.0;
};

enum class StepCheck { accepted, non_positive, tau_too_large, gamma_too_large, norm_condition };

inline const char* to_string(StepCheck c) {
  switch (c) {
    case StepCheck::accepted: return "accepted";
    case StepCheck::non_positive: return "step sizes must be positive";
    case StepCheck::tau_too_large: return "tau must be < 2 beta";
    case StepCheck::gamma_too_large: return "gamma must be < 2 delta";
    case StepCheck::norm_condition: return "||L||^2 < (1/tau - 1/(2 beta))(1/gamma - 1/(2 delta)) violated";
  }
  return "unknown";
}

struct StepSizeValidation {
  StepCheck status = StepCheck::accepted;
  /// (1/tau - 1/2beta)(1/gamma - 1/2delta) - ||L||^2; positive iff accepted.
  double slack = 0.0;

  bool accepted() const { return status == StepCheck::accepted; }
};

inline double half_inverse(double v) { return std::isinf(v) ? 0.0 : 1.0 / (2.0 * v); }

/// Convergence condition on (tau, gamma). beta and delta may be +inf.
inline StepSizeValidation validate_stepsizes(double tau, double gamma, double beta, double delta,
                                             double L_norm) {
  StepSizeValidation v;
  if (!(tau > 0.0) || !(gamma > 0.0) || !(beta > 0.0) || !(delta > 0.0) || L_norm < 0.0) {
    v.status = StepCheck::non_positive;
    return v;
  }
  const double rhs = (1.0 / tau - half_inverse(beta)) * (1.0 / gamma - half_inverse(delta));
  v.slack = rhs - L_norm * L_norm;
  if (!std::isinf(beta) && !(tau < 2.0 * beta)) {
    v.status = StepCheck::tau_too_large;
  } else if (!std::isinf(delta) && !(gamma < 2.0 * delta)) {
    v.status = StepCheck::gamma_too_large;
  } else if (!(L_norm * L_norm < rhs)) {
    v.status = StepCheck::norm_condition;
  }
  return v;
}

/// tau = gamma chosen so that ||L||^2 equals `fill` times the right-hand side
/// of the step condition.
inline StepSizes default_stepsizes(double beta, double delta, double L_norm, double fill = 0.9) {
  const double a = half_inverse(beta);
  const double b = half_inverse(delta);
  const double target = L_norm * L_norm / fill;
  // (1/t - a)(1/t - b) = target, solve for s = 1/t on the branch s > max(a, b).
  double s;
  if (target == 0.0) {
    s = 2.0 * std::max(a, b);
    if (s == 0.0) s = 1.0;
  } else {
    s = 0.5 * ((a + b) + std::sqrt((a - b) * (a - b) + 4.0 * target));
  }
  return {1.0 / s, 1.0 / s};
}

/// Resolvent of the partial inverse (A)_V, given J_A:
///   J_{A_V} z = (2 P_V - Id) J_A z + P_{V-perp} z.
inline Vector partial_inverse_resolvent(const VectorMap& resolvent_A, const SubspaceProjector& P_V,
                                        const Vector& z) {
  const Vector j = resolvent_A(z);
  const Vector pj = P_V(j);
  return 2.0 * pj - j + (z - P_V(z));
}

inline Vector partial_inverse_resolvent(const ProxFn& resolvent_A, double tau,
                                        const SubspaceProjector& P_V, const Vector& z) {
  return partial_inverse_resolvent([&](const Vector& v) { return resolvent_A(v, tau); }, P_V, z);
}

/// Initial state with x0 projected onto V and y0 onto V-perp.
inline PdpiState make_initial_state(const PdpiProblem& problem, const Vector& x0, const Vector& u0,
                                    const Vector* y0 = nullptr) {
  PdpiState s;
  s.x = problem.P_V(x0);
  s.x_bar = s.x;
  s.y = y0 ? problem.P_V.complement(*y0) : Vector::Zero(x0.size());
  s.u = u0;
  s.r = s.x;
  return s;
}

inline PdpiState make_initial_state(const PdpiProblem& problem) {
  return make_initial_state(problem, Vector::Zero(problem.primal_dim()),
                            Vector::Zero(problem.dual_dim()));
}

inline PdpiState pdpi_step(const PdpiProblem& pb, const StepSizes& steps, const PdpiState& s) {
  const double tau = steps.tau;
  const double gamma = steps.gamma;

  Vector dual_arg = s.u + gamma * pb.L.apply(s.x_bar);
  if (pb.Dinv) dual_arg -= gamma * pb.Dinv(s.u);
  const Vector eta = pb.resolvent_Binv(dual_arg, gamma);

  PdpiState next;
  next.u = pb.P_W(eta);

  Vector grad = pb.L.apply_adjoint(next.u);
  if (pb.C) grad += pb.C(s.x);
  const Vector w = pb.resolvent_A(s.x + tau * s.y - tau * pb.P_V(grad), tau);

  next.r = pb.P_V(w);
  next.x = pb.P_V(pb.T ? pb.T(next.r) : next.r);
  next.y = s.y + (next.r - w) / tau;
  next.x_bar = next.x + next.r - s.x;
  next.k = s.k + 1;
  return next;
}

// --- Iteration driver ------------------------------------------------------

struct StoppingRule {
  double tol = 1e-6;
  long max_iters = 10000;
};

struct TraceRecord {
  long iteration = 0;
  double primal_change = 0.0;
  double dual_change = 0.0;
  double relative_change = 0.0;
  double objective = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> residuals;
  double wall_time_ms = 0.0;
};

struct ConvergenceTrace {
  std::vector<std::string> residual_names;
  std::vector<TraceRecord> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

/// Optional per-iteration measurements supplied by a benchmark.
struct Observation {
  double objective = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> residuals;
};

template <class State>
using Monitor = std::function<Observation(const State&)>;

struct Changes {
  double primal = 0.0;
  double dual = 0.0;
  double relative = 0.0;
};

/// ||(x1,u1) - (x0,u0)|| / max(1, ||(x0,u0)||).
inline Changes pair_change(const Vector& x0, const Vector& x1, const Vector& u0, const Vector& u1) {
  Changes c;
  c.primal = (x1 - x0).norm();
  c.dual = (u1 - u0).norm();
  const double base = std::sqrt(x0.squaredNorm() + u0.squaredNorm());
  c.relative = std::hypot(c.primal, c.dual) / std::max(1.0, base);
  return c;
}

template <class State>
struct IterationResult {
  State state;
  ConvergenceTrace trace;
  bool converged = false;
  bool diverged = false;
  long iterations = 0;
};

inline constexpr double kDivergenceNorm = 1e12;

/// Runs `step` until `measure(prev, next).relative <= tol` or max_iters.
/// `measure` may override the stopping quantity (e.g. an L2 grid norm).
template <class State, class Step, class Measure>
IterationResult<State> iterate(State state, Step&& step, Measure&& measure,
                               const StoppingRule& stop, const Monitor<State>& monitor = {},
                               std::vector<std::string> residual_names = {}) {
  IterationResult<State> out;
  out.trace.residual_names = std::move(residual_names);
  const auto start = std::chrono::steady_clock::now();
  for (long k = 0; k < stop.max_iters; ++k) {
    State next = step(state);
    const Changes c = measure(state, next);
    TraceRecord rec;
    rec.iteration = k + 1;
    rec.primal_change = c.primal;
    rec.dual_change = c.dual;
    rec.relative_change = c.relative;
    if (monitor) {
      Observation obs = monitor(next);
      rec.objective = obs.objective;
      rec.residuals = std::move(obs.residuals);
    }
    rec.wall_time_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    out.trace.records.push_back(std::move(rec));
    state = std::move(next);
    out.iterations = k + 1;
    if (!std::isfinite(c.primal) || !std::isfinite(c.dual) || c.primal > kDivergenceNorm ||
        c.dual > kDivergenceNorm) {
      out.diverged = true;
      break;
    }
    if (c.relative <= stop.tol) {
      out.converged = true;
      break;
    }
  }
  out.state = std::move(state);
  return out;
}

struct PdpiSolveResult {
  PdpiState state;
  Vector feasible;  // T r^k
  ConvergenceTrace trace;
  bool converged = false;
  bool diverged = false;
  long iterations = 0;
};

inline PdpiSolveResult solve(const PdpiProblem& pb, const StepSizes& steps, const PdpiState& init,
                             const StoppingRule& stop, const Monitor<PdpiState>& monitor = {},
                             std::vector<std::string> residual_names = {}) {
  auto res = iterate(
      init, [&](const PdpiState& s) { return pdpi_step(pb, steps, s); },
      [](const PdpiState& a, const PdpiState& b) { return pair_change(a.x, b.x, a.u, b.u); }, stop,
      monitor, std::move(residual_names));
  PdpiSolveResult out;
  out.feasible = pb.T ? pb.T(res.state.r) : res.state.r;
  out.state = std::move(res.state);
  out.trace = std::move(res.trace);
  out.converged = res.converged;
  out.diverged = res.diverged;
  out.iterations = res.iterations;
  return out;
}

// --- Condat-Vu -------------------------------------------------------------

/// min F(x) + G(Lx) + H(x), H differentiable with 1/beta-Lipschitz gradient.
struct CondatProblem {
  ProxFn prox_F;       // (x, tau)   -> prox_{tau F} x
  ProxFn prox_Gconj;   // (u, gamma) -> prox_{gamma G*} u
  VectorMap grad_H;    // empty means H = 0
  LinearMap L;
  double beta = kInfinity;
};

struct CondatState {
  Vector x;
  Vector x_bar;
  Vector u;
  long k = 0;
};

inline CondatState condat_step(const CondatProblem& pb, const StepSizes& steps,
                               const CondatState& s) {
  CondatState next;
  next.u = pb.prox_Gconj(s.u + steps.gamma * pb.L.apply(s.x_bar), steps.gamma);
  Vector grad = pb.L.apply_adjoint(next.u);
  if (pb.grad_H) grad += pb.grad_H(s.x);
  next.x = pb.prox_F(s.x - steps.tau * grad, steps.tau);
  next.x_bar = 2.0 * next.x - s.x;
  next.k = s.k + 1;
  return next;
}

// --- Primal-dual with several weighted dual blocks ---------------------------

/// min f(x) + sum_i w_i g_i(L_i x).
struct DualBlock {
  LinearMap L;
  ProxFn prox_conj;  // (v, sigma) -> prox_{sigma g_i*} v
  double weight = 1.0;
};

struct VuProblem {
  ProxFn prox_f;
  std::vector<DualBlock> blocks;
};

struct VuSteps {
  double tau = 0.0;
  std::vector<double> sigma;
};

struct VuState {
  Vector x;
  std::vector<Vector> v;
  long k = 0;
};

/// sqrt(sum_i tau w_i sigma_i ||L_i||^2) < 1.
inline bool validate_vu_steps(const VuSteps& steps, const std::vector<double>& weights,
                              const std::vector<double>& norms, double* margin = nullptr) {
  if (!(steps.tau > 0.0) || steps.sigma.size() != weights.size() ||
      norms.size() != weights.size()) {
    return false;
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(steps.sigma[i] > 0.0)) return false;
    acc += steps.tau * weights[i] * steps.sigma[i] * norms[i] * norms[i];
  }
  if (margin) *margin = 1.0 - std::sqrt(acc);
  return std::sqrt(acc) < 1.0;
}

inline VuState vu_step(const VuProblem& pb, const VuSteps& steps, const VuState& s) {
  Vector grad = Vector::Zero(s.x.size());
  for (std::size_t i = 0; i < pb.blocks.size(); ++i) {
    grad += pb.blocks[i].weight * pb.blocks[i].L.apply_adjoint(s.v[i]);
  }
  VuState next;
  next.x = pb.prox_f(s.x - steps.tau * grad, steps.tau);
  const Vector extrapolated = 2.0 * next.x - s.x;
  next.v.resize(pb.blocks.size());
  for (std::size_t i = 0; i < pb.blocks.size(); ++i) {
    const double sigma = steps.sigma[i];
    next.v[i] = pb.blocks[i].prox_conj(s.v[i] + sigma * pb.blocks[i].L.apply(extrapolated), sigma);
  }
  next.k = s.k + 1;
  return next;
}

// --- Forward-backward with partial inverse -----------------------------------

/// min_{x in V} f(x) + h(x), h differentiable.
struct FbpiProblem {
  ProxFn prox_f;
  VectorMap grad_h;  // empty means h = 0
  SubspaceProjector P_V;
};

struct FbpiState {
  Vector x;  // in V
  Vector y;  // in V-perp
  long k = 0;
};

inline FbpiState fb_partial_inverse_step(const FbpiProblem& pb, double lambda,
                                         const FbpiState& s) {
  Vector arg = s.x + lambda * s.y;
  if (pb.grad_h) arg -= lambda * pb.P_V(pb.grad_h(s.x));
  const Vector w = pb.prox_f(arg, lambda);
  FbpiState next;
  next.x = pb.P_V(w);
  next.y = s.y + (next.x - w) / lambda;
  next.k = s.k + 1;
  return next;
}

}  // namespace pdpi
