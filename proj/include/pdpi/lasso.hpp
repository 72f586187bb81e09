#pragma once

// Constrained LASSO:  min_{Rx = 0}  alpha ||x||_1 + 0.5 ||Ax - b||^2,
// solved through three equivalent formulations.

#include "pdpi/hilbert.hpp"
#include "pdpi/prox.hpp"
#include "pdpi/solver.hpp"

#include <chrono>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pdpi::lasso {

struct LassoInstance {
  Matrix A;
  Matrix R;
  Vector b;
  double alpha = 1.0;

  Index n() const { return A.cols(); }
  Index p() const { return A.rows(); }
  Index m() const { return R.rows(); }
};

inline LassoInstance generate_instance(Index n, Index p, Index m, std::uint64_t seed,
                                       double alpha = 1.0) {
  if (!(m < n)) throw std::invalid_argument("generate_instance: requires m < n");
  if (n <= 0 || p <= 0 || m < 0) throw std::invalid_argument("generate_instance: bad dimensions");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  auto fill = [&](Matrix& M) {
    for (Index j = 0; j < M.cols(); ++j)
      for (Index i = 0; i < M.rows(); ++i) M(i, j) = normal(rng);
  };
  LassoInstance inst;
  inst.alpha = alpha;
  inst.A.resize(p, n);
  fill(inst.A);
  inst.b.resize(p);
  for (Index i = 0; i < p; ++i) inst.b[i] = normal(rng);
  inst.R.resize(m, n);
  for (;;) {
    fill(inst.R);
    Eigen::ColPivHouseholderQR<Matrix> qr(inst.R.transpose());
    qr.setThreshold(1e-12);
    if (qr.rank() == m) break;
  }
  return inst;
}

inline double objective(const LassoInstance& inst, const Vector& x) {
  return inst.alpha * x.lpNorm<1>() + 0.5 * (inst.A * x - inst.b).squaredNorm();
}

enum class Method { pd_subspaces, fb_subspaces, pd_generalized };

inline constexpr Method kAllMethods[] = {Method::pd_subspaces, Method::fb_subspaces,
                                         Method::pd_generalized};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::pd_subspaces: return "pd_subspaces";
    case Method::fb_subspaces: return "fb_subspaces";
    case Method::pd_generalized: return "pd_generalized";
  }
  return "?";
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (to_string(m) == s) return m;
  return std::nullopt;
}

/// Step parameters: tau/gamma for pd_subspaces, lambda (stored in tau) for
/// fb_subspaces, tau/sigma (stored in gamma, sigma1 = sigma2) for pd_generalized.
struct LassoSteps {
  double tau = 0.0;
  double gamma = 0.0;
};

struct Norms {
  double A = 0.0;
  double R = 0.0;
};

inline Norms estimate_norms(const LassoInstance& inst) {
  Norms n;
  n.A = op_norm(LinearMap::from_matrix(inst.A), 20000, 1e-13).value;
  n.R = inst.m() > 0 ? op_norm(LinearMap::from_matrix(inst.R), 20000, 1e-13).value : 0.0;
  return n;
}

inline bool steps_valid(Method method, const LassoSteps& s, const Norms& n) {
  switch (method) {
    case Method::pd_subspaces:
      return validate_stepsizes(s.tau, s.gamma, kInfinity, kInfinity, n.A).accepted();
    case Method::fb_subspaces:
      return s.tau > 0.0 && s.tau < 2.0 / (n.A * n.A);
    case Method::pd_generalized:
      return validate_vu_steps({s.tau, {s.gamma, s.gamma}}, {0.5, 0.5}, {n.A, n.R});
  }
  return false;
}

/// 90% of the admissible region, tau = gamma where two parameters exist.
inline LassoSteps default_steps(Method method, const Norms& n) {
  switch (method) {
    case Method::pd_subspaces: {
      const StepSizes s = default_stepsizes(kInfinity, kInfinity, n.A, 0.9);
      return {s.tau, s.gamma};
    }
    case Method::fb_subspaces:
      return {0.9 * 2.0 / (n.A * n.A), 0.0};
    case Method::pd_generalized: {
      // tau = sigma with tau * sigma * (||A||^2 + ||R||^2) / 2 = 0.9.
      const double t = std::sqrt(1.8 / (n.A * n.A + n.R * n.R));
      return {t, t};
    }
  }
  return {};
}

struct LassoSolution {
  Method method = Method::pd_subspaces;
  Vector x;
  double objective = 0.0;
  long iterations = 0;
  bool converged = false;
  bool diverged = false;
  double wall_time_ms = 0.0;
  LassoSteps steps;
  ConvergenceTrace trace;
};

struct SolveOptions {
  double tol = 1e-6;
  long max_iters = 100000;
  std::optional<LassoSteps> steps;
  std::optional<Norms> norms;
  bool record_objective = true;
};

inline std::vector<std::string> lasso_residual_names() { return {"feasibility"}; }

/// Wires the instance into the stepper matching `method`. Subspace methods
/// report the kernel iterate, which satisfies Rx = 0 up to rounding.
inline LassoSolution solve_formulation(const LassoInstance& inst, Method method,
                                       const SolveOptions& opt = {}) {
  if (!(opt.tol > 0.0)) throw std::invalid_argument("solve_formulation: tol must be positive");
  const Norms norms = opt.norms ? *opt.norms : estimate_norms(inst);
  const LassoSteps steps = opt.steps ? *opt.steps : default_steps(method, norms);
  if (!steps_valid(method, steps, norms)) {
    throw std::invalid_argument("solve_formulation: step sizes violate the convergence condition of " +
                                std::string(to_string(method)));
  }
  const StoppingRule stop{opt.tol, opt.max_iters};
  const auto t0 = std::chrono::steady_clock::now();

  auto observe = [&](const Vector& x) {
    Observation o;
    if (opt.record_objective) o.objective = objective(inst, x);
    o.residuals = {(inst.R * x).norm()};
    return o;
  };

  LassoSolution sol;
  sol.method = method;
  sol.steps = steps;
  const Index n = inst.n();
  const auto P = kernel_projector(inst.R);

  switch (method) {
    case Method::pd_subspaces: {
      PdpiProblem pb;
      pb.resolvent_A = prox_fns::l1_norm(inst.alpha);
      pb.resolvent_Binv = prox_fns::scaled_quadratic_conjugate(inst.b, 1.0);
      pb.L = LinearMap::from_matrix(inst.A);
      pb.P_V = P;
      pb.P_W = SubspaceProjector::identity(inst.p());
      auto res = solve(pb, {steps.tau, steps.gamma}, make_initial_state(pb), stop,
                       [&](const PdpiState& s) { return observe(s.x); }, lasso_residual_names());
      sol.x = res.state.x;
      sol.iterations = res.iterations;
      sol.converged = res.converged;
      sol.diverged = res.diverged;
      sol.trace = std::move(res.trace);
      break;
    }
    case Method::fb_subspaces: {
      FbpiProblem pb;
      pb.prox_f = prox_fns::l1_norm(inst.alpha);
      const Matrix& A = inst.A;
      const Vector& b = inst.b;
      pb.grad_h = [&A, &b](const Vector& x) -> Vector { return A.transpose() * (A * x - b); };
      pb.P_V = P;
      FbpiState init{Vector::Zero(n), Vector::Zero(n), 0};
      const double lambda = steps.tau;
      auto res = iterate(
          init, [&](const FbpiState& s) { return fb_partial_inverse_step(pb, lambda, s); },
          [](const FbpiState& a, const FbpiState& c) { return pair_change(a.x, c.x, a.y, c.y); },
          stop, Monitor<FbpiState>([&](const FbpiState& s) { return observe(s.x); }),
          lasso_residual_names());
      sol.x = res.state.x;
      sol.iterations = res.iterations;
      sol.converged = res.converged;
      sol.diverged = res.diverged;
      sol.trace = std::move(res.trace);
      break;
    }
    case Method::pd_generalized: {
      VuProblem pb;
      pb.prox_f = prox_fns::l1_norm(inst.alpha);
      pb.blocks.push_back({LinearMap::from_matrix(inst.A),
                           prox_fns::scaled_quadratic_conjugate(inst.b, 2.0), 0.5});
      pb.blocks.push_back(
          {LinearMap::from_matrix(inst.R), moreau_conjugate(prox_fns::indicator_origin()), 0.5});
      const VuSteps vs{steps.tau, {steps.gamma, steps.gamma}};
      VuState init{Vector::Zero(n), {Vector::Zero(inst.p()), Vector::Zero(inst.m())}, 0};
      auto concat = [](const VuState& s) {
        Vector out(s.v[0].size() + s.v[1].size());
        out << s.v[0], s.v[1];
        return out;
      };
      auto res = iterate(
          init, [&](const VuState& s) { return vu_step(pb, vs, s); },
          [&](const VuState& a, const VuState& c) { return pair_change(a.x, c.x, concat(a), concat(c)); },
          stop, Monitor<VuState>([&](const VuState& s) { return observe(s.x); }),
          lasso_residual_names());
      sol.x = res.state.x;
      sol.iterations = res.iterations;
      sol.converged = res.converged;
      sol.diverged = res.diverged;
      sol.trace = std::move(res.trace);
      break;
    }
  }
  sol.objective = objective(inst, sol.x);
  sol.wall_time_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return sol;
}

/// Optimality certificate: ||Rx|| plus the distance from -P g to
/// P(alpha d||x||_1), g = A^T(Ax - b), P the projector onto ker R. Entries with
/// |x_i| <= zero_tol are treated as zero (free subgradient in [-1, 1]).
inline double kkt_residual(const LassoInstance& inst, const Vector& x, double zero_tol = 1e-6,
                           int inner_iters = 5000) {
  const Index n = inst.n();
  const auto P = kernel_projector(inst.R);
  const Vector g = inst.A.transpose() * (inst.A * x - inst.b);
  const double alpha = inst.alpha;

  std::vector<Index> free_idx;
  Vector fixed = g;
  for (Index i = 0; i < n; ++i) {
    if (std::abs(x[i]) <= zero_tol) {
      free_idx.push_back(i);
    } else {
      fixed[i] += alpha * (x[i] > 0.0 ? 1.0 : -1.0);
    }
  }
  // min_{s in [-1,1]^Z} 0.5 ||P(fixed + alpha E s)||^2 by accelerated projected gradient.
  const Index nz = static_cast<Index>(free_idx.size());
  Vector s = Vector::Zero(nz);
  auto residual_vec = [&](const Vector& sv) {
    Vector v = fixed;
    for (Index k = 0; k < nz; ++k) v[free_idx[static_cast<std::size_t>(k)]] += alpha * sv[k];
    return P(v);
  };
  if (nz > 0) {
    // Warm start: clip -g/alpha on the free set.
    for (Index k = 0; k < nz; ++k) {
      s[k] = std::clamp(-g[free_idx[static_cast<std::size_t>(k)]] / alpha, -1.0, 1.0);
    }
    Vector z = s;
    double t = 1.0;
    const double step = 1.0 / (alpha * alpha);
    for (int it = 0; it < inner_iters; ++it) {
      const Vector pv = residual_vec(z);
      Vector s_next(nz);
      for (Index k = 0; k < nz; ++k) {
        s_next[k] = std::clamp(z[k] - step * alpha * pv[free_idx[static_cast<std::size_t>(k)]],
                               -1.0, 1.0);
      }
      const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
      z = s_next + ((t - 1.0) / t_next) * (s_next - s);
      const double moved = (s_next - s).norm();
      s = std::move(s_next);
      t = t_next;
      if (moved <= 1e-15 * (1.0 + s.norm())) break;
    }
  }
  return residual_vec(s).norm() + (inst.R * x).norm();
}

// --- Comparison harness ------------------------------------------------------

struct ReportRow {
  Index n = 0, p = 0, m = 0;
  Method method = Method::pd_subspaces;
  double mean_time_ms = 0.0;
  double mean_iters = 0.0;
  double mean_kkt_residual = 0.0;
  std::size_t runs = 0;
};

struct Size {
  Index n = 0, p = 0, m = 0;
};

inline std::vector<ReportRow> compare_report(const std::vector<Size>& sizes,
                                             const std::vector<std::uint64_t>& seeds,
                                             double tol, long max_iters = 100000) {
  std::vector<ReportRow> rows;
  if (seeds.empty()) return rows;
  for (const Size& sz : sizes) {
    std::vector<ReportRow> block;
    for (Method m : kAllMethods) block.push_back({sz.n, sz.p, sz.m, m, 0.0, 0.0, 0.0, 0});
    for (std::uint64_t seed : seeds) {
      const auto inst = generate_instance(sz.n, sz.p, sz.m, seed);
      const Norms norms = estimate_norms(inst);
      for (auto& row : block) {
        SolveOptions opt;
        opt.tol = tol;
        opt.max_iters = max_iters;
        opt.norms = norms;
        opt.record_objective = false;
        const auto sol = solve_formulation(inst, row.method, opt);
        row.mean_time_ms += sol.wall_time_ms;
        row.mean_iters += static_cast<double>(sol.iterations);
        row.mean_kkt_residual += kkt_residual(inst, sol.x);
        ++row.runs;
      }
    }
    for (auto& row : block) {
      const double k = static_cast<double>(row.runs);
      row.mean_time_ms /= k;
      row.mean_iters /= k;
      row.mean_kkt_residual /= k;
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace pdpi::lasso
