#pragma once

// Finite-difference variational solver for the stationary mean field game on
// the two-dimensional torus with a non-local coupling.
//
// Grid fields are N x N matrices indexed (i, j) with periodic wraparound.
// Flux fields carry four such components. The generic steppers operate on the
// flattened vector [vec m ; vec w1 ; ... ; vec w4].

#include "pdpi/hilbert.hpp"
#include "pdpi/prox.hpp"
#include "pdpi/solver.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace pdpi::mfg {

using GridField = Matrix;

struct FluxField {
  std::array<GridField, 4> c;

  GridField& operator[](std::size_t k) { return c[k]; }
  const GridField& operator[](std::size_t k) const { return c[k]; }

  static FluxField zero(Index N) {
    FluxField w;
    for (auto& x : w.c) x = GridField::Zero(N, N);
    return w;
  }
};

struct MfgGrid {
  Index N = 0;
  double h = 0.0;
  double nu = 0.0;

  MfgGrid() = default;
  MfgGrid(Index n, double viscosity) : N(n), h(1.0 / static_cast<double>(n)), nu(viscosity) {
    if (n < 2) throw std::invalid_argument("MfgGrid: N must be >= 2");
    if (!(viscosity > 0.0)) throw std::invalid_argument("MfgGrid: nu must be positive");
  }

  Index cells() const { return N * N; }
};

// --- Stencils ----------------------------------------------------------------

/// out(i, j) = z(i + di, j + dj), indices modulo N.
inline GridField shifted(const GridField& z, Index di, Index dj) {
  const Index N = z.rows();
  GridField out(N, N);
  for (Index j = 0; j < N; ++j) {
    const Index jj = ((j + dj) % N + N) % N;
    for (Index i = 0; i < N; ++i) out(i, j) = z(((i + di) % N + N) % N, jj);
  }
  return out;
}

inline GridField D1(const MfgGrid& g, const GridField& z) { return (shifted(z, 1, 0) - z) / g.h; }
inline GridField D2(const MfgGrid& g, const GridField& z) { return (shifted(z, 0, 1) - z) / g.h; }

inline FluxField Dh(const MfgGrid& g, const GridField& z) {
  FluxField out;
  out[0] = D1(g, z);
  out[1] = shifted(out[0], -1, 0);
  out[2] = D2(g, z);
  out[3] = shifted(out[2], 0, -1);
  return out;
}

inline GridField laplacian(const MfgGrid& g, const GridField& z) {
  return (shifted(z, -1, 0) + shifted(z, 1, 0) + shifted(z, 0, -1) + shifted(z, 0, 1) - 4.0 * z) /
         (g.h * g.h);
}

inline GridField divergence(const MfgGrid& g, const FluxField& w) {
  return shifted(D1(g, w[0]), -1, 0) + D1(g, w[1]) + shifted(D2(g, w[2]), 0, -1) + D2(g, w[3]);
}

enum class GridOp { D1, D2, Dh, laplacian, divergence };

/// Uniform entry point. Grid-valued kinds read `field`, divergence reads `flux`;
/// the result is returned in the matching slot.
struct GridOpResult {
  GridField field;
  FluxField flux;
};

inline void require_grid_shape(const MfgGrid& g, const GridField& z, const char* where) {
  if (z.rows() != g.N || z.cols() != g.N) {
    throw std::invalid_argument(std::string(where) + ": field is not N x N");
  }
}

inline GridOpResult apply_grid_operator(const MfgGrid& g, GridOp kind, const GridField& field,
                                        const FluxField* flux = nullptr) {
  GridOpResult out;
  switch (kind) {
    case GridOp::D1: require_grid_shape(g, field, "D1"); out.field = D1(g, field); break;
    case GridOp::D2: require_grid_shape(g, field, "D2"); out.field = D2(g, field); break;
    case GridOp::Dh: require_grid_shape(g, field, "Dh"); out.flux = Dh(g, field); break;
    case GridOp::laplacian: require_grid_shape(g, field, "laplacian"); out.field = laplacian(g, field); break;
    case GridOp::divergence:
      if (!flux) throw std::invalid_argument("divergence: flux field required");
      for (const auto& c : flux->c) require_grid_shape(g, c, "divergence");
      out.field = divergence(g, *flux);
      break;
  }
  return out;
}

inline double inner(const FluxField& a, const FluxField& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < 4; ++k) s += a[k].cwiseProduct(b[k]).sum();
  return s;
}

// --- Flattening ----------------------------------------------------------------

inline Vector flatten(const GridField& m, const FluxField& w) {
  const Index n = m.size();
  Vector z(5 * n);
  z.segment(0, n) = m.reshaped();
  for (std::size_t k = 0; k < 4; ++k) z.segment(static_cast<Index>(k + 1) * n, n) = w[k].reshaped();
  return z;
}

inline GridField density_of(const MfgGrid& g, const Vector& z) {
  return z.segment(0, g.cells()).reshaped(g.N, g.N);
}

inline FluxField flux_of(const MfgGrid& g, const Vector& z) {
  FluxField w;
  for (std::size_t k = 0; k < 4; ++k) {
    w[k] = z.segment(static_cast<Index>(k + 1) * g.cells(), g.cells()).reshaped(g.N, g.N);
  }
  return w;
}

// --- Spectral calculus of the periodic Laplacian -------------------------------

/// Real orthonormal eigenbasis of the 1-D periodic second difference. Columns
/// are 1/sqrt(N), sqrt(2/N) cos/sin pairs, and the alternating vector for even N;
/// `eig` holds the matching eigenvalues of -Delta in one direction.
struct Spectrum {
  Matrix Q;
  Vector eig;
  Matrix lambda;  // eigenvalues of -Delta_h, lambda(a, b) = eig[a] + eig[b]

  GridField forward(const GridField& z) const { return Q.transpose() * z * Q; }
  GridField inverse(const GridField& c) const { return Q * c * Q.transpose(); }

  template <class F>
  GridField apply(const GridField& z, F&& multiplier) const {
    GridField c = forward(z);
    for (Index b = 0; b < c.cols(); ++b)
      for (Index a = 0; a < c.rows(); ++a) c(a, b) *= multiplier(lambda(a, b));
    return inverse(c);
  }
};

inline Spectrum make_spectrum(const MfgGrid& g) {
  const Index N = g.N;
  const double pi = std::numbers::pi;
  Spectrum s;
  s.Q.resize(N, N);
  s.eig.resize(N);
  auto eigval = [&](Index k) {
    const double v = std::sin(pi * static_cast<double>(k) / static_cast<double>(N));
    return 4.0 * v * v / (g.h * g.h);
  };
  Index col = 0;
  for (Index j = 0; j < N; ++j) s.Q(j, col) = 1.0 / std::sqrt(static_cast<double>(N));
  s.eig[col++] = 0.0;
  for (Index k = 1; 2 * k < N; ++k) {
    const double scale = std::sqrt(2.0 / static_cast<double>(N));
    for (Index j = 0; j < N; ++j) {
      const double t = 2.0 * pi * static_cast<double>(k * j) / static_cast<double>(N);
      s.Q(j, col) = scale * std::cos(t);
      s.Q(j, col + 1) = scale * std::sin(t);
    }
    s.eig[col] = s.eig[col + 1] = eigval(k);
    col += 2;
  }
  if (N % 2 == 0) {
    for (Index j = 0; j < N; ++j) s.Q(j, col) = ((j % 2 == 0) ? 1.0 : -1.0) / std::sqrt(static_cast<double>(N));
    s.eig[col++] = eigval(N / 2);
  }
  s.lambda.resize(N, N);
  for (Index b = 0; b < N; ++b)
    for (Index a = 0; a < N; ++a) s.lambda(a, b) = s.eig[a] + s.eig[b];
  return s;
}

// --- Kernel ----------------------------------------------------------------------

/// K_h = mu (Id - Delta_h)^{-p}, with its square root, the resolvent
/// (Id + K_h / gamma)^{-1}, and the linear cost K0.
struct KernelOp {
  double mu = 0.0;
  int p = 1;
  GridField K0;
  std::shared_ptr<const Spectrum> spectrum;

  double symbol(double lambda) const { return mu * std::pow(1.0 + lambda, -p); }

  GridField apply(const GridField& m) const {
    return spectrum->apply(m, [this](double l) { return symbol(l); });
  }
  GridField sqrt_apply(const GridField& m) const {
    return spectrum->apply(m, [this](double l) { return std::sqrt(symbol(l)); });
  }
  /// (Id + K_h / gamma)^{-1} m.
  GridField resolvent(const GridField& m, double gamma) const {
    return spectrum->apply(m, [this, gamma](double l) { return 1.0 / (1.0 + symbol(l) / gamma); });
  }
  /// ||K_h||, attained at the constant mode.
  double norm() const { return mu; }
};

inline GridField default_K0(const MfgGrid& g) {
  const double pi = std::numbers::pi;
  GridField k0(g.N, g.N);
  for (Index j = 0; j < g.N; ++j) {
    for (Index i = 0; i < g.N; ++i) {
      const double hi = g.h * static_cast<double>(i);
      const double hj = g.h * static_cast<double>(j);
      k0(i, j) = -std::sin(2.0 * pi * hj) + std::sin(2.0 * pi * hi) + std::cos(4.0 * pi * hi);
    }
  }
  return k0;
}

inline KernelOp build_kernel(const MfgGrid& g, double mu = 10.0, int p = 1, bool zero_k0 = false) {
  if (!(mu > 0.0)) throw std::invalid_argument("build_kernel: mu must be positive");
  if (p < 1) throw std::invalid_argument("build_kernel: p must be >= 1");
  KernelOp k;
  k.mu = mu;
  k.p = p;
  k.spectrum = std::make_shared<const Spectrum>(make_spectrum(g));
  k.K0 = zero_k0 ? GridField::Zero(g.N, g.N) : default_K0(g);
  return k;
}

// --- Constraint operator L1 and its kernel ----------------------------------------

/// L1(m, w) = (-nu Delta_h m + div_h w, h^2 <1, m>), flattened as [vec ; scalar].
inline Vector apply_L1(const MfgGrid& g, const GridField& m, const FluxField& w) {
  Vector out(g.cells() + 1);
  out.head(g.cells()) = (-g.nu * laplacian(g, m) + divergence(g, w)).reshaped();
  out[g.cells()] = g.h * g.h * m.sum();
  return out;
}

/// L1^*(z, s) = (-nu Delta_h z + h^2 s 1, -D_h z).
inline std::pair<GridField, FluxField> apply_L1_adjoint(const MfgGrid& g, const GridField& z, double s) {
  GridField m = -g.nu * laplacian(g, z) + GridField::Constant(g.N, g.N, g.h * g.h * s);
  FluxField w = Dh(g, z);
  for (auto& c : w.c) c = -c;
  return {std::move(m), std::move(w)};
}

/// ||L1||^2: L1 L1^* = diag(nu^2 Delta^2 - 2 Delta, h^2) in the Fourier basis.
inline double L1_norm(const MfgGrid& g, const Spectrum& s) {
  const double lmax = s.lambda.maxCoeff();
  return std::sqrt(std::max(g.nu * g.nu * lmax * lmax + 2.0 * lmax, g.h * g.h));
}

/// Orthogonal projector onto ker L1. The normal operator L1 L1^* is diagonal in
/// the Fourier basis; its only null direction (the constant mode of the first
/// block) is orthogonal to the range of L1 and is dropped.
class KerL1Projector {
 public:
  KerL1Projector(const MfgGrid& g, std::shared_ptr<const Spectrum> s) : g_(g), s_(std::move(s)) {
    inv_.resize(g.N, g.N);
    for (Index b = 0; b < g.N; ++b) {
      for (Index a = 0; a < g.N; ++a) {
        const double l = s_->lambda(a, b);
        const double d = g.nu * g.nu * l * l + 2.0 * l;
        if (a == 0 && b == 0) {
          inv_(a, b) = 0.0;
        } else if (!(d > 0.0)) {
          throw std::runtime_error("project_ker_L1: singular normal operator");
        } else {
          inv_(a, b) = 1.0 / d;
        }
      }
    }
  }

  Vector operator()(const Vector& z) const {
    const GridField m = density_of(g_, z);
    const FluxField w = flux_of(g_, z);
    const Vector r = apply_L1(g_, m, w);
    const GridField r0 = r.head(g_.cells()).reshaped(g_.N, g_.N);
    const GridField y = s_->inverse(s_->forward(r0).cwiseProduct(inv_));
    const double ys = r[g_.cells()] / (g_.h * g_.h);
    const auto [am, aw] = apply_L1_adjoint(g_, y, ys);
    return z - flatten(am, aw);
  }

  SubspaceProjector as_projector() const {
    auto self = std::make_shared<const KerL1Projector>(*this);
    return {[self](const Vector& z) { return (*self)(z); }, 5 * g_.cells()};
  }

 private:
  MfgGrid g_;
  std::shared_ptr<const Spectrum> s_;
  GridField inv_;
};

inline std::pair<GridField, FluxField> project_ker_L1(const MfgGrid& g, const GridField& m,
                                                      const FluxField& w) {
  KerL1Projector P(g, std::make_shared<const Spectrum>(make_spectrum(g)));
  const Vector z = P(flatten(m, w));
  return {density_of(g, z), flux_of(g, z)};
}

// --- Objective and residuals --------------------------------------------------------

/// b(eta, omega) = |omega|^2 / (2 eta) on (0, inf) x C, 0 at the origin.
inline double cell_cost(double eta, const Vector4& omega) {
  const bool in_cone = omega[0] >= 0.0 && omega[1] <= 0.0 && omega[2] >= 0.0 && omega[3] <= 0.0;
  if (!in_cone || eta < 0.0) return kInfinity;
  if (eta == 0.0) return omega.isZero(0.0) ? 0.0 : kInfinity;
  return omega.squaredNorm() / (2.0 * eta);
}

inline Vector4 cell(const FluxField& w, Index i, Index j) {
  return {w[0](i, j), w[1](i, j), w[2](i, j), w[3](i, j)};
}

struct ObjectiveValue {
  double raw = 0.0;     // B_h + Phi_h summed over cells
  double scaled = 0.0;  // raw * h^2
};

inline ObjectiveValue mfg_objective(const MfgGrid& g, const KernelOp& K, const GridField& m,
                                    const FluxField& w) {
  double b = 0.0;
  for (Index j = 0; j < g.N; ++j)
    for (Index i = 0; i < g.N; ++i) b += cell_cost(m(i, j), cell(w, i, j));
  if (std::isinf(b)) return {kInfinity, kInfinity};
  const double phi = 0.5 * m.cwiseProduct(K.apply(m)).sum() + K.K0.cwiseProduct(m).sum();
  return {b + phi, (b + phi) * g.h * g.h};
}

struct MfgResiduals {
  double constraint_residual = 0.0;
  double cone_residual = 0.0;
  std::optional<double> scheme_residual;
  double mass = 0.0;
  double min_m = 0.0;
};

inline double cone_distance_sq(const FluxField& w) {
  return w[0].cwiseMin(0.0).squaredNorm() + w[1].cwiseMax(0.0).squaredNorm() +
         w[2].cwiseMin(0.0).squaredNorm() + w[3].cwiseMax(0.0).squaredNorm();
}

/// Sup-norm residual of the finite-difference scheme at (m, u, lambda).
inline double scheme_residual(const MfgGrid& g, const KernelOp& K, const GridField& m,
                              const GridField& u, double lambda) {
  const FluxField du = Dh(g, u);
  FluxField drift;
  GridField hamiltonian = GridField::Zero(g.N, g.N);
  for (std::size_t k = 0; k < 4; ++k) drift[k] = -du[k];
  drift[0] = drift[0].cwiseMax(0.0);
  drift[1] = drift[1].cwiseMin(0.0);
  drift[2] = drift[2].cwiseMax(0.0);
  drift[3] = drift[3].cwiseMin(0.0);
  for (std::size_t k = 0; k < 4; ++k) hamiltonian += drift[k].cwiseProduct(drift[k]);

  const GridField hjb = -g.nu * laplacian(g, u) + 0.5 * hamiltonian +
                        GridField::Constant(g.N, g.N, lambda) - K.apply(m) - K.K0;
  FluxField mflux;
  for (std::size_t k = 0; k < 4; ++k) mflux[k] = m.cwiseProduct(drift[k]);
  const GridField fp = -g.nu * laplacian(g, m) + divergence(g, mflux);

  double r = std::max(hjb.cwiseAbs().maxCoeff(), fp.cwiseAbs().maxCoeff());
  r = std::max(r, std::max(0.0, -m.minCoeff()));
  r = std::max(r, std::abs(g.h * g.h * m.sum() - 1.0));
  r = std::max(r, std::abs(u.sum()));
  return r;
}

inline MfgResiduals mfg_residuals(const MfgGrid& g, const KernelOp& K, const GridField& m,
                                  const FluxField& w, const GridField* u = nullptr,
                                  std::optional<double> lambda = std::nullopt) {
  MfgResiduals r;
  Vector l1 = apply_L1(g, m, w);
  l1[g.cells()] -= 1.0;
  r.constraint_residual = l1.norm();
  r.cone_residual = cone_distance_sq(w);
  r.mass = g.h * g.h * m.sum();
  r.min_m = m.minCoeff();
  if (u && lambda) r.scheme_residual = scheme_residual(g, K, m, *u, *lambda);
  return r;
}

// --- Solvers --------------------------------------------------------------------------

enum class Method { pd_feas, pd_id, fb_pi, cp_pi, cp_pi_sqrt };

inline constexpr std::array<Method, 5> kAllMethods = {Method::pd_feas, Method::pd_id, Method::fb_pi,
                                                      Method::cp_pi, Method::cp_pi_sqrt};

inline const char* to_string(Method m) {
  switch (m) {
    case Method::pd_feas: return "pd_feas";
    case Method::pd_id: return "pd_id";
    case Method::fb_pi: return "fb_pi";
    case Method::cp_pi: return "cp_pi";
    case Method::cp_pi_sqrt: return "cp_pi_sqrt";
  }
  return "unknown";
}

inline std::optional<Method> parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (s == to_string(m)) return m;
  return std::nullopt;
}

inline bool uses_subspace(Method m) {
  return m == Method::fb_pi || m == Method::cp_pi || m == Method::cp_pi_sqrt;
}

struct MfgSteps {
  double tau = 0.0;
  double gamma = 0.0;  // unused by fb_pi
};

/// Method-specific convergence condition on (tau, gamma).
inline StepSizeValidation validate_steps(Method method, const MfgGrid& g, const KernelOp& K,
                                         const MfgSteps& s) {
  const double beta = 1.0 / K.norm();
  switch (method) {
    case Method::pd_feas:
      return validate_stepsizes(s.tau, s.gamma, beta, kInfinity, L1_norm(g, *K.spectrum));
    case Method::pd_id:
      return validate_stepsizes(s.tau, s.gamma, beta, kInfinity, 1.0);
    case Method::fb_pi: {
      StepSizeValidation v;
      if (!(s.tau > 0.0)) {
        v.status = StepCheck::non_positive;
      } else {
        v.slack = 2.0 * beta - s.tau;
        if (!(s.tau < 2.0 * beta)) v.status = StepCheck::tau_too_large;
      }
      return v;
    }
    case Method::cp_pi:
      return validate_stepsizes(s.tau, s.gamma, kInfinity, kInfinity, 1.0);
    case Method::cp_pi_sqrt:
      return validate_stepsizes(s.tau, s.gamma, kInfinity, kInfinity, std::sqrt(K.norm()));
  }
  return {};
}

/// tau = gamma filling 90% of the method's step condition; fb_pi takes 90% of
/// its bound 2 / ||K_h||.
inline MfgSteps default_steps(Method method, const MfgGrid& g, const KernelOp& K) {
  const double beta = 1.0 / K.norm();
  auto balanced = [&](double b, double L_norm) {
    const StepSizes s = default_stepsizes(b, kInfinity, L_norm, 0.9);
    return MfgSteps{s.tau, s.gamma};
  };
  switch (method) {
    case Method::pd_feas: return balanced(beta, L1_norm(g, *K.spectrum));
    case Method::pd_id: return balanced(beta, 1.0);
    case Method::fb_pi: return {0.9 * 2.0 * beta, 0.0};
    case Method::cp_pi: return balanced(kInfinity, 1.0);
    case Method::cp_pi_sqrt: return balanced(kInfinity, std::sqrt(K.norm()));
  }
  return {};
}

struct MfgOptions {
  std::optional<MfgSteps> steps;
  std::optional<double> tol;  // default 5 h^3
  long max_iters = 3000;
  bool warm_start = false;    // start from (1, 0) with the dual certificate for k0 = 0
};

struct MfgResult {
  Method method = Method::cp_pi_sqrt;
  GridField m;
  FluxField w;
  long iterations = 0;
  bool converged = false;
  bool diverged = false;
  ObjectiveValue objective;
  MfgResiduals residuals;
  MfgSteps steps;
  double wall_time_ms = 0.0;
  ConvergenceTrace trace;
};

inline std::vector<std::string> mfg_residual_names() {
  return {"constraint_residual", "cone_residual", "mass", "min_m"};
}

namespace detail {

struct Context {
  MfgGrid g;
  const KernelOp* K = nullptr;
  SubspaceProjector P_ker;
  Index n = 0;
  Vector shift;  // (1, 0)

  Vector prox_F(const Vector& z, double tau) const {
    Vector out(z.size());
    for (Index c = 0; c < n; ++c) {
      const Vector4 omega{z[n + c], z[2 * n + c], z[3 * n + c], z[4 * n + c]};
      const auto r = prox_mfg_cell(z[c], omega, tau, K->K0.reshaped()[c]);
      out[c] = r.m;
      for (Index k = 0; k < 4; ++k) out[(k + 1) * n + c] = r.w[k];
    }
    return out;
  }

  Vector grad_H(const Vector& z) const {
    Vector out = Vector::Zero(z.size());
    out.head(n) = K->apply(density_of(g, z)).reshaped();
    return out;
  }
};

/// Reported objective: the flux's cone violation is reported separately as
/// cone_residual, so the objective is evaluated on its projection onto C.
inline ObjectiveValue reported_objective(const MfgGrid& g, const KernelOp& K, const GridField& m,
                                         FluxField w) {
  w[0] = w[0].cwiseMax(0.0);
  w[1] = w[1].cwiseMin(0.0);
  w[2] = w[2].cwiseMax(0.0);
  w[3] = w[3].cwiseMin(0.0);
  return mfg_objective(g, K, m, w);
}

}  // namespace detail

inline MfgResult run_mfg_solver(const MfgGrid& g, const KernelOp& K, Method method,
                                const MfgOptions& opt = {}) {
  const MfgSteps steps = opt.steps ? *opt.steps : default_steps(method, g, K);
  const auto check = validate_steps(method, g, K, steps);
  if (!check.accepted()) {
    throw std::invalid_argument(std::string("run_mfg_solver: ") + to_string(method) +
                                " step sizes rejected: " + to_string(check.status));
  }
  const auto t0 = std::chrono::steady_clock::now();

  detail::Context ctx;
  ctx.g = g;
  ctx.K = &K;
  ctx.n = g.cells();
  ctx.P_ker = KerL1Projector(g, K.spectrum).as_projector();
  ctx.shift = Vector::Zero(5 * ctx.n);
  ctx.shift.head(ctx.n).setOnes();
  const Index n = ctx.n;
  const double mu = K.norm();
  const double h = g.h;
  const StoppingRule stop{opt.tol ? *opt.tol : 5.0 * h * h * h, opt.max_iters};

  // L2 grid norm of the difference between consecutive iterates (every
  // variable the recursion carries: primal, dual and partial-inverse parts).
  auto l2 = [h](const Vector& x0, const Vector& x1, const Vector& u0, const Vector& u1,
                const Vector* y0 = nullptr, const Vector* y1 = nullptr) {
    const double primal = h * (x1 - x0).norm();
    double dual_sq = (u1 - u0).squaredNorm();
    if (y0) dual_sq += (*y1 - *y0).squaredNorm();
    const double dual = h * std::sqrt(dual_sq);
    return Changes{primal, dual, std::hypot(primal, dual)};
  };
  // Maps a primal iterate to the reported (m, w).
  const bool shifted_var = uses_subspace(method);
  auto to_mw = [&](const Vector& x) { return shifted_var ? Vector(x + ctx.shift) : x; };
  auto monitor_of = [&](const Vector& x) {
    const Vector z = to_mw(x);
    const GridField m = density_of(g, z);
    const FluxField w = flux_of(g, z);
    const auto res = mfg_residuals(g, K, m, w);
    Observation o;
    o.objective = detail::reported_objective(g, K, m, w).raw;
    o.residuals = {res.constraint_residual, res.cone_residual, res.mass, res.min_m};
    return o;
  };

  const Vector zero_primal = Vector::Zero(5 * n);
  const Vector one_primal = ctx.shift;

  Vector final_x;
  long iterations = 0;
  bool converged = false, diverged = false;
  ConvergenceTrace trace;

  auto finish = [&](auto&& res, const Vector& x) {
    final_x = x;
    iterations = res.iterations;
    converged = res.converged;
    diverged = res.diverged;
    trace = std::move(res.trace);
  };

  switch (method) {
    case Method::pd_feas: {
      PdpiProblem pb;
      pb.L = {[&g](const Vector& z) { return apply_L1(g, density_of(g, z), flux_of(g, z)); },
              [&ctx, &g](const Vector& q) {
                const auto [m, w] = apply_L1_adjoint(g, q.head(ctx.n).reshaped(g.N, g.N), q[ctx.n]);
                return flatten(m, w);
              },
              5 * n, n + 1, L1_norm(g, *K.spectrum)};
      pb.P_V = SubspaceProjector::identity(5 * n);
      pb.P_W = SubspaceProjector::identity(n + 1);
      pb.resolvent_A = {[&ctx](const Vector& z, double tau) { return ctx.prox_F(z, tau); }, "F"};
      pb.resolvent_Binv = {[n](const Vector& q, double gamma) {
                             Vector out = q;
                             out[n] -= gamma;
                             return out;
                           },
                           "iota_(0,1)*"};
      pb.C = [&ctx](const Vector& z) { return ctx.grad_H(z); };
      pb.beta = 1.0 / mu;
      pb.T = [n, h](const Vector& z) {
        Vector out = z;
        out.head(n).array() += 1.0 - h * h * z.head(n).sum();
        return out;
      };
      Vector u0 = Vector::Zero(n + 1);
      if (opt.warm_start) u0[n] = -mu / (h * h);
      const PdpiState init = make_initial_state(pb, one_primal, u0);
      auto res = iterate(
          init, [&](const PdpiState& s) { return pdpi_step(pb, {steps.tau, steps.gamma}, s); },
          [&](const PdpiState& a, const PdpiState& b) { return l2(a.x, b.x, a.u, b.u, &a.y, &b.y); }, stop,
          Monitor<PdpiState>([&](const PdpiState& s) { return monitor_of(s.x); }),
          mfg_residual_names());
      const Vector x = res.state.x;
      finish(res, x);
      break;
    }
    case Method::pd_id: {
      CondatProblem pb;
      pb.L = LinearMap::identity(5 * n);
      pb.prox_F = {[&ctx](const Vector& z, double tau) { return ctx.prox_F(z, tau); }, "F"};
      pb.prox_Gconj = {[&ctx](const Vector& q, double gamma) {
                         const Vector a = q - gamma * ctx.shift;
                         return Vector(a - ctx.P_ker(a));
                       },
                       "iota_(ker L1 + (1,0))*"};
      pb.grad_H = [&ctx](const Vector& z) { return ctx.grad_H(z); };
      pb.beta = 1.0 / mu;
      CondatState init{one_primal, one_primal, Vector::Zero(5 * n), 0};
      if (opt.warm_start) init.u.head(n).setConstant(-mu);
      auto res = iterate(
          init, [&](const CondatState& s) { return condat_step(pb, {steps.tau, steps.gamma}, s); },
          [&](const CondatState& a, const CondatState& b) { return l2(a.x, b.x, a.u, b.u); }, stop,
          Monitor<CondatState>([&](const CondatState& s) { return monitor_of(s.x); }),
          mfg_residual_names());
      const Vector x = res.state.x;
      finish(res, x);
      break;
    }
    case Method::fb_pi: {
      FbpiProblem pb;
      pb.P_V = ctx.P_ker;
      pb.prox_f = {[&ctx](const Vector& z, double tau) {
                     return Vector(ctx.prox_F(z + ctx.shift, tau) - ctx.shift);
                   },
                   "F(.+(1,0))"};
      pb.grad_h = [&ctx](const Vector& z) { return ctx.grad_H(z + ctx.shift); };
      FbpiState init{zero_primal, zero_primal, 0};
      auto res = iterate(
          init, [&](const FbpiState& s) { return fb_partial_inverse_step(pb, steps.tau, s); },
          [&](const FbpiState& a, const FbpiState& b) { return l2(a.x, b.x, a.y, b.y); }, stop,
          Monitor<FbpiState>([&](const FbpiState& s) { return monitor_of(s.x); }),
          mfg_residual_names());
      const Vector x = res.state.x;
      finish(res, x);
      break;
    }
    case Method::cp_pi:
    case Method::cp_pi_sqrt: {
      PdpiProblem pb;
      const bool sqrt_form = method == Method::cp_pi_sqrt;
      if (sqrt_form) {
        pb.L = {[&K, &g, n](const Vector& z) -> Vector {
                  return K.sqrt_apply(z.head(n).reshaped(g.N, g.N)).reshaped();
                },
                [&K, &g, n](const Vector& q) -> Vector {
                  Vector out = Vector::Zero(5 * n);
                  out.head(n) = K.sqrt_apply(q.reshaped(g.N, g.N)).reshaped();
                  return out;
                },
                5 * n, n, std::sqrt(mu)};
        const double root_mu = std::sqrt(K.symbol(0.0));
        pb.resolvent_Binv = {[root_mu](const Vector& q, double gamma) -> Vector {
                               return (q.array() + gamma * root_mu).matrix() / (1.0 + gamma);
                             },
                             "G3(.+K^1/2 1)*"};
      } else {
        pb.L = LinearMap::identity(5 * n);
        pb.resolvent_Binv = {[&K, &g, n](const Vector& q, double gamma) -> Vector {
                               Vector out = Vector::Zero(q.size());
                               const GridField p = q.head(n).reshaped(g.N, g.N);
                               const GridField arg = (p / gamma).array() + 1.0;
                               const GridField r = K.resolvent(arg, gamma);
                               out.head(n) = (p.array() + gamma - gamma * r.array()).reshaped();
                               return out;
                             },
                             "H(.+(1,0))*"};
      }
      pb.P_V = ctx.P_ker;
      pb.P_W = SubspaceProjector::identity(pb.L.codomain_dim);
      pb.resolvent_A = {[&ctx](const Vector& z, double tau) {
                          return Vector(ctx.prox_F(z + ctx.shift, tau) - ctx.shift);
                        },
                        "F(.+(1,0))"};
      Vector u0 = Vector::Zero(pb.L.codomain_dim);
      if (opt.warm_start) u0.head(n).setConstant(sqrt_form ? std::sqrt(mu) : mu);
      const PdpiState init = make_initial_state(pb, zero_primal, u0);
      auto res = iterate(
          init, [&](const PdpiState& s) { return pdpi_step(pb, {steps.tau, steps.gamma}, s); },
          [&](const PdpiState& a, const PdpiState& b) { return l2(a.x, b.x, a.u, b.u, &a.y, &b.y); }, stop,
          Monitor<PdpiState>([&](const PdpiState& s) { return monitor_of(s.x); }),
          mfg_residual_names());
      const Vector x = res.state.x;
      finish(res, x);
      break;
    }
  }

  MfgResult out;
  out.method = method;
  const Vector z = to_mw(final_x);
  out.m = density_of(g, z);
  out.w = flux_of(g, z);
  out.iterations = iterations;
  out.converged = converged;
  out.diverged = diverged;
  out.objective = detail::reported_objective(g, K, out.m, out.w);
  out.residuals = mfg_residuals(g, K, out.m, out.w);
  out.steps = steps;
  out.trace = std::move(trace);
  out.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// --- Grid dump ------------------------------------------------------------------------

/// Header line "N h nu mu p", then N rows of N values of m.
inline void write_grid_dump(std::ostream& os, const MfgGrid& g, const KernelOp& K, const GridField& m) {
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << g.N << ' ' << num(g.h) << ' ' << num(g.nu) << ' ' << num(K.mu) << ' ' << K.p << '\n';
  for (Index i = 0; i < g.N; ++i) {
    for (Index j = 0; j < g.N; ++j) os << (j ? " " : "") << num(m(i, j));
    os << '\n';
  }
}

struct GridDump {
  Index N = 0;
  double h = 0.0, nu = 0.0, mu = 0.0;
  int p = 0;
  GridField m;
};

inline GridDump read_grid_dump(std::istream& is) {
  GridDump d;
  if (!(is >> d.N >> d.h >> d.nu >> d.mu >> d.p) || d.N < 2) {
    throw std::runtime_error("grid dump: bad header");
  }
  d.m.resize(d.N, d.N);
  for (Index i = 0; i < d.N; ++i)
    for (Index j = 0; j < d.N; ++j)
      if (!(is >> d.m(i, j))) throw std::runtime_error("grid dump: truncated data");
  return d;
}

}  // namespace pdpi::mfg
