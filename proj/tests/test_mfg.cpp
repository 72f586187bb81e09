#include "pdpi/mfg.hpp"
#include "mfg_oracle.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace pdpi;
using namespace pdpi::mfg;
using pdpi::testing::DenseGrid;
using pdpi::testing::kSamples;
using pdpi::testing::Rng;

namespace {

GridField field(Rng& rng, Index N) { return rng.mat(N, N); }

FluxField flux(Rng& rng, Index N) {
  FluxField w;
  for (auto& c : w.c) c = rng.mat(N, N);
  return w;
}

Vector vec(const GridField& z) { return z.reshaped(); }

Vector vec(const FluxField& w) {
  Vector out(4 * w[0].size());
  for (std::size_t k = 0; k < 4; ++k) out.segment(static_cast<Index>(k) * w[0].size(), w[0].size()) = w[k].reshaped();
  return out;
}

}  // namespace

TEST(MfgGrid, Validation) {
  EXPECT_THROW(MfgGrid(1, 0.5), std::invalid_argument);
  EXPECT_THROW(MfgGrid(4, 0.0), std::invalid_argument);
  const MfgGrid g(20, 0.5);
  EXPECT_EQ(g.h, 0.05);
  EXPECT_THROW(apply_grid_operator(g, GridOp::laplacian, GridField::Zero(3, 3)), std::invalid_argument);
  EXPECT_THROW(apply_grid_operator(g, GridOp::divergence, GridField::Zero(20, 20)), std::invalid_argument);
}

TEST(MfgGrid, ConstantsAreAnnihilated) {
  const MfgGrid g(7, 0.3);
  const GridField one = GridField::Constant(7, 7, 2.5);
  EXPECT_LE(apply_grid_operator(g, GridOp::laplacian, one).field.cwiseAbs().maxCoeff(), 1e-10);
  FluxField w;
  for (std::size_t k = 0; k < 4; ++k) w[k] = GridField::Constant(7, 7, 1.0 + static_cast<double>(k));
  EXPECT_LE(apply_grid_operator(g, GridOp::divergence, GridField(), &w).field.cwiseAbs().maxCoeff(), 1e-10);
}

TEST(MfgGrid, StencilsMatchDenseAssembly) {
  Rng rng(60);
  for (Index N : {2, 3, 4, 5, 8}) {
    const MfgGrid g(N, 0.4);
    const DenseGrid d{N, g.h, g.nu};
    const Matrix lap = d.laplacian(), grad = d.gradient();
    for (int s = 0; s < 20; ++s) {
      const GridField z = field(rng, N);
      const FluxField w = flux(rng, N);
      EXPECT_LE((vec(laplacian(g, z)) - lap * vec(z)).norm(), 1e-9);
      EXPECT_LE((vec(Dh(g, z)) - grad * vec(z)).norm(), 1e-9);
      EXPECT_LE((vec(divergence(g, w)) + grad.transpose() * vec(w)).norm(), 1e-8);
      EXPECT_LE((vec(D1(g, z)) - d.difference(true, 0, 0) * vec(z)).norm(), 1e-9);
      EXPECT_LE((vec(D2(g, z)) - d.difference(false, 0, 0) * vec(z)).norm(), 1e-9);
    }
  }
}

TEST(MfgGrid, AdjointIdentities) {
  Rng rng(61);
  const MfgGrid g(6, 0.5);
  for (int s = 0; s < kSamples; ++s) {
    const GridField z = field(rng, 6), u = field(rng, 6);
    const FluxField w = flux(rng, 6);
    FluxField mdz = Dh(g, z);
    for (auto& c : mdz.c) c = -c;
    const double a = divergence(g, w).cwiseProduct(z).sum(), b = inner(w, mdz);
    EXPECT_LE(std::abs(a - b), 1e-11 * (1.0 + std::abs(a)));
    // <-Delta u, z> = sum D1u D1z + D2u D2z
    const double lhs = (-laplacian(g, u)).cwiseProduct(z).sum();
    const double rhs = D1(g, u).cwiseProduct(D1(g, z)).sum() + D2(g, u).cwiseProduct(D2(g, z)).sum();
    EXPECT_LE(std::abs(lhs - rhs), 1e-10 * (1.0 + std::abs(lhs)));
    // div(D_h z) = 2 Delta z
    EXPECT_LE((divergence(g, Dh(g, z)) - 2.0 * laplacian(g, z)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(MfgKernel, Examples) {
  const MfgGrid g(12, 0.5);
  const auto K = build_kernel(g, 10.0, 1);
  const GridField one = GridField::Ones(12, 12);
  EXPECT_LE((K.apply(one) - 10.0 * one).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(K.K0(0, 0), 1.0);
  EXPECT_EQ(K.norm(), 10.0);
  EXPECT_TRUE(build_kernel(g, 10.0, 1, true).K0.isZero(0.0));
  EXPECT_THROW(build_kernel(g, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(build_kernel(g, 1.0, 0), std::invalid_argument);
  // K0 formula at another point
  EXPECT_NEAR(K.K0(3, 5), -std::sin(2 * M_PI * 5 / 12.0) + std::sin(2 * M_PI * 3 / 12.0) + std::cos(4 * M_PI * 3 / 12.0),
              1e-15);
}

TEST(MfgKernel, SpectrumIsOrthonormal) {
  for (Index N : {2, 5, 8, 9}) {
    const auto s = make_spectrum(MfgGrid(N, 1.0));
    EXPECT_LE((s.Q.transpose() * s.Q - Matrix::Identity(N, N)).norm(), 1e-12);
  }
}

TEST(MfgKernel, MatchesDenseOracle) {
  Rng rng(62);
  for (Index N : {3, 4, 6}) {
    for (int p : {1, 2}) {
      const MfgGrid g(N, 0.5);
      const auto K = build_kernel(g, 7.0, p);
      const Matrix Kd = DenseGrid{N, g.h, g.nu}.kernel(7.0, p);
      const Matrix Ks = pdpi::testing::sym_sqrt(Kd);
      for (int s = 0; s < 10; ++s) {
        const GridField m = field(rng, N);
        EXPECT_LE((vec(K.apply(m)) - Kd * vec(m)).norm(), 1e-10 * (1 + m.norm()));
        EXPECT_LE((vec(K.sqrt_apply(m)) - Ks * vec(m)).norm(), 1e-10 * (1 + m.norm()));
        const double gamma = rng.uniform(0.1, 3.0);
        const Matrix R = (Matrix::Identity(N * N, N * N) + Kd / gamma).inverse();
        EXPECT_LE((vec(K.resolvent(m, gamma)) - R * vec(m)).norm(), 1e-10 * (1 + m.norm()));
      }
    }
  }
}

TEST(MfgKernel, PsdSymmetricAndSqrt) {
  Rng rng(63);
  const MfgGrid g(10, 0.5);
  const auto K = build_kernel(g);
  for (int s = 0; s < kSamples; ++s) {
    const GridField m = field(rng, 10), z = field(rng, 10);
    EXPECT_GE(m.cwiseProduct(K.apply(m)).sum(), -1e-10);
    EXPECT_NEAR(m.cwiseProduct(K.apply(z)).sum(), z.cwiseProduct(K.apply(m)).sum(), 1e-12 * (1 + m.norm() * z.norm()));
    EXPECT_LE((K.sqrt_apply(K.sqrt_apply(m)) - K.apply(m)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(MfgKernel, PotentialGradientMatchesFiniteDifferences) {
  Rng rng(64);
  const MfgGrid g(6, 0.5);
  const auto K = build_kernel(g);
  const FluxField w0 = FluxField::zero(6);
  for (int s = 0; s < kSamples; ++s) {
    const GridField m = (field(rng, 6).array().abs() + 0.5).matrix();
    auto phi = [&](const Vector& v) { return mfg_objective(g, K, v.reshaped(6, 6), w0).raw; };
    const Vector fd = pdpi::testing::fd_gradient(phi, vec(m), 1e-5);
    EXPECT_LE(pdpi::testing::rel_err(vec(K.apply(m) + K.K0), fd), 1e-6);
  }
}

TEST(MfgConstraint, AdjointAndNorm) {
  Rng rng(65);
  const MfgGrid g(5, 0.3);
  const Matrix L = DenseGrid{5, g.h, g.nu}.L1();
  for (int s = 0; s < kSamples; ++s) {
    const GridField m = field(rng, 5), z = field(rng, 5);
    const FluxField w = flux(rng, 5);
    const double sc = rng.normal();
    const Vector l = apply_L1(g, m, w);
    EXPECT_LE((l - L * flatten(m, w)).norm(), 1e-9 * (1 + l.norm()));
    const auto [am, aw] = apply_L1_adjoint(g, z, sc);
    Vector zs(26);
    zs << vec(z), sc;
    const double lhs = l.dot(zs), rhs = flatten(m, w).dot(flatten(am, aw));
    EXPECT_LE(std::abs(lhs - rhs), 1e-10 * (1 + std::abs(lhs)));
  }
  EXPECT_NEAR(L1_norm(g, make_spectrum(g)), pdpi::testing::spectral_norm_gram(L), 1e-8 * pdpi::testing::spectral_norm_gram(L));
}

TEST(MfgConstraint, KernelProjectorMatchesPseudoinverse) {
  Rng rng(66);
  const MfgGrid g(4, 0.5);
  const Matrix P = pdpi::testing::kernel_projector_pinv(DenseGrid{4, g.h, g.nu}.L1());
  const auto [m0, w0] = project_ker_L1(g, GridField::Zero(4, 4), FluxField::zero(4));
  EXPECT_TRUE(m0.isZero(0.0));
  for (int s = 0; s < kSamples; ++s) {
    const GridField m = field(rng, 4);
    const FluxField w = flux(rng, 4);
    const auto [pm, pw] = project_ker_L1(g, m, w);
    const Vector got = flatten(pm, pw);
    EXPECT_LE((got - P * flatten(m, w)).norm(), 1e-9 * (1 + m.norm()));
    const auto [qm, qw] = project_ker_L1(g, pm, pw);
    EXPECT_LE((flatten(qm, qw) - got).norm(), 1e-12 * (1 + got.norm()));
    EXPECT_LE(apply_L1(g, pm, pw).norm(), 1e-9 * (1 + m.norm()));
  }
}

TEST(MfgObjective, Examples) {
  const MfgGrid g(8, 0.5);
  const auto K = build_kernel(g, 10.0, 1, true);
  const GridField one = GridField::Ones(8, 8);
  EXPECT_NEAR(mfg_objective(g, K, one, FluxField::zero(8)).raw, 10.0 * 64 / 2.0, 1e-9);
  EXPECT_NEAR(mfg_objective(g, K, one, FluxField::zero(8)).scaled, 10.0 / 2.0, 1e-12);

  GridField m = GridField::Zero(8, 8);
  FluxField w = FluxField::zero(8);
  w[0](2, 3) = 1.0;
  EXPECT_TRUE(std::isinf(mfg_objective(g, K, m, w).raw));

  KernelOp none = K;
  none.mu = 0.0;
  m(2, 3) = 2.0;
  w[0](2, 3) = 2.0;
  EXPECT_NEAR(mfg_objective(g, none, m, w).raw, 1.0, 1e-15);
  w[1](2, 3) = 0.5;  // outside C
  EXPECT_TRUE(std::isinf(mfg_objective(g, none, m, w).raw));
}

TEST(MfgObjective, ResidualExamples) {
  const MfgGrid g(10, 0.5);
  const auto K = build_kernel(g, 10.0, 1, true);
  const GridField one = GridField::Ones(10, 10);
  const GridField u = GridField::Zero(10, 10);
  const auto r = mfg_residuals(g, K, one, FluxField::zero(10), &u, 10.0);
  EXPECT_LE(r.constraint_residual, 1e-12);
  EXPECT_EQ(r.cone_residual, 0.0);
  EXPECT_NEAR(r.mass, 1.0, 1e-14);
  EXPECT_EQ(r.min_m, 1.0);
  ASSERT_TRUE(r.scheme_residual.has_value());
  EXPECT_LE(*r.scheme_residual, 1e-12);
  // with the default K0 the same triple is not a solution
  EXPECT_GT(scheme_residual(g, build_kernel(g), one, u, 10.0), 0.1);

  FluxField w = FluxField::zero(10);
  w[3](4, 4) = 0.7;
  EXPECT_NEAR(mfg_residuals(g, K, one, w).cone_residual, 0.49, 1e-15);
}

TEST(MfgSolver, MethodNamesAndSteps) {
  for (Method m : kAllMethods) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_FALSE(parse_method("newton").has_value());
  const MfgGrid g(8, 0.5);
  const auto K = build_kernel(g);
  for (Method m : kAllMethods) {
    EXPECT_TRUE(validate_steps(m, g, K, default_steps(m, g, K)).accepted()) << to_string(m);
    EXPECT_FALSE(validate_steps(m, g, K, {5.0, 5.0}).accepted()) << to_string(m);
    MfgOptions opt;
    opt.steps = MfgSteps{5.0, 5.0};
    EXPECT_THROW(run_mfg_solver(g, K, m, opt), std::invalid_argument);
  }
}

TEST(MfgSolver, WarmStartAtExactSolutionStopsImmediately) {
  const MfgGrid g(20, 0.5);
  const auto K = build_kernel(g, 10.0, 1, true);
  for (Method m : kAllMethods) {
    MfgOptions opt;
    opt.warm_start = true;
    const auto res = run_mfg_solver(g, K, m, opt);
    EXPECT_TRUE(res.converged) << to_string(m);
    EXPECT_LE(res.iterations, 2) << to_string(m);
    EXPECT_LE((res.m - GridField::Ones(20, 20)).cwiseAbs().maxCoeff(), 1e-8) << to_string(m);
  }
}

TEST(MfgSolver, SubspaceMethodsStayOnConstraint) {
  const MfgGrid g(10, 0.5);
  const auto K = build_kernel(g);
  std::vector<double> objectives;
  for (Method m : {Method::fb_pi, Method::cp_pi, Method::cp_pi_sqrt}) {
    const auto res = run_mfg_solver(g, K, m);
    ASSERT_TRUE(res.converged) << to_string(m);
    ASSERT_EQ(res.trace.residual_names, mfg_residual_names());
    for (const auto& r : res.trace.records) EXPECT_LE(r.residuals[0], 1e-9) << to_string(m);
    EXPECT_LE(res.residuals.constraint_residual, 1e-9);
    EXPECT_GT(res.residuals.min_m, 0.0);
    EXPECT_NEAR(res.residuals.mass, 1.0, 1e-10);
    objectives.push_back(res.objective.raw);
  }
  const auto [lo, hi] = std::minmax_element(objectives.begin(), objectives.end());
  EXPECT_LE(*hi - *lo, 1e-3 * std::abs(*lo));
}

TEST(MfgSolver, GridDumpRoundTrip) {
  const MfgGrid g(6, 0.25);
  const auto K = build_kernel(g, 3.0, 2);
  Rng rng(67);
  const GridField m = field(rng, 6);
  std::stringstream ss;
  write_grid_dump(ss, g, K, m);
  const auto d = read_grid_dump(ss);
  EXPECT_EQ(d.N, 6);
  EXPECT_EQ(d.h, g.h);
  EXPECT_EQ(d.nu, 0.25);
  EXPECT_EQ(d.mu, 3.0);
  EXPECT_EQ(d.p, 2);
  EXPECT_EQ(d.m, m);
  std::istringstream bad("6 0.1 0.2");
  EXPECT_THROW(read_grid_dump(bad), std::runtime_error);
}
