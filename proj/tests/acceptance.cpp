// Acceptance checks. `acceptance --criterion N` runs one check; no argument runs all.
// Each check prints a single PASS/FAIL line.

#include "pdpi/lasso.hpp"
#include "pdpi/mfg.hpp"
#include "pdpi/transport.hpp"
#include "lasso_oracle.hpp"
#include "solver_cases.hpp"
#include "support.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>

using namespace pdpi;
using pdpi::testing::Rng;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void partial_inverse(Verdict& v) {
  const auto t0 = Clock::now();
  Rng rng(1001);
  double worst = 0.0;
  for (int s = 0; s < 200; ++s)
    worst = std::max(worst, testing::partial_inverse_error(testing::random_partial_inverse_case(rng)));
  const double t = seconds_since(t0);
  v.detail << "200 cases, max error " << worst << ", " << t << " s";
  v.require(worst <= 1e-10, "error <= 1e-10");
  v.require(t < 5.0, "runtime < 5 s");
}

void reductions(Verdict& v) {
  const auto t0 = Clock::now();
  Rng rng(1002);
  double condat = 0.0, fb = 0.0;
  for (int s = 0; s < 20; ++s) {
    condat = std::max(condat, testing::condat_reduction_error(rng, 50));
    fb = std::max(fb, testing::fb_reduction_error(rng, 50));
    fb = std::max(fb, testing::fb_reduction_error(rng, 50, true));
  }
  const double t = seconds_since(t0);
  v.detail << "max deviation condat " << condat << ", fb " << fb << ", " << t << " s";
  v.require(condat <= 1e-12, "condat <= 1e-12");
  v.require(fb <= 1e-12, "fb <= 1e-12");
  v.require(t < 10.0, "runtime < 10 s");
}

void lasso_agreement(Verdict& v) {
  using namespace pdpi::lasso;
  const auto t0 = Clock::now();
  int wins = 0;
  double worst = 0.0, worst_ref = 0.0;
  bool all_converged = true;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto inst = generate_instance(100, 50, 10, seed);
    SolveOptions opt;
    opt.tol = 1e-6;
    opt.record_objective = false;
    double lo = kInfinity, hi = -kInfinity;
    long pd_sub = 0, pd_gen = 0;
    for (Method m : kAllMethods) {
      const auto sol = solve_formulation(inst, m, opt);
      all_converged = all_converged && sol.converged;
      lo = std::min(lo, sol.objective);
      hi = std::max(hi, sol.objective);
      if (m == Method::pd_subspaces) pd_sub = sol.iterations;
      if (m == Method::pd_generalized) pd_gen = sol.iterations;
    }
    const double ref = objective(inst, testing::admm_lasso(inst));
    worst = std::max(worst, (hi - lo) / std::abs(lo));
    worst_ref = std::max(worst_ref, std::max(hi - ref, ref - lo) / std::abs(ref));
    if (pd_sub < pd_gen) ++wins;
  }
  const double t = seconds_since(t0);
  v.detail << "max relative spread " << worst << " (vs ADMM " << worst_ref << "), pd_subspaces faster on " << wins
           << "/10, " << t << " s";
  v.require(all_converged, "all runs converged");
  v.require(worst <= 1e-5, "objective spread <= 1e-5");
  v.require(worst_ref <= 1e-5, "agreement with ADMM <= 1e-5");
  v.require(wins >= 8, "ordering on >= 8/10 seeds");
  v.require(t < 120.0, "runtime < 2 min");
}

void transport_consistency(Verdict& v) {
  using namespace pdpi::transport;
  const auto t0 = Clock::now();
  const std::string data = PDPI_DATA_DIR;
  const auto net = load_network_file(data + "/network1.net");
  double worst_obj = 0.0, worst_cons = 0.0, worst_demand = 0.0;
  bool all_converged = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto sc = sample_scenarios(net, 3, seed);
    const auto direct = solve_direct(net, sc);
    const auto sub = solve_subspace(net, sc);
    all_converged = all_converged && direct.converged && sub.converged;
    worst_obj = std::max(worst_obj, std::abs(direct.objective - sub.objective) / std::abs(direct.objective));
    for (const auto& r : sub.trace.records) worst_cons = std::max(worst_cons, r.residuals.at(0));
    worst_demand = std::max({worst_demand, demand_residual(net, sc, direct.f), demand_residual(net, sc, sub.f)});
  }
  const double t = seconds_since(t0);
  v.detail << "max relative objective gap " << worst_obj << ", subspace consensus " << worst_cons << ", demand "
           << worst_demand << ", " << t << " s";
  v.require(all_converged, "all runs converged");
  v.require(worst_obj <= 1e-6, "objective gap <= 1e-6");
  v.require(worst_cons <= 1e-12, "consensus <= 1e-12 at every iterate");
  v.require(worst_demand <= 1e-8, "demand <= 1e-8");
  v.require(t < 120.0, "runtime < 2 min");

  // soft check, logged only
  const auto net2 = load_network_file(data + "/network2.net");
  const auto sc2 = sample_scenarios(net2, 10, 0);
  TransportOptions opt;
  opt.max_iters = 2000;
  const auto d2 = solve_direct(net2, sc2, opt);
  const auto s2 = solve_subspace(net2, sc2, opt);
  const double td = d2.wall_time_ms / static_cast<double>(d2.iterations);
  const double ts = s2.wall_time_ms / static_cast<double>(s2.iterations);
  std::cout << "  note: network2 |scenarios|=10 per-iteration ms direct " << td << ", subspace " << ts
            << (ts <= td ? " (subspace not slower)" : " (subspace slower)") << "\n";
}

void mfg_reproduction(Verdict& v) {
  using namespace pdpi::mfg;
  const auto t0 = Clock::now();
  const MfgGrid g(20, 0.5);
  const auto K = build_kernel(g, 10.0, 1);
  const auto sq = run_mfg_solver(g, K, Method::cp_pi_sqrt);
  const auto fb = run_mfg_solver(g, K, Method::fb_pi);
  const auto cp = run_mfg_solver(g, K, Method::cp_pi);
  const double lo = std::min({sq.objective.raw, fb.objective.raw, cp.objective.raw});
  const double hi = std::max({sq.objective.raw, fb.objective.raw, cp.objective.raw});
  const double min_m = std::min({sq.residuals.min_m, fb.residuals.min_m, cp.residuals.min_m});
  const double t = seconds_since(t0);
  v.detail << "iterations cp_pi_sqrt " << sq.iterations << ", fb_pi " << fb.iterations << ", cp_pi "
           << cp.iterations << "; constraint " << sq.residuals.constraint_residual << ", cone "
           << sq.residuals.cone_residual << "; objectives " << lo << ".." << hi << " (scaled "
           << sq.objective.scaled << "); min_m " << min_m << ", " << t << " s";
  v.require(sq.converged && fb.converged && cp.converged, "all converged");
  v.require(sq.iterations <= 150, "cp_pi_sqrt <= 150 iterations");
  v.require(sq.residuals.constraint_residual <= 1e-9, "constraint <= 1e-9");
  v.require(sq.residuals.cone_residual <= 1e-8, "cone <= 1e-8");
  v.require(sq.iterations < fb.iterations && fb.iterations < cp.iterations, "cp_pi_sqrt < fb_pi < cp_pi");
  v.require(hi - lo <= 1e-3 * std::abs(lo), "objectives within 0.1%");
  v.require(min_m > 0.0, "min_m > 0");
  v.require(t < 180.0, "runtime < 3 min");
}

void exact_solution(Verdict& v) {
  using namespace pdpi::mfg;
  const auto t0 = Clock::now();
  const Index N = 20;
  const MfgGrid g(N, 0.5);
  const double mu = 10.0;
  const auto K = build_kernel(g, mu, 1, true);
  const GridField one = GridField::Ones(N, N), u = GridField::Zero(N, N);
  const double res = scheme_residual(g, K, one, u, mu);
  long worst_iters = 0;
  bool all_converged = true;
  for (Method m : kAllMethods) {
    MfgOptions opt;
    opt.warm_start = true;
    const auto r = run_mfg_solver(g, K, m, opt);
    all_converged = all_converged && r.converged;
    worst_iters = std::max(worst_iters, r.iterations);
  }
  const double t = seconds_since(t0);
  v.detail << "scheme residual " << res << ", max warm-start iterations " << worst_iters << ", " << t << " s";
  v.require(res <= 1e-12, "scheme residual zero");
  v.require(all_converged && worst_iters <= 2, "warm starts stop in <= 2 iterations");
  v.require(t < 5.0, "runtime < 5 s");
}

// The property suites live in the unit-test binaries; run them filtered to the
// sampled property tests.
void property_suites(Verdict& v) {
  const auto t0 = Clock::now();
  const std::vector<std::pair<std::string, std::string>> suites = {
      {PDPI_TEST_HILBERT,
       "Hilbert.AdjointIdentityProperty:Hilbert.ProjectorProperties:Hilbert.ProjectorMatchesLeastSquaresOracle:"
       "Hilbert.OpNormMatchesGramOracle"},
      {PDPI_TEST_PROX,
       "Prox.MoreauIdentityProperty:Prox.FirmNonexpansiveness:Prox.SoftThresholdSubgradientOptimality:"
       "Prox.KernelProjectorMatchesSvdOracle:Prox.SimplexMatchesActiveSetOracle:Prox.MfgCellStationarityProperty"},
      {PDPI_TEST_LASSO, "Lasso.GradientIsCocoercive"},
      {PDPI_TEST_TRANSPORT,
       "Transport.GradientMatchesFiniteDifferences:Transport.GradientLipschitzBound:Transport.OperatorAdjoint"},
      {PDPI_TEST_MFG,
       "MfgGrid.AdjointIdentities:MfgKernel.PsdSymmetricAndSqrt:MfgKernel.PotentialGradientMatchesFiniteDifferences:"
       "MfgConstraint.AdjointAndNorm"},
  };
  int failed = 0;
  for (const auto& [binary, filter] : suites) {
    const std::string cmd = "\"" + binary + "\" --gtest_brief=1 --gtest_filter=" + filter + " > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) {
      ++failed;
      v.detail << "failing binary " << binary << "; ";
    }
  }
  const double t = seconds_since(t0);
  v.detail << suites.size() - static_cast<std::size_t>(failed) << "/" << suites.size() << " suites passed with "
           << testing::kSamples << " samples, " << t << " s";
  v.require(failed == 0, "all property suites pass");
  v.require(testing::kSamples == 100, "100 samples");
  v.require(t < 60.0, "runtime < 1 min");
}

const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> kCriteria = {
    {"partial-inverse oracle equivalence", partial_inverse},
    {"reduction equalities", reductions},
    {"lasso cross-formulation agreement", lasso_agreement},
    {"transport consistency", transport_consistency},
    {"mfg desk-scale reproduction", mfg_reproduction},
    {"exact-solution sanity", exact_solution},
    {"property suites", property_suites},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  int only = 0;
  app.add_option("--criterion", only, "run a single criterion")->check(CLI::Range(1, 7));
  CLI11_PARSE(app, argc, argv);

  int failures = 0;
  for (std::size_t i = 0; i < kCriteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (only != 0 && id != only) continue;
    Verdict v;
    try {
      kCriteria[i].second(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << " [exception: " << e.what() << "]";
    }
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << kCriteria[i].first
              << "): " << v.detail.str() << std::endl;
    if (!v.pass) ++failures;
  }
  return failures == 0 ? 0 : 1;
}
