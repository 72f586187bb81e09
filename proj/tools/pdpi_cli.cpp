#include "pdpi/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace ex = pdpi::experiment;

int main(int argc, char** argv) {
  CLI::App app{"Primal-dual partial-inverse solvers and benchmarks"};
  app.require_subcommand(1);

  auto* solve = app.add_subcommand("solve", "run a benchmark experiment");
  std::string benchmark, config, out;
  std::optional<double> tol;
  std::optional<long> max_iters;
  std::vector<std::uint64_t> seeds;
  bool tune = false;
  int jobs = 1;
  solve->add_option("benchmark", benchmark, "lasso, transport or mfg")
      ->required()
      ->check(CLI::IsMember({"lasso", "transport", "mfg"}));
  solve->add_option("--config", config, "experiment config file")->required();
  solve->add_option("--out", out, "output directory")->required();
  solve->add_option("--tol", tol, "stopping tolerance (overrides config)");
  solve->add_option("--max-iters", max_iters, "iteration limit (overrides config)");
  solve->add_option("--seed", seeds, "seed list (overrides config)");
  solve->add_flag("--tune", tune, "grid-search step sizes before the runs");
  solve->add_option("--jobs", jobs, "parallel runs")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    auto cfg = ex::load_config(config, *ex::parse_benchmark(benchmark));
    if (tol) {
      if (!(*tol > 0.0)) throw ex::ConfigError("--tol must be positive");
      cfg.tol = *tol;
    }
    if (max_iters) {
      if (*max_iters < 1) throw ex::ConfigError("--max-iters must be >= 1");
      cfg.max_iters = *max_iters;
    }
    if (solve->count("--seed")) {
      if (cfg.benchmark == ex::Benchmark::mfg) std::cerr << "warning: mfg runs are deterministic; --seed ignored\n";
      cfg.seeds = seeds;
    }
    cfg.tune = cfg.tune || tune;
    cfg.jobs = jobs;
    cfg.out_dir = out;

    const auto outcome = ex::run_experiment(cfg, std::cerr);
    for (const auto& r : outcome.runs) {
      if (!r.error.empty()) continue;
      std::cout << r.method;
      if (cfg.benchmark != ex::Benchmark::mfg) std::cout << " seed " << r.seed;
      std::cout << ": iterations " << r.iterations
                << (r.converged ? "" : " (limit)") << (r.diverged ? " DIVERGED" : "") << ", objective "
                << ex::fmt(r.objective) << ", " << ex::fmt(r.wall_time_ms) << " ms\n";
    }
    std::cout << "wrote " << outcome.files.size() << " files to " << out << '\n';
    return outcome.exit_code;
  } catch (const ex::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
