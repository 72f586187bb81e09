#pragma once

// Batch experiment runner: config parsing, per-run dispatch, CSV artifacts,
// step-size grid search and long-format plot data.

#include "pdpi/lasso.hpp"
#include "pdpi/mfg.hpp"
#include "pdpi/transport.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pdpi::experiment {

namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Benchmark { lasso, transport, mfg };

inline const char* to_string(Benchmark b) {
  switch (b) {
    case Benchmark::lasso: return "lasso";
    case Benchmark::transport: return "transport";
    case Benchmark::mfg: return "mfg";
  }
  return "?";
}

inline std::optional<Benchmark> parse_benchmark(std::string_view s) {
  for (Benchmark b : {Benchmark::lasso, Benchmark::transport, Benchmark::mfg})
    if (s == to_string(b)) return b;
  return std::nullopt;
}

inline std::vector<std::string> method_names(Benchmark b) {
  std::vector<std::string> out;
  switch (b) {
    case Benchmark::lasso:
      for (auto m : lasso::kAllMethods) out.emplace_back(lasso::to_string(m));
      break;
    case Benchmark::transport: out = {"direct", "subspace"}; break;
    case Benchmark::mfg:
      for (auto m : mfg::kAllMethods) out.emplace_back(mfg::to_string(m));
      break;
  }
  return out;
}

/// Methods with a single step parameter; gamma is ignored for them.
inline bool single_step(const std::string& method) {
  return method == "fb_subspaces" || method == "fb_pi";
}

struct ExperimentConfig {
  Benchmark benchmark = Benchmark::lasso;
  std::vector<std::string> methods;
  std::vector<std::uint64_t> seeds{0};
  std::optional<double> tol;  // benchmark default when unset
  long max_iters = 0;         // benchmark default when 0
  std::map<std::string, std::pair<double, double>> steps;  // explicit (tau, gamma)
  bool tune = false;
  int tune_points = 10;
  double tune_span = 10.0;  // grid covers [d / span, d * span] around the default d

  // lasso
  Index n = 100, p = 50, m = 10;
  double alpha = 1.0;
  // transport
  fs::path network;
  Index scenarios = 3;
  // mfg
  Index N = 20;
  double nu = 0.5, mu = 10.0;
  int kernel_power = 1;
  bool zero_k0 = false;
  bool warm_start = false;

  fs::path out_dir;
  int jobs = 1;

  double effective_tol() const {
    if (tol) return *tol;
    switch (benchmark) {
      case Benchmark::lasso: return 1e-6;
      case Benchmark::transport: return 1e-11;
      case Benchmark::mfg: {
        const double h = 1.0 / static_cast<double>(N);
        return 5.0 * h * h * h;
      }
    }
    return 1e-6;
  }

  long effective_max_iters() const {
    if (max_iters > 0) return max_iters;
    switch (benchmark) {
      case Benchmark::lasso: return 100000;
      case Benchmark::transport: return 200000;
      case Benchmark::mfg: return 3000;
    }
    return 10000;
  }
};

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': not a number: '" + v + "'");
  }
}

inline long to_long(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d != static_cast<double>(static_cast<long>(d))) throw ConfigError("key '" + key + "': expected an integer");
  return static_cast<long>(d);
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected true or false");
}

inline const std::string& single(const std::string& key, const std::vector<std::string>& in) {
  if (in.size() != 1) throw ConfigError("key '" + key + "' expects exactly one value");
  return in.front();
}

}  // namespace detail

/// Parses the section of `benchmark` from an INI-style file. Every section and
/// key is validated; unknown names are errors.
inline ExperimentConfig parse_config(std::istream& in, Benchmark benchmark, const fs::path& base_dir = {}) {
  CLI::ConfigINI reader;
  reader.comment('#');
  std::vector<CLI::ConfigItem> items;
  try {
    items = reader.from_config(in);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }

  static const std::set<std::string> common = {"methods", "tol", "max_iters", "tune", "tune_points", "tune_span"};
  static const std::map<std::string, std::set<std::string>> specific = {
      {"lasso", {"n", "p", "m", "alpha", "seeds"}},
      {"transport", {"network", "scenarios", "seeds"}},
      {"mfg", {"N", "nu", "mu", "p", "k0", "warm_start"}},
  };

  ExperimentConfig cfg;
  cfg.benchmark = benchmark;
  cfg.methods = method_names(benchmark);
  bool found = false;
  for (const auto& item : items) {
    if (item.name == "++" || item.name == "--") {
      if (!item.parents.empty() && item.parents.size() == 1 && !specific.count(item.parents.front())) {
        throw ConfigError("unknown section [" + item.parents.front() + "]");
      }
      continue;
    }
    if (item.parents.empty()) throw ConfigError("key '" + item.name + "' outside a section");
    const std::string& section = item.parents.front();
    auto spec = specific.find(section);
    if (spec == specific.end()) throw ConfigError("unknown section [" + section + "]");
    const bool is_step = item.parents.size() == 2 && item.parents[1] == "steps";
    if (item.parents.size() > 1 && !is_step) {
      throw ConfigError("unknown key '" + item.fullname() + "'");
    }
    const std::string key = is_step ? "steps." + item.name : item.name;
    const auto allowed_methods = method_names(*parse_benchmark(section));
    if (is_step) {
      if (std::find(allowed_methods.begin(), allowed_methods.end(), item.name) == allowed_methods.end()) {
        throw ConfigError("[" + section + "] steps for unknown method '" + item.name + "'");
      }
    } else if (!common.count(key) && !spec->second.count(key)) {
      throw ConfigError("[" + section + "] unknown key '" + key + "'");
    }
    if (section != to_string(benchmark)) continue;
    found = true;

    const auto& v = item.inputs;
    if (is_step) {
      if (v.size() == 1 && v.front() == "auto") {
        cfg.steps.erase(item.name);
      } else if (v.size() == 2 || (v.size() == 1 && single_step(item.name))) {
        cfg.steps[item.name] = {detail::to_double(key, v[0]), v.size() == 2 ? detail::to_double(key, v[1]) : 0.0};
      } else {
        throw ConfigError("key '" + key + "' expects 'auto' or tau gamma");
      }
    } else if (key == "methods") {
      if (v.empty()) throw ConfigError("key 'methods' is empty");
      cfg.methods.clear();
      for (const auto& name : v) {
        if (std::find(allowed_methods.begin(), allowed_methods.end(), name) == allowed_methods.end()) {
          throw ConfigError("unknown " + section + " method '" + name + "'");
        }
        cfg.methods.push_back(name);
      }
    } else if (key == "tol") {
      const auto& s = detail::single(key, v);
      if (s != "auto") {
        cfg.tol = detail::to_double(key, s);
        if (!(*cfg.tol > 0.0)) throw ConfigError("tol must be positive");
      }
    } else if (key == "max_iters") {
      cfg.max_iters = detail::to_long(key, detail::single(key, v));
      if (cfg.max_iters < 1) throw ConfigError("max_iters must be >= 1");
    } else if (key == "tune") {
      cfg.tune = detail::to_bool(key, detail::single(key, v));
    } else if (key == "tune_points") {
      cfg.tune_points = static_cast<int>(detail::to_long(key, detail::single(key, v)));
      if (cfg.tune_points < 1) throw ConfigError("tune_points must be >= 1");
    } else if (key == "tune_span") {
      cfg.tune_span = detail::to_double(key, detail::single(key, v));
      if (!(cfg.tune_span >= 1.0)) throw ConfigError("tune_span must be >= 1");
    } else if (key == "seeds") {
      cfg.seeds.clear();
      for (const auto& s : v) {
        if (s.empty()) continue;
        const long seed = detail::to_long(key, s);
        if (seed < 0) throw ConfigError("seeds must be nonnegative");
        cfg.seeds.push_back(static_cast<std::uint64_t>(seed));
      }
    } else if (key == "n") {
      cfg.n = detail::to_long(key, detail::single(key, v));
    } else if (key == "p" && benchmark == Benchmark::lasso) {
      cfg.p = detail::to_long(key, detail::single(key, v));
    } else if (key == "m") {
      cfg.m = detail::to_long(key, detail::single(key, v));
    } else if (key == "alpha") {
      cfg.alpha = detail::to_double(key, detail::single(key, v));
    } else if (key == "network") {
      fs::path path = detail::single(key, v);
      cfg.network = path.is_relative() && !base_dir.empty() ? base_dir / path : path;
    } else if (key == "scenarios") {
      cfg.scenarios = detail::to_long(key, detail::single(key, v));
    } else if (key == "N") {
      cfg.N = detail::to_long(key, detail::single(key, v));
    } else if (key == "nu") {
      cfg.nu = detail::to_double(key, detail::single(key, v));
    } else if (key == "mu") {
      cfg.mu = detail::to_double(key, detail::single(key, v));
    } else if (key == "p") {
      cfg.kernel_power = static_cast<int>(detail::to_long(key, detail::single(key, v)));
    } else if (key == "k0") {
      const auto& s = detail::single(key, v);
      if (s != "default" && s != "zero") throw ConfigError("k0 must be 'default' or 'zero'");
      cfg.zero_k0 = s == "zero";
    } else if (key == "warm_start") {
      cfg.warm_start = detail::to_bool(key, detail::single(key, v));
    }
  }
  if (!found) throw ConfigError(std::string("config has no [") + to_string(benchmark) + "] section");

  switch (benchmark) {
    case Benchmark::lasso:
      if (cfg.n < 1 || cfg.p < 1 || cfg.m < 0 || cfg.m >= cfg.n) {
        throw ConfigError("lasso needs n >= 1, p >= 1 and 0 <= m < n");
      }
      if (!(cfg.alpha > 0.0)) throw ConfigError("alpha must be positive");
      break;
    case Benchmark::transport:
      if (cfg.network.empty()) throw ConfigError("transport needs 'network'");
      if (cfg.scenarios < 1) throw ConfigError("scenarios must be >= 1");
      break;
    case Benchmark::mfg:
      if (cfg.N < 2) throw ConfigError("N must be >= 2");
      if (!(cfg.nu > 0.0) || !(cfg.mu > 0.0) || cfg.kernel_power < 1) {
        throw ConfigError("mfg needs nu > 0, mu > 0 and p >= 1");
      }
      break;
  }
  for (const auto& [name, st] : cfg.steps) {
    if (std::find(cfg.methods.begin(), cfg.methods.end(), name) == cfg.methods.end()) continue;
    if (!(st.first > 0.0) || (!single_step(name) && !(st.second > 0.0))) {
      throw ConfigError("steps for '" + name + "' must be positive");
    }
  }
  return cfg;
}

inline ExperimentConfig load_config(const fs::path& path, Benchmark benchmark) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  return parse_config(in, benchmark, path.parent_path());
}

// --- CSV --------------------------------------------------------------------------

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> trace_header(const ConvergenceTrace& t) {
  std::vector<std::string> h = {"iteration", "primal_change", "dual_change", "relative_change", "objective"};
  h.insert(h.end(), t.residual_names.begin(), t.residual_names.end());
  h.emplace_back("wall_time_ms");
  return h;
}

inline void write_trace_csv(std::ostream& os, const ConvergenceTrace& t) {
  const auto header = trace_header(t);
  for (std::size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << header[i];
  os << '\n';
  for (const auto& r : t.records) {
    os << r.iteration << ',' << fmt(r.primal_change) << ',' << fmt(r.dual_change) << ','
       << fmt(r.relative_change) << ',' << fmt(r.objective);
    for (std::size_t i = 0; i < t.residual_names.size(); ++i) {
      os << ',' << fmt(i < r.residuals.size() ? r.residuals[i] : std::numeric_limits<double>::quiet_NaN());
    }
    os << ',' << fmt(r.wall_time_ms) << '\n';
  }
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline ConvergenceTrace read_trace_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("trace csv: missing header");
  const auto header = split_csv(line);
  if (header.size() < 6 || header[0] != "iteration" || header.back() != "wall_time_ms") {
    throw std::runtime_error("trace csv: unexpected header");
  }
  ConvergenceTrace t;
  t.residual_names.assign(header.begin() + 5, header.end() - 1);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size()) throw std::runtime_error("trace csv: ragged row");
    TraceRecord r;
    r.iteration = std::stol(cells[0]);
    r.primal_change = std::stod(cells[1]);
    r.dual_change = std::stod(cells[2]);
    r.relative_change = std::stod(cells[3]);
    r.objective = std::stod(cells[4]);
    for (std::size_t i = 5; i + 1 < cells.size(); ++i) r.residuals.push_back(std::stod(cells[i]));
    r.wall_time_ms = std::stod(cells.back());
    t.records.push_back(std::move(r));
  }
  return t;
}

struct LabeledTrace {
  std::string label;
  ConvergenceTrace trace;
};

/// Long format: one row per (series, iteration, quantity).
inline void emit_plot_data(std::ostream& os, const std::vector<LabeledTrace>& traces) {
  os << "series,iteration,wall_time_ms,quantity,value\n";
  for (const auto& lt : traces) {
    for (const auto& r : lt.trace.records) {
      auto row = [&](const std::string& q, double v) {
        os << lt.label << ',' << r.iteration << ',' << fmt(r.wall_time_ms) << ',' << q << ',' << fmt(v) << '\n';
      };
      row("relative_change", r.relative_change);
      row("objective", r.objective);
      for (std::size_t i = 0; i < lt.trace.residual_names.size() && i < r.residuals.size(); ++i) {
        row(lt.trace.residual_names[i], r.residuals[i]);
      }
    }
  }
}

// --- Grid search -------------------------------------------------------------------

/// `points` values geometrically spaced on [center / span, center * span].
inline std::vector<double> log_grid(double center, double span, int points) {
  if (points < 1) throw std::invalid_argument("log_grid: points must be >= 1");
  if (points == 1) return {center};
  std::vector<double> out;
  const double lo = std::log(center / span), hi = std::log(center * span);
  for (int i = 0; i < points; ++i) {
    out.push_back(std::exp(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1)));
  }
  return out;
}

struct TunePoint {
  double tau = 0.0;
  double gamma = 0.0;
  bool valid = false;
  long iterations = 0;
  bool converged = false;
};

struct TuneResult {
  std::vector<TunePoint> points;
  std::optional<TunePoint> best;
  std::vector<std::string> warnings;
};

struct RunStats {
  long iterations = 0;
  bool converged = false;
};

/// Evaluates every valid grid point; picks the converged point with the fewest
/// iterations, ties broken by larger tau, then larger gamma.
inline TuneResult tune(const std::vector<double>& taus, const std::vector<double>& gammas,
                       const std::function<bool(double, double)>& valid,
                       const std::function<RunStats(double, double)>& evaluate) {
  TuneResult out;
  for (double tau : taus) {
    for (double gamma : gammas) {
      TunePoint pt{tau, gamma, valid(tau, gamma), 0, false};
      if (!pt.valid) {
        out.warnings.push_back("skipping (tau, gamma) = (" + fmt(tau) + ", " + fmt(gamma) +
                               "): violates the convergence condition");
      } else {
        const RunStats s = evaluate(tau, gamma);
        pt.iterations = s.iterations;
        pt.converged = s.converged;
        if (pt.converged) {
          const auto& b = out.best;
          if (!b || pt.iterations < b->iterations ||
              (pt.iterations == b->iterations && (pt.tau > b->tau || (pt.tau == b->tau && pt.gamma > b->gamma)))) {
            out.best = pt;
          }
        }
      }
      out.points.push_back(pt);
    }
  }
  if (!out.best) out.warnings.emplace_back("no grid point converged within the iteration limit");
  return out;
}

// --- Runs ----------------------------------------------------------------------------

struct RunRecord {
  std::string method;
  std::uint64_t seed = 0;
  long iterations = 0;
  bool converged = false;
  bool diverged = false;
  double wall_time_ms = 0.0;
  double objective = 0.0;
  double tau = 0.0, gamma = 0.0;
  std::vector<std::pair<std::string, double>> metrics;
  std::string error;
  ConvergenceTrace trace;
  std::string artifact;  // benchmark-specific final dump
  std::string artifact_name;
};

struct ExperimentOutcome {
  std::vector<RunRecord> runs;
  std::vector<std::string> files;
  std::vector<std::string> warnings;
  int exit_code = 0;
};

/// Runs tasks on up to `jobs` threads; results keep task order.
template <class R>
std::vector<R> run_parallel(const std::vector<std::function<R()>>& tasks, int jobs) {
  std::vector<R> results(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) results[i] = tasks[i]();
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(tasks.size())));
  std::vector<std::future<void>> pool;
  for (int i = 1; i < n; ++i) pool.push_back(std::async(std::launch::async, worker));
  worker();
  for (auto& f : pool) f.get();
  return results;
}

namespace detail {

inline std::string dump_transport(const transport::TransportSolution& s) {
  std::ostringstream os;
  os << "# x: arcs x scenarios\n" << s.x.rows() << ' ' << s.x.cols() << '\n';
  for (Index i = 0; i < s.x.rows(); ++i) {
    for (Index j = 0; j < s.x.cols(); ++j) os << (j ? " " : "") << fmt(s.x(i, j));
    os << '\n';
  }
  os << "# f: routes x scenarios\n" << s.f.rows() << ' ' << s.f.cols() << '\n';
  for (Index i = 0; i < s.f.rows(); ++i) {
    for (Index j = 0; j < s.f.cols(); ++j) os << (j ? " " : "") << fmt(s.f(i, j));
    os << '\n';
  }
  return os.str();
}

struct Runner {
  const ExperimentConfig& cfg;
  std::optional<transport::TransportNetwork> network;

  explicit Runner(const ExperimentConfig& c) : cfg(c) {
    if (cfg.benchmark == Benchmark::transport) {
      try {
        network = transport::load_network_file(cfg.network.string());
      } catch (const transport::NetworkFormatError& e) {
        throw ConfigError(e.what());
      }
    }
  }

  /// Default steps for `method` on the instance of `seed`; single-step
  /// methods return gamma = 0.
  std::pair<double, double> default_steps(const std::string& method, std::uint64_t seed) const {
    switch (cfg.benchmark) {
      case Benchmark::lasso: {
        const auto inst = lasso::generate_instance(cfg.n, cfg.p, cfg.m, seed, cfg.alpha);
        const auto s = lasso::default_steps(*lasso::parse_method(method), lasso::estimate_norms(inst));
        return {s.tau, s.gamma};
      }
      case Benchmark::transport: {
        const auto sc = transport::sample_scenarios(*network, cfg.scenarios, seed);
        const auto model = transport::make_model(*network, sc);
        const auto s = transport::default_steps(model);
        return {s.tau, s.gamma};
      }
      case Benchmark::mfg: {
        const mfg::MfgGrid g(cfg.N, cfg.nu);
        const auto K = mfg::build_kernel(g, cfg.mu, cfg.kernel_power, cfg.zero_k0);
        const auto s = mfg::default_steps(*mfg::parse_method(method), g, K);
        return {s.tau, s.gamma};
      }
    }
    return {};
  }

  bool steps_valid(const std::string& method, std::uint64_t seed, double tau, double gamma) const {
    switch (cfg.benchmark) {
      case Benchmark::lasso: {
        const auto inst = lasso::generate_instance(cfg.n, cfg.p, cfg.m, seed, cfg.alpha);
        return lasso::steps_valid(*lasso::parse_method(method), {tau, gamma}, lasso::estimate_norms(inst));
      }
      case Benchmark::transport: {
        const auto sc = transport::sample_scenarios(*network, cfg.scenarios, seed);
        return transport::steps_valid(transport::make_model(*network, sc), {tau, gamma});
      }
      case Benchmark::mfg: {
        const mfg::MfgGrid g(cfg.N, cfg.nu);
        const auto K = mfg::build_kernel(g, cfg.mu, cfg.kernel_power, cfg.zero_k0);
        return mfg::validate_steps(*mfg::parse_method(method), g, K, {tau, gamma}).accepted();
      }
    }
    return false;
  }

  RunRecord run(const std::string& method, std::uint64_t seed,
                std::optional<std::pair<double, double>> steps, long max_iters) const {
    RunRecord rec;
    rec.method = method;
    rec.seed = seed;
    const double tol = cfg.effective_tol();
    try {
      switch (cfg.benchmark) {
        case Benchmark::lasso: {
          const auto inst = lasso::generate_instance(cfg.n, cfg.p, cfg.m, seed, cfg.alpha);
          lasso::SolveOptions opt;
          opt.tol = tol;
          opt.max_iters = max_iters;
          if (steps) opt.steps = lasso::LassoSteps{steps->first, steps->second};
          const auto sol = lasso::solve_formulation(inst, *lasso::parse_method(method), opt);
          rec.iterations = sol.iterations;
          rec.converged = sol.converged;
          rec.diverged = sol.diverged;
          rec.wall_time_ms = sol.wall_time_ms;
          rec.objective = sol.objective;
          rec.tau = sol.steps.tau;
          rec.gamma = sol.steps.gamma;
          rec.metrics = {{"kkt_residual", lasso::kkt_residual(inst, sol.x)},
                         {"feasibility", (inst.R * sol.x).norm()}};
          rec.trace = sol.trace;
          break;
        }
        case Benchmark::transport: {
          const auto sc = transport::sample_scenarios(*network, cfg.scenarios, seed);
          transport::TransportOptions opt;
          opt.tol = tol;
          opt.max_iters = max_iters;
          if (steps) opt.steps = transport::TransportSteps{steps->first, steps->second};
          const auto sol = method == "direct" ? transport::solve_direct(*network, sc, opt)
                                              : transport::solve_subspace(*network, sc, opt);
          rec.iterations = sol.iterations;
          rec.converged = sol.converged;
          rec.diverged = sol.diverged;
          rec.wall_time_ms = sol.wall_time_ms;
          rec.objective = sol.objective;
          rec.tau = sol.steps.tau;
          rec.gamma = sol.steps.gamma;
          rec.metrics = {{"time_per_iter_ms", sol.time_per_iteration_ms()},
                         {"consensus_residual", transport::consensus_residual(sol.x)},
                         {"demand_residual", transport::demand_residual(*network, sc, sol.f)},
                         {"capacity_violation", transport::capacity_violation(*network, sc, sol.x, sol.f)}};
          rec.trace = sol.trace;
          rec.artifact = dump_transport(sol);
          rec.artifact_name = "solution_" + method + "_seed" + std::to_string(seed) + ".txt";
          break;
        }
        case Benchmark::mfg: {
          const mfg::MfgGrid g(cfg.N, cfg.nu);
          const auto K = mfg::build_kernel(g, cfg.mu, cfg.kernel_power, cfg.zero_k0);
          mfg::MfgOptions opt;
          opt.tol = tol;
          opt.max_iters = max_iters;
          opt.warm_start = cfg.warm_start;
          if (steps) opt.steps = mfg::MfgSteps{steps->first, steps->second};
          const auto res = mfg::run_mfg_solver(g, K, *mfg::parse_method(method), opt);
          rec.iterations = res.iterations;
          rec.converged = res.converged;
          rec.diverged = res.diverged;
          rec.wall_time_ms = res.wall_time_ms;
          rec.objective = res.objective.raw;
          rec.tau = res.steps.tau;
          rec.gamma = res.steps.gamma;
          rec.metrics = {{"objective_scaled", res.objective.scaled},
                         {"constraint_residual", res.residuals.constraint_residual},
                         {"cone_residual", res.residuals.cone_residual},
                         {"mass", res.residuals.mass},
                         {"min_m", res.residuals.min_m}};
          rec.trace = res.trace;
          std::ostringstream os;
          mfg::write_grid_dump(os, g, K, res.m);
          rec.artifact = os.str();
          rec.artifact_name = "grid_" + method + ".txt";
          break;
        }
      }
    } catch (const std::invalid_argument& e) {
      rec.error = e.what();
    }
    return rec;
  }
};

inline void write_file(const fs::path& path, const std::string& text, ExperimentOutcome& out) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << text;
  out.files.push_back(path.filename().string());
}

inline std::string summary_csv(const ExperimentConfig& cfg, const std::vector<RunRecord>& runs) {
  std::ostringstream os;
  auto metric = [](const RunRecord& r, const std::string& name) {
    for (const auto& [k, v] : r.metrics)
      if (k == name) return v;
    return std::numeric_limits<double>::quiet_NaN();
  };
  auto runs_of = [&](const std::string& method) {
    std::vector<const RunRecord*> out;
    for (const auto& r : runs)
      if (r.method == method && r.error.empty()) out.push_back(&r);
    return out;
  };
  switch (cfg.benchmark) {
    case Benchmark::lasso:
      os << "n,p,m,method,mean_time_ms,mean_iters,mean_kkt_residual\n";
      if (cfg.seeds.empty()) break;
      for (const auto& method : cfg.methods) {
        const auto rs = runs_of(method);
        if (rs.empty()) continue;
        double t = 0, it = 0, kkt = 0;
        for (const auto* r : rs) {
          t += r->wall_time_ms;
          it += static_cast<double>(r->iterations);
          kkt += metric(*r, "kkt_residual");
        }
        const double k = static_cast<double>(rs.size());
        os << cfg.n << ',' << cfg.p << ',' << cfg.m << ',' << method << ',' << fmt(t / k) << ','
           << fmt(it / k) << ',' << fmt(kkt / k) << '\n';
      }
      break;
    case Benchmark::transport:
      os << "network,scenarios,method,mean_time_ms,mean_iters,mean_time_per_iter_ms,mean_objective,"
            "max_consensus_residual,max_demand_residual\n";
      if (cfg.seeds.empty()) break;
      for (const auto& method : cfg.methods) {
        const auto rs = runs_of(method);
        if (rs.empty()) continue;
        double t = 0, it = 0, tpi = 0, obj = 0, cons = 0, dem = 0;
        for (const auto* r : rs) {
          t += r->wall_time_ms;
          it += static_cast<double>(r->iterations);
          tpi += metric(*r, "time_per_iter_ms");
          obj += r->objective;
          cons = std::max(cons, metric(*r, "consensus_residual"));
          dem = std::max(dem, metric(*r, "demand_residual"));
        }
        const double k = static_cast<double>(rs.size());
        os << cfg.network.filename().string() << ',' << cfg.scenarios << ',' << method << ',' << fmt(t / k) << ','
           << fmt(it / k) << ',' << fmt(tpi / k) << ',' << fmt(obj / k) << ',' << fmt(cons) << ',' << fmt(dem)
           << '\n';
      }
      break;
    case Benchmark::mfg: {
      os << "N,h,nu,mu,p,method,time_ms,iters,converged,objective,objective_scaled,constraint_residual,"
            "cone_residual,mass,min_m\n";
      const double h = 1.0 / static_cast<double>(cfg.N);
      for (const auto& r : runs) {
        if (!r.error.empty()) continue;
        os << cfg.N << ',' << fmt(h) << ',' << fmt(cfg.nu) << ',' << fmt(cfg.mu) << ',' << cfg.kernel_power << ','
           << r.method << ',' << fmt(r.wall_time_ms) << ',' << r.iterations << ',' << (r.converged ? 1 : 0) << ','
           << fmt(r.objective) << ',' << fmt(metric(r, "objective_scaled")) << ','
           << fmt(metric(r, "constraint_residual")) << ',' << fmt(metric(r, "cone_residual")) << ','
           << fmt(metric(r, "mass")) << ',' << fmt(metric(r, "min_m")) << '\n';
      }
      break;
    }
  }
  return os.str();
}

inline std::string runs_csv(const std::vector<RunRecord>& runs) {
  std::ostringstream os;
  os << "method,seed,tau,gamma,iterations,converged,diverged,objective,wall_time_ms,error\n";
  for (const auto& r : runs) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    os << r.method << ',' << r.seed << ',' << fmt(r.tau) << ',' << fmt(r.gamma) << ',' << r.iterations << ','
       << (r.converged ? 1 : 0) << ',' << (r.diverged ? 1 : 0) << ',' << fmt(r.objective) << ','
       << fmt(r.wall_time_ms) << ',' << err << '\n';
  }
  return os.str();
}

}  // namespace detail

/// 2 if any run had its parameters rejected, else 3 if any run diverged, else 0.
inline int exit_code_for(const std::vector<RunRecord>& runs) {
  bool rejected = false, diverged = false;
  for (const auto& r : runs) {
    rejected = rejected || !r.error.empty();
    diverged = diverged || (r.error.empty() && r.diverged);
  }
  return rejected ? 2 : (diverged ? 3 : 0);
}

inline std::string trace_file_name(const ExperimentConfig& cfg, const RunRecord& r) {
  if (cfg.benchmark == Benchmark::mfg) return "trace_" + r.method + ".csv";
  return "trace_" + r.method + "_seed" + std::to_string(r.seed) + ".csv";
}

/// Runs every (method, seed) pair and writes the artifacts into cfg.out_dir.
/// Exit code: 0 success, 2 rejected parameters, 3 a run diverged.
inline ExperimentOutcome run_experiment(const ExperimentConfig& cfg, std::ostream& log = std::cerr) {
  ExperimentOutcome out;
  detail::Runner runner(cfg);
  fs::create_directories(cfg.out_dir);
  const long max_iters = cfg.effective_max_iters();

  // MFG instances do not depend on a seed; they run once per method.
  std::vector<std::uint64_t> seeds = cfg.seeds;
  if (cfg.benchmark == Benchmark::mfg) seeds = {0};

  std::map<std::string, std::optional<std::pair<double, double>>> chosen;
  for (const auto& method : cfg.methods) {
    auto it = cfg.steps.find(method);
    chosen[method] = it == cfg.steps.end() ? std::nullopt : std::optional(it->second);
  }

  if (cfg.tune && !seeds.empty()) {
    std::ostringstream tune_csv;
    tune_csv << "method,tau,gamma,valid,iterations,converged,selected\n";
    for (const auto& method : cfg.methods) {
      const std::uint64_t seed = seeds.front();
      const auto [tau0, gamma0] = runner.default_steps(method, seed);
      const auto taus = log_grid(tau0, cfg.tune_span, cfg.tune_points);
      const auto gammas = single_step(method) ? std::vector<double>{0.0} : log_grid(gamma0, cfg.tune_span, cfg.tune_points);
      std::vector<std::function<RunStats()>> tasks;
      // Evaluate valid points in parallel, then select sequentially.
      std::map<std::pair<double, double>, RunStats> cache;
      std::vector<std::pair<double, double>> todo;
      for (double t : taus)
        for (double g : gammas)
          if (runner.steps_valid(method, seed, t, g)) todo.emplace_back(t, g);
      for (const auto& [t, g] : todo) {
        tasks.push_back([&runner, &method, seed, t = t, g = g, max_iters] {
          const auto r = runner.run(method, seed, std::pair{t, g}, max_iters);
          return RunStats{r.iterations, r.converged && r.error.empty()};
        });
      }
      const auto stats = run_parallel(tasks, cfg.jobs);
      for (std::size_t i = 0; i < todo.size(); ++i) cache[todo[i]] = stats[i];
      const auto result = tune(
          taus, gammas, [&](double t, double g) { return cache.count({t, g}) > 0; },
          [&](double t, double g) { return cache.at({t, g}); });
      std::size_t skipped = 0;
      for (const auto& w : result.warnings) {
        out.warnings.push_back(method + ": " + w);
        if (w.rfind("skipping", 0) == 0) {
          ++skipped;
        } else {
          log << "warning: " << method << ": " << w << '\n';
        }
      }
      if (skipped > 0)
        log << "warning: " << method << ": skipped " << skipped << " of " << result.points.size()
            << " grid points that violate the convergence condition\n";
      if (result.best)
        log << method << ": tuned steps tau " << fmt(result.best->tau) << ", gamma " << fmt(result.best->gamma)
            << " (" << result.best->iterations << " iterations)\n";
      for (const auto& pt : result.points) {
        const bool sel = result.best && pt.tau == result.best->tau && pt.gamma == result.best->gamma;
        tune_csv << method << ',' << fmt(pt.tau) << ',' << fmt(pt.gamma) << ',' << (pt.valid ? 1 : 0) << ','
                 << pt.iterations << ',' << (pt.converged ? 1 : 0) << ',' << (sel ? 1 : 0) << '\n';
      }
      if (result.best) chosen[method] = std::pair{result.best->tau, result.best->gamma};
    }
    detail::write_file(cfg.out_dir / "tune.csv", tune_csv.str(), out);
  }

  std::vector<std::function<RunRecord()>> tasks;
  for (const auto& method : cfg.methods) {
    for (std::uint64_t seed : seeds) {
      tasks.push_back([&runner, method, seed, steps = chosen[method], max_iters] {
        return runner.run(method, seed, steps, max_iters);
      });
    }
  }
  out.runs = run_parallel(tasks, cfg.jobs);

  std::vector<LabeledTrace> labeled;
  for (const auto& r : out.runs) {
    if (!r.error.empty()) {
      log << "error: " << r.method << " seed " << r.seed << ": " << r.error << '\n';
      continue;
    }
    if (r.diverged) log << "error: " << r.method << " seed " << r.seed << " diverged\n";
    std::ostringstream t;
    write_trace_csv(t, r.trace);
    detail::write_file(cfg.out_dir / trace_file_name(cfg, r), t.str(), out);
    if (!r.artifact_name.empty()) detail::write_file(cfg.out_dir / r.artifact_name, r.artifact, out);
    const std::string label = cfg.benchmark == Benchmark::mfg ? r.method : r.method + "_seed" + std::to_string(r.seed);
    labeled.push_back({label, r.trace});
  }
  detail::write_file(cfg.out_dir / "summary.csv", detail::summary_csv(cfg, out.runs), out);
  detail::write_file(cfg.out_dir / "runs.csv", detail::runs_csv(out.runs), out);
  std::ostringstream plot;
  emit_plot_data(plot, labeled);
  detail::write_file(cfg.out_dir / "plot_data.csv", plot.str(), out);

  out.exit_code = exit_code_for(out.runs);
  return out;
}

}  // namespace pdpi::experiment
