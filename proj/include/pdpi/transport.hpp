#pragma once

// Two-stage stochastic arc-capacity expansion on a route-based network.
//
// First-stage expansions x (arcs x scenarios) are coupled across scenarios by
// non-anticipativity; second-stage route flows f (routes x scenarios) meet the
// OD demands and the expanded capacities. Operational cost uses the travel
// time t(v) = eta (1 + 0.15 v / c), investment cost 0.5 x^T Q x.

#include "pdpi/hilbert.hpp"
#include "pdpi/prox.hpp"
#include "pdpi/solver.hpp"

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pdpi::transport {

class NetworkFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Arc {
  int tail = 0;
  int head = 0;
};

struct OdPair {
  int origin = 0;
  int destination = 0;
  std::vector<Index> routes;  // 0-based route indices
};

struct TransportNetwork {
  std::vector<Arc> arcs;
  std::vector<std::vector<Index>> routes;  // 0-based arc indices
  std::vector<OdPair> od_pairs;
  Vector eta;  // free-flow travel times
  Vector b;    // capacity base (x100)
  Vector d;    // capacity spread
  Vector M;    // expansion upper bounds
  double theta = 0.0;
  Matrix Q;
  Matrix N;    // arc-route incidence

  // Scenario distribution.
  double capacity_beta_a = 2.0;
  double capacity_beta_b = 2.0;
  Vector demand_base;
  Vector demand_spread;
  double demand_beta_a = 1.0;
  double demand_beta_b = 1.0;

  Index num_arcs() const { return static_cast<Index>(arcs.size()); }
  Index num_routes() const { return static_cast<Index>(routes.size()); }
  Index num_od() const { return static_cast<Index>(od_pairs.size()); }

  OdPartition partition() const {
    OdPartition p;
    for (const auto& od : od_pairs) p.push_back(od.routes);
    return p;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<double> parse_numbers(const std::string& text, int line_no) {
  std::istringstream in(text);
  std::vector<double> out;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw NetworkFormatError("line " + std::to_string(line_no) + ": not a number: '" + tok + "'");
    }
  }
  return out;
}

inline int as_int(double v, int line_no) {
  if (v != static_cast<double>(static_cast<int>(v))) {
    throw NetworkFormatError("line " + std::to_string(line_no) + ": expected an integer");
  }
  return static_cast<int>(v);
}

inline Vector to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Vector>(v.data(), static_cast<Index>(v.size()));
}

}  // namespace detail

/// Parses the sectioned text format ([arcs], [routes], [od], [params]).
/// Identifiers in the file are 1-based and must be consecutive.
inline TransportNetwork load_network(std::istream& in) {
  TransportNetwork net;
  std::string section;
  std::map<std::string, std::vector<double>> params;
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = detail::trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw NetworkFormatError("line " + std::to_string(line_no) + ": bad section header");
      section = line.substr(1, line.size() - 2);
      if (section != "arcs" && section != "routes" && section != "od" && section != "params") {
        throw NetworkFormatError("unknown section [" + section + "]");
      }
      continue;
    }
    if (section.empty()) throw NetworkFormatError("line " + std::to_string(line_no) + ": data outside a section");

    if (section == "params") {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw NetworkFormatError("line " + std::to_string(line_no) + ": expected key = values");
      const std::string key = detail::trim(line.substr(0, eq));
      static const char* known[] = {"eta", "b", "d", "M", "theta", "capacity_beta",
                                    "demand_base", "demand_spread", "demand_beta"};
      if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
          std::end(known)) {
        throw NetworkFormatError("line " + std::to_string(line_no) + ": unknown parameter '" + key + "'");
      }
      params[key] = detail::parse_numbers(line.substr(eq + 1), line_no);
      continue;
    }

    const auto nums = detail::parse_numbers(line, line_no);
    if (section == "arcs") {
      if (nums.size() != 3) throw NetworkFormatError("line " + std::to_string(line_no) + ": arc needs id tail head");
      if (detail::as_int(nums[0], line_no) != net.num_arcs() + 1) {
        throw NetworkFormatError("line " + std::to_string(line_no) + ": arc ids must be consecutive from 1");
      }
      net.arcs.push_back({detail::as_int(nums[1], line_no), detail::as_int(nums[2], line_no)});
    } else if (section == "routes") {
      if (nums.size() < 2) throw NetworkFormatError("line " + std::to_string(line_no) + ": route needs id and arcs");
      if (detail::as_int(nums[0], line_no) != net.num_routes() + 1) {
        throw NetworkFormatError("line " + std::to_string(line_no) + ": route ids must be consecutive from 1");
      }
      std::vector<Index> arcs;
      for (std::size_t i = 1; i < nums.size(); ++i) {
        const int a = detail::as_int(nums[i], line_no);
        if (a < 1 || a > net.num_arcs()) {
          throw NetworkFormatError("line " + std::to_string(line_no) + ": route references unknown arc " + std::to_string(a));
        }
        arcs.push_back(a - 1);
      }
      net.routes.push_back(std::move(arcs));
    } else {  // od
      if (nums.size() < 3) throw NetworkFormatError("line " + std::to_string(line_no) + ": od needs origin destination routes");
      OdPair od{detail::as_int(nums[0], line_no), detail::as_int(nums[1], line_no), {}};
      for (std::size_t i = 2; i < nums.size(); ++i) {
        const int r = detail::as_int(nums[i], line_no);
        if (r < 1 || r > net.num_routes()) {
          throw NetworkFormatError("line " + std::to_string(line_no) + ": od references unknown route " + std::to_string(r));
        }
        od.routes.push_back(r - 1);
      }
      net.od_pairs.push_back(std::move(od));
    }
  }

  if (net.arcs.empty() || net.routes.empty() || net.od_pairs.empty()) {
    throw NetworkFormatError("network needs non-empty [arcs], [routes] and [od] sections");
  }
  try {
    validate_partition(net.partition(), net.num_routes());
  } catch (const InvalidInstance& e) {
    throw NetworkFormatError(e.what());
  }
  // Routes must be connected paths between their OD endpoints.
  for (const auto& od : net.od_pairs) {
    for (Index r : od.routes) {
      const auto& path = net.routes[static_cast<std::size_t>(r)];
      int at = od.origin;
      for (Index a : path) {
        const Arc& arc = net.arcs[static_cast<std::size_t>(a)];
        if (arc.tail != at) {
          throw NetworkFormatError("route " + std::to_string(r + 1) + " is not a connected path from " +
                                   std::to_string(od.origin));
        }
        at = arc.head;
      }
      if (at != od.destination) {
        throw NetworkFormatError("route " + std::to_string(r + 1) + " does not end at destination " +
                                 std::to_string(od.destination));
      }
    }
  }

  const Index na = net.num_arcs();
  auto arc_param = [&](const char* key, bool required) -> std::optional<Vector> {
    auto it = params.find(key);
    if (it == params.end()) {
      if (required) throw NetworkFormatError(std::string("missing parameter '") + key + "'");
      return std::nullopt;
    }
    if (static_cast<Index>(it->second.size()) != na) {
      throw NetworkFormatError(std::string("parameter '") + key + "' needs one value per arc");
    }
    return detail::to_vector(it->second);
  };
  auto scalar_pair = [&](const char* key, double& a, double& b) {
    auto it = params.find(key);
    if (it == params.end()) throw NetworkFormatError(std::string("missing parameter '") + key + "'");
    if (it->second.size() != 2) throw NetworkFormatError(std::string("parameter '") + key + "' needs two values");
    a = it->second[0];
    b = it->second[1];
    if (!(a > 0.0) || !(b > 0.0)) throw NetworkFormatError(std::string("parameter '") + key + "' must be positive");
  };
  auto od_param = [&](const char* key) -> Vector {
    auto it = params.find(key);
    if (it == params.end()) throw NetworkFormatError(std::string("missing parameter '") + key + "'");
    if (static_cast<Index>(it->second.size()) != net.num_od()) {
      throw NetworkFormatError(std::string("parameter '") + key + "' needs one value per OD pair");
    }
    return detail::to_vector(it->second);
  };

  net.eta = *arc_param("eta", true);
  net.b = *arc_param("b", true);
  net.d = *arc_param("d", true);
  if (auto m = arc_param("M", false)) {
    net.M = *m;
  } else {
    auto it = params.find("theta");
    if (it == params.end() || it->second.size() != 1) {
      throw NetworkFormatError("either 'M' or a scalar 'theta' is required");
    }
    net.theta = it->second[0];
    net.M = net.theta * net.d;
  }
  if ((net.M.array() <= 0.0).any()) throw NetworkFormatError("expansion bounds M must be positive");
  if ((net.b.array() <= 0.0).any() || (net.d.array() < 0.0).any() || (net.eta.array() < 0.0).any()) {
    throw NetworkFormatError("eta, d must be nonnegative and b positive");
  }
  scalar_pair("capacity_beta", net.capacity_beta_a, net.capacity_beta_b);
  scalar_pair("demand_beta", net.demand_beta_a, net.demand_beta_b);
  net.demand_base = od_param("demand_base");
  net.demand_spread = od_param("demand_spread");

  net.Q = Matrix::Identity(na, na);
  net.N = Matrix::Zero(na, net.num_routes());
  for (Index r = 0; r < net.num_routes(); ++r) {
    for (Index a : net.routes[static_cast<std::size_t>(r)]) net.N(a, r) = 1.0;
  }
  return net;
}

inline TransportNetwork load_network_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NetworkFormatError("cannot open network file '" + path + "'");
  return load_network(in);
}

struct ScenarioSet {
  Vector probability;  // per scenario
  Matrix capacity;     // arcs x scenarios
  Matrix demand;       // od pairs x scenarios

  Index size() const { return probability.size(); }
};

inline double sample_beta(std::mt19937_64& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0);
  std::gamma_distribution<double> gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

/// Equiprobable scenarios; capacities 100 b + d Beta(.,.), demands
/// base + spread Beta(.,.), drawn independently per component.
inline ScenarioSet sample_scenarios(const TransportNetwork& net, Index count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("sample_scenarios: need at least one scenario");
  std::mt19937_64 rng(seed);
  ScenarioSet sc;
  sc.probability = Vector::Constant(count, 1.0 / static_cast<double>(count));
  sc.capacity.resize(net.num_arcs(), count);
  sc.demand.resize(net.num_od(), count);
  for (Index xi = 0; xi < count; ++xi) {
    for (Index a = 0; a < net.num_arcs(); ++a) {
      sc.capacity(a, xi) = 100.0 * net.b[a] + net.d[a] * sample_beta(rng, net.capacity_beta_a, net.capacity_beta_b);
    }
    for (Index o = 0; o < net.num_od(); ++o) {
      sc.demand(o, xi) = net.demand_base[o] + net.demand_spread[o] * sample_beta(rng, net.demand_beta_a, net.demand_beta_b);
    }
  }
  return sc;
}

inline void validate_scenarios(const TransportNetwork& net, const ScenarioSet& sc) {
  if (sc.size() < 1) throw InvalidInstance("scenario set is empty");
  if (sc.capacity.rows() != net.num_arcs() || sc.capacity.cols() != sc.size() ||
      sc.demand.rows() != net.num_od() || sc.demand.cols() != sc.size()) {
    throw InvalidInstance("scenario set shape does not match the network");
  }
  if (std::abs(sc.probability.sum() - 1.0) > 1e-12) throw InvalidInstance("scenario probabilities must sum to 1");
  if ((sc.capacity.array() <= 0.0).any()) throw InvalidInstance("capacities must be strictly positive");
  if ((sc.demand.array() < 0.0).any()) throw InvalidInstance("demands must be nonnegative");
}

/// Precomputed quantities shared by objective and solvers.
struct Model {
  const TransportNetwork* net = nullptr;
  const ScenarioSet* sc = nullptr;
  double N_norm = 0.0;
  double Q_norm = 0.0;
  double lipschitz = 0.0;  // 1 / beta

  Index na() const { return net->num_arcs(); }
  Index nr() const { return net->num_routes(); }
  Index ns() const { return sc->size(); }
  Index primal_dim() const { return (na() + nr()) * ns(); }
  Index dual_dim() const { return 2 * na() * ns(); }
};

inline Model make_model(const TransportNetwork& net, const ScenarioSet& sc) {
  validate_scenarios(net, sc);
  Model m;
  m.net = &net;
  m.sc = &sc;
  m.N_norm = op_norm(LinearMap::from_matrix(net.N), 10000, 1e-8).value;
  m.Q_norm = op_norm(LinearMap::from_matrix(net.Q), 10000, 1e-8).value;
  double lip = 0.0;
  for (Index xi = 0; xi < sc.size(); ++xi) {
    double chi = 0.0;
    for (Index a = 0; a < net.num_arcs(); ++a) chi = std::max(chi, 0.15 * net.eta[a] / sc.capacity(a, xi));
    lip = std::max(lip, sc.probability[xi] * std::max(m.Q_norm, m.N_norm * m.N_norm * chi));
  }
  m.lipschitz = lip;
  return m;
}

struct ObjectiveGradient {
  double value = 0.0;
  Matrix grad_x;  // arcs x scenarios
  Matrix grad_f;  // routes x scenarios
  double lipschitz = 0.0;
};

inline ObjectiveGradient objective_and_gradient(const TransportNetwork& net, const ScenarioSet& sc,
                                                const Matrix& x, const Matrix& f,
                                                double lipschitz = 0.0) {
  if (x.rows() != net.num_arcs() || f.rows() != net.num_routes() || x.cols() != sc.size() ||
      f.cols() != sc.size()) {
    throw std::invalid_argument("objective_and_gradient: shape mismatch");
  }
  ObjectiveGradient out;
  out.grad_x.resize(x.rows(), x.cols());
  out.grad_f.resize(f.rows(), f.cols());
  for (Index xi = 0; xi < sc.size(); ++xi) {
    const double p = sc.probability[xi];
    const Vector load = net.N * f.col(xi);
    Vector t(load.size());
    double op = 0.0;
    for (Index a = 0; a < load.size(); ++a) {
      const double c = sc.capacity(a, xi);
      op += net.eta[a] * (load[a] + 0.075 * load[a] * load[a] / c);
      t[a] = net.eta[a] * (1.0 + 0.15 * load[a] / c);
    }
    const Vector qx = net.Q * x.col(xi);
    out.value += p * (op + 0.5 * x.col(xi).dot(qx));
    out.grad_x.col(xi) = p * qx;
    out.grad_f.col(xi) = p * (net.N.transpose() * t);
  }
  out.lipschitz = lipschitz;
  return out;
}

inline ObjectiveGradient objective_and_gradient(const Model& m, const Matrix& x, const Matrix& f) {
  return objective_and_gradient(*m.net, *m.sc, x, f, m.lipschitz);
}

// --- Vector packing ----------------------------------------------------------

inline Vector pack(const Matrix& x, const Matrix& f) {
  Vector z(x.size() + f.size());
  z << x.reshaped(), f.reshaped();
  return z;
}

inline Matrix unpack_x(const Model& m, const Vector& z) {
  return z.head(m.na() * m.ns()).reshaped(m.na(), m.ns());
}

inline Matrix unpack_f(const Model& m, const Vector& z) {
  return z.tail(m.nr() * m.ns()).reshaped(m.nr(), m.ns());
}

/// L(x, f) = (x_xi, N f_xi)_xi, stored as [vec p-block ; vec u-block].
inline LinearMap make_operator(const Model& m) {
  const Index na = m.na(), nr = m.nr(), ns = m.ns();
  const Matrix* N = &m.net->N;
  return {[=](const Vector& z) -> Vector {
            Vector out(2 * na * ns);
            out.head(na * ns) = z.head(na * ns);
            const Matrix f = z.tail(nr * ns).reshaped(nr, ns);
            out.tail(na * ns) = ((*N) * f).reshaped();
            return out;
          },
          [=](const Vector& q) -> Vector {
            Vector out(na * ns + nr * ns);
            out.head(na * ns) = q.head(na * ns);
            const Matrix u = q.tail(na * ns).reshaped(na, ns);
            out.tail(nr * ns) = (N->transpose() * u).reshaped();
            return out;
          },
          na * ns + nr * ns, 2 * na * ns, std::max(1.0, m.N_norm)};
}

/// prox_{gamma G*} with G the indicator of prod_xi Theta_xi.
inline Vector prox_theta_conjugate(const Model& m, const Vector& q, double gamma) {
  const Index na = m.na(), ns = m.ns();
  Vector out = q;
  for (Index xi = 0; xi < ns; ++xi) {
    for (Index a = 0; a < na; ++a) {
      const Index ip = xi * na + a;
      const Index iu = na * ns + xi * na + a;
      const auto [px, pu] = project_theta(q[ip] / gamma, q[iu] / gamma, m.sc->capacity(a, xi));
      out[ip] = q[ip] - gamma * px;
      out[iu] = q[iu] - gamma * pu;
    }
  }
  return out;
}

inline Vector gradient_vector(const Model& m, const Vector& z) {
  const auto og = objective_and_gradient(m, unpack_x(m, z), unpack_f(m, z));
  return pack(og.grad_x, og.grad_f);
}

/// f_hat0: each OD demand split evenly over its routes.
inline Matrix demand_shift(const Model& m) {
  Matrix f0 = Matrix::Zero(m.nr(), m.ns());
  for (Index o = 0; o < m.net->num_od(); ++o) {
    const auto& routes = m.net->od_pairs[static_cast<std::size_t>(o)].routes;
    for (Index xi = 0; xi < m.ns(); ++xi)
      for (Index r : routes) f0(r, xi) = m.sc->demand(o, xi) / static_cast<double>(routes.size());
  }
  return f0;
}

// --- Diagnostics -------------------------------------------------------------

inline double consensus_residual(const Matrix& x) {
  double worst = 0.0;
  for (Index a = 0; a < x.cols(); ++a)
    for (Index b = a + 1; b < x.cols(); ++b) worst = std::max(worst, (x.col(a) - x.col(b)).norm());
  return worst;
}

inline double demand_residual(const TransportNetwork& net, const ScenarioSet& sc, const Matrix& f) {
  double worst = 0.0;
  for (Index o = 0; o < net.num_od(); ++o) {
    for (Index xi = 0; xi < sc.size(); ++xi) {
      double s = 0.0;
      for (Index r : net.od_pairs[static_cast<std::size_t>(o)].routes) s += f(r, xi);
      worst = std::max(worst, std::abs(s - sc.demand(o, xi)));
    }
  }
  return worst;
}

/// max over (a, xi) of [(N f_xi)_a - x_{a,xi} - c_{a,xi}]_+.
inline double capacity_violation(const TransportNetwork& net, const ScenarioSet& sc, const Matrix& x,
                                 const Matrix& f) {
  const Matrix slack = net.N * f - x - sc.capacity;
  return std::max(0.0, slack.maxCoeff());
}

// --- Solvers -----------------------------------------------------------------

struct TransportSteps {
  double tau = 0.0;
  double gamma = 0.0;
};

/// tau gamma max{1, ||N||^2} < 1 - tau / (2 beta).
inline bool steps_valid(const Model& m, const TransportSteps& s) {
  const double beta = 1.0 / m.lipschitz;
  if (!(s.tau > 0.0) || !(s.gamma > 0.0) || !(s.tau < 2.0 * beta)) return false;
  const double k = std::max(1.0, m.N_norm * m.N_norm);
  return s.tau * s.gamma * k < 1.0 - s.tau / (2.0 * beta);
}

/// tau = beta, gamma filling 90% of the remaining slack.
inline TransportSteps default_steps(const Model& m) {
  const double beta = 1.0 / m.lipschitz;
  const double k = std::max(1.0, m.N_norm * m.N_norm);
  const double tau = beta;
  return {tau, 0.9 * 0.5 / (tau * k)};
}

struct TransportOptions {
  double tol = 1e-11;
  long max_iters = 200000;
  std::optional<TransportSteps> steps;
};

struct TransportSolution {
  Matrix x;
  Matrix f;
  double objective = 0.0;
  long iterations = 0;
  bool converged = false;
  bool diverged = false;
  double wall_time_ms = 0.0;
  TransportSteps steps;
  ConvergenceTrace trace;

  double time_per_iteration_ms() const {
    return iterations > 0 ? wall_time_ms / static_cast<double>(iterations) : 0.0;
  }
};

inline std::vector<std::string> transport_residual_names() {
  return {"consensus", "demand", "capacity"};
}

/// Primal-dual method on the full space; projections onto the consensus box,
/// per-scenario Theta sets and per-OD scaled simplices.
inline TransportSolution solve_direct(const TransportNetwork& net, const ScenarioSet& sc,
                                      const TransportOptions& opt = {}) {
  const Model m = make_model(net, sc);
  const TransportSteps steps = opt.steps ? *opt.steps : default_steps(m);
  if (!steps_valid(m, steps)) throw std::invalid_argument("solve_direct: step sizes rejected");
  const auto t0 = std::chrono::steady_clock::now();
  const Index na = m.na(), nr = m.nr(), ns = m.ns();

  CondatProblem pb;
  pb.L = make_operator(m);
  pb.beta = 1.0 / m.lipschitz;
  pb.grad_H = [&m](const Vector& z) { return gradient_vector(m, z); };
  pb.prox_Gconj = {[&m](const Vector& q, double gamma) { return prox_theta_conjugate(m, q, gamma); },
                   "theta*"};
  pb.prox_F = {[&m, &net, &sc, na, nr, ns](const Vector& z, double) -> Vector {
                 Matrix x = unpack_x(m, z);
                 for (Index a = 0; a < na; ++a) {
                   x.row(a) = project_capacity_consensus(x.row(a).transpose(), net.M[a]).transpose();
                 }
                 Matrix f = unpack_f(m, z);
                 for (Index xi = 0; xi < ns; ++xi) {
                   for (Index o = 0; o < net.num_od(); ++o) {
                     const auto& routes = net.od_pairs[static_cast<std::size_t>(o)].routes;
                     Vector g(static_cast<Index>(routes.size()));
                     for (std::size_t i = 0; i < routes.size(); ++i) g[static_cast<Index>(i)] = f(routes[i], xi);
                     const Vector pg = project_simplex_mass(g, sc.demand(o, xi));
                     for (std::size_t i = 0; i < routes.size(); ++i) f(routes[i], xi) = pg[static_cast<Index>(i)];
                   }
                 }
                 (void)nr;
                 return pack(x, f);
               },
               "iota_Lambda"};

  CondatState init{Vector::Zero(m.primal_dim()), Vector::Zero(m.primal_dim()),
                   Vector::Zero(m.dual_dim()), 0};
  auto monitor = [&](const CondatState& s) {
    const Matrix x = unpack_x(m, s.x);
    const Matrix f = unpack_f(m, s.x);
    Observation o;
    o.objective = objective_and_gradient(m, x, f).value;
    o.residuals = {consensus_residual(x), demand_residual(net, sc, f), capacity_violation(net, sc, x, f)};
    return o;
  };
  auto res = iterate(
      init, [&](const CondatState& s) { return condat_step(pb, {steps.tau, steps.gamma}, s); },
      [](const CondatState& a, const CondatState& b) { return pair_change(a.x, b.x, a.u, b.u); },
      {opt.tol, opt.max_iters}, Monitor<CondatState>(monitor), transport_residual_names());

  TransportSolution sol;
  sol.x = unpack_x(m, res.state.x);
  sol.f = unpack_f(m, res.state.x);
  sol.objective = objective_and_gradient(m, sol.x, sol.f).value;
  sol.iterations = res.iterations;
  sol.converged = res.converged;
  sol.diverged = res.diverged;
  sol.steps = steps;
  sol.trace = std::move(res.trace);
  sol.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return sol;
}

/// Partial-inverse method on V = (non-anticipativity) x (zero OD sums), with
/// the flow shifted by the even demand split.
inline TransportSolution solve_subspace(const TransportNetwork& net, const ScenarioSet& sc,
                                        const TransportOptions& opt = {}) {
  const Model m = make_model(net, sc);
  const TransportSteps steps = opt.steps ? *opt.steps : default_steps(m);
  if (!steps_valid(m, steps)) throw std::invalid_argument("solve_subspace: step sizes rejected");
  const auto t0 = std::chrono::steady_clock::now();
  const Index na = m.na(), ns = m.ns();
  const OdPartition groups = net.partition();

  const Matrix f0 = demand_shift(m);
  const Vector shift = pack(Matrix::Zero(na, ns), f0);
  const LinearMap L = make_operator(m);
  const Vector dual_shift = L.apply(shift);

  PdpiProblem pb;
  pb.L = L;
  pb.beta = 1.0 / m.lipschitz;
  pb.P_V = {[&m, &groups](const Vector& z) -> Vector {
              return pack(project_nonanticipativity(unpack_x(m, z)),
                          project_demand_centering(unpack_f(m, z), groups));
            },
            m.primal_dim()};
  pb.P_W = SubspaceProjector::identity(m.dual_dim());
  pb.C = [&m, &shift](const Vector& z) { return gradient_vector(m, z + shift); };
  pb.resolvent_Binv = {[&m, &dual_shift](const Vector& v, double gamma) {
                         return prox_theta_conjugate(m, v + gamma * dual_shift, gamma);
                       },
                       "theta(.+c)*"};
  pb.resolvent_A = {[&m, &net, &shift, na, ns](const Vector& z, double) -> Vector {
                      Vector s = z + shift;
                      Matrix x = unpack_x(m, s);
                      for (Index xi = 0; xi < ns; ++xi)
                        for (Index a = 0; a < na; ++a) x(a, xi) = mid(0.0, x(a, xi), net.M[a]);
                      const Matrix f = unpack_f(m, s).cwiseMax(0.0);
                      return pack(x, f) - shift;
                    },
                    "iota_D x R+"};

  auto monitor = [&](const PdpiState& s) {
    const Matrix x = unpack_x(m, s.x);
    const Matrix f = unpack_f(m, s.x) + f0;
    Observation o;
    o.objective = objective_and_gradient(m, x, f).value;
    o.residuals = {consensus_residual(x), demand_residual(net, sc, f), capacity_violation(net, sc, x, f)};
    return o;
  };
  auto res = solve(pb, {steps.tau, steps.gamma}, make_initial_state(pb), {opt.tol, opt.max_iters},
                   monitor, transport_residual_names());

  TransportSolution sol;
  sol.x = unpack_x(m, res.state.x);
  sol.f = unpack_f(m, res.state.x) + f0;
  sol.objective = objective_and_gradient(m, sol.x, sol.f).value;
  sol.iterations = res.iterations;
  sol.converged = res.converged;
  sol.diverged = res.diverged;
  sol.steps = steps;
  sol.trace = std::move(res.trace);
  sol.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return sol;
}

}  // namespace pdpi::transport
