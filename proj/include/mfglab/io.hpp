#pragma once

#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "mfglab/convergence.hpp"

namespace mfglab {

using json = nlohmann::json;

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Writes via a temporary file and rename so interrupted runs never leave a
/// truncated artifact behind.
inline void atomic_write_text(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("atomic_write_text: cannot open " + tmp.string());
    os << content;
  }
  std::filesystem::rename(tmp, path);
}

namespace detail {

inline void require_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
}

inline std::map<std::string, double> params_from_json(const json& j, const std::string& where) {
  std::map<std::string, double> out;
  if (j.is_null()) return out;
  if (!j.is_object()) throw ConfigError(where + ": params must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) throw ConfigError(where + ": param '" + key + "' must be a number");
    out[key] = value.get<double>();
  }
  return out;
}

}  // namespace detail

/// Serializable problem description; see README for the schema.
struct ProblemConfig {
  DomainSpec domain;
  double T = 0.5;
  int cells = 32;
  int time_steps = 0;  // 0: derive from tau rule of the study / tau = h
  double theta = 0.5;
  std::string hamiltonian = "quadratic";
  std::map<std::string, double> hamiltonian_params;
  std::string coupling = "identity_local";
  std::map<std::string, double> coupling_params;
  std::string data = "parabolic_bump";  // data profile or manufactured pair
  bool manufactured = false;
  SolverConfig solver;
};

struct StudyConfig {
  ProblemConfig problem;
  std::vector<int> levels;
  double q = 0.0;  // 0: dimension default
  std::string tau_rule = "h";
};

inline ProblemConfig problem_config_from_json(const json& j) {
  detail::require_keys(j,
                       {"schema", "domain", "T", "cells", "time_steps", "theta", "hamiltonian",
                        "coupling", "data", "manufactured", "solver"},
                       "problem");
  if (!j.contains("schema") || j.at("schema") != "mfg-problem/1")
    throw ConfigError("problem: missing or unsupported schema (want \"mfg-problem/1\")");

  ProblemConfig c;
  const json& dom = j.at("domain");
  detail::require_keys(dom, {"dim", "a", "b", "lx", "ly"}, "domain");
  c.domain.dim = dom.at("dim").get<int>();
  if (c.domain.dim != 1 && c.domain.dim != 2) throw ConfigError("domain: dim must be 1 or 2");
  if (c.domain.dim == 1) {
    c.domain.a = dom.value("a", 0.0);
    c.domain.b = dom.value("b", 1.0);
  } else {
    c.domain.lx = dom.value("lx", 1.0);
    c.domain.ly = dom.value("ly", 1.0);
  }
  c.T = j.value("T", 0.5);
  c.cells = j.value("cells", 32);
  c.time_steps = j.value("time_steps", 0);
  c.theta = j.value("theta", 0.5);

  if (j.contains("hamiltonian")) {
    const json& h = j.at("hamiltonian");
    detail::require_keys(h, {"name", "params"}, "hamiltonian");
    c.hamiltonian = h.at("name").get<std::string>();
    c.hamiltonian_params = detail::params_from_json(h.value("params", json()), "hamiltonian");
  }
  if (j.contains("coupling")) {
    const json& f = j.at("coupling");
    detail::require_keys(f, {"name", "params"}, "coupling");
    c.coupling = f.at("name").get<std::string>();
    c.coupling_params = detail::params_from_json(f.value("params", json()), "coupling");
  }
  c.data = j.value("data", std::string("parabolic_bump"));
  c.manufactured = j.value("manufactured", false);

  if (j.contains("solver")) {
    const json& s = j.at("solver");
    detail::require_keys(
        s, {"method", "damping", "tol_residual", "max_outer", "inner_newton_tol", "fp_lumping"},
        "solver");
    const std::string method = s.value("method", std::string("picard_then_newton"));
    if (method == "picard")
      c.solver.method = SolverConfig::Method::picard;
    else if (method == "newton")
      c.solver.method = SolverConfig::Method::newton;
    else if (method == "picard_then_newton")
      c.solver.method = SolverConfig::Method::picard_then_newton;
    else
      throw ConfigError("solver: unknown method '" + method + "'");
    c.solver.damping = s.value("damping", 0.5);
    c.solver.tol_residual = s.value("tol_residual", 1e-9);
    c.solver.max_outer = s.value("max_outer", 200);
    c.solver.inner_newton_tol = s.value("inner_newton_tol", 1e-12);
    c.solver.fp_lumping = s.value("fp_lumping", false);
  }
  return c;
}

inline json problem_config_to_json(const ProblemConfig& c) {
  json dom;
  dom["dim"] = c.domain.dim;
  if (c.domain.dim == 1) {
    dom["a"] = c.domain.a;
    dom["b"] = c.domain.b;
  } else {
    dom["lx"] = c.domain.lx;
    dom["ly"] = c.domain.ly;
  }
  json j;
  j["schema"] = "mfg-problem/1";
  j["domain"] = dom;
  j["T"] = c.T;
  j["cells"] = c.cells;
  j["time_steps"] = c.time_steps;
  j["theta"] = c.theta;
  j["hamiltonian"] = {{"name", c.hamiltonian}, {"params", json(c.hamiltonian_params)}};
  j["coupling"] = {{"name", c.coupling}, {"params", json(c.coupling_params)}};
  j["data"] = c.data;
  j["manufactured"] = c.manufactured;
  const char* method = c.solver.method == SolverConfig::Method::picard ? "picard"
                       : c.solver.method == SolverConfig::Method::newton ? "newton"
                                                                         : "picard_then_newton";
  j["solver"] = {{"method", method},
                 {"damping", c.solver.damping},
                 {"tol_residual", c.solver.tol_residual},
                 {"max_outer", c.solver.max_outer},
                 {"inner_newton_tol", c.solver.inner_newton_tol},
                 {"fp_lumping", c.solver.fp_lumping}};
  return j;
}

inline StudyConfig study_config_from_json(const json& j) {
  detail::require_keys(j, {"schema", "problem", "levels", "q", "tau_rule"}, "study");
  if (!j.contains("schema") || j.at("schema") != "mfg-study/1")
    throw ConfigError("study: missing or unsupported schema (want \"mfg-study/1\")");
  StudyConfig s;
  s.problem = problem_config_from_json(j.at("problem"));
  s.levels = j.at("levels").get<std::vector<int>>();
  s.q = j.value("q", 0.0);
  s.tau_rule = j.value("tau_rule", std::string("h"));
  if (s.tau_rule != "h" && s.tau_rule != "h2")
    throw ConfigError("study: tau_rule must be 'h' or 'h2'");
  return s;
}

inline json study_config_to_json(const StudyConfig& s) {
  json j;
  j["schema"] = "mfg-study/1";
  j["problem"] = problem_config_to_json(s.problem);
  j["problem"].erase("schema");
  j["problem"]["schema"] = "mfg-problem/1";
  j["levels"] = s.levels;
  j["q"] = s.q;
  j["tau_rule"] = s.tau_rule;
  return j;
}

/// Named manufactured pairs and data profiles available from config files.
inline MfgProblem build_problem(const ProblemConfig& c) {
  const double pi = std::numbers::pi;
  HamiltonianSpec H = builtin_hamiltonian(c.hamiltonian, c.hamiltonian_params);
  CouplingSpec F = builtin_coupling(c.coupling, c.coupling_params, c.domain.dim);

  if (c.manufactured) {
    const double T = c.T;
    if (c.data == "mfg_smooth_1d") {
      // u* = (T-t) sin(pi x) e^{-t},  m* = (1+t) x^2 (1-x)^2
      SmoothField u;
      u.value = [pi, T](double t, Vec2 p) { return (T - t) * std::sin(pi * p.x) * std::exp(-t); };
      u.dt = [pi, T](double t, Vec2 p) {
        return -std::exp(-t) * (1.0 + T - t) * std::sin(pi * p.x);
      };
      u.grad = [pi, T](double t, Vec2 p) {
        return Vec2{pi * (T - t) * std::exp(-t) * std::cos(pi * p.x), 0.0};
      };
      u.laplacian = [pi, T](double t, Vec2 p) {
        return -pi * pi * (T - t) * std::exp(-t) * std::sin(pi * p.x);
      };
      u.hessian = [pi, T](double t, Vec2 p) {
        return Mat2{-pi * pi * (T - t) * std::exp(-t) * std::sin(pi * p.x), 0, 0, 0};
      };
      SmoothField m;
      m.value = [](double t, Vec2 p) {
        return (1.0 + t) * p.x * p.x * (1.0 - p.x) * (1.0 - p.x);
      };
      m.dt = [](double, Vec2 p) { return p.x * p.x * (1.0 - p.x) * (1.0 - p.x); };
      m.grad = [](double t, Vec2 p) {
        return Vec2{(1.0 + t) * 2.0 * p.x * (1.0 - p.x) * (1.0 - 2.0 * p.x), 0.0};
      };
      m.laplacian = [](double t, Vec2 p) {
        return (1.0 + t) * (2.0 - 12.0 * p.x + 12.0 * p.x * p.x);
      };
      return manufacture(u, m, H, F, c.domain, T);
    }
    if (c.data == "mfg_smooth_2d") {
      // u* = (T-t) e^{-t} sin(pi x) sin(pi y),  m* = (1+t) b(x) b(y),
      // b(s) = s^2 (1-s)^2
      auto b = [](double s) { return s * s * (1.0 - s) * (1.0 - s); };
      auto db = [](double s) { return 2.0 * s * (1.0 - s) * (1.0 - 2.0 * s); };
      auto d2b = [](double s) { return 2.0 - 12.0 * s + 12.0 * s * s; };
      SmoothField u;
      u.value = [pi, T](double t, Vec2 p) {
        return (T - t) * std::exp(-t) * std::sin(pi * p.x) * std::sin(pi * p.y);
      };
      u.dt = [pi, T](double t, Vec2 p) {
        return -std::exp(-t) * (1.0 + T - t) * std::sin(pi * p.x) * std::sin(pi * p.y);
      };
      u.grad = [pi, T](double t, Vec2 p) {
        const double a = (T - t) * std::exp(-t);
        return Vec2{a * pi * std::cos(pi * p.x) * std::sin(pi * p.y),
                    a * pi * std::sin(pi * p.x) * std::cos(pi * p.y)};
      };
      u.laplacian = [pi, T](double t, Vec2 p) {
        return -2.0 * pi * pi * (T - t) * std::exp(-t) * std::sin(pi * p.x) * std::sin(pi * p.y);
      };
      u.hessian = [pi, T](double t, Vec2 p) {
        const double a = (T - t) * std::exp(-t);
        const double sx = std::sin(pi * p.x), cx = std::cos(pi * p.x);
        const double sy = std::sin(pi * p.y), cy = std::cos(pi * p.y);
        return Mat2{-a * pi * pi * sx * sy, a * pi * pi * cx * cy, a * pi * pi * cx * cy,
                    -a * pi * pi * sx * sy};
      };
      SmoothField m;
      m.value = [b](double t, Vec2 p) { return (1.0 + t) * b(p.x) * b(p.y); };
      m.dt = [b](double, Vec2 p) { return b(p.x) * b(p.y); };
      m.grad = [b, db](double t, Vec2 p) {
        return Vec2{(1.0 + t) * db(p.x) * b(p.y), (1.0 + t) * b(p.x) * db(p.y)};
      };
      m.laplacian = [b, d2b](double t, Vec2 p) {
        return (1.0 + t) * (d2b(p.x) * b(p.y) + b(p.x) * d2b(p.y));
      };
      return manufacture(u, m, H, F, c.domain, T);
    }
    throw ConfigError("build_problem: unknown manufactured pair '" + c.data + "'");
  }

  MfgProblem p;
  p.domain = c.domain;
  p.T = c.T;
  p.hamiltonian = H;
  p.coupling = F;
  if (c.data == "parabolic_bump") {
    if (c.domain.dim == 1) {
      const double a = c.domain.a, w = c.domain.b - c.domain.a;
      p.terminal_u = [a, w](Vec2 x) {
        const double s = (x.x - a) / w;
        return s * (1.0 - s);
      };
      p.initial_m = [a, w](Vec2 x) {
        const double s = (x.x - a) / w;
        return 6.0 * s * (1.0 - s) / w;
      };
    } else {
      const double lx = c.domain.lx, ly = c.domain.ly;
      p.terminal_u = [lx, ly](Vec2 x) {
        return (x.x / lx) * (1.0 - x.x / lx) * (x.y / ly) * (1.0 - x.y / ly);
      };
      p.initial_m = [lx, ly](Vec2 x) {
        return 36.0 * (x.x / lx) * (1.0 - x.x / lx) * (x.y / ly) * (1.0 - x.y / ly) / (lx * ly);
      };
    }
    return p;
  }
  if (c.data == "zero") {
    p.terminal_u = [](Vec2) { return 0.0; };
    p.initial_m = [](Vec2) { return 0.0; };
    p.source_u = [](double, Vec2) { return 0.0; };  // marks the problem as forced
    p.source_m = [](double, Vec2) { return 0.0; };
    const TimeScalarFn zf = [](double, Vec2) { return 0.0; };
    const TimeVectorFn zg = [](double, Vec2) { return Vec2{}; };
    p.exact = ExactPair{{zf, zg}, {zf, zg}};
    return p;
  }
  throw ConfigError("build_problem: unknown data profile '" + c.data + "'");
}

inline json to_json(const SolveReport& r) {
  json j;
  j["converged"] = r.converged;
  j["outer_iterations"] = r.outer_iterations;
  j["residual_history"] = r.residual_history;
  j["final_residual"] = r.final_residual;
  j["sup_bound_check"] = r.sup_bound_check;
  return j;
}

inline json to_json(const MfgConvergenceReport& r) {
  json j;
  j["q"] = r.q;
  j["rule"] = r.rule;
  j["baseline_pass"] = r.baseline_pass;
  j["quasi_optimal_pass"] = r.quasi_optimal_pass;
  json levels = json::array();
  for (const auto& lv : r.levels)
    levels.push_back({{"h", lv.h},
                      {"tau", lv.tau},
                      {"e_u_Lq", lv.e_u_lq},
                      {"e_u_W01q", lv.e_u_w01q},
                      {"e_m_Lq", lv.e_m_lq},
                      {"exact", lv.exact}});
  j["levels"] = levels;
  auto clean = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) {
      if (std::isnan(x))
        a.push_back(nullptr);
      else
        a.push_back(x);
    }
    return a;
  };
  j["eoc_u_Lq"] = clean(r.eoc_u_lq);
  j["eoc_u_W01q"] = clean(r.eoc_u_w01q);
  j["eoc_m_Lq"] = clean(r.eoc_m_lq);
  j["eoc_X"] = clean(r.eoc_x);
  return j;
}

inline std::string pretty(const json& j) { return j.dump(2) + "\n"; }

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open " + path.string());
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("parse error in " + path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace mfglab
