#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mfglab/problem.hpp"
#include "mfglab/spacetime.hpp"

namespace mfglab {

/// One-parameter implicit time integrator; theta = 1 is implicit Euler,
/// theta = 1/2 Crank-Nicolson. Restricted to the unconditionally stable
/// range theta in [1/2, 1].
struct ThetaSchemeConfig {
  double theta = 0.5;
  TimeGrid grid;

  ThetaSchemeConfig() = default;
  ThetaSchemeConfig(double th, TimeGrid g) : theta(th), grid(g) {
    if (!(theta >= 0.5 && theta <= 1.0))
      throw std::invalid_argument("ThetaSchemeConfig: need theta in [1/2, 1]");
  }
};

/// Right-hand side per step: load vector at step k, evaluated at the
/// theta-weighted time t.
using LoadProvider = std::function<Eigen::VectorXd(int k, double t)>;

/// Forward theta-scheme driver for M dv/dt + A v = g with v(0) = v0h.
inline SpaceTimeField theta_solve_forward(const P1Space& space, const ThetaSchemeConfig& cfg,
                                          const Eigen::VectorXd& v0h,
                                          const LoadProvider& rhs = nullptr) {
  const double tau = cfg.grid.tau();
  const SparseOperator M = assemble_mass(space);
  const SparseOperator A = assemble_stiffness(space);
  const SpdFactor lhs(SparseOperator(M + tau * cfg.theta * A));
  const SparseOperator explicit_part = M - tau * (1.0 - cfg.theta) * A;

  SpaceTimeField f = zero_field(cfg.grid, space);
  f.frames[0] = v0h;
  for (int k = 0; k < cfg.grid.n_steps; ++k) {
    Eigen::VectorXd b = explicit_part * f.frames[static_cast<std::size_t>(k)];
    if (rhs) {
      const double t_theta = cfg.grid.node(k) + cfg.theta * tau;
      Eigen::VectorXd g = rhs(k, t_theta);
      if (!g.allFinite()) throw std::invalid_argument("theta_solve_forward: non-finite load");
      b += tau * g;
    }
    f.frames[static_cast<std::size_t>(k + 1)] = lhs.solve(b);
  }
  return f;
}

/// Discrete heat flow from initial data: homogeneous equation.
inline SpaceTimeField s_i_h(const P1Space& space, const ThetaSchemeConfig& cfg,
                            const Eigen::VectorXd& v0h) {
  return theta_solve_forward(space, cfg, v0h, nullptr);
}

/// Discrete heat flow from a source with zero initial data. The provider may
/// return divergence-form loads (see assemble_load_divergence).
inline SpaceTimeField s_is_h(const P1Space& space, const ThetaSchemeConfig& cfg,
                             const LoadProvider& rhs) {
  return theta_solve_forward(space, cfg, Eigen::VectorXd::Zero(space.n_dofs), rhs);
}

namespace detail {
inline SpaceTimeField reverse_frames(SpaceTimeField f) {
  std::reverse(f.frames.begin(), f.frames.end());
  return f;
}
}  // namespace detail

/// Backward flow from terminal data: the exact time reversal of s_i_h,
/// frame for frame.
inline SpaceTimeField s_t_h(const P1Space& space, const ThetaSchemeConfig& cfg,
                            const Eigen::VectorXd& vTh) {
  return detail::reverse_frames(s_i_h(space, cfg, vTh));
}

/// Backward flow from a source with zero terminal data: time reversal of
/// s_is_h applied to the time-reflected load.
inline SpaceTimeField s_ts_h(const P1Space& space, const ThetaSchemeConfig& cfg,
                             const LoadProvider& rhs) {
  const double T = cfg.grid.T;
  const int n = cfg.grid.n_steps;
  LoadProvider reflected = nullptr;
  if (rhs) reflected = [&rhs, T, n](int k, double t) { return rhs(n - 1 - k, T - t); };
  return detail::reverse_frames(s_is_h(space, cfg, reflected));
}

/// Closed-form benchmark for the forward heat equation:
/// dv/dt - Δv = source, v(0) = initial.
struct HeatBenchmark {
  std::string name;
  TimeScalarFn value;
  TimeVectorFn grad;
  ScalarFn initial;
  TimeScalarFn source;  // empty for the homogeneous equation
};

/// Time-step coupling rule for refinement studies.
struct TauRule {
  double theta = 0.5;
  std::function<double(double)> tau_of_h;
  std::string name;
};

inline TauRule tau_equals_h() {
  return {0.5, [](double h) { return h; }, "tau=h"};
}
inline TauRule tau_equals_h2() {
  return {1.0, [](double h) { return h * h; }, "tau=h^2"};
}

struct HeatErrorLevel {
  double h = 0.0;
  double tau = 0.0;
  double e_l2 = 0.0;
  double e_lq = 0.0;
  double e_w01q = 0.0;
};

struct HeatErrorReport {
  std::string benchmark;
  std::string rule;
  double q = 2.0;
  std::vector<HeatErrorLevel> levels;
  // EOC between consecutive levels; entry i compares levels i and i+1.
  std::vector<double> eoc_l2, eoc_lq, eoc_w01q;
};

inline double eoc(double e_coarse, double e_fine, double h_coarse, double h_fine) {
  return std::log(e_coarse / e_fine) / std::log(h_coarse / h_fine);
}

/// Solves the benchmark on each mesh level with the given tau(h) coupling
/// and tabulates errors and experimental orders.
inline HeatErrorReport heat_error_study(const HeatBenchmark& bench, const DomainSpec& domain,
                                        double T, const std::vector<int>& cells_list,
                                        const TauRule& rule, double q) {
  if (cells_list.size() < 2)
    throw std::invalid_argument("heat_error_study: need at least 2 mesh levels");
  HeatErrorReport rep;
  rep.benchmark = bench.name;
  rep.rule = rule.name;
  rep.q = q;
  for (const int n : cells_list) {
    const P1Space space = make_p1_space(build_mesh(domain, n));
    const double h = space.mesh.h_max;
    const int n_steps = std::max(1, static_cast<int>(std::lround(T / rule.tau_of_h(h))));
    const ThetaSchemeConfig cfg(rule.theta, TimeGrid(T, n_steps));

    LoadProvider rhs = nullptr;
    if (bench.source)
      rhs = [&bench, &space](int, double t) {
        return assemble_load(space, [&bench, t](Vec2 x) { return bench.source(t, x); }, 4);
      };
    const SpaceTimeField vh =
        theta_solve_forward(space, cfg, l2_project(space, bench.initial).coeffs, rhs);

    const ExactField exact{bench.value, bench.grad};
    const SpaceTimeError e2 = error_norms(vh, exact, 2.0);
    const SpaceTimeError eq = error_norms(vh, exact, q);
    rep.levels.push_back({h, cfg.grid.tau(), e2.lq, eq.lq, eq.w01q});
  }
  for (std::size_t i = 0; i + 1 < rep.levels.size(); ++i) {
    const auto& c = rep.levels[i];
    const auto& f = rep.levels[i + 1];
    rep.eoc_l2.push_back(eoc(c.e_l2, f.e_l2, c.h, f.h));
    rep.eoc_lq.push_back(eoc(c.e_lq, f.e_lq, c.h, f.h));
    rep.eoc_w01q.push_back(eoc(c.e_w01q, f.e_w01q, c.h, f.h));
  }
  return rep;
}

}  // namespace mfglab
