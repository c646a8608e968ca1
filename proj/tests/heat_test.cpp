#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mfglab/convergence.hpp"
#include "mfglab/heat.hpp"

using namespace mfglab;

namespace {

constexpr double kPi = std::numbers::pi;

P1Space unit_space(int n) { return make_p1_space(build_interval_mesh(0.0, 1.0, n)); }

Eigen::VectorXd random_coeffs(const P1Space& s, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Eigen::VectorXd c(s.n_dofs);
  for (int i = 0; i < c.size(); ++i) c[i] = g(rng);
  return c;
}

}  // namespace

TEST(ThetaConfig, RejectsUnstableRange) {
  EXPECT_THROW(ThetaSchemeConfig(0.3, TimeGrid(1.0, 4)), std::invalid_argument);
  EXPECT_THROW(ThetaSchemeConfig(1.2, TimeGrid(1.0, 4)), std::invalid_argument);
  EXPECT_NO_THROW(ThetaSchemeConfig(0.5, TimeGrid(1.0, 4)));
  EXPECT_NO_THROW(ThetaSchemeConfig(1.0, TimeGrid(1.0, 4)));
}

TEST(HeatFlow, ZeroInitialDataStaysZero) {
  const P1Space s = unit_space(8);
  const ThetaSchemeConfig cfg(0.5, TimeGrid(1.0, 10));
  const SpaceTimeField f = s_i_h(s, cfg, Eigen::VectorXd::Zero(s.n_dofs));
  for (const auto& fr : f.frames) EXPECT_DOUBLE_EQ(fr.norm(), 0.0);
}

TEST(HeatFlow, EnergyDecay) {
  const P1Space s = unit_space(16);
  const SparseOperator M = assemble_mass(s);
  for (const double theta : {0.5, 0.75, 1.0}) {
    const ThetaSchemeConfig cfg(theta, TimeGrid(0.2, 20));
    const SpaceTimeField f = s_i_h(s, cfg, random_coeffs(s, 42));
    for (int k = 0; k < cfg.grid.n_steps; ++k) {
      const double e0 = f.frames[k].dot(M * f.frames[k]);
      const double e1 = f.frames[k + 1].dot(M * f.frames[k + 1]);
      EXPECT_LE(e1, e0 * (1.0 + 1e-13));
    }
  }
}

TEST(HeatFlow, ClosedFormSineBenchmark) {
  // max_k || v^k - e^{-pi^2 t_k} I_h sin(pi x) ||_{L^2} = O(h^2) for
  // theta = 1 with tau = h^2.
  std::vector<double> errs;
  for (int n : {8, 16, 32}) {
    const P1Space s = unit_space(n);
    const double h = s.mesh.h_max;
    const int steps = static_cast<int>(std::lround(0.1 / (h * h)));
    const ThetaSchemeConfig cfg(1.0, TimeGrid(0.1, steps));
    const Eigen::VectorXd v0 =
        l2_project(s, [](Vec2 x) { return std::sin(kPi * x.x); }).coeffs;
    const SpaceTimeField f = s_i_h(s, cfg, v0);
    const Eigen::VectorXd sine =
        interpolate(s, [](Vec2 x) { return std::sin(kPi * x.x); }).coeffs;
    const SparseOperator M = assemble_mass(s);
    double worst = 0.0;
    for (int k = 0; k <= cfg.grid.n_steps; ++k) {
      const Eigen::VectorXd d =
          f.frames[k] - std::exp(-kPi * kPi * cfg.grid.node(k)) * sine;
      worst = std::max(worst, std::sqrt(d.dot(M * d)));
    }
    errs.push_back(worst);
  }
  EXPECT_NEAR(std::log2(errs[0] / errs[1]), 2.0, 0.3);
  EXPECT_NEAR(std::log2(errs[1] / errs[2]), 2.0, 0.3);
}

TEST(HeatSource, ZeroLoadGivesZero) {
  const P1Space s = unit_space(8);
  const ThetaSchemeConfig cfg(0.5, TimeGrid(1.0, 5));
  const SpaceTimeField f =
      s_is_h(s, cfg, [&](int, double) { return Eigen::VectorXd::Zero(s.n_dofs); });
  for (const auto& fr : f.frames) EXPECT_DOUBLE_EQ(fr.norm(), 0.0);
}

TEST(HeatSource, SteadyStateLimit) {
  // With a time-constant load the flow approaches the stationary solve
  // A c = l as T grows.
  const P1Space s = unit_space(16);
  const Eigen::VectorXd load = assemble_load(s, [](Vec2 x) { return std::sin(kPi * x.x); });
  const ThetaSchemeConfig cfg(1.0, TimeGrid(5.0, 100));
  const SpaceTimeField f = s_is_h(s, cfg, [&](int, double) { return load; });
  const Eigen::VectorXd steady = SpdFactor(assemble_stiffness(s)).solve(load);
  EXPECT_LE((f.frames.back() - steady).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(HeatSource, DivergenceFormLoad) {
  // For constant G the load entries are -∫ G·Dφ_i, which is minus the
  // column sums of the transport pairing against the constant-one weight.
  const P1Space s = unit_space(8);
  const Vec2 G{0.8, 0.0};
  const Eigen::VectorXd l = assemble_load_divergence(s, [G](Vec2) { return G; });
  // In 1D interior rows: -G (φ' integrates to net flux) gives +-G/... ends only.
  // Verify against direct evaluation: -G sum over cells of grad * measure.
  Eigen::VectorXd expected = Eigen::VectorXd::Zero(s.n_dofs);
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto geo = detail::cell_geometry(s.mesh, c);
    for (int a = 0; a < 2; ++a) {
      const int i = s.vertex_to_dof[geo.vid[a]];
      if (i >= 0) expected[i] -= dot(G, geo.grad[a]) * geo.measure;
    }
  }
  EXPECT_NEAR((l - expected).lpNorm<Eigen::Infinity>(), 0.0, 1e-14);
  // interior hats: left slope contribution cancels the right one
  for (int i = 1; i < s.n_dofs - 1; ++i) EXPECT_NEAR(l[i], 0.0, 1e-14);
}

TEST(TimeReversal, FramesMirrorBitExact) {
  const P1Space s = unit_space(12);
  const ThetaSchemeConfig cfg(0.5, TimeGrid(0.3, 7));
  const Eigen::VectorXd v0 = random_coeffs(s, 9);
  const SpaceTimeField fwd = s_i_h(s, cfg, v0);
  const SpaceTimeField bwd = s_t_h(s, cfg, v0);
  const int n = cfg.grid.n_steps;
  for (int k = 0; k <= n; ++k)
    for (int i = 0; i < s.n_dofs; ++i) EXPECT_EQ(bwd.frames[k][i], fwd.frames[n - k][i]);
  // terminal frame of the backward flow is the data
  EXPECT_EQ(bwd.frames[n], v0);
}

TEST(TimeReversal, SourceOperatorZero) {
  const P1Space s = unit_space(8);
  const ThetaSchemeConfig cfg(1.0, TimeGrid(1.0, 4));
  const SpaceTimeField f =
      s_ts_h(s, cfg, [&](int, double) { return Eigen::VectorXd::Zero(s.n_dofs); });
  for (const auto& fr : f.frames) EXPECT_DOUBLE_EQ(fr.norm(), 0.0);
}

TEST(TimeReversal, SourceOperatorMirrorsReflectedLoad) {
  const P1Space s = unit_space(10);
  const ThetaSchemeConfig cfg(0.5, TimeGrid(0.5, 6));
  const TimeScalarFn g = [](double t, Vec2 x) { return std::sin(kPi * x.x) * (1.0 + t); };
  const LoadProvider fwd_loads = [&](int, double t) {
    return assemble_load(s, [&](Vec2 x) { return g(0.5 - t, x); });
  };
  const LoadProvider bwd_loads = [&](int, double t) {
    return assemble_load(s, [&](Vec2 x) { return g(t, x); });
  };
  const SpaceTimeField fwd = s_is_h(s, cfg, fwd_loads);
  const SpaceTimeField bwd = s_ts_h(s, cfg, bwd_loads);
  const int n = cfg.grid.n_steps;
  for (int k = 0; k <= n; ++k)
    EXPECT_EQ(bwd.frames[k], fwd.frames[n - k]);
}

TEST(ThetaScheme, OneAndHalfAgreeToFirstOrder) {
  // || v_theta1 - v_theta1/2 || = O(tau): halving tau roughly halves the gap.
  const P1Space s = unit_space(32);
  const Eigen::VectorXd v0 = l2_project(s, [](Vec2 x) { return std::sin(kPi * x.x); }).coeffs;
  const SparseOperator M = assemble_mass(s);
  auto gap = [&](int steps) {
    const SpaceTimeField a = s_i_h(s, ThetaSchemeConfig(1.0, TimeGrid(0.1, steps)), v0);
    const SpaceTimeField b = s_i_h(s, ThetaSchemeConfig(0.5, TimeGrid(0.1, steps)), v0);
    const Eigen::VectorXd d = a.frames.back() - b.frames.back();
    return std::sqrt(d.dot(M * d));
  };
  const double g1 = gap(20), g2 = gap(40);
  EXPECT_NEAR(g1 / g2, 2.0, 0.5);
}

TEST(ErrorStudy, RequiresTwoLevels) {
  const auto battery = heat_benchmark_battery();
  EXPECT_THROW(
      heat_error_study(battery[0], DomainSpec{1, 0, 1, 1, 1}, 0.25, {8}, tau_equals_h(), 7.0),
      std::invalid_argument);
}

TEST(ErrorStudy, SeparableSineRates) {
  const auto battery = heat_benchmark_battery();
  const DomainSpec dom{1, 0, 1, 1, 1};
  const HeatErrorReport l2 =
      heat_error_study(battery[0], dom, 0.25, {8, 16, 32, 64}, tau_equals_h2(), 7.0);
  EXPECT_NEAR(l2.eoc_l2.back(), 2.0, 0.15);
  const HeatErrorReport w =
      heat_error_study(battery[0], dom, 0.25, {8, 16, 32, 64}, tau_equals_h(), 7.0);
  EXPECT_NEAR(w.eoc_w01q.back(), 1.0, 0.1);
}

TEST(ErrorStudy, TwoDimensionalRates) {
  const DomainSpec dom{2, 0, 1, 1, 1};
  const HeatBenchmark bench{
      "separable_sine_2d",
      [](double t, Vec2 x) {
        return std::exp(-2.0 * kPi * kPi * t) * std::sin(kPi * x.x) * std::sin(kPi * x.y);
      },
      [](double t, Vec2 x) {
        const double a = std::exp(-2.0 * kPi * kPi * t);
        return Vec2{a * kPi * std::cos(kPi * x.x) * std::sin(kPi * x.y),
                    a * kPi * std::sin(kPi * x.x) * std::cos(kPi * x.y)};
      },
      [](Vec2 x) { return std::sin(kPi * x.x) * std::sin(kPi * x.y); },
      nullptr};
  // Fixed fine time grid so the measured order is purely spatial.
  const TauRule fine_tau{1.0, [](double) { return 0.05 / 200; }, "tau=const"};
  const HeatErrorReport rep = heat_error_study(bench, dom, 0.05, {4, 8, 16}, fine_tau, 9.0);
  EXPECT_NEAR(rep.eoc_l2.back(), 2.0, 0.25);
}

TEST(MaximalRegularityProxy, RatioStaysBounded) {
  // || v_h - P_h v ||_{L^q} / || v - R_h v ||_{L^q} across four levels with
  // v0h = P_h v0; no growth trend expected.
  const double q = 7.0;
  std::vector<double> ratios;
  for (int n : {8, 16, 32, 64}) {
    const P1Space s = unit_space(n);
    const double h = s.mesh.h_max;
    const int steps = std::max(1, static_cast<int>(std::lround(0.1 / (h * h))));
    const ThetaSchemeConfig cfg(1.0, TimeGrid(0.1, steps));
    const ScalarFn sine = [](Vec2 x) { return std::sin(kPi * x.x); };
    const SpaceTimeField vh = s_i_h(s, cfg, l2_project(s, sine).coeffs);

    SpaceTimeField ph_v = zero_field(cfg.grid, s);
    double ritz_err_acc = 0.0;
    for (int k = 0; k <= cfg.grid.n_steps; ++k) {
      const double t = cfg.grid.node(k);
      const double amp = std::exp(-kPi * kPi * t);
      const ScalarFn vt = [amp](Vec2 x) { return amp * std::sin(kPi * x.x); };
      const VectorFn dvt = [amp](Vec2 x) { return Vec2{amp * kPi * std::cos(kPi * x.x), 0.0}; };
      ph_v.frames[k] = l2_project(s, vt).coeffs;
      const DiscreteFunction r = ritz_project(s, vt, dvt);
      const double w = (k == 0 || k == cfg.grid.n_steps) ? 0.5 * cfg.grid.tau() : cfg.grid.tau();
      ritz_err_acc += w * std::pow(error_lq(s, r.coeffs, vt, q, 8), q);
    }
    SpaceTimeField diff = vh;
    for (int k = 0; k <= cfg.grid.n_steps; ++k) diff.frames[k] -= ph_v.frames[k];
    ratios.push_back(norm_lq(diff, q) / std::pow(ritz_err_acc, 1.0 / q));
  }
  const double early = std::max(ratios[0], ratios[1]);
  EXPECT_LE(ratios[2], 2.0 * early);
  EXPECT_LE(ratios[3], 2.0 * early);
}
