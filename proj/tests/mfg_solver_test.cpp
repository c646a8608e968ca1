#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mfglab/io.hpp"
#include "mfglab/mfg_solver.hpp"

using namespace mfglab;

namespace {

constexpr double kPi = std::numbers::pi;

P1Space unit_space(int n) { return make_p1_space(build_interval_mesh(0.0, 1.0, n)); }

MfgProblem smooth_manufactured() {
  ProblemConfig cfg;
  cfg.domain = DomainSpec{1, 0, 1, 1, 1};
  cfg.T = 0.5;
  cfg.hamiltonian = "soft_transport";
  cfg.coupling = "saturating_local";
  cfg.data = "mfg_smooth_1d";
  cfg.manufactured = true;
  return build_problem(cfg);
}

MfgProblem bump_problem(const std::string& hamiltonian, const std::string& coupling,
                        std::map<std::string, double> cparams = {}) {
  ProblemConfig cfg;
  cfg.domain = DomainSpec{1, 0, 1, 1, 1};
  cfg.T = 0.5;
  cfg.hamiltonian = hamiltonian;
  cfg.coupling = coupling;
  cfg.coupling_params = std::move(cparams);
  cfg.data = "parabolic_bump";
  return build_problem(cfg);
}

}  // namespace

TEST(HjbBackward, AllZeroDataGivesZero) {
  const P1Space s = unit_space(8);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 8));
  MfgProblem p = bump_problem("zero", "zero");
  p.terminal_u = [](Vec2) { return 0.0; };
  const SpaceTimeField u =
      solve_hjb_backward(p, s, scheme, SolverConfig{}, zero_field(scheme.grid, s));
  for (const auto& fr : u.frames) EXPECT_DOUBLE_EQ(fr.norm(), 0.0);
}

TEST(HjbBackward, LinearCaseMatchesHeatOperators) {
  // H = 0 reduces the backward solve to s_t_h + s_ts_h.
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 10));
  MfgProblem p = bump_problem("zero", "zero");
  p.source_u = [](double t, Vec2 x) { return std::sin(kPi * x.x) * (1.0 + t); };

  const SpaceTimeField u =
      solve_hjb_backward(p, s, scheme, SolverConfig{}, zero_field(scheme.grid, s));

  const SpaceTimeField part_t = s_t_h(s, scheme, l2_project(s, p.terminal_u).coeffs);
  const SpaceTimeField part_ts = s_ts_h(s, scheme, [&](int, double t) {
    return assemble_load(s, [&](Vec2 x) { return p.source_u(t, x); });
  });
  for (int k = 0; k <= scheme.grid.n_steps; ++k) {
    const Eigen::VectorXd expect = part_t.frames[k] + part_ts.frames[k];
    EXPECT_LE((u.frames[k] - expect).lpNorm<Eigen::Infinity>(), 1e-12);
  }
}

TEST(HjbBackward, ComparisonPrincipleBound) {
  // Randomized 1D instances: max_t ||u_h||_inf within 5% of
  // ||u_T||_inf + (C_H + ||f||_inf) T.
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  const P1Space s = unit_space(32);
  const ThetaSchemeConfig scheme(1.0, TimeGrid(0.5, 128));
  for (int inst = 0; inst < 3; ++inst) {
    const double a1 = coef(rng), a2 = coef(rng), b1 = coef(rng), c1 = coef(rng), c2 = coef(rng);
    MfgProblem p = bump_problem("quadratic", "zero");
    p.terminal_u = [=](Vec2 x) {
      return c1 * std::sin(kPi * x.x) + c2 * std::sin(2.0 * kPi * x.x);
    };
    p.source_u = [=](double t, Vec2 x) {
      return (a1 + b1 * t) * std::sin(kPi * x.x) + a2 * std::sin(3.0 * kPi * x.x);
    };
    const SpaceTimeField u =
        solve_hjb_backward(p, s, scheme, SolverConfig{}, zero_field(scheme.grid, s));
    SpaceTimeField m0 = zero_field(scheme.grid, s);
    const double gap = sup_bound_gap(p, s, scheme, u, m0);
    double u_max = 0.0;
    for (const auto& fr : u.frames) u_max = std::max(u_max, linf_vertex_norm(s, fr));
    const double bound = u_max - gap;
    EXPECT_LE(u_max, 1.05 * bound) << "instance " << inst;
  }
}

TEST(FpForward, ZeroDriftMatchesHeatFlow) {
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 10));
  const MfgProblem p = bump_problem("zero", "zero");
  const SpaceTimeField m =
      solve_fp_forward(p, s, scheme, SolverConfig{}, zero_field(scheme.grid, s));
  const SpaceTimeField heat = s_i_h(s, scheme, l2_project(s, p.initial_m).coeffs);
  for (int k = 0; k <= scheme.grid.n_steps; ++k)
    EXPECT_LE((m.frames[k] - heat.frames[k]).lpNorm<Eigen::Infinity>(), 1e-12);
}

TEST(FpForward, ZeroInitialAndSourceGivesZero) {
  const P1Space s = unit_space(8);
  const ThetaSchemeConfig scheme(1.0, TimeGrid(0.5, 6));
  MfgProblem p = bump_problem("quadratic", "zero");
  p.initial_m = [](Vec2) { return 0.0; };
  p.source_u = [](double, Vec2) { return 0.0; };  // forced problem, skips mass checks
  p.source_m = [](double, Vec2) { return 0.0; };
  SpaceTimeField u = zero_field(scheme.grid, s);
  for (int k = 0; k <= scheme.grid.n_steps; ++k)
    u.frames[k] = interpolate(s, [](Vec2 x) { return std::sin(kPi * x.x); }).coeffs;
  const SpaceTimeField m = solve_fp_forward(p, s, scheme, SolverConfig{}, u);
  for (const auto& fr : m.frames) EXPECT_DOUBLE_EQ(fr.norm(), 0.0);
}

TEST(FpForward, LumpedImplicitMassNonincreasing) {
  // theta = 1, lumped mass, zero drift: total discrete mass cannot grow.
  const P1Space s = unit_space(32);
  const ThetaSchemeConfig scheme(1.0, TimeGrid(0.25, 40));
  const MfgProblem p = bump_problem("zero", "zero");
  SolverConfig cfg;
  cfg.fp_lumping = true;
  const SpaceTimeField m = solve_fp_forward(p, s, scheme, cfg, zero_field(scheme.grid, s));
  const Eigen::VectorXd w = lumped_mass(s);
  double prev = std::numeric_limits<double>::infinity();
  for (const auto& fr : m.frames) {
    const double mass = w.dot(fr);
    EXPECT_LE(mass, prev * (1.0 + 1e-13));
    prev = mass;
  }
}

TEST(FpForward, MMatrixPositivityWithDrift) {
  // theta = 1, lumped mass, tau <= h^2/4: nonnegative data stays nonnegative.
  const P1Space s = unit_space(16);
  const double h = s.mesh.h_max;
  const double tau_max = h * h / 4.0;
  const int steps = static_cast<int>(std::ceil(0.125 / tau_max));
  const ThetaSchemeConfig scheme(1.0, TimeGrid(0.125, steps));
  const MfgProblem p = bump_problem("quadratic", "zero");
  SolverConfig cfg;
  cfg.fp_lumping = true;
  SpaceTimeField u = zero_field(scheme.grid, s);
  for (int k = 0; k <= scheme.grid.n_steps; ++k)
    u.frames[k] =
        interpolate(s, [k](Vec2 x) { return 0.5 * std::sin(kPi * x.x) * (1.0 + 0.01 * k); })
            .coeffs;
  const SpaceTimeField m = solve_fp_forward(p, s, scheme, cfg, u);
  for (const auto& fr : m.frames) EXPECT_GE(fr.minCoeff(), -1e-12);
}

TEST(SolveCoupled, DecoupledConvergesInOneOuterIteration) {
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 8));
  const MfgProblem p = bump_problem("quadratic", "zero");
  const MfgSolution sol = solve_coupled(p, s, scheme, SolverConfig{});
  EXPECT_TRUE(sol.report.converged);
  EXPECT_EQ(sol.report.outer_iterations, 1);
}

TEST(SolveCoupled, ReportContract) {
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 8));
  const MfgSolution sol = solve_coupled(smooth_manufactured(), s, scheme, SolverConfig{});
  EXPECT_TRUE(sol.report.converged);
  EXPECT_LE(sol.report.final_residual, SolverConfig{}.tol_residual);
  EXPECT_EQ(static_cast<int>(sol.report.residual_history.size()), sol.report.outer_iterations);
  EXPECT_LE(sol.report.sup_bound_check, 0.0);  // bound holds with margin here
}

TEST(SolveCoupled, NonConvergenceCarriesReport) {
  const P1Space s = unit_space(8);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 4));
  SolverConfig cfg;
  cfg.method = SolverConfig::Method::picard;
  cfg.max_outer = 2;
  cfg.tol_residual = 1e-14;  // unreachable in two sweeps
  try {
    solve_coupled(smooth_manufactured(), s, scheme, cfg);
    FAIL() << "expected SolveError";
  } catch (const SolveError& e) {
    EXPECT_FALSE(e.report.converged);
    EXPECT_EQ(e.report.outer_iterations, 2);
    EXPECT_EQ(static_cast<int>(e.u.frames.size()), scheme.grid.n_nodes());
  }
}

TEST(SolveCoupled, PicardAndNewtonAgree) {
  const P1Space s = unit_space(32);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.25, 8));
  const MfgProblem p = smooth_manufactured();

  SolverConfig picard;
  picard.method = SolverConfig::Method::picard;
  picard.tol_residual = 1e-9;
  picard.max_outer = 400;
  const MfgSolution a = solve_coupled(p, s, scheme, picard);

  SolverConfig newton;
  newton.method = SolverConfig::Method::newton;
  newton.tol_residual = 1e-9;
  const MfgSolution b = solve_coupled(p, s, scheme, newton);

  SpaceTimeField du = a.u, dm = a.m;
  for (int k = 0; k <= scheme.grid.n_steps; ++k) {
    du.frames[k] -= b.u.frames[k];
    dm.frames[k] -= b.m.frames[k];
  }
  EXPECT_LE(norm_w01q(du, 7.0) + norm_lq(dm, 7.0), 10.0 * picard.tol_residual);
}

TEST(Jacobian, MatchesFiniteDifferencesAtInitialGuess) {
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 6));
  const MfgProblem p = bump_problem("quadratic", "identity_local", {{"scale", -1.0}});
  SolverConfig cfg;
  const SpaceTimeField m =
      theta_solve_forward(s, scheme, l2_project(s, p.initial_m).coeffs, nullptr);
  const SpaceTimeField u = solve_hjb_backward(p, s, scheme, cfg, m);
  const double err = jacobian_fd_max_error(p, s, scheme, cfg, u, m, 5, 77);
  EXPECT_LE(err, 1e-5);
}

TEST(Jacobian, MatchesFiniteDifferencesAtPicardIterate) {
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(1.0, TimeGrid(0.5, 8));
  const MfgProblem p = smooth_manufactured();
  SolverConfig cfg;
  cfg.fp_lumping = true;  // exercise the lumped FP rows too
  const SpaceTimeField m0 =
      theta_solve_forward(s, scheme, l2_project(s, p.initial_m).coeffs, nullptr);
  const SpaceTimeField u = solve_hjb_backward(p, s, scheme, cfg, m0);
  const SpaceTimeField m = solve_fp_forward(p, s, scheme, cfg, u);
  const double err = jacobian_fd_max_error(p, s, scheme, cfg, u, m, 5, 13);
  EXPECT_LE(err, 1e-5);
}

TEST(Jacobian, ConvolutionCouplingBlock) {
  const P1Space s = unit_space(8);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.25, 4));
  MfgProblem p = bump_problem("quadratic", "smoothed_convolution", {{"radius", 0.3}});
  SolverConfig cfg;
  const SpaceTimeField m =
      theta_solve_forward(s, scheme, l2_project(s, p.initial_m).coeffs, nullptr);
  const SpaceTimeField u = solve_hjb_backward(p, s, scheme, cfg, m);
  const double err = jacobian_fd_max_error(p, s, scheme, cfg, u, m, 4, 5);
  EXPECT_LE(err, 1e-5);
}

TEST(Linearized, ZeroRhsGivesZeroAtSolution) {
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 8));
  const MfgProblem p = smooth_manufactured();
  const MfgSolution sol = solve_coupled(p, s, scheme, SolverConfig{});
  const SpaceTimeField zero = zero_field(scheme.grid, s);
  const LinearizedSolution lin =
      solve_linearized(p, s, scheme, SolverConfig{}, sol.u, sol.m, zero, zero);
  EXPECT_FALSE(lin.singular);
  for (const auto& fr : lin.v.frames) EXPECT_LE(fr.norm(), 1e-14);
  for (const auto& fr : lin.rho.frames) EXPECT_LE(fr.norm(), 1e-14);
}

TEST(Linearized, VanishingDensityDecouplesRho) {
  // With m = 0 the rho equation is independent of v; its solution cannot
  // depend on the coupling, while v reacts to rho through dF.
  const P1Space s = unit_space(12);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 6));
  const SpaceTimeField m = zero_field(scheme.grid, s);
  SpaceTimeField u = zero_field(scheme.grid, s);
  for (int k = 0; k <= scheme.grid.n_steps; ++k)
    u.frames[k] = interpolate(s, [](Vec2 x) { return 0.3 * std::sin(kPi * x.x); }).coeffs;

  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  SpaceTimeField rhs_m = zero_field(scheme.grid, s);
  for (int k = 1; k <= scheme.grid.n_steps; ++k)
    for (int i = 0; i < s.n_dofs; ++i) rhs_m.frames[k][i] = g(rng);
  const SpaceTimeField rhs_u = zero_field(scheme.grid, s);

  const MfgProblem with_f = bump_problem("quadratic", "identity_local");
  const MfgProblem without_f = bump_problem("quadratic", "zero");
  const LinearizedSolution a =
      solve_linearized(with_f, s, scheme, SolverConfig{}, u, m, rhs_u, rhs_m);
  const LinearizedSolution b =
      solve_linearized(without_f, s, scheme, SolverConfig{}, u, m, rhs_u, rhs_m);
  ASSERT_FALSE(a.singular);
  ASSERT_FALSE(b.singular);
  for (int k = 0; k <= scheme.grid.n_steps; ++k)
    EXPECT_LE((a.rho.frames[k] - b.rho.frames[k]).lpNorm<Eigen::Infinity>(), 1e-11);
  for (const auto& fr : b.v.frames) EXPECT_LE(fr.norm(), 1e-12);  // no coupling, no response
  double v_with_f = 0.0;
  for (const auto& fr : a.v.frames) v_with_f = std::max(v_with_f, fr.norm());
  EXPECT_GT(v_with_f, 1e-8);
}

TEST(StabilityMargin, DecoupledPositive) {
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 8));
  const MfgProblem p = bump_problem("quadratic", "zero");
  const MfgSolution sol = solve_coupled(p, s, scheme, SolverConfig{});
  const MarginEstimate m = stability_margin(p, s, scheme, SolverConfig{}, sol.u, sol.m);
  EXPECT_TRUE(m.converged);
  EXPECT_GT(m.value, 0.0);
}

TEST(StabilityMargin, MassScaleHomogeneity) {
  const P1Space s = unit_space(12);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 6));
  const MfgProblem p = smooth_manufactured();
  const MfgSolution sol = solve_coupled(p, s, scheme, SolverConfig{});
  const double base =
      stability_margin(p, s, scheme, SolverConfig{}, sol.u, sol.m, 1.0).value;
  for (const double alpha : {0.5, 2.0, 10.0}) {
    const double scaled =
        stability_margin(p, s, scheme, SolverConfig{}, sol.u, sol.m, alpha).value;
    EXPECT_NEAR(scaled, alpha * base, 1e-9 * alpha * base);
  }
}

TEST(Residual, SmallAtConvergedSolution) {
  const P1Space s = unit_space(16);
  const ThetaSchemeConfig scheme(0.5, TimeGrid(0.5, 8));
  const MfgProblem p = smooth_manufactured();
  SolverConfig cfg;
  const MfgSolution sol = solve_coupled(p, s, scheme, cfg);
  const Eigen::VectorXd R = assemble_system(p, s, scheme, cfg, sol.u, sol.m);
  EXPECT_LE(residual_x_norm(s, scheme, cfg, R), cfg.tol_residual);
}

TEST(SolverConfigValidation, RejectsBadValues) {
  SolverConfig c;
  c.tol_residual = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = SolverConfig{};
  c.damping = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(SolveCoupled, SmokeTest2d) {
  ProblemConfig cfg;
  cfg.domain = DomainSpec{2, 0, 1, 1, 1};
  cfg.T = 0.25;
  cfg.hamiltonian = "soft_transport";
  cfg.coupling = "saturating_local";
  cfg.data = "mfg_smooth_2d";
  cfg.manufactured = true;
  const MfgProblem p = build_problem(cfg);
  const P1Space s = make_p1_space(build_mesh(p.domain, 8));
  const ThetaSchemeConfig scheme(1.0, TimeGrid(0.25, 4));
  const MfgSolution sol = solve_coupled(p, s, scheme, SolverConfig{});
  EXPECT_TRUE(sol.report.converged);
}
