#pragma once

namespace mfglab {

/// Every pass/fail threshold used by the verification suites lives here so
/// that tuning is visible in one place. The slack entries absorb
/// preasymptotic wobble at desk-scale mesh sizes.
struct RateThresholds {
  // Linear layer: final-level orders for the heat benchmarks.
  double heat_l2_low = 1.9;
  double heat_l2_high = 2.1;
  double heat_w01q_low = 0.9;
  double heat_w01q_high = 1.1;

  // Coupled system: quasi-optimal and baseline branches.
  double quasi_optimal_min = 0.9;   // EOC of e_u(W^{0,1}_q) + e_m(L^q)
  double u_lq_min = 1.5;            // EOC of e_u(L^q)
  double baseline_slack = 0.05;     // subtracted from the 2/q baseline

  // Oracle and cross-validation tolerances.
  double jacobian_fd_tol = 1e-5;
  double picard_newton_factor = 10.0;  // times tol_residual
  double margin_floor = 1e-6;
  double margin_spread_factor = 2.0;
  double sup_bound_slack = 1.05;       // multiplicative
  double manufactured_residual_tol = 1e-10;

  // Errors below this are treated as exactly zero (EOC undefined).
  double exact_zero = 1e-14;
};

}  // namespace mfglab
