#pragma once

#include <cmath>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "mfglab/fem.hpp"

namespace mfglab {

using TimeScalarFn = std::function<double(double, Vec2)>;
using TimeVectorFn = std::function<Vec2(double, Vec2)>;

/// Uniform time grid on [0, T] with nodes t_k = k τ.
struct TimeGrid {
  double T = 1.0;
  int n_steps = 1;

  TimeGrid() = default;
  TimeGrid(double horizon, int steps) : T(horizon), n_steps(steps) {
    if (!(T > 0.0)) throw std::invalid_argument("TimeGrid: need T > 0");
    if (n_steps < 1) throw std::invalid_argument("TimeGrid: need n_steps >= 1");
  }

  double tau() const { return T / n_steps; }
  double node(int k) const { return T * k / n_steps; }
  int n_nodes() const { return n_steps + 1; }
};

/// One coefficient vector per time node over a fixed P1 space.
struct SpaceTimeField {
  TimeGrid grid;
  P1Space space;
  std::vector<Eigen::VectorXd> frames;
};

inline SpaceTimeField zero_field(const TimeGrid& grid, const P1Space& space) {
  SpaceTimeField f{grid, space, {}};
  f.frames.assign(static_cast<std::size_t>(grid.n_nodes()), Eigen::VectorXd::Zero(space.n_dofs));
  return f;
}

namespace detail {

inline void check_field(const SpaceTimeField& f) {
  if (static_cast<int>(f.frames.size()) != f.grid.n_nodes())
    throw std::invalid_argument("SpaceTimeField: frame count does not match grid");
  for (const auto& fr : f.frames)
    if (fr.size() != f.space.n_dofs)
      throw std::invalid_argument("SpaceTimeField: frame length does not match space");
}

inline double trapezoid_weight(const TimeGrid& g, int k) {
  return (k == 0 || k == g.n_steps) ? 0.5 * g.tau() : g.tau();
}

}  // namespace detail

/// Bochner-type norm (∫ ‖u(t)‖_{L^q}^q dt)^{1/q}: trapezoid in time,
/// per-cell quadrature in space.
inline double norm_lq(const SpaceTimeField& f, double q, int degree = 2) {
  if (!(q >= 1.0) || !std::isfinite(q)) throw std::invalid_argument("norm_lq: need finite q >= 1");
  detail::check_field(f);
  double acc = 0.0;
  for (int k = 0; k <= f.grid.n_steps; ++k)
    acc += detail::trapezoid_weight(f.grid, k) *
           std::pow(lq_norm(f.space, f.frames[static_cast<std::size_t>(k)], q, degree), q);
  return std::pow(acc, 1.0 / q);
}

/// ‖u‖_{L^q} + ‖Du‖_{L^q} over space-time.
inline double norm_w01q(const SpaceTimeField& f, double q, int degree = 2) {
  if (!(q >= 1.0) || !std::isfinite(q)) throw std::invalid_argument("norm_w01q: need finite q >= 1");
  detail::check_field(f);
  double acc = 0.0;
  for (int k = 0; k <= f.grid.n_steps; ++k)
    acc += detail::trapezoid_weight(f.grid, k) *
           std::pow(grad_lq_norm(f.space, f.frames[static_cast<std::size_t>(k)], q), q);
  return norm_lq(f, q, degree) + std::pow(acc, 1.0 / q);
}

/// Smooth reference field given by closed-form value and gradient.
struct ExactField {
  TimeScalarFn value;
  TimeVectorFn grad;
};

struct SpaceTimeError {
  double lq = 0.0;
  double w01q = 0.0;
};

/// Norms of (exact - approx); the exact field is sampled at quadrature
/// points, never interpolated first.
inline SpaceTimeError error_norms(const SpaceTimeField& approx, const ExactField& exact, double q,
                                  int degree = 4) {
  if (!(q >= 1.0) || !std::isfinite(q)) throw std::invalid_argument("error_norms: need finite q >= 1");
  detail::check_field(approx);
  double acc_val = 0.0, acc_grad = 0.0;
  for (int k = 0; k <= approx.grid.n_steps; ++k) {
    const double t = approx.grid.node(k);
    const double w = detail::trapezoid_weight(approx.grid, k);
    const auto& coeffs = approx.frames[static_cast<std::size_t>(k)];
    acc_val += w * std::pow(error_lq(approx.space, coeffs,
                                     [&](Vec2 x) { return exact.value(t, x); }, q, degree),
                            q);
    acc_grad += w * std::pow(grad_error_lq(approx.space, coeffs,
                                           [&](Vec2 x) { return exact.grad(t, x); }, q, degree),
                             q);
  }
  const double e_lq = std::pow(acc_val, 1.0 / q);
  return {e_lq, e_lq + std::pow(acc_grad, 1.0 / q)};
}

/// CSV dump: t, vertex_id, x, [y,] value. Boundary vertices carry zeros.
inline void write_field_csv(const SpaceTimeField& f, std::ostream& os) {
  detail::check_field(f);
  os << (f.space.mesh.dim == 1 ? "t,vertex_id,x,value\n" : "t,vertex_id,x,y,value\n");
  for (int k = 0; k <= f.grid.n_steps; ++k) {
    const Eigen::VectorXd vals = vertex_values(f.space, f.frames[static_cast<std::size_t>(k)]);
    for (int v = 0; v < f.space.n_vertices; ++v) {
      const Vec2 p = f.space.mesh.vertices[static_cast<std::size_t>(v)];
      os << f.grid.node(k) << "," << v << "," << p.x;
      if (f.space.mesh.dim == 2) os << "," << p.y;
      os << "," << vals[v] << "\n";
    }
  }
}

}  // namespace mfglab
