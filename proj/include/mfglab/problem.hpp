#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

#include "mfglab/spacetime.hpp"

namespace mfglab {

/// Hamiltonian H(x,p) with its p-gradient and p-Hessian and the growth
/// constant C_H: |H| <= C_H(1+|p|^2), |H_p| <= C_H(1+|p|), |H_pp| <= C_H.
struct HamiltonianSpec {
  std::function<double(Vec2, Vec2)> H;
  std::function<Vec2(Vec2, Vec2)> Hp;
  std::function<Mat2(Vec2, Vec2)> Hpp;
  double C_H = 0.0;
  std::string name;
  std::map<std::string, double> params;
};

enum class CouplingKind { local, convolution };

/// Coupling operator F[m](t,x). Local kind: F[m] = f(t,x,m(t,x)).
/// Convolution kind: F[m] = f(t,x,(k*m)(t,x)) with a compactly supported
/// radial kernel.
struct CouplingSpec {
  CouplingKind kind = CouplingKind::local;
  std::function<double(double, Vec2, double)> f;       // f(t, x, m)
  std::function<double(double, Vec2, double)> dfdm;
  std::function<double(double)> kernel;                // radial profile k(r)
  double kernel_radius = 0.0;
  double L_F = 0.0;
  std::string name;
  std::map<std::string, double> params;
};

inline HamiltonianSpec zero_hamiltonian() {
  HamiltonianSpec h;
  h.H = [](Vec2, Vec2) { return 0.0; };
  h.Hp = [](Vec2, Vec2) { return Vec2{}; };
  h.Hpp = [](Vec2, Vec2) { return Mat2{}; };
  h.C_H = 0.0;
  h.name = "zero";
  return h;
}

inline CouplingSpec zero_coupling() {
  CouplingSpec c;
  c.kind = CouplingKind::local;
  c.f = [](double, Vec2, double) { return 0.0; };
  c.dfdm = [](double, Vec2, double) { return 0.0; };
  c.L_F = 0.0;
  c.name = "zero";
  return c;
}

namespace detail {
inline double param_or(const std::map<std::string, double>& p, const std::string& key,
                       double fallback) {
  const auto it = p.find(key);
  return it == p.end() ? fallback : it->second;
}
}  // namespace detail

/// Built-in Hamiltonians.
///   quadratic:      H = (s/2)|p|^2
///   soft_transport: H = s(sqrt(1+|p|^2) - 1), globally Lipschitz H_p
/// Both accept a "scale" parameter (default 1).
inline HamiltonianSpec builtin_hamiltonian(const std::string& name,
                                           const std::map<std::string, double>& params = {}) {
  const double s = detail::param_or(params, "scale", 1.0);
  HamiltonianSpec h;
  h.name = name;
  h.params = params;
  if (name == "zero") return zero_hamiltonian();
  if (name == "quadratic") {
    h.H = [s](Vec2, Vec2 p) { return 0.5 * s * dot(p, p); };
    h.Hp = [s](Vec2, Vec2 p) { return s * p; };
    h.Hpp = [s](Vec2, Vec2) { return Mat2{s, 0, 0, s}; };
    h.C_H = std::abs(s);
    return h;
  }
  if (name == "soft_transport") {
    h.H = [s](Vec2, Vec2 p) { return s * (std::sqrt(1.0 + dot(p, p)) - 1.0); };
    h.Hp = [s](Vec2, Vec2 p) { return (s / std::sqrt(1.0 + dot(p, p))) * p; };
    h.Hpp = [s](Vec2, Vec2 p) {
      const double r2 = 1.0 + dot(p, p);
      const double c = s / std::sqrt(r2), c3 = s / (r2 * std::sqrt(r2));
      return Mat2{c - c3 * p.x * p.x, -c3 * p.x * p.y, -c3 * p.y * p.x, c - c3 * p.y * p.y};
    };
    h.C_H = std::abs(s);
    return h;
  }
  throw std::invalid_argument("builtin_hamiltonian: unknown name '" + name + "'");
}

/// Built-in couplings.
///   identity_local:       F[m] = s m
///   saturating_local:     F[m] = s atan(m)
///   smoothed_convolution: F[m] = (k*m) with k(r) = c(1-(r/R)^2)^3, C^2 and
///                         compactly supported, normalized to unit mass
inline CouplingSpec builtin_coupling(const std::string& name,
                                     const std::map<std::string, double>& params = {},
                                     int dim = 1) {
  const double s = detail::param_or(params, "scale", 1.0);
  CouplingSpec c;
  c.name = name;
  c.params = params;
  if (name == "zero") return zero_coupling();
  if (name == "identity_local") {
    c.kind = CouplingKind::local;
    c.f = [s](double, Vec2, double m) { return s * m; };
    c.dfdm = [s](double, Vec2, double) { return s; };
    c.L_F = std::abs(s);
    return c;
  }
  if (name == "saturating_local") {
    c.kind = CouplingKind::local;
    c.f = [s](double, Vec2, double m) { return s * std::atan(m); };
    c.dfdm = [s](double, Vec2, double m) { return s / (1.0 + m * m); };
    c.L_F = std::abs(s);
    return c;
  }
  if (name == "smoothed_convolution") {
    const double R = detail::param_or(params, "radius", 0.25);
    // Normalization of (1-(r/R)^2)^3 over the ball of radius R.
    const double mass = dim == 1 ? R * 32.0 / 35.0 : R * R * std::numbers::pi / 4.0;
    c.kind = CouplingKind::convolution;
    c.kernel_radius = R;
    c.kernel = [R, mass](double r) {
      if (r >= R) return 0.0;
      const double u = 1.0 - (r / R) * (r / R);
      return u * u * u / mass;
    };
    c.f = [s](double, Vec2, double m) { return s * m; };
    c.dfdm = [s](double, Vec2, double) { return s; };
    c.L_F = std::abs(s);
    return c;
  }
  throw std::invalid_argument("builtin_coupling: unknown name '" + name + "'");
}

/// Domain description; meshes are built per refinement level.
struct DomainSpec {
  int dim = 1;
  double a = 0.0, b = 1.0;   // interval bounds (dim 1)
  double lx = 1.0, ly = 1.0; // rectangle sides (dim 2)
};

/// Mesh with n cells along x (and a proportional count along y in 2D).
inline Mesh build_mesh(const DomainSpec& d, int n) {
  if (d.dim == 1) return build_interval_mesh(d.a, d.b, n);
  const int ny = std::max(1, static_cast<int>(std::lround(n * d.ly / d.lx)));
  return build_rectangle_mesh(d.lx, d.ly, n, ny);
}

/// Closed-form space-time pair attached to manufactured problems.
struct ExactPair {
  ExactField u;
  ExactField m;
};

/// Full problem definition for the coupled system.
struct MfgProblem {
  DomainSpec domain;
  double T = 1.0;
  HamiltonianSpec hamiltonian;
  CouplingSpec coupling;
  ScalarFn terminal_u;  // u(T, .)
  ScalarFn initial_m;   // m(0, .)
  TimeScalarFn source_u; // empty if absent
  TimeScalarFn source_m;
  bool monotone_hint = false;
  std::optional<ExactPair> exact;
};

/// Checks the data contracts on a concrete mesh: boundary-vanishing data,
/// and (for non-manufactured problems) nonnegative unit-mass m0.
inline void validate_problem(const MfgProblem& p, const Mesh& mesh) {
  for (int v = 0; v < mesh.n_vertices(); ++v) {
    if (!mesh.boundary_vertex[static_cast<std::size_t>(v)]) continue;
    const Vec2 x = mesh.vertices[static_cast<std::size_t>(v)];
    if (std::abs(p.terminal_u(x)) > 1e-10 || std::abs(p.initial_m(x)) > 1e-10)
      throw std::invalid_argument("validate_problem: data must vanish on the boundary");
  }
  const bool manufactured = static_cast<bool>(p.source_u) || static_cast<bool>(p.source_m);
  if (manufactured) return;
  double mass = 0.0;
  for (int c = 0; c < mesh.n_cells(); ++c) {
    const auto q = cell_quadrature(mesh, c, 4);
    for (int i = 0; i < q.n; ++i) {
      const double mv = p.initial_m(q.points[static_cast<std::size_t>(i)]);
      if (mv < -1e-12) throw std::invalid_argument("validate_problem: m0 must be nonnegative");
      mass += q.weights[static_cast<std::size_t>(i)] * mv;
    }
  }
  if (std::abs(mass - 1.0) > 1e-6)
    throw std::invalid_argument("validate_problem: m0 must integrate to 1");
}

/// Smooth space-time field with the analytic derivatives needed to build
/// manufactured sources.
struct SmoothField {
  TimeScalarFn value;
  TimeScalarFn dt;
  TimeVectorFn grad;
  TimeScalarFn laplacian;
  std::function<Mat2(double, Vec2)> hessian;  // required for the value-function slot
};

/// Method of manufactured solutions: given a smooth pair, produce the forced
/// problem that the pair solves exactly. The divergence source term is
/// expanded analytically, which requires H_p without explicit x-dependence
/// and a local coupling.
inline MfgProblem manufacture(const SmoothField& u_star, const SmoothField& m_star,
                              HamiltonianSpec H, CouplingSpec F, DomainSpec domain, double T) {
  if (F.kind != CouplingKind::local)
    throw std::invalid_argument("manufacture: only local couplings are supported");
  if (!u_star.hessian)
    throw std::invalid_argument("manufacture: u-field needs an analytic Hessian");

  {
    const Mesh probe = build_mesh(domain, 8);
    for (int v = 0; v < probe.n_vertices(); ++v) {
      if (!probe.boundary_vertex[static_cast<std::size_t>(v)]) continue;
      const Vec2 x = probe.vertices[static_cast<std::size_t>(v)];
      for (const double t : {0.0, 0.5 * T, T})
        if (std::abs(u_star.value(t, x)) > 1e-10 || std::abs(m_star.value(t, x)) > 1e-10)
          throw std::invalid_argument("manufacture: pair must vanish on the boundary");
    }
  }

  MfgProblem p;
  p.domain = domain;
  p.T = T;
  p.hamiltonian = H;
  p.coupling = F;
  p.terminal_u = [u_star, T](Vec2 x) { return u_star.value(T, x); };
  p.initial_m = [m_star](Vec2 x) { return m_star.value(0.0, x); };
  p.source_u = [u_star, m_star, H, F](double t, Vec2 x) {
    return -u_star.dt(t, x) - u_star.laplacian(t, x) + H.H(x, u_star.grad(t, x)) -
           F.f(t, x, m_star.value(t, x));
  };
  p.source_m = [u_star, m_star, H](double t, Vec2 x) {
    const Vec2 du = u_star.grad(t, x);
    const Mat2 hess = u_star.hessian(t, x);
    const Mat2 hpp = H.Hpp(x, du);
    // div(m H_p(Du)) = Dm·H_p + m tr(H_pp D²u), valid for x-independent H_p.
    const double tr = hpp.xx * hess.xx + hpp.xy * hess.yx + hpp.yx * hess.xy + hpp.yy * hess.yy;
    return m_star.dt(t, x) - m_star.laplacian(t, x) -
           (dot(m_star.grad(t, x), H.Hp(x, du)) + m_star.value(t, x) * tr);
  };
  p.exact = ExactPair{{u_star.value, u_star.grad}, {m_star.value, m_star.grad}};
  return p;
}

/// Residual of the forced system at one space-time point, with the
/// divergence term recomputed by Richardson-extrapolated differences rather
/// than the expansion used in manufacture. Near-zero values certify the
/// generated sources.
inline std::pair<double, double> manufactured_residual(const MfgProblem& p,
                                                       const SmoothField& u_star,
                                                       const SmoothField& m_star, double t,
                                                       Vec2 x) {
  const double r_u = -u_star.dt(t, x) - u_star.laplacian(t, x) +
                     p.hamiltonian.H(x, u_star.grad(t, x)) -
                     p.coupling.f(t, x, m_star.value(t, x)) - p.source_u(t, x);

  auto flux = [&](Vec2 y) {
    return m_star.value(t, y) * p.hamiltonian.Hp(y, u_star.grad(t, y));
  };
  auto div_fd = [&](double delta) {
    double d = (flux({x.x + delta, x.y}).x - flux({x.x - delta, x.y}).x) / (2.0 * delta);
    if (p.domain.dim == 2)
      d += (flux({x.x, x.y + delta}).y - flux({x.x, x.y - delta}).y) / (2.0 * delta);
    return d;
  };
  const double h1 = div_fd(1e-3), h2 = div_fd(5e-4);
  const double div_mhp = (4.0 * h2 - h1) / 3.0;

  const double r_m =
      m_star.dt(t, x) - m_star.laplacian(t, x) - div_mhp - p.source_m(t, x);
  return {r_u, r_m};
}

}  // namespace mfglab
