#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mfglab/heat.hpp"
#include "mfglab/problem.hpp"

namespace mfglab {

struct SolverConfig {
  enum class Method { picard, newton, picard_then_newton };
  Method method = Method::picard_then_newton;
  double damping = 0.5;
  double tol_residual = 1e-9;
  int max_outer = 200;
  double inner_newton_tol = 1e-12;
  int inner_newton_max = 30;
  bool fp_lumping = false;
  double newton_switch_residual = 1e-3;
  double q_norm = 0.0;  // 0: pick 7 in 1D, 9 in 2D

  void validate() const {
    if (!(tol_residual > 0.0)) throw std::invalid_argument("SolverConfig: tol_residual > 0");
    if (!(damping > 0.0 && damping <= 1.0))
      throw std::invalid_argument("SolverConfig: damping in (0,1]");
  }
};

inline double default_q(int dim) { return dim == 1 ? 7.0 : 9.0; }

struct SolveReport {
  bool converged = false;
  int outer_iterations = 0;
  std::vector<double> residual_history;
  double final_residual = 0.0;
  // max_t ||u_h(t)||_inf minus the comparison-principle bound
  // ||u_T||_inf + (C_H + ||f||_inf) T; negative when the bound holds.
  double sup_bound_check = 0.0;
};

struct MfgSolution {
  SpaceTimeField u;
  SpaceTimeField m;
  SolveReport report;
};

/// Thrown when an outer iteration fails to converge; carries the partial
/// iterates and the report.
class SolveError : public std::runtime_error {
 public:
  SolveError(const std::string& what, SolveReport rep, SpaceTimeField u, SpaceTimeField m)
      : std::runtime_error(what), report(std::move(rep)), u(std::move(u)), m(std::move(m)) {}
  SolveReport report;
  SpaceTimeField u, m;
};

/// Evaluates F[m](t, .) for one coefficient frame, both coupling kinds.
class CouplingEval {
 public:
  CouplingEval(const CouplingSpec& c, const P1Space& s, double t, const Eigen::VectorXd& m)
      : c_(&c), s_(&s), t_(t), m_(&m) {}

  double value(int cell, const std::array<double, 3>& bary, Vec2 x) const {
    if (c_->kind == CouplingKind::local) return c_->f(t_, x, eval_p1(*s_, *m_, cell, bary));
    return c_->f(t_, x, convolve(x));
  }

  /// (k*m)(x) by quadrature over the whole mesh.
  double convolve(Vec2 x) const {
    double acc = 0.0;
    for (int c = 0; c < s_->mesh.n_cells(); ++c) {
      const auto q = cell_quadrature(s_->mesh, c, 2);
      for (int p = 0; p < q.n; ++p) {
        const double r = norm(x - q.points[static_cast<std::size_t>(p)]);
        if (r >= c_->kernel_radius) continue;
        acc += q.weights[static_cast<std::size_t>(p)] * c_->kernel(r) *
               eval_p1(*s_, *m_, c, q.bary[static_cast<std::size_t>(p)]);
      }
    }
    return acc;
  }

 private:
  const CouplingSpec* c_;
  const P1Space* s_;
  double t_;
  const Eigen::VectorXd* m_;
};

namespace detail {

/// N_i = ∫ H(x, Dw_h) φ_i.
inline Eigen::VectorXd assemble_hamiltonian_load(const P1Space& s, const HamiltonianSpec& H,
                                                 const Eigen::VectorXd& w) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(s.n_dofs);
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const Vec2 dw = grad_p1(s, w, c);
    const auto& k = s.mesh.cells[static_cast<std::size_t>(c)];
    const auto q = cell_quadrature(s.mesh, c, 2);
    for (int p = 0; p < q.n; ++p) {
      const double hv = H.H(q.points[static_cast<std::size_t>(p)], dw);
      for (int a = 0; a < s.mesh.verts_per_cell(); ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(k[a])];
        if (i >= 0)
          out[i] += hv * q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(a)] *
                    q.weights[static_cast<std::size_t>(p)];
      }
    }
  }
  return out;
}

/// T_ij = ∫ (H_p(x, Dw_h)·Dφ_j) φ_i; linearization of the Hamiltonian term.
inline SparseOperator assemble_hjb_transport(const P1Space& s, const HamiltonianSpec& H,
                                             const Eigen::VectorXd& w) {
  std::vector<Triplet> t;
  const int nv = s.mesh.verts_per_cell();
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto g = cell_geometry(s.mesh, c);
    const Vec2 dw = grad_p1(s, w, c);
    const auto q = cell_quadrature(s.mesh, c, 2);
    for (int p = 0; p < q.n; ++p) {
      const Vec2 hp = H.Hp(q.points[static_cast<std::size_t>(p)], dw);
      for (int a = 0; a < nv; ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
        if (i < 0) continue;
        const double phi_i = q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(a)] *
                             q.weights[static_cast<std::size_t>(p)];
        for (int b = 0; b < nv; ++b) {
          const int j = s.vertex_to_dof[static_cast<std::size_t>(g.vid[b])];
          if (j >= 0) t.emplace_back(i, j, phi_i * dot(hp, g.grad[b]));
        }
      }
    }
  }
  return from_triplets(s.n_dofs, s.n_dofs, t);
}

/// B_ij = ∫ φ_j H_p(x, Dw_h)·Dψ_i; the Fokker-Planck drift matrix.
inline SparseOperator assemble_fp_drift(const P1Space& s, const HamiltonianSpec& H,
                                        const Eigen::VectorXd& w) {
  std::vector<Triplet> t;
  const int nv = s.mesh.verts_per_cell();
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto g = cell_geometry(s.mesh, c);
    const Vec2 dw = grad_p1(s, w, c);
    const auto q = cell_quadrature(s.mesh, c, 2);
    for (int p = 0; p < q.n; ++p) {
      const Vec2 hp = H.Hp(q.points[static_cast<std::size_t>(p)], dw);
      for (int a = 0; a < nv; ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
        if (i < 0) continue;
        const double bi = dot(hp, g.grad[a]) * q.weights[static_cast<std::size_t>(p)];
        for (int b = 0; b < nv; ++b) {
          const int j = s.vertex_to_dof[static_cast<std::size_t>(g.vid[b])];
          if (j >= 0)
            t.emplace_back(i, j,
                           bi * q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(b)]);
        }
      }
    }
  }
  return from_triplets(s.n_dofs, s.n_dofs, t);
}

/// K_ij = ∫ mu_h (H_pp(x, Dw_h) Dφ_j)·Dψ_i; the drift linearization in u.
inline SparseOperator assemble_fp_cross(const P1Space& s, const HamiltonianSpec& H,
                                        const Eigen::VectorXd& w, const Eigen::VectorXd& mu) {
  std::vector<Triplet> t;
  const int nv = s.mesh.verts_per_cell();
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto g = cell_geometry(s.mesh, c);
    const Vec2 dw = grad_p1(s, w, c);
    const auto q = cell_quadrature(s.mesh, c, 2);
    for (int p = 0; p < q.n; ++p) {
      const Mat2 hpp = H.Hpp(q.points[static_cast<std::size_t>(p)], dw);
      const double mv = eval_p1(s, mu, c, q.bary[static_cast<std::size_t>(p)]) *
                        q.weights[static_cast<std::size_t>(p)];
      for (int a = 0; a < nv; ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
        if (i < 0) continue;
        for (int b = 0; b < nv; ++b) {
          const int j = s.vertex_to_dof[static_cast<std::size_t>(g.vid[b])];
          if (j >= 0) t.emplace_back(i, j, mv * dot(apply(hpp, g.grad[b]), g.grad[a]));
        }
      }
    }
  }
  return from_triplets(s.n_dofs, s.n_dofs, t);
}

/// Derivative of the coupling load: D_ij = d/dm_j ∫ F[m](t,x) φ_i.
inline SparseOperator assemble_coupling_jacobian(const CouplingSpec& c, const P1Space& s,
                                                 double t, const Eigen::VectorXd& m) {
  if (c.kind == CouplingKind::local) {
    std::vector<Triplet> trip;
    const int nv = s.mesh.verts_per_cell();
    for (int cell = 0; cell < s.mesh.n_cells(); ++cell) {
      const auto& k = s.mesh.cells[static_cast<std::size_t>(cell)];
      const auto q = cell_quadrature(s.mesh, cell, 2);
      for (int p = 0; p < q.n; ++p) {
        const double df = c.dfdm(t, q.points[static_cast<std::size_t>(p)],
                                 eval_p1(s, m, cell, q.bary[static_cast<std::size_t>(p)])) *
                          q.weights[static_cast<std::size_t>(p)];
        for (int a = 0; a < nv; ++a) {
          const int i = s.vertex_to_dof[static_cast<std::size_t>(k[a])];
          if (i < 0) continue;
          for (int b = 0; b < nv; ++b) {
            const int j = s.vertex_to_dof[static_cast<std::size_t>(k[b])];
            if (j >= 0)
              trip.emplace_back(i, j,
                                df * q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(a)] *
                                    q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(b)]);
          }
        }
      }
    }
    return from_triplets(s.n_dofs, s.n_dofs, trip);
  }

  // Convolution kind: dense coupling through (k*φ_j)(x).
  const CouplingEval eval(c, s, t, m);
  struct Qp {
    Vec2 x;
    double w;
    std::array<double, 3> bary;
    std::array<int, 3> vid;
  };
  std::vector<Qp> qps;
  for (int cell = 0; cell < s.mesh.n_cells(); ++cell) {
    const auto& k = s.mesh.cells[static_cast<std::size_t>(cell)];
    const auto q = cell_quadrature(s.mesh, cell, 2);
    for (int p = 0; p < q.n; ++p)
      qps.push_back({q.points[static_cast<std::size_t>(p)], q.weights[static_cast<std::size_t>(p)],
                     q.bary[static_cast<std::size_t>(p)], k});
  }
  Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(s.n_dofs, s.n_dofs);
  const int nv = s.mesh.verts_per_cell();
  for (const auto& outer : qps) {
    const double df = c.dfdm(t, outer.x, eval.convolve(outer.x));
    for (const auto& inner : qps) {
      const double r = norm(outer.x - inner.x);
      if (r >= c.kernel_radius) continue;
      const double kv = c.kernel(r) * inner.w * df * outer.w;
      for (int a = 0; a < nv; ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(outer.vid[a])];
        if (i < 0) continue;
        for (int b = 0; b < nv; ++b) {
          const int j = s.vertex_to_dof[static_cast<std::size_t>(inner.vid[b])];
          if (j >= 0)
            dense(i, j) += outer.bary[static_cast<std::size_t>(a)] * kv *
                           inner.bary[static_cast<std::size_t>(b)];
        }
      }
    }
  }
  return dense.sparseView().pruned();
}

/// ℓ_i = ∫ (F[m](t,x) + source(t,x)) φ_i for one frame.
inline Eigen::VectorXd assemble_coupled_load(const P1Space& s, const CouplingSpec& c, double t,
                                             const Eigen::VectorXd& m, const TimeScalarFn& source) {
  const CouplingEval eval(c, s, t, m);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(s.n_dofs);
  for (int cell = 0; cell < s.mesh.n_cells(); ++cell) {
    const auto& k = s.mesh.cells[static_cast<std::size_t>(cell)];
    const auto q = cell_quadrature(s.mesh, cell, 2);
    for (int p = 0; p < q.n; ++p) {
      const Vec2 x = q.points[static_cast<std::size_t>(p)];
      double fv = eval.value(cell, q.bary[static_cast<std::size_t>(p)], x);
      if (source) fv += source(t, x);
      if (!std::isfinite(fv))
        throw std::invalid_argument("assemble_coupled_load: non-finite value");
      for (int a = 0; a < s.mesh.verts_per_cell(); ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(k[a])];
        if (i >= 0)
          out[i] += fv * q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(a)] *
                    q.weights[static_cast<std::size_t>(p)];
      }
    }
  }
  return out;
}

}  // namespace detail

/// Backward theta-scheme for the discrete HJB equation given a density
/// field; each step solves its nonlinear system by a damped Newton method.
inline SpaceTimeField solve_hjb_backward(const MfgProblem& prob, const P1Space& space,
                                         const ThetaSchemeConfig& scheme, const SolverConfig& cfg,
                                         const SpaceTimeField& m_field) {
  const int n = scheme.grid.n_steps;
  const double tau = scheme.grid.tau();
  const double theta = scheme.theta;
  const SparseOperator M = assemble_mass(space);
  const SparseOperator A = assemble_stiffness(space);

  SpaceTimeField u = zero_field(scheme.grid, space);
  u.frames[static_cast<std::size_t>(n)] = l2_project(space, prob.terminal_u).coeffs;

  for (int k = n - 1; k >= 0; --k) {
    const Eigen::VectorXd& next = u.frames[static_cast<std::size_t>(k + 1)];
    const double t_theta = theta * scheme.grid.node(k) + (1.0 - theta) * scheme.grid.node(k + 1);
    const Eigen::VectorXd m_theta = theta * m_field.frames[static_cast<std::size_t>(k)] +
                                    (1.0 - theta) * m_field.frames[static_cast<std::size_t>(k + 1)];
    const Eigen::VectorXd load =
        detail::assemble_coupled_load(space, prob.coupling, t_theta, m_theta, prob.source_u);

    Eigen::VectorXd cur = next;
    auto residual = [&](const Eigen::VectorXd& uk) {
      const Eigen::VectorXd ubar = theta * uk + (1.0 - theta) * next;
      return Eigen::VectorXd(M * (uk - next) / tau + A * ubar +
                             detail::assemble_hamiltonian_load(space, prob.hamiltonian, ubar) -
                             load);
    };

    Eigen::VectorXd G = residual(cur);
    const double scale = std::max(1.0, G.lpNorm<Eigen::Infinity>());
    bool done = false;
    for (int it = 0; it < cfg.inner_newton_max; ++it) {
      if (G.lpNorm<Eigen::Infinity>() <= cfg.inner_newton_tol * scale) {
        done = true;
        break;
      }
      const Eigen::VectorXd ubar = theta * cur + (1.0 - theta) * next;
      const SparseOperator J(
          M / tau + theta * SparseOperator(A + detail::assemble_hjb_transport(
                                                   space, prob.hamiltonian, ubar)));
      const LuFactor lu(J);
      if (!lu.ok()) throw std::runtime_error("solve_hjb_backward: singular step Jacobian at step " +
                                             std::to_string(k));
      const Eigen::VectorXd delta = lu.solve(G);
      double step = 1.0;
      Eigen::VectorXd trial;
      Eigen::VectorXd Gt;
      for (int ls = 0; ls < 6; ++ls) {
        trial = cur - step * delta;
        Gt = residual(trial);
        if (Gt.lpNorm<Eigen::Infinity>() < G.lpNorm<Eigen::Infinity>() || ls == 5) break;
        step *= 0.5;
      }
      cur = trial;
      G = Gt;
    }
    if (!done && G.lpNorm<Eigen::Infinity>() > cfg.inner_newton_tol * scale)
      throw std::runtime_error("solve_hjb_backward: Newton failed at step " + std::to_string(k));
    u.frames[static_cast<std::size_t>(k)] = cur;
  }
  return u;
}

/// Forward theta-scheme for the discrete Fokker-Planck equation with drift
/// assembled from the given value field.
inline SpaceTimeField solve_fp_forward(const MfgProblem& prob, const P1Space& space,
                                       const ThetaSchemeConfig& scheme, const SolverConfig& cfg,
                                       const SpaceTimeField& u_field) {
  const int n = scheme.grid.n_steps;
  const double tau = scheme.grid.tau();
  const double theta = scheme.theta;
  SparseOperator M;
  if (cfg.fp_lumping) {
    const Eigen::VectorXd d = lumped_mass(space);
    std::vector<detail::Triplet> t;
    for (int i = 0; i < space.n_dofs; ++i) t.emplace_back(i, i, d[i]);
    M = detail::from_triplets(space.n_dofs, space.n_dofs, t);
  } else {
    M = assemble_mass(space);
  }
  const SparseOperator A = assemble_stiffness(space);

  SpaceTimeField m = zero_field(scheme.grid, space);
  m.frames[0] = l2_project(space, prob.initial_m).coeffs;

  for (int k = 0; k < n; ++k) {
    const double t_theta = theta * scheme.grid.node(k + 1) + (1.0 - theta) * scheme.grid.node(k);
    const Eigen::VectorXd u_theta = theta * u_field.frames[static_cast<std::size_t>(k + 1)] +
                                    (1.0 - theta) * u_field.frames[static_cast<std::size_t>(k)];
    const SparseOperator L(A + detail::assemble_fp_drift(space, prob.hamiltonian, u_theta));
    Eigen::VectorXd b = (M - tau * (1.0 - theta) * L) * m.frames[static_cast<std::size_t>(k)];
    if (prob.source_m)
      b += tau * assemble_load(
                     space, [&](Vec2 x) { return prob.source_m(t_theta, x); }, 2);
    const LuFactor lhs(SparseOperator(M + tau * theta * L));
    if (!lhs.ok()) throw std::runtime_error("solve_fp_forward: factorization failed");
    m.frames[static_cast<std::size_t>(k + 1)] = lhs.solve(b);
  }
  return m;
}

/// Index layout of the monolithic space-time system. Unknowns are the
/// non-data frames: u^0..u^{n-1} and m^1..m^n.
struct SystemLayout {
  int n_steps = 0;
  int n_dofs = 0;
  int u_off(int k) const { return k * n_dofs; }
  int m_off(int k) const { return (n_steps + k - 1) * n_dofs; }
  int size() const { return 2 * n_steps * n_dofs; }
};

namespace detail {

inline void add_block(std::vector<Triplet>& t, const SparseOperator& S, int roff, int coff,
                      double factor) {
  if (factor == 0.0) return;
  for (int r = 0; r < S.outerSize(); ++r)
    for (SparseOperator::InnerIterator it(S, r); it; ++it)
      t.emplace_back(roff + static_cast<int>(it.row()), coff + static_cast<int>(it.col()),
                     factor * it.value());
}

struct SystemMatrices {
  SparseOperator M;       // HJB mass
  SparseOperator M_fp;    // FP mass (lumped if requested)
  SparseOperator A;
};

inline SystemMatrices system_matrices(const P1Space& space, const SolverConfig& cfg) {
  SystemMatrices sm;
  sm.M = assemble_mass(space);
  sm.A = assemble_stiffness(space);
  if (cfg.fp_lumping) {
    const Eigen::VectorXd d = lumped_mass(space);
    std::vector<Triplet> t;
    for (int i = 0; i < space.n_dofs; ++i) t.emplace_back(i, i, d[i]);
    sm.M_fp = from_triplets(space.n_dofs, space.n_dofs, t);
  } else {
    sm.M_fp = sm.M;
  }
  return sm;
}

}  // namespace detail

/// Residual of the fully discrete system at (u, m), laid out per
/// SystemLayout; optionally also assembles the exact Jacobian, which is the
/// discrete linearized operator.
inline Eigen::VectorXd assemble_system(const MfgProblem& prob, const P1Space& space,
                                       const ThetaSchemeConfig& scheme, const SolverConfig& cfg,
                                       const SpaceTimeField& u, const SpaceTimeField& m,
                                       SparseOperator* jacobian = nullptr) {
  const int n = scheme.grid.n_steps;
  const int N = space.n_dofs;
  const double tau = scheme.grid.tau();
  const double theta = scheme.theta;
  const SystemLayout lay{n, N};
  const auto sm = detail::system_matrices(space, cfg);

  Eigen::VectorXd R(lay.size());
  std::vector<detail::Triplet> trip;

  // HJB rows, k = 0..n-1 (backward in time; implicit weight on level k).
  for (int k = 0; k < n; ++k) {
    const Eigen::VectorXd& uk = u.frames[static_cast<std::size_t>(k)];
    const Eigen::VectorXd& un = u.frames[static_cast<std::size_t>(k + 1)];
    const Eigen::VectorXd ubar = theta * uk + (1.0 - theta) * un;
    const Eigen::VectorXd mbar = theta * m.frames[static_cast<std::size_t>(k)] +
                                 (1.0 - theta) * m.frames[static_cast<std::size_t>(k + 1)];
    const double t_theta = theta * scheme.grid.node(k) + (1.0 - theta) * scheme.grid.node(k + 1);

    R.segment(lay.u_off(k), N) =
        sm.M * (uk - un) / tau + sm.A * ubar +
        detail::assemble_hamiltonian_load(space, prob.hamiltonian, ubar) -
        detail::assemble_coupled_load(space, prob.coupling, t_theta, mbar, prob.source_u);

    if (jacobian) {
      const SparseOperator T = detail::assemble_hjb_transport(space, prob.hamiltonian, ubar);
      const SparseOperator DF =
          detail::assemble_coupling_jacobian(prob.coupling, space, t_theta, mbar);
      detail::add_block(trip, sm.M, lay.u_off(k), lay.u_off(k), 1.0 / tau);
      detail::add_block(trip, sm.A, lay.u_off(k), lay.u_off(k), theta);
      detail::add_block(trip, T, lay.u_off(k), lay.u_off(k), theta);
      if (k + 1 <= n - 1) {
        detail::add_block(trip, sm.M, lay.u_off(k), lay.u_off(k + 1), -1.0 / tau);
        detail::add_block(trip, sm.A, lay.u_off(k), lay.u_off(k + 1), 1.0 - theta);
        detail::add_block(trip, T, lay.u_off(k), lay.u_off(k + 1), 1.0 - theta);
      }
      if (k >= 1) detail::add_block(trip, DF, lay.u_off(k), lay.m_off(k), -theta);
      detail::add_block(trip, DF, lay.u_off(k), lay.m_off(k + 1), -(1.0 - theta));
    }
  }

  // FP rows, k = 1..n (forward in time; implicit weight on level k).
  for (int k = 1; k <= n; ++k) {
    const Eigen::VectorXd& mk = m.frames[static_cast<std::size_t>(k)];
    const Eigen::VectorXd& mp = m.frames[static_cast<std::size_t>(k - 1)];
    const Eigen::VectorXd mbar = theta * mk + (1.0 - theta) * mp;
    const Eigen::VectorXd ubar = theta * u.frames[static_cast<std::size_t>(k)] +
                                 (1.0 - theta) * u.frames[static_cast<std::size_t>(k - 1)];
    const double t_theta = theta * scheme.grid.node(k) + (1.0 - theta) * scheme.grid.node(k - 1);

    const SparseOperator B = detail::assemble_fp_drift(space, prob.hamiltonian, ubar);
    Eigen::VectorXd row = sm.M_fp * (mk - mp) / tau + (sm.A + B) * mbar;
    if (prob.source_m)
      row -= assemble_load(
          space, [&](Vec2 x) { return prob.source_m(t_theta, x); }, 2);
    R.segment(lay.m_off(k), N) = row;

    if (jacobian) {
      detail::add_block(trip, sm.M_fp, lay.m_off(k), lay.m_off(k), 1.0 / tau);
      detail::add_block(trip, sm.A, lay.m_off(k), lay.m_off(k), theta);
      detail::add_block(trip, B, lay.m_off(k), lay.m_off(k), theta);
      if (k - 1 >= 1) {
        detail::add_block(trip, sm.M_fp, lay.m_off(k), lay.m_off(k - 1), -1.0 / tau);
        detail::add_block(trip, sm.A, lay.m_off(k), lay.m_off(k - 1), 1.0 - theta);
        detail::add_block(trip, B, lay.m_off(k), lay.m_off(k - 1), 1.0 - theta);
      }
      const SparseOperator K = detail::assemble_fp_cross(space, prob.hamiltonian, ubar, mbar);
      if (k <= n - 1) detail::add_block(trip, K, lay.m_off(k), lay.u_off(k), theta);
      detail::add_block(trip, K, lay.m_off(k), lay.u_off(k - 1), 1.0 - theta);
    }
  }

  if (jacobian) {
    SparseOperator J(lay.size(), lay.size());
    J.setFromTriplets(trip.begin(), trip.end());
    *jacobian = std::move(J);
  }
  return R;
}

/// Discrete proxy for the product-space residual norm: rows are converted to
/// V_h functions through the (lumped, for FP rows when enabled) mass inverse
/// and measured in W^{0,1}_q x L^q.
inline double residual_x_norm(const P1Space& space, const ThetaSchemeConfig& scheme,
                              const SolverConfig& cfg, const Eigen::VectorXd& R) {
  const int n = scheme.grid.n_steps;
  const int N = space.n_dofs;
  const SystemLayout lay{n, N};
  const auto sm = detail::system_matrices(space, cfg);
  const SpdFactor mass(sm.M);
  const SpdFactor mass_fp(sm.M_fp);

  SpaceTimeField ru = zero_field(scheme.grid, space);
  SpaceTimeField rm = zero_field(scheme.grid, space);
  for (int k = 0; k < n; ++k) ru.frames[static_cast<std::size_t>(k)] = mass.solve(R.segment(lay.u_off(k), N));
  for (int k = 1; k <= n; ++k)
    rm.frames[static_cast<std::size_t>(k)] = mass_fp.solve(R.segment(lay.m_off(k), N));
  const double q = cfg.q_norm > 0.0 ? cfg.q_norm : default_q(space.mesh.dim);
  return norm_w01q(ru, q) + norm_lq(rm, q);
}

namespace detail {

inline Eigen::VectorXd pack(const SystemLayout& lay, const SpaceTimeField& u,
                            const SpaceTimeField& m) {
  Eigen::VectorXd x(lay.size());
  for (int k = 0; k < lay.n_steps; ++k)
    x.segment(lay.u_off(k), lay.n_dofs) = u.frames[static_cast<std::size_t>(k)];
  for (int k = 1; k <= lay.n_steps; ++k)
    x.segment(lay.m_off(k), lay.n_dofs) = m.frames[static_cast<std::size_t>(k)];
  return x;
}

inline void unpack(const SystemLayout& lay, const Eigen::VectorXd& x, SpaceTimeField& u,
                   SpaceTimeField& m) {
  for (int k = 0; k < lay.n_steps; ++k)
    u.frames[static_cast<std::size_t>(k)] = x.segment(lay.u_off(k), lay.n_dofs);
  for (int k = 1; k <= lay.n_steps; ++k)
    m.frames[static_cast<std::size_t>(k)] = x.segment(lay.m_off(k), lay.n_dofs);
}

}  // namespace detail

/// L-infinity data for the comparison-principle check:
/// max_t ||u_h(t)||_inf - [ ||u_T||_inf + (C_H + ||F[m]+source||_inf) T ].
inline double sup_bound_gap(const MfgProblem& prob, const P1Space& space,
                            const ThetaSchemeConfig& scheme, const SpaceTimeField& u,
                            const SpaceTimeField& m) {
  double u_max = 0.0;
  for (const auto& fr : u.frames) u_max = std::max(u_max, linf_vertex_norm(space, fr));

  double uT_max = 0.0;
  for (int v = 0; v < space.n_vertices; ++v)
    uT_max = std::max(uT_max, std::abs(prob.terminal_u(space.mesh.vertices[static_cast<std::size_t>(v)])));

  double f_max = 0.0;
  for (int k = 0; k <= scheme.grid.n_steps; ++k) {
    const double t = scheme.grid.node(k);
    const CouplingEval eval(prob.coupling, space, t, m.frames[static_cast<std::size_t>(k)]);
    for (int c = 0; c < space.mesh.n_cells(); ++c) {
      const auto q = cell_quadrature(space.mesh, c, 2);
      for (int p = 0; p < q.n; ++p) {
        const Vec2 x = q.points[static_cast<std::size_t>(p)];
        double fv = eval.value(c, q.bary[static_cast<std::size_t>(p)], x);
        if (prob.source_u) fv += prob.source_u(t, x);
        f_max = std::max(f_max, std::abs(fv));
      }
    }
  }
  const double bound = uT_max + (prob.hamiltonian.C_H + f_max) * scheme.grid.T;
  return u_max - bound;
}

/// Solves the coupled system by damped Picard sweeps, monolithic Newton, or
/// Picard with a Newton finish. Throws SolveError (with the partial iterates)
/// on non-convergence.
inline MfgSolution solve_coupled(const MfgProblem& prob, const P1Space& space,
                                 const ThetaSchemeConfig& scheme, const SolverConfig& cfg) {
  cfg.validate();
  validate_problem(prob, space.mesh);
  const SystemLayout lay{scheme.grid.n_steps, space.n_dofs};

  // Initial guess: heat flow of m0 (with the m-source if present), then one
  // decoupled sweep.
  LoadProvider m_src = nullptr;
  if (prob.source_m)
    m_src = [&](int, double t) {
      return assemble_load(space, [&](Vec2 x) { return prob.source_m(t, x); }, 2);
    };
  SpaceTimeField m =
      theta_solve_forward(space, scheme, l2_project(space, prob.initial_m).coeffs, m_src);
  SpaceTimeField u = solve_hjb_backward(prob, space, scheme, cfg, m);
  m = solve_fp_forward(prob, space, scheme, cfg, u);

  SolveReport rep;
  rep.outer_iterations = 1;
  Eigen::VectorXd R = assemble_system(prob, space, scheme, cfg, u, m);
  double res = residual_x_norm(space, scheme, cfg, R);
  rep.residual_history.push_back(res);

  const bool allow_picard = cfg.method != SolverConfig::Method::newton;
  const bool allow_newton = cfg.method != SolverConfig::Method::picard;

  while (res > cfg.tol_residual && rep.outer_iterations < cfg.max_outer) {
    const bool use_newton =
        allow_newton && (!allow_picard || res < cfg.newton_switch_residual);
    if (use_newton) {
      SparseOperator J;
      R = assemble_system(prob, space, scheme, cfg, u, m, &J);
      const LuFactor lu(J);
      if (!lu.ok())
        throw SolveError("solve_coupled: singular Newton system", rep, u, m);
      const Eigen::VectorXd x =
          detail::pack(lay, u, m) - Eigen::VectorXd(lu.solve(R));
      detail::unpack(lay, x, u, m);
    } else {
      u = solve_hjb_backward(prob, space, scheme, cfg, m);
      const SpaceTimeField m_new = solve_fp_forward(prob, space, scheme, cfg, u);
      for (int k = 0; k <= scheme.grid.n_steps; ++k)
        m.frames[static_cast<std::size_t>(k)] =
            (1.0 - cfg.damping) * m.frames[static_cast<std::size_t>(k)] +
            cfg.damping * m_new.frames[static_cast<std::size_t>(k)];
    }
    ++rep.outer_iterations;
    R = assemble_system(prob, space, scheme, cfg, u, m);
    res = residual_x_norm(space, scheme, cfg, R);
    rep.residual_history.push_back(res);
  }

  rep.final_residual = res;
  rep.converged = res <= cfg.tol_residual;
  rep.sup_bound_check = sup_bound_gap(prob, space, scheme, u, m);
  if (!rep.converged)
    throw SolveError("solve_coupled: no convergence after " +
                         std::to_string(rep.outer_iterations) + " outer iterations",
                     rep, u, m);
  return {std::move(u), std::move(m), std::move(rep)};
}

struct LinearizedSolution {
  SpaceTimeField v;
  SpaceTimeField rho;
  bool singular = false;
};

/// Solves the discrete linearized system at (u, m) monolithically. The
/// right-hand sides follow the residual layout: rhs_u frames 0..n-1 feed the
/// HJB rows, rhs_m frames 1..n the FP rows; the remaining frames are ignored.
/// A singular system is reported, not thrown.
inline LinearizedSolution solve_linearized(const MfgProblem& prob, const P1Space& space,
                                           const ThetaSchemeConfig& scheme,
                                           const SolverConfig& cfg, const SpaceTimeField& u,
                                           const SpaceTimeField& m, const SpaceTimeField& rhs_u,
                                           const SpaceTimeField& rhs_m) {
  const SystemLayout lay{scheme.grid.n_steps, space.n_dofs};
  SparseOperator J;
  assemble_system(prob, space, scheme, cfg, u, m, &J);

  Eigen::VectorXd b(lay.size());
  for (int k = 0; k < lay.n_steps; ++k)
    b.segment(lay.u_off(k), lay.n_dofs) = rhs_u.frames[static_cast<std::size_t>(k)];
  for (int k = 1; k <= lay.n_steps; ++k)
    b.segment(lay.m_off(k), lay.n_dofs) = rhs_m.frames[static_cast<std::size_t>(k)];

  LinearizedSolution out{zero_field(scheme.grid, space), zero_field(scheme.grid, space), false};
  const LuFactor lu(J);
  if (!lu.ok()) {
    out.singular = true;
    return out;
  }
  const Eigen::VectorXd x = lu.solve(b);
  if (!x.allFinite()) {
    out.singular = true;
    return out;
  }
  detail::unpack(lay, x, out.v, out.rho);
  return out;
}

struct MarginEstimate {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// Smallest singular value of the discrete linearized operator under the
/// block mass normalization, by inverse power iteration on the normal
/// equations. mass_scale rescales the margin linearly.
inline MarginEstimate stability_margin(const MfgProblem& prob, const P1Space& space,
                                       const ThetaSchemeConfig& scheme, const SolverConfig& cfg,
                                       const SpaceTimeField& u, const SpaceTimeField& m,
                                       double mass_scale = 1.0, int max_iters = 500,
                                       unsigned seed = 7) {
  const SystemLayout lay{scheme.grid.n_steps, space.n_dofs};
  SparseOperator J;
  assemble_system(prob, space, scheme, cfg, u, m, &J);
  const LuFactor lu(J);
  const LuFactor lut(SparseOperator(J.transpose()));
  if (!lu.ok() || !lut.ok()) return {0.0, false, 0};

  const SparseOperator M = assemble_mass(space);
  const double s = 1.0 / mass_scale;
  auto apply_mass = [&](const Eigen::VectorXd& x) {
    Eigen::VectorXd y(lay.size());
    for (int blk = 0; blk < 2 * lay.n_steps; ++blk)
      y.segment(blk * lay.n_dofs, lay.n_dofs) =
          s * (M * x.segment(blk * lay.n_dofs, lay.n_dofs));
    return y;
  };
  auto m_dot = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return a.dot(apply_mass(b));
  };

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  Eigen::VectorXd x(lay.size());
  for (int i = 0; i < x.size(); ++i) x[i] = gauss(rng);
  x /= std::sqrt(m_dot(x, x));

  double lambda = 0.0;
  MarginEstimate est;
  for (int it = 0; it < max_iters; ++it) {
    // K x = J^{-1} M J^{-T} M x, self-adjoint and PSD in the M inner product.
    const Eigen::VectorXd kx = lu.solve(apply_mass(lut.solve(apply_mass(x))));
    const double lam_new = m_dot(x, kx);
    const double nrm = std::sqrt(m_dot(kx, kx));
    x = kx / nrm;
    est.iterations = it + 1;
    if (it > 0 && std::abs(lam_new - lambda) <= 1e-10 * std::abs(lam_new)) {
      lambda = lam_new;
      est.converged = true;
      break;
    }
    lambda = lam_new;
  }
  est.value = lambda > 0.0 ? 1.0 / std::sqrt(lambda) : 0.0;
  return est;
}

/// Max relative mismatch between central finite differences of the residual
/// and the assembled Jacobian action over random unit directions.
inline double jacobian_fd_max_error(const MfgProblem& prob, const P1Space& space,
                                    const ThetaSchemeConfig& scheme, const SolverConfig& cfg,
                                    const SpaceTimeField& u, const SpaceTimeField& m, int n_dirs,
                                    unsigned seed, double delta = 1e-5) {
  const SystemLayout lay{scheme.grid.n_steps, space.n_dofs};
  SparseOperator J;
  assemble_system(prob, space, scheme, cfg, u, m, &J);
  const Eigen::VectorXd x0 = detail::pack(lay, u, m);

  SpaceTimeField up = u, mp = m;
  auto residual_at = [&](const Eigen::VectorXd& x) {
    detail::unpack(lay, x, up, mp);
    return assemble_system(prob, space, scheme, cfg, up, mp);
  };

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  double worst = 0.0;
  for (int d = 0; d < n_dirs; ++d) {
    Eigen::VectorXd v(lay.size());
    for (int i = 0; i < v.size(); ++i) v[i] = gauss(rng);
    v.normalize();
    const Eigen::VectorXd fd =
        (residual_at(x0 + delta * v) - residual_at(x0 - delta * v)) / (2.0 * delta);
    const Eigen::VectorXd jv = J * v;
    worst = std::max(worst, (fd - jv).norm() / std::max(jv.norm(), 1e-30));
  }
  return worst;
}

}  // namespace mfglab
