#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "mfglab/mesh.hpp"
#include "mfglab/quadrature.hpp"

namespace mfglab {

using ScalarFn = std::function<double(Vec2)>;
using VectorFn = std::function<Vec2(Vec2)>;

/// Sparse linear map on coefficient vectors, compressed row storage.
using SparseOperator = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// P1 Lagrange space with homogeneous Dirichlet conditions: coefficient
/// vectors have one entry per interior vertex and vanish on the boundary.
struct P1Space {
  Mesh mesh;
  int n_vertices = 0;
  std::vector<int> interior_dofs;   // vertex index per dof
  std::vector<int> vertex_to_dof;   // -1 for boundary vertices
  int n_dofs = 0;
};

inline P1Space make_p1_space(Mesh mesh) {
  validate(mesh);
  P1Space s;
  s.n_vertices = mesh.n_vertices();
  s.vertex_to_dof.assign(static_cast<std::size_t>(s.n_vertices), -1);
  for (int v = 0; v < s.n_vertices; ++v) {
    if (!mesh.boundary_vertex[static_cast<std::size_t>(v)]) {
      s.vertex_to_dof[static_cast<std::size_t>(v)] = static_cast<int>(s.interior_dofs.size());
      s.interior_dofs.push_back(v);
    }
  }
  s.n_dofs = static_cast<int>(s.interior_dofs.size());
  s.mesh = std::move(mesh);
  return s;
}

/// Function in V_h: interior coefficients over a P1 space.
struct DiscreteFunction {
  P1Space space;
  Eigen::VectorXd coeffs;
};

namespace detail {

/// Per-cell geometry: vertex ids, constant P1 gradients, measure.
struct CellGeom {
  std::array<int, 3> vid{};
  std::array<Vec2, 3> grad{};
  double measure = 0.0;
};

inline CellGeom cell_geometry(const Mesh& mesh, int c) {
  CellGeom g;
  g.vid = mesh.cells[static_cast<std::size_t>(c)];
  g.measure = mesh.cell_measure(c);
  if (mesh.dim == 1) {
    const double h = g.measure;
    g.grad[0] = {-1.0 / h, 0.0};
    g.grad[1] = {1.0 / h, 0.0};
  } else {
    const Vec2 v0 = mesh.vertices[static_cast<std::size_t>(g.vid[0])];
    const Vec2 v1 = mesh.vertices[static_cast<std::size_t>(g.vid[1])];
    const Vec2 v2 = mesh.vertices[static_cast<std::size_t>(g.vid[2])];
    const double twice_area = 2.0 * g.measure;
    g.grad[0] = {(v1.y - v2.y) / twice_area, (v2.x - v1.x) / twice_area};
    g.grad[1] = {(v2.y - v0.y) / twice_area, (v0.x - v2.x) / twice_area};
    g.grad[2] = {(v0.y - v1.y) / twice_area, (v1.x - v0.x) / twice_area};
  }
  return g;
}

using Triplet = Eigen::Triplet<double>;

inline SparseOperator from_triplets(int rows, int cols, std::vector<Triplet>& t) {
  SparseOperator op(rows, cols);
  op.setFromTriplets(t.begin(), t.end());
  return op;
}

}  // namespace detail

/// Coefficient value of a P1 function at a point of a known cell
/// (boundary vertices contribute zero).
inline double eval_p1(const P1Space& s, const Eigen::VectorXd& coeffs, int cell,
                      const std::array<double, 3>& bary) {
  const auto& k = s.mesh.cells[static_cast<std::size_t>(cell)];
  double v = 0.0;
  for (int a = 0; a < s.mesh.verts_per_cell(); ++a) {
    const int dof = s.vertex_to_dof[static_cast<std::size_t>(k[a])];
    if (dof >= 0) v += coeffs[dof] * bary[static_cast<std::size_t>(a)];
  }
  return v;
}

inline double eval_p1_at(const P1Space& s, const Eigen::VectorXd& coeffs, Vec2 p) {
  const int cell = s.mesh.locate(p);
  if (cell < 0) throw std::invalid_argument("eval_p1_at: point outside mesh");
  return eval_p1(s, coeffs, cell, s.mesh.barycentric(cell, p));
}

/// Piecewise-constant gradient of a P1 function on one cell.
inline Vec2 grad_p1(const P1Space& s, const Eigen::VectorXd& coeffs, int cell) {
  const auto g = detail::cell_geometry(s.mesh, cell);
  Vec2 v{};
  for (int a = 0; a < s.mesh.verts_per_cell(); ++a) {
    const int dof = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
    if (dof >= 0) v = v + coeffs[dof] * g.grad[a];
  }
  return v;
}

/// Values at all mesh vertices (zeros on the boundary).
inline Eigen::VectorXd vertex_values(const P1Space& s, const Eigen::VectorXd& coeffs) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(s.n_vertices);
  for (int d = 0; d < s.n_dofs; ++d) out[s.interior_dofs[static_cast<std::size_t>(d)]] = coeffs[d];
  return out;
}

/// Mass matrix on interior dofs, assembled from exact element integrals.
inline SparseOperator assemble_mass(const P1Space& s) {
  std::vector<detail::Triplet> t;
  const int nv = s.mesh.verts_per_cell();
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto g = detail::cell_geometry(s.mesh, c);
    const double scale = g.measure / (s.mesh.dim == 1 ? 6.0 : 12.0);
    for (int a = 0; a < nv; ++a) {
      const int i = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
      if (i < 0) continue;
      for (int b = 0; b < nv; ++b) {
        const int j = s.vertex_to_dof[static_cast<std::size_t>(g.vid[b])];
        if (j < 0) continue;
        t.emplace_back(i, j, scale * (a == b ? 2.0 : 1.0));
      }
    }
  }
  return detail::from_triplets(s.n_dofs, s.n_dofs, t);
}

/// Full mass matrix over all vertices, boundary included. Used by tests and
/// for total-mass bookkeeping.
inline SparseOperator assemble_mass_full(const Mesh& mesh) {
  std::vector<detail::Triplet> t;
  const int nv = mesh.verts_per_cell();
  for (int c = 0; c < mesh.n_cells(); ++c) {
    const auto& k = mesh.cells[static_cast<std::size_t>(c)];
    const double scale = mesh.cell_measure(c) / (mesh.dim == 1 ? 6.0 : 12.0);
    for (int a = 0; a < nv; ++a)
      for (int b = 0; b < nv; ++b) t.emplace_back(k[a], k[b], scale * (a == b ? 2.0 : 1.0));
  }
  return detail::from_triplets(mesh.n_vertices(), mesh.n_vertices(), t);
}

/// Lumped mass diagonal: integral of each interior basis function.
inline Eigen::VectorXd lumped_mass(const P1Space& s) {
  Eigen::VectorXd d = Eigen::VectorXd::Zero(s.n_dofs);
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto& k = s.mesh.cells[static_cast<std::size_t>(c)];
    const double share = s.mesh.cell_measure(c) / s.mesh.verts_per_cell();
    for (int a = 0; a < s.mesh.verts_per_cell(); ++a) {
      const int i = s.vertex_to_dof[static_cast<std::size_t>(k[a])];
      if (i >= 0) d[i] += share;
    }
  }
  return d;
}

/// Stiffness matrix on interior dofs (Dirichlet eliminated).
inline SparseOperator assemble_stiffness(const P1Space& s) {
  std::vector<detail::Triplet> t;
  const int nv = s.mesh.verts_per_cell();
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto g = detail::cell_geometry(s.mesh, c);
    for (int a = 0; a < nv; ++a) {
      const int i = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
      if (i < 0) continue;
      for (int b = 0; b < nv; ++b) {
        const int j = s.vertex_to_dof[static_cast<std::size_t>(g.vid[b])];
        if (j < 0) continue;
        t.emplace_back(i, j, g.measure * dot(g.grad[a], g.grad[b]));
      }
    }
  }
  return detail::from_triplets(s.n_dofs, s.n_dofs, t);
}

/// Advection matrix C_ij = ∫ φ_j b·Dφ_i, the drift pairing with test index i.
inline SparseOperator assemble_advection(const P1Space& s, const VectorFn& b, int degree = 2) {
  std::vector<detail::Triplet> t;
  const int nv = s.mesh.verts_per_cell();
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto g = detail::cell_geometry(s.mesh, c);
    const auto q = cell_quadrature(s.mesh, c, degree);
    for (int p = 0; p < q.n; ++p) {
      const Vec2 bv = b(q.points[static_cast<std::size_t>(p)]);
      if (!is_finite(bv)) throw std::invalid_argument("assemble_advection: non-finite field sample");
      for (int a = 0; a < nv; ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
        if (i < 0) continue;
        const double bi = dot(bv, g.grad[a]) * q.weights[static_cast<std::size_t>(p)];
        for (int bb = 0; bb < nv; ++bb) {
          const int j = s.vertex_to_dof[static_cast<std::size_t>(g.vid[bb])];
          if (j < 0) continue;
          t.emplace_back(i, j, bi * q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(bb)]);
        }
      }
    }
  }
  return detail::from_triplets(s.n_dofs, s.n_dofs, t);
}

/// Transport matrix T_ij = ∫ (b·Dφ_j) φ_i; the transpose pairing of
/// assemble_advection.
inline SparseOperator assemble_transport(const P1Space& s, const VectorFn& b, int degree = 2) {
  std::vector<detail::Triplet> t;
  const int nv = s.mesh.verts_per_cell();
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto g = detail::cell_geometry(s.mesh, c);
    const auto q = cell_quadrature(s.mesh, c, degree);
    for (int p = 0; p < q.n; ++p) {
      const Vec2 bv = b(q.points[static_cast<std::size_t>(p)]);
      if (!is_finite(bv)) throw std::invalid_argument("assemble_transport: non-finite field sample");
      for (int a = 0; a < nv; ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
        if (i < 0) continue;
        const double phi_i = q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(a)] *
                             q.weights[static_cast<std::size_t>(p)];
        for (int bb = 0; bb < nv; ++bb) {
          const int j = s.vertex_to_dof[static_cast<std::size_t>(g.vid[bb])];
          if (j < 0) continue;
          t.emplace_back(i, j, phi_i * dot(bv, g.grad[bb]));
        }
      }
    }
  }
  return detail::from_triplets(s.n_dofs, s.n_dofs, t);
}

/// Load vector ℓ_i = ∫ f φ_i by per-cell quadrature.
inline Eigen::VectorXd assemble_load(const P1Space& s, const ScalarFn& f, int degree = 2) {
  Eigen::VectorXd l = Eigen::VectorXd::Zero(s.n_dofs);
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto& k = s.mesh.cells[static_cast<std::size_t>(c)];
    const auto q = cell_quadrature(s.mesh, c, degree);
    for (int p = 0; p < q.n; ++p) {
      const double fv = f(q.points[static_cast<std::size_t>(p)]);
      if (!std::isfinite(fv)) throw std::invalid_argument("assemble_load: non-finite sample");
      for (int a = 0; a < s.mesh.verts_per_cell(); ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(k[a])];
        if (i >= 0)
          l[i] += fv * q.bary[static_cast<std::size_t>(p)][static_cast<std::size_t>(a)] *
                  q.weights[static_cast<std::size_t>(p)];
      }
    }
  }
  return l;
}

/// Divergence-form load: entries -∫ G·Dφ_i, the weak form of div(G) data.
inline Eigen::VectorXd assemble_load_divergence(const P1Space& s, const VectorFn& G,
                                                int degree = 2) {
  Eigen::VectorXd l = Eigen::VectorXd::Zero(s.n_dofs);
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto g = detail::cell_geometry(s.mesh, c);
    const auto q = cell_quadrature(s.mesh, c, degree);
    for (int p = 0; p < q.n; ++p) {
      const Vec2 gv = G(q.points[static_cast<std::size_t>(p)]);
      if (!is_finite(gv))
        throw std::invalid_argument("assemble_load_divergence: non-finite sample");
      for (int a = 0; a < s.mesh.verts_per_cell(); ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(g.vid[a])];
        if (i >= 0) l[i] -= dot(gv, g.grad[a]) * q.weights[static_cast<std::size_t>(p)];
      }
    }
  }
  return l;
}

/// Sparse Cholesky of an SPD operator. Factorization failure is fatal.
class SpdFactor {
 public:
  explicit SpdFactor(const SparseOperator& op) {
    Eigen::SparseMatrix<double> colmajor(op);
    llt_.compute(colmajor);
    if (llt_.info() != Eigen::Success)
      throw std::runtime_error("SpdFactor: Cholesky factorization failed");
  }
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const { return llt_.solve(rhs); }

 private:
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt_;
};

/// Sparse LU for general operators; reports singularity instead of throwing.
class LuFactor {
 public:
  explicit LuFactor(const SparseOperator& op) {
    Eigen::SparseMatrix<double> colmajor(op);
    lu_.compute(colmajor);
    ok_ = lu_.info() == Eigen::Success;
  }
  bool ok() const { return ok_; }
  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const { return lu_.solve(rhs); }

 private:
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu_;
  bool ok_ = false;
};

/// L2 projection: solves M c = ∫ g φ_i.
inline DiscreteFunction l2_project(const P1Space& s, const ScalarFn& g, int degree = 4) {
  const SpdFactor mass(assemble_mass(s));
  return {s, mass.solve(assemble_load(s, g, degree))};
}

/// Ritz (elliptic) projection: solves A c = ∫ Dg·Dφ_i. The argument must
/// vanish on the boundary; vertex values above 1e-8 are rejected.
inline DiscreteFunction ritz_project(const P1Space& s, const ScalarFn& g, const VectorFn& grad_g,
                                     int degree = 4) {
  for (int v = 0; v < s.n_vertices; ++v) {
    if (s.mesh.boundary_vertex[static_cast<std::size_t>(v)] &&
        std::abs(g(s.mesh.vertices[static_cast<std::size_t>(v)])) > 1e-8)
      throw std::invalid_argument("ritz_project: argument does not vanish on the boundary");
  }
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(s.n_dofs);
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto geo = detail::cell_geometry(s.mesh, c);
    const auto q = cell_quadrature(s.mesh, c, degree);
    for (int p = 0; p < q.n; ++p) {
      const Vec2 dg = grad_g(q.points[static_cast<std::size_t>(p)]);
      if (!is_finite(dg)) throw std::invalid_argument("ritz_project: non-finite gradient sample");
      for (int a = 0; a < s.mesh.verts_per_cell(); ++a) {
        const int i = s.vertex_to_dof[static_cast<std::size_t>(geo.vid[a])];
        if (i >= 0) rhs[i] += dot(dg, geo.grad[a]) * q.weights[static_cast<std::size_t>(p)];
      }
    }
  }
  const SpdFactor stiff(assemble_stiffness(s));
  return {s, stiff.solve(rhs)};
}

/// Vertex-value interpolant restricted to interior dofs.
inline DiscreteFunction interpolate(const P1Space& s, const ScalarFn& g) {
  Eigen::VectorXd c(s.n_dofs);
  for (int d = 0; d < s.n_dofs; ++d) {
    const double v = g(s.mesh.vertices[static_cast<std::size_t>(s.interior_dofs[static_cast<std::size_t>(d)])]);
    if (!std::isfinite(v)) throw std::invalid_argument("interpolate: non-finite vertex value");
    c[d] = v;
  }
  return {s, std::move(c)};
}

/// L^q(Ω) norm of a discrete function by per-cell quadrature.
inline double lq_norm(const P1Space& s, const Eigen::VectorXd& coeffs, double q, int degree = 2) {
  double acc = 0.0;
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto quad = cell_quadrature(s.mesh, c, degree);
    for (int p = 0; p < quad.n; ++p)
      acc += quad.weights[static_cast<std::size_t>(p)] *
             std::pow(std::abs(eval_p1(s, coeffs, c, quad.bary[static_cast<std::size_t>(p)])), q);
  }
  return std::pow(acc, 1.0 / q);
}

/// L^q(Ω) norm of the piecewise-constant gradient.
inline double grad_lq_norm(const P1Space& s, const Eigen::VectorXd& coeffs, double q) {
  double acc = 0.0;
  for (int c = 0; c < s.mesh.n_cells(); ++c)
    acc += s.mesh.cell_measure(c) * std::pow(norm(grad_p1(s, coeffs, c)), q);
  return std::pow(acc, 1.0 / q);
}

/// Max over vertex values; for P1 this is the sup norm.
inline double linf_vertex_norm(const P1Space& s, const Eigen::VectorXd& coeffs) {
  return coeffs.size() == 0 ? 0.0 : coeffs.cwiseAbs().maxCoeff();
}

/// ‖g - u_h‖_{L^q} with g evaluated directly at quadrature points.
inline double error_lq(const P1Space& s, const Eigen::VectorXd& coeffs, const ScalarFn& g,
                       double q, int degree = 4) {
  double acc = 0.0;
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const auto quad = cell_quadrature(s.mesh, c, degree);
    for (int p = 0; p < quad.n; ++p) {
      const double gv = g(quad.points[static_cast<std::size_t>(p)]);
      if (!std::isfinite(gv)) throw std::invalid_argument("error_lq: non-finite exact sample");
      const double diff = gv - eval_p1(s, coeffs, c, quad.bary[static_cast<std::size_t>(p)]);
      acc += quad.weights[static_cast<std::size_t>(p)] * std::pow(std::abs(diff), q);
    }
  }
  return std::pow(acc, 1.0 / q);
}

/// ‖Dg - Du_h‖_{L^q} with the exact gradient supplied analytically.
inline double grad_error_lq(const P1Space& s, const Eigen::VectorXd& coeffs, const VectorFn& dg,
                            double q, int degree = 4) {
  double acc = 0.0;
  for (int c = 0; c < s.mesh.n_cells(); ++c) {
    const Vec2 gh = grad_p1(s, coeffs, c);
    const auto quad = cell_quadrature(s.mesh, c, degree);
    for (int p = 0; p < quad.n; ++p) {
      const Vec2 gv = dg(quad.points[static_cast<std::size_t>(p)]);
      if (!is_finite(gv)) throw std::invalid_argument("grad_error_lq: non-finite exact sample");
      acc += quad.weights[static_cast<std::size_t>(p)] * std::pow(norm(gv - gh), q);
    }
  }
  return std::pow(acc, 1.0 / q);
}

}  // namespace mfglab
