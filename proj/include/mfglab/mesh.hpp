#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mfglab/geometry.hpp"

namespace mfglab {

/// Simplicial mesh of an interval (dim 1) or a convex polygon (dim 2).
/// Meshes are immutable after construction and safe to share across threads.
///
/// Cells store dim+1 vertex indices; the unused slot of a 1D cell is -1.
/// 2D triangles are oriented counterclockwise (positive signed area).
struct Mesh {
  int dim = 1;
  std::vector<Vec2> vertices;
  std::vector<std::array<int, 3>> cells;
  std::vector<std::uint8_t> boundary_vertex;  // 1 iff vertex lies on the boundary
  double h_max = 0.0;
  double h_min = 0.0;

  int n_vertices() const { return static_cast<int>(vertices.size()); }
  int n_cells() const { return static_cast<int>(cells.size()); }
  int verts_per_cell() const { return dim + 1; }

  double cell_measure(int c) const {
    const auto& k = cells[static_cast<std::size_t>(c)];
    if (dim == 1) return vertices[k[1]].x - vertices[k[0]].x;
    const Vec2 e1 = vertices[k[1]] - vertices[k[0]];
    const Vec2 e2 = vertices[k[2]] - vertices[k[0]];
    return 0.5 * (e1.x * e2.y - e1.y * e2.x);
  }

  double cell_diameter(int c) const {
    const auto& k = cells[static_cast<std::size_t>(c)];
    if (dim == 1) return std::abs(vertices[k[1]].x - vertices[k[0]].x);
    double d = 0.0;
    for (int a = 0; a < 3; ++a)
      for (int b = a + 1; b < 3; ++b) d = std::max(d, norm(vertices[k[a]] - vertices[k[b]]));
    return d;
  }

  double total_measure() const {
    double s = 0.0;
    for (int c = 0; c < n_cells(); ++c) s += cell_measure(c);
    return s;
  }

  double quasi_uniformity_ratio() const { return h_max / h_min; }

  /// Linear-scan point location; returns -1 if p is outside the mesh.
  int locate(Vec2 p, double tol = 1e-12) const {
    for (int c = 0; c < n_cells(); ++c) {
      const auto lam = barycentric(c, p);
      bool inside = true;
      for (int a = 0; a < verts_per_cell(); ++a) inside = inside && lam[a] >= -tol;
      if (inside) return c;
    }
    return -1;
  }

  /// Barycentric coordinates of p with respect to cell c.
  std::array<double, 3> barycentric(int c, Vec2 p) const {
    const auto& k = cells[static_cast<std::size_t>(c)];
    if (dim == 1) {
      const double x0 = vertices[k[0]].x, x1 = vertices[k[1]].x;
      const double l1 = (p.x - x0) / (x1 - x0);
      return {1.0 - l1, l1, 0.0};
    }
    const Vec2 v0 = vertices[k[0]], v1 = vertices[k[1]], v2 = vertices[k[2]];
    const double det = (v1.x - v0.x) * (v2.y - v0.y) - (v2.x - v0.x) * (v1.y - v0.y);
    const double l1 = ((p.x - v0.x) * (v2.y - v0.y) - (v2.x - v0.x) * (p.y - v0.y)) / det;
    const double l2 = ((v1.x - v0.x) * (p.y - v0.y) - (p.x - v0.x) * (v1.y - v0.y)) / det;
    return {1.0 - l1 - l2, l1, l2};
  }
};

namespace detail {

inline void recompute_h(Mesh& m) {
  m.h_max = 0.0;
  m.h_min = std::numeric_limits<double>::infinity();
  for (int c = 0; c < m.n_cells(); ++c) {
    const double d = m.cell_diameter(c);
    m.h_max = std::max(m.h_max, d);
    m.h_min = std::min(m.h_min, d);
  }
}

}  // namespace detail

/// Throws std::invalid_argument if the mesh violates a structural invariant:
/// index ranges, distinct cell vertices, positive cell measure.
inline void validate(const Mesh& m) {
  if (m.dim != 1 && m.dim != 2) throw std::invalid_argument("mesh: dim must be 1 or 2");
  if (m.boundary_vertex.size() != m.vertices.size())
    throw std::invalid_argument("mesh: boundary flag count mismatch");
  for (int c = 0; c < m.n_cells(); ++c) {
    const auto& k = m.cells[static_cast<std::size_t>(c)];
    for (int a = 0; a < m.verts_per_cell(); ++a) {
      if (k[a] < 0 || k[a] >= m.n_vertices())
        throw std::invalid_argument("mesh: cell vertex index out of range");
      for (int b = a + 1; b < m.verts_per_cell(); ++b)
        if (k[a] == k[b]) throw std::invalid_argument("mesh: repeated vertex in cell");
    }
    if (m.cell_measure(c) <= 0.0)
      throw std::invalid_argument("mesh: cell with nonpositive measure");
  }
}

/// Uniform mesh of the interval (a, b) with n_cells cells.
inline Mesh build_interval_mesh(double a, double b, int n_cells) {
  if (!(a < b)) throw std::invalid_argument("build_interval_mesh: need a < b");
  if (n_cells < 1) throw std::invalid_argument("build_interval_mesh: need n_cells >= 1");
  Mesh m;
  m.dim = 1;
  m.vertices.resize(static_cast<std::size_t>(n_cells) + 1);
  for (int i = 0; i <= n_cells; ++i)
    m.vertices[static_cast<std::size_t>(i)] = {a + (b - a) * i / n_cells, 0.0};
  m.cells.resize(static_cast<std::size_t>(n_cells));
  for (int i = 0; i < n_cells; ++i) m.cells[static_cast<std::size_t>(i)] = {i, i + 1, -1};
  m.boundary_vertex.assign(m.vertices.size(), 0);
  m.boundary_vertex.front() = 1;
  m.boundary_vertex.back() = 1;
  detail::recompute_h(m);
  return m;
}

/// Structured triangulation of the rectangle (0,lx) x (0,ly): nx-by-ny grid
/// squares, each split along the same diagonal into two triangles.
inline Mesh build_rectangle_mesh(double lx, double ly, int nx, int ny) {
  if (!(lx > 0.0) || !(ly > 0.0))
    throw std::invalid_argument("build_rectangle_mesh: need positive side lengths");
  if (nx < 1 || ny < 1) throw std::invalid_argument("build_rectangle_mesh: need positive counts");
  Mesh m;
  m.dim = 2;
  const int npx = nx + 1;
  auto vid = [npx](int i, int j) { return j * npx + i; };
  m.vertices.resize(static_cast<std::size_t>(npx) * (ny + 1));
  m.boundary_vertex.assign(m.vertices.size(), 0);
  for (int j = 0; j <= ny; ++j)
    for (int i = 0; i <= nx; ++i) {
      m.vertices[static_cast<std::size_t>(vid(i, j))] = {lx * i / nx, ly * j / ny};
      if (i == 0 || j == 0 || i == nx || j == ny)
        m.boundary_vertex[static_cast<std::size_t>(vid(i, j))] = 1;
    }
  m.cells.reserve(static_cast<std::size_t>(2) * nx * ny);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const int v00 = vid(i, j), v10 = vid(i + 1, j), v01 = vid(i, j + 1), v11 = vid(i + 1, j + 1);
      m.cells.push_back({v00, v10, v11});
      m.cells.push_back({v00, v11, v01});
    }
  detail::recompute_h(m);
  return m;
}

/// Counts how many cells use each (sorted) vertex-pair edge. In a valid 2D
/// mesh interior edges appear twice and boundary edges once.
inline std::map<std::pair<int, int>, int> edge_cell_counts(const Mesh& m) {
  std::map<std::pair<int, int>, int> counts;
  for (int c = 0; c < m.n_cells(); ++c) {
    const auto& k = m.cells[static_cast<std::size_t>(c)];
    const int nv = m.verts_per_cell();
    for (int a = 0; a < nv; ++a)
      for (int b = a + 1; b < nv; ++b)
        ++counts[std::minmax(k[a], k[b])];
  }
  return counts;
}

/// Uniform refinement: 1D bisection, 2D red refinement into four similar
/// triangles. Halves h_max and preserves the quasi-uniformity ratio.
inline Mesh refine_uniform(const Mesh& parent) {
  validate(parent);
  Mesh m;
  m.dim = parent.dim;
  m.vertices = parent.vertices;
  m.boundary_vertex = parent.boundary_vertex;

  if (parent.dim == 1) {
    m.cells.reserve(parent.cells.size() * 2);
    for (const auto& k : parent.cells) {
      const int mid = m.n_vertices();
      m.vertices.push_back(0.5 * (parent.vertices[k[0]] + parent.vertices[k[1]]));
      m.boundary_vertex.push_back(0);
      m.cells.push_back({k[0], mid, -1});
      m.cells.push_back({mid, k[1], -1});
    }
    detail::recompute_h(m);
    return m;
  }

  const auto edge_count = edge_cell_counts(parent);
  std::map<std::pair<int, int>, int> midpoint;
  auto mid_of = [&](int a, int b) {
    const auto key = std::minmax(a, b);
    auto it = midpoint.find(key);
    if (it != midpoint.end()) return it->second;
    const int id = m.n_vertices();
    m.vertices.push_back(0.5 * (parent.vertices[a] + parent.vertices[b]));
    m.boundary_vertex.push_back(edge_count.at(key) == 1 ? 1 : 0);
    midpoint.emplace(key, id);
    return id;
  };

  m.cells.reserve(parent.cells.size() * 4);
  for (const auto& k : parent.cells) {
    const int m01 = mid_of(k[0], k[1]);
    const int m12 = mid_of(k[1], k[2]);
    const int m02 = mid_of(k[0], k[2]);
    m.cells.push_back({k[0], m01, m02});
    m.cells.push_back({m01, k[1], m12});
    m.cells.push_back({m02, m12, k[2]});
    m.cells.push_back({m01, m12, m02});
  }
  detail::recompute_h(m);
  return m;
}

/// Plain-text dump for debugging: one vertex per line, then one cell per line.
inline void write_mesh_text(const Mesh& m, std::ostream& os) {
  os << "dim " << m.dim << " vertices " << m.n_vertices() << " cells " << m.n_cells() << "\n";
  for (int v = 0; v < m.n_vertices(); ++v) {
    os << m.vertices[static_cast<std::size_t>(v)].x;
    if (m.dim == 2) os << " " << m.vertices[static_cast<std::size_t>(v)].y;
    os << (m.boundary_vertex[static_cast<std::size_t>(v)] ? " b" : "") << "\n";
  }
  for (const auto& k : m.cells) {
    os << k[0] << " " << k[1];
    if (m.dim == 2) os << " " << k[2];
    os << "\n";
  }
}

}  // namespace mfglab
