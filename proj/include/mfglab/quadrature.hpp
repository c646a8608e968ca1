#pragma once

#include <array>
#include <cmath>

#include "mfglab/mesh.hpp"

namespace mfglab {

/// Quadrature rule mapped onto one cell. Points carry their barycentric
/// coordinates so P1 basis values come for free.
struct CellQuadrature {
  int n = 0;
  std::array<Vec2, 6> points{};
  std::array<double, 6> weights{};               // include the cell measure
  std::array<std::array<double, 3>, 6> bary{};   // P1 basis values at the points
};

namespace detail {

struct RefRule {
  int n;
  std::array<std::array<double, 3>, 6> bary;
  std::array<double, 6> weights;  // sum to 1
};

// 3-point Gauss-Legendre on a segment, exact through degree 5.
inline const RefRule& gauss3_1d() {
  static const RefRule r = [] {
    RefRule q{};
    q.n = 3;
    const double s = std::sqrt(0.6);
    const double a = 0.5 * (1.0 - s), b = 0.5, c = 0.5 * (1.0 + s);
    q.bary = {{{1 - a, a, 0}, {1 - b, b, 0}, {1 - c, c, 0}, {}, {}, {}}};
    q.weights = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0, 0, 0, 0};
    return q;
  }();
  return r;
}

// 5-point Gauss-Legendre, exact through degree 9.
inline const RefRule& gauss5_1d() {
  static const RefRule r = [] {
    RefRule q{};
    q.n = 5;
    const double s1 = std::sqrt(5.0 - 2.0 * std::sqrt(10.0 / 7.0)) / 3.0;
    const double s2 = std::sqrt(5.0 + 2.0 * std::sqrt(10.0 / 7.0)) / 3.0;
    const double w0 = 128.0 / 225.0;
    const double w1 = (322.0 + 13.0 * std::sqrt(70.0)) / 900.0;
    const double w2 = (322.0 - 13.0 * std::sqrt(70.0)) / 900.0;
    const std::array<double, 5> xi = {-s2, -s1, 0.0, s1, s2};
    const std::array<double, 5> wi = {w2, w1, w0, w1, w2};
    for (int i = 0; i < 5; ++i) {
      const double t = 0.5 * (1.0 + xi[static_cast<std::size_t>(i)]);
      q.bary[static_cast<std::size_t>(i)] = {1.0 - t, t, 0.0};
      q.weights[static_cast<std::size_t>(i)] = 0.5 * wi[static_cast<std::size_t>(i)];
    }
    return q;
  }();
  return r;
}

// Edge-midpoint rule on a triangle, exact through degree 2.
inline const RefRule& midedge_2d() {
  static const RefRule r = [] {
    RefRule q{};
    q.n = 3;
    q.bary = {{{0.5, 0.5, 0}, {0, 0.5, 0.5}, {0.5, 0, 0.5}, {}, {}, {}}};
    q.weights = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0, 0, 0};
    return q;
  }();
  return r;
}

// 6-point rule on a triangle, exact through degree 4.
inline const RefRule& sixpoint_2d() {
  static const RefRule r = [] {
    RefRule q{};
    q.n = 6;
    const double a1 = 0.445948490915965, w1 = 0.223381589678011;
    const double a2 = 0.091576213509771, w2 = 0.109951743655322;
    int i = 0;
    for (const auto& [a, w] : {std::pair{a1, w1}, std::pair{a2, w2}}) {
      q.bary[static_cast<std::size_t>(i)] = {1 - 2 * a, a, a};
      q.bary[static_cast<std::size_t>(i + 1)] = {a, 1 - 2 * a, a};
      q.bary[static_cast<std::size_t>(i + 2)] = {a, a, 1 - 2 * a};
      q.weights[static_cast<std::size_t>(i)] = w;
      q.weights[static_cast<std::size_t>(i + 1)] = w;
      q.weights[static_cast<std::size_t>(i + 2)] = w;
      i += 3;
    }
    return q;
  }();
  return r;
}

inline const RefRule& rule_for(int dim, int degree) {
  if (dim == 1) return degree <= 5 ? gauss3_1d() : gauss5_1d();
  return degree <= 2 ? midedge_2d() : sixpoint_2d();
}

}  // namespace detail

/// Rule on cell c exact for polynomials of the requested degree (at least 2).
inline CellQuadrature cell_quadrature(const Mesh& mesh, int c, int degree = 2) {
  const auto& ref = detail::rule_for(mesh.dim, degree);
  const auto& k = mesh.cells[static_cast<std::size_t>(c)];
  const double meas = mesh.cell_measure(c);
  CellQuadrature q;
  q.n = ref.n;
  for (int i = 0; i < ref.n; ++i) {
    const auto& lam = ref.bary[static_cast<std::size_t>(i)];
    Vec2 p = lam[0] * mesh.vertices[static_cast<std::size_t>(k[0])] +
             lam[1] * mesh.vertices[static_cast<std::size_t>(k[1])];
    if (mesh.dim == 2) p = p + lam[2] * mesh.vertices[static_cast<std::size_t>(k[2])];
    q.points[static_cast<std::size_t>(i)] = p;
    q.bary[static_cast<std::size_t>(i)] = lam;
    q.weights[static_cast<std::size_t>(i)] = ref.weights[static_cast<std::size_t>(i)] * meas;
  }
  return q;
}

}  // namespace mfglab
