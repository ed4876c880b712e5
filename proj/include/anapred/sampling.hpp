#pragma once

#include <algorithm>
#include <cmath>

#include "anapred/common.hpp"

namespace anapred {

// One set of interpolation conventions for every consumer (volume resample,
// augmentation, spatial warps, the differentiable warp op):
//   - pull sampling with clamp-to-border coordinates,
//   - trilinear cells pick the lower cell at exact integer coordinates,
//   - nearest rounds half toward +inf per axis.

template <typename T>
struct LinCell {
  int i0, i1;
  T w;  // weight of i1
};

template <typename T>
inline LinCell<T> lin_cell(T u, int n) {
  if (n == 1) return {0, 0, T(0)};
  u = std::clamp(u, T(0), T(n - 1));
  int i0 = int(std::ceil(u)) - 1;
  i0 = std::clamp(i0, 0, n - 2);
  return {i0, i0 + 1, u - T(i0)};
}

inline int nearest_index(double u, int n) {
  return std::clamp(int(std::floor(u + 0.5)), 0, n - 1);
}

template <typename T, typename F>
inline T sample_trilinear(const F* p, Grid3 g, T ux, T uy, T uz) {
  auto cx = lin_cell(ux, g.x);
  auto cy = lin_cell(uy, g.y);
  auto cz = lin_cell(uz, g.z);
  auto v = [&](int ix, int iy, int iz) { return T(p[g.flat(ix, iy, iz)]); };
  T c00 = v(cx.i0, cy.i0, cz.i0) * (1 - cx.w) + v(cx.i1, cy.i0, cz.i0) * cx.w;
  T c10 = v(cx.i0, cy.i1, cz.i0) * (1 - cx.w) + v(cx.i1, cy.i1, cz.i0) * cx.w;
  T c01 = v(cx.i0, cy.i0, cz.i1) * (1 - cx.w) + v(cx.i1, cy.i0, cz.i1) * cx.w;
  T c11 = v(cx.i0, cy.i1, cz.i1) * (1 - cx.w) + v(cx.i1, cy.i1, cz.i1) * cx.w;
  T c0 = c00 * (1 - cy.w) + c10 * cy.w;
  T c1 = c01 * (1 - cy.w) + c11 * cy.w;
  return c0 * (1 - cz.w) + c1 * cz.w;
}

template <typename F>
inline F sample_nearest(const F* p, Grid3 g, double ux, double uy, double uz) {
  return p[g.flat(nearest_index(ux, g.x), nearest_index(uy, g.y),
                  nearest_index(uz, g.z))];
}

}  // namespace anapred
