#pragma once

#include <memory>
#include <vector>

#include "anapred/graph.hpp"

namespace anapred {

// Spatial ops over feature-major matrices (rows = channels, cols = voxels of
// a Grid3, x-fastest). All are free functions recording onto a Graph.

using ConvMaps = std::vector<IndexMapPtr>;
using ConvMapsPtr = std::shared_ptr<const ConvMaps>;

// The 27 shift maps of a 3x3x3 stencil, tap order x-fastest over
// (dx,dy,dz) in [-1,1]^3. Callers cache these per grid.
inline ConvMapsPtr conv_tap_maps(Grid3 grid) {
  auto maps = std::make_shared<ConvMaps>();
  maps->reserve(27);
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) maps->push_back(shift_map(grid, dx, dy, dz));
  return maps;
}

// 3x3x3 convolution, zero-padded borders. Weight layout: C_out × (27·C_in),
// tap t occupying the column block [t·C_in, (t+1)·C_in). Bias: C_out × 1.
template <typename T>
Var conv3(Graph<T>& g, Var x, Var w, Var bias, ConvMapsPtr maps) {
  const Mat<T>& xv = g.val(x);
  const Mat<T>& wv = g.val(w);
  Eigen::Index cin = xv.rows(), cout = wv.rows();
  Mat<T> y(cout, xv.cols());
  y.colwise() = Vec<T>(g.val(bias).col(0));
  for (int t = 0; t < 27; ++t)
    y.noalias() += wv.middleCols(t * cin, cin) * gather_cols(xv, *(*maps)[t]);

  return g.record(std::move(y), {x, w, bias},
                  [x, w, bias, maps, cin](Graph<T>& gg, const Mat<T>& dy) {
                    const Mat<T>& xv2 = gg.val(x);
                    const Mat<T>& wv2 = gg.val(w);
                    gg.acc(bias, dy.rowwise().sum());
                    for (int t = 0; t < 27; ++t) {
                      const IndexMap& m = *(*maps)[t];
                      if (gg.needs_grad(w))
                        gg.grad_ref(w).middleCols(t * cin, cin).noalias() +=
                            dy * gather_cols(xv2, m).transpose();
                      if (gg.needs_grad(x)) {
                        Mat<T> dxt = wv2.middleCols(t * cin, cin).transpose() * dy;
                        scatter_add_cols(gg.grad_ref(x), dxt, m);
                      }
                    }
                  });
}

// Trilinear resize between voxel grids (voxel-center alignment).
template <typename T>
Var resize_trilinear(Graph<T>& g, Var x, std::shared_ptr<const ResizePlan> plan) {
  const Mat<T>& xv = g.val(x);
  const Grid3 in = plan->in, out = plan->out;
  Mat<T> y = Mat<T>::Zero(xv.rows(), out.count());
  for (int z = 0; z < out.z; ++z) {
    auto cz = plan->cz[std::size_t(z)];
    for (int yy = 0; yy < out.y; ++yy) {
      auto cy = plan->cy[std::size_t(yy)];
      for (int xx = 0; xx < out.x; ++xx) {
        auto cx = plan->cx[std::size_t(xx)];
        auto o = out.flat(xx, yy, z);
        for (int bz = 0; bz < 2; ++bz)
          for (int by = 0; by < 2; ++by)
            for (int bx = 0; bx < 2; ++bx) {
              T wt = T((bx ? cx.w : 1 - cx.w) * (by ? cy.w : 1 - cy.w) *
                       (bz ? cz.w : 1 - cz.w));
              if (wt == T(0)) continue;
              y.col(o) += wt * xv.col(in.flat(bx ? cx.i1 : cx.i0,
                                              by ? cy.i1 : cy.i0,
                                              bz ? cz.i1 : cz.i0));
            }
      }
    }
  }
  return g.record(std::move(y), {x}, [x, plan](Graph<T>& gg, const Mat<T>& dy) {
    if (!gg.needs_grad(x)) return;
    Mat<T>& dx = gg.grad_ref(x);
    const Grid3 in2 = plan->in, out2 = plan->out;
    for (int z = 0; z < out2.z; ++z) {
      auto cz = plan->cz[std::size_t(z)];
      for (int yy = 0; yy < out2.y; ++yy) {
        auto cy = plan->cy[std::size_t(yy)];
        for (int xx = 0; xx < out2.x; ++xx) {
          auto cx = plan->cx[std::size_t(xx)];
          auto o = out2.flat(xx, yy, z);
          for (int bz = 0; bz < 2; ++bz)
            for (int by = 0; by < 2; ++by)
              for (int bx = 0; bx < 2; ++bx) {
                T wt = T((bx ? cx.w : 1 - cx.w) * (by ? cy.w : 1 - cy.w) *
                         (bz ? cz.w : 1 - cz.w));
                if (wt == T(0)) continue;
                dx.col(in2.flat(bx ? cx.i1 : cx.i0, by ? cy.i1 : cy.i0,
                                bz ? cz.i1 : cz.i0)) += wt * dy.col(o);
              }
        }
      }
    }
  });
}

// Block-mean pooling by integer factors; grid must divide evenly.
template <typename T>
Var avg_pool(Graph<T>& g, Var x, Grid3 grid, Grid3 factors) {
  if (grid.x % factors.x || grid.y % factors.y || grid.z % factors.z)
    throw std::runtime_error("avg_pool: grid " + grid.str() +
                             " not divisible by factors " + factors.str());
  Grid3 out{grid.x / factors.x, grid.y / factors.y, grid.z / factors.z};
  const Mat<T>& xv = g.val(x);
  T inv = T(1) / T(factors.count());
  Mat<T> y = Mat<T>::Zero(xv.rows(), out.count());
  for (int z = 0; z < out.z; ++z)
    for (int yy = 0; yy < out.y; ++yy)
      for (int xx = 0; xx < out.x; ++xx) {
        auto o = out.flat(xx, yy, z);
        for (int fz = 0; fz < factors.z; ++fz)
          for (int fy = 0; fy < factors.y; ++fy)
            for (int fx = 0; fx < factors.x; ++fx)
              y.col(o) += xv.col(grid.flat(xx * factors.x + fx,
                                           yy * factors.y + fy,
                                           z * factors.z + fz));
        y.col(o) *= inv;
      }
  return g.record(std::move(y), {x},
                  [x, grid, factors, out, inv](Graph<T>& gg, const Mat<T>& dy) {
                    if (!gg.needs_grad(x)) return;
                    Mat<T>& dx = gg.grad_ref(x);
                    for (int z = 0; z < out.z; ++z)
                      for (int yy = 0; yy < out.y; ++yy)
                        for (int xx = 0; xx < out.x; ++xx) {
                          auto o = out.flat(xx, yy, z);
                          for (int fz = 0; fz < factors.z; ++fz)
                            for (int fy = 0; fy < factors.y; ++fy)
                              for (int fx = 0; fx < factors.x; ++fx)
                                dx.col(grid.flat(xx * factors.x + fx,
                                                 yy * factors.y + fy,
                                                 z * factors.z + fz)) +=
                                    inv * dy.col(o);
                        }
                  });
}

// 1D convolution along one grid axis with a symmetric kernel, zero padding.
// Self-adjoint for symmetric kernels, which backward exploits.
template <typename T>
Mat<T> blur_axis_apply(const Mat<T>& x, Grid3 grid, int axis,
                       const std::vector<T>& kernel) {
  int n[3] = {grid.x, grid.y, grid.z};
  std::int64_t stride[3] = {1, grid.x, std::int64_t(grid.x) * grid.y};
  int len = n[axis];
  int c = int(kernel.size()) / 2;
  Mat<T> y = Mat<T>::Zero(x.rows(), x.cols());
  for (int z = 0; z < grid.z; ++z)
    for (int yy = 0; yy < grid.y; ++yy)
      for (int xx = 0; xx < grid.x; ++xx) {
        int coord[3] = {xx, yy, z};
        std::int64_t o = grid.flat(xx, yy, z);
        int a = coord[axis];
        for (int j = 0; j < int(kernel.size()); ++j) {
          int s = a + j - c;
          if (s < 0 || s >= len) continue;
          y.col(o) += kernel[std::size_t(j)] * x.col(o + (s - a) * stride[axis]);
        }
      }
  return y;
}

template <typename T>
Var blur_axis(Graph<T>& g, Var x, Grid3 grid, int axis,
              std::shared_ptr<const std::vector<T>> kernel) {
  return g.record(blur_axis_apply(g.val(x), grid, axis, *kernel), {x},
                  [x, grid, axis, kernel](Graph<T>& gg, const Mat<T>& dy) {
                    gg.acc(x, blur_axis_apply(dy, grid, axis, *kernel));
                  });
}

template <typename T>
std::shared_ptr<const std::vector<T>> gaussian_kernel(int size, double sigma) {
  auto k = std::make_shared<std::vector<T>>(std::size_t(size));
  int c = size / 2;
  double sum = 0;
  for (int i = 0; i < size; ++i) {
    double v = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    (*k)[std::size_t(i)] = T(v);
    sum += v;
  }
  for (auto& v : *k) v = T(double(v) / sum);
  return k;
}

template <typename T>
Var gaussian_blur3(Graph<T>& g, Var x, Grid3 grid,
                   std::shared_ptr<const std::vector<T>> kernel) {
  Var a = blur_axis(g, x, grid, 0, kernel);
  Var b = blur_axis(g, a, grid, 1, kernel);
  return blur_axis(g, b, grid, 2, kernel);
}

// Differentiable pull-warp: out(p) = img(p + phi(p)), trilinear with border
// clamp. phi is 3 × V in voxel units (rows dx,dy,dz); img is C × V.
template <typename T>
Var warp_trilinear(Graph<T>& g, Var img, Var phi, Grid3 grid) {
  const Mat<T>& iv = g.val(img);
  const Mat<T>& pv = g.val(phi);
  Mat<T> y(iv.rows(), iv.cols());
  for (int z = 0; z < grid.z; ++z)
    for (int yy = 0; yy < grid.y; ++yy)
      for (int xx = 0; xx < grid.x; ++xx) {
        auto o = grid.flat(xx, yy, z);
        auto cx = lin_cell(T(xx) + pv(0, o), grid.x);
        auto cy = lin_cell(T(yy) + pv(1, o), grid.y);
        auto cz = lin_cell(T(z) + pv(2, o), grid.z);
        y.col(o) =
            ((iv.col(grid.flat(cx.i0, cy.i0, cz.i0)) * (1 - cx.w) +
              iv.col(grid.flat(cx.i1, cy.i0, cz.i0)) * cx.w) * (1 - cy.w) +
             (iv.col(grid.flat(cx.i0, cy.i1, cz.i0)) * (1 - cx.w) +
              iv.col(grid.flat(cx.i1, cy.i1, cz.i0)) * cx.w) * cy.w) * (1 - cz.w) +
            ((iv.col(grid.flat(cx.i0, cy.i0, cz.i1)) * (1 - cx.w) +
              iv.col(grid.flat(cx.i1, cy.i0, cz.i1)) * cx.w) * (1 - cy.w) +
             (iv.col(grid.flat(cx.i0, cy.i1, cz.i1)) * (1 - cx.w) +
              iv.col(grid.flat(cx.i1, cy.i1, cz.i1)) * cx.w) * cy.w) * cz.w;
      }

  return g.record(std::move(y), {img, phi},
                  [img, phi, grid](Graph<T>& gg, const Mat<T>& dy) {
    const Mat<T>& iv2 = gg.val(img);
    const Mat<T>& pv2 = gg.val(phi);
    bool gi = gg.needs_grad(img), gp = gg.needs_grad(phi);
    for (int z = 0; z < grid.z; ++z)
      for (int yy = 0; yy < grid.y; ++yy)
        for (int xx = 0; xx < grid.x; ++xx) {
          auto o = grid.flat(xx, yy, z);
          T ux = T(xx) + pv2(0, o), uy = T(yy) + pv2(1, o), uz = T(z) + pv2(2, o);
          auto cx = lin_cell(ux, grid.x);
          auto cy = lin_cell(uy, grid.y);
          auto cz = lin_cell(uz, grid.z);
          std::int64_t f[8] = {
              grid.flat(cx.i0, cy.i0, cz.i0), grid.flat(cx.i1, cy.i0, cz.i0),
              grid.flat(cx.i0, cy.i1, cz.i0), grid.flat(cx.i1, cy.i1, cz.i0),
              grid.flat(cx.i0, cy.i0, cz.i1), grid.flat(cx.i1, cy.i0, cz.i1),
              grid.flat(cx.i0, cy.i1, cz.i1), grid.flat(cx.i1, cy.i1, cz.i1)};
          T wxs[2] = {1 - cx.w, cx.w}, wys[2] = {1 - cy.w, cy.w},
            wzs[2] = {1 - cz.w, cz.w};
          if (gi) {
            Mat<T>& di = gg.grad_ref(img);
            for (int b = 0; b < 8; ++b)
              di.col(f[b]) +=
                  wxs[b & 1] * wys[(b >> 1) & 1] * wzs[b >> 2] * dy.col(o);
          }
          if (gp) {
            // Zero slope where the sample coordinate is clamped.
            bool inx = ux > T(0) && ux < T(grid.x - 1) && grid.x > 1;
            bool iny = uy > T(0) && uy < T(grid.y - 1) && grid.y > 1;
            bool inz = uz > T(0) && uz < T(grid.z - 1) && grid.z > 1;
            T gx = 0, gy = 0, gz = 0;
            for (int b = 0; b < 8; ++b) {
              T d = dy.col(o).dot(iv2.col(f[b]));
              T sx = (b & 1) ? T(1) : T(-1);
              T sy = ((b >> 1) & 1) ? T(1) : T(-1);
              T sz = (b >> 2) ? T(1) : T(-1);
              if (inx) gx += d * sx * wys[(b >> 1) & 1] * wzs[b >> 2];
              if (iny) gy += d * sy * wxs[b & 1] * wzs[b >> 2];
              if (inz) gz += d * sz * wxs[b & 1] * wys[(b >> 1) & 1];
            }
            Mat<T>& dp = gg.grad_ref(phi);
            dp(0, o) += gx;
            dp(1, o) += gy;
            dp(2, o) += gz;
          }
        }
  });
}

// Mean squared forward difference of a 3-channel field over all axes; the
// mean is over every existing difference term (3 channels × in-range faces).
template <typename T>
Var diffusion_penalty(Graph<T>& g, Var phi, Grid3 grid) {
  const Mat<T>& pv = g.val(phi);
  std::int64_t faces = std::int64_t(grid.x - 1) * grid.y * grid.z +
                       std::int64_t(grid.x) * (grid.y - 1) * grid.z +
                       std::int64_t(grid.x) * grid.y * (grid.z - 1);
  std::int64_t terms = 3 * faces;
  if (terms == 0) {
    return g.record(Mat<T>::Zero(1, 1), {phi}, [](Graph<T>&, const Mat<T>&) {});
  }
  std::int64_t strides[3] = {1, grid.x, std::int64_t(grid.x) * grid.y};
  int dims[3] = {grid.x, grid.y, grid.z};

  T total = 0;
  for (int axis = 0; axis < 3; ++axis) {
    for (int z = 0; z < grid.z; ++z)
      for (int yy = 0; yy < grid.y; ++yy)
        for (int xx = 0; xx < grid.x; ++xx) {
          int coord[3] = {xx, yy, z};
          if (coord[axis] + 1 >= dims[axis]) continue;
          auto o = grid.flat(xx, yy, z);
          total += (pv.col(o + strides[axis]) - pv.col(o)).squaredNorm();
        }
  }
  Mat<T> out(1, 1);
  out(0, 0) = total / T(terms);

  return g.record(std::move(out), {phi},
                  [phi, grid, terms](Graph<T>& gg, const Mat<T>& dy) {
    if (!gg.needs_grad(phi)) return;
    const Mat<T>& pv2 = gg.val(phi);
    Mat<T>& dp = gg.grad_ref(phi);
    T s = dy(0, 0) * T(2) / T(terms);
    std::int64_t strides[3] = {1, grid.x, std::int64_t(grid.x) * grid.y};
    int dims[3] = {grid.x, grid.y, grid.z};
    for (int axis = 0; axis < 3; ++axis) {
      for (int z = 0; z < grid.z; ++z)
        for (int yy = 0; yy < grid.y; ++yy)
          for (int xx = 0; xx < grid.x; ++xx) {
            int coord[3] = {xx, yy, z};
            if (coord[axis] + 1 >= dims[axis]) continue;
            auto o = grid.flat(xx, yy, z);
            Vec<T> d = s * (pv2.col(o + strides[axis]) - pv2.col(o));
            dp.col(o + strides[axis]) += d;
            dp.col(o) -= d;
          }
    }
  });
}

// Windowed multi-head self-attention core. q/k/v: (heads·dh) × (n_win·wl),
// columns laid out window-major (the output of a window-partition gather).
// bias_table: rows = relative-offset bins, cols = heads. rel_idx[j*wl+i] is
// the table row for key i seen from query j. key_pad flags pad slots, which
// receive no attention weight.
template <typename T>
Var window_attention(Graph<T>& g, Var q, Var k, Var v, Var bias_table,
                     std::shared_ptr<const std::vector<std::int32_t>> rel_idx,
                     std::shared_ptr<const std::vector<std::uint8_t>> key_pad,
                     int n_windows, int wl, int heads) {
  const Mat<T>& qv = g.val(q);
  Eigen::Index dim = qv.rows();
  Eigen::Index dh = dim / heads;
  T scl = T(1) / std::sqrt(T(dh));

  auto probs = std::make_shared<std::vector<Mat<T>>>();
  probs->reserve(std::size_t(n_windows) * heads);
  Mat<T> y(dim, qv.cols());

  const Mat<T>& kv = g.val(k);
  const Mat<T>& vv = g.val(v);
  const Mat<T>& bt = g.val(bias_table);
  for (int wdx = 0; wdx < n_windows; ++wdx) {
    for (int h = 0; h < heads; ++h) {
      auto Q = qv.block(h * dh, wdx * wl, dh, wl);
      auto K = kv.block(h * dh, wdx * wl, dh, wl);
      auto V = vv.block(h * dh, wdx * wl, dh, wl);
      Mat<T> S = (K.transpose() * Q) * scl;  // S(i,j): key i, query j
      for (int j = 0; j < wl; ++j)
        for (int i = 0; i < wl; ++i)
          S(i, j) += bt((*rel_idx)[std::size_t(j) * wl + i], h);
      for (int i = 0; i < wl; ++i)
        if ((*key_pad)[std::size_t(wdx) * wl + i]) S.row(i).array() += T(-1e9);
      // column-wise softmax
      for (int j = 0; j < wl; ++j) {
        auto c = S.col(j);
        T m = c.maxCoeff();
        c = (c.array() - m).exp();
        c /= c.sum();
      }
      y.block(h * dh, wdx * wl, dh, wl).noalias() = V * S;
      probs->push_back(std::move(S));
    }
  }

  return g.record(std::move(y), {q, k, v, bias_table},
                  [q, k, v, bias_table, probs, rel_idx, n_windows, wl, heads,
                   dh, scl](Graph<T>& gg, const Mat<T>& dy) {
    const Mat<T>& qv2 = gg.val(q);
    const Mat<T>& kv2 = gg.val(k);
    const Mat<T>& vv2 = gg.val(v);
    for (int wdx = 0; wdx < n_windows; ++wdx) {
      for (int h = 0; h < heads; ++h) {
        const Mat<T>& A = (*probs)[std::size_t(wdx) * heads + h];
        auto Q = qv2.block(h * dh, wdx * wl, dh, wl);
        auto K = kv2.block(h * dh, wdx * wl, dh, wl);
        auto V = vv2.block(h * dh, wdx * wl, dh, wl);
        auto dout = dy.block(h * dh, wdx * wl, dh, wl);

        if (gg.needs_grad(v))
          gg.grad_ref(v).block(h * dh, wdx * wl, dh, wl).noalias() +=
              dout * A.transpose();

        Mat<T> dA = V.transpose() * dout;
        // softmax backward per column
        Mat<T> dS(wl, wl);
        for (int j = 0; j < wl; ++j) {
          T inner = A.col(j).dot(dA.col(j));
          dS.col(j) = (A.col(j).array() * (dA.col(j).array() - inner)).matrix();
        }
        if (gg.needs_grad(bias_table)) {
          Mat<T>& dbt = gg.grad_ref(bias_table);
          for (int j = 0; j < wl; ++j)
            for (int i = 0; i < wl; ++i)
              dbt((*rel_idx)[std::size_t(j) * wl + i], h) += dS(i, j);
        }
        if (gg.needs_grad(q))
          gg.grad_ref(q).block(h * dh, wdx * wl, dh, wl).noalias() +=
              scl * (K * dS);
        if (gg.needs_grad(k))
          gg.grad_ref(k).block(h * dh, wdx * wl, dh, wl).noalias() +=
              scl * (Q * dS.transpose());
      }
    }
  });
}

// Plain (no-graph) warps for inference outputs. Both share conventions with
// the differentiable warp: pull sampling, voxel-unit displacements, border
// clamp.

// Trilinear, evaluated through a throwaway graph so results match the
// training-time warp bit for bit.
template <typename T>
Mat<T> warp_trilinear_value(const Mat<T>& img, const Mat<T>& phi, Grid3 grid) {
  Graph<T> g;
  Var i = g.input(img);
  Var p = g.input(phi);
  return g.val(warp_trilinear(g, i, p, grid));
}

// Nearest neighbor: per-axis round with half-ties toward +infinity, so masks
// stay binary and the tie rule is platform-independent.
template <typename T>
Mat<T> warp_nearest_value(const Mat<T>& img, const Mat<T>& phi, Grid3 grid) {
  if (img.cols() != grid.count() || phi.rows() != 3 ||
      phi.cols() != grid.count())
    throw ConfigError("warp operands do not match the grid");
  Mat<T> out(img.rows(), img.cols());
  auto snap = [](double pos, int n) {
    return int(std::clamp<std::int64_t>(
        std::int64_t(std::floor(pos + 0.5)), 0, n - 1));
  };
  for (int z = 0; z < grid.z; ++z)
    for (int y = 0; y < grid.y; ++y)
      for (int x = 0; x < grid.x; ++x) {
        std::int64_t o = grid.flat(x, y, z);
        int xi = snap(x + double(phi(0, o)), grid.x);
        int yi = snap(y + double(phi(1, o)), grid.y);
        int zi = snap(z + double(phi(2, o)), grid.z);
        out.col(o) = img.col(grid.flat(xi, yi, zi));
      }
  return out;
}

}  // namespace anapred
