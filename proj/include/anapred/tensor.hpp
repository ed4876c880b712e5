#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "anapred/common.hpp"
#include "anapred/sampling.hpp"

namespace anapred {

// Dense activations are feature-major matrices: rows = feature/channel dim,
// cols = spatial positions (tokens or voxels, x-fastest). Column-major Eigen
// storage keeps each position contiguous.
template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Column index map: dst column j reads src column idx[j]; -1 reads zeros.
using IndexMap = std::vector<std::int64_t>;
using IndexMapPtr = std::shared_ptr<const IndexMap>;

template <typename T>
Mat<T> gather_cols(const Mat<T>& src, const IndexMap& idx) {
  Mat<T> out(src.rows(), Eigen::Index(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] < 0)
      out.col(Eigen::Index(j)).setZero();
    else
      out.col(Eigen::Index(j)) = src.col(idx[j]);
  }
  return out;
}

template <typename T>
void scatter_add_cols(Mat<T>& dst, const Mat<T>& src, const IndexMap& idx) {
  for (std::size_t j = 0; j < idx.size(); ++j)
    if (idx[j] >= 0) dst.col(idx[j]) += src.col(Eigen::Index(j));
}

// Map for a rigid voxel shift by (dx,dy,dz): dst voxel p reads src voxel
// p + d, -1 outside the grid. Shared by the 3x3x3 convolution taps.
inline IndexMapPtr shift_map(Grid3 g, int dx, int dy, int dz) {
  auto map = std::make_shared<IndexMap>(std::size_t(g.count()));
  std::int64_t j = 0;
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x, ++j) {
        int sx = x + dx, sy = y + dy, sz = z + dz;
        bool in = sx >= 0 && sx < g.x && sy >= 0 && sy < g.y && sz >= 0 &&
                  sz < g.z;
        (*map)[std::size_t(j)] = in ? g.flat(sx, sy, sz) : -1;
      }
  return map;
}

// Non-overlapping patch extraction: for patch-local offset (ox,oy,oz), token t
// reads the voxel at token_origin + offset. One map per offset; concatenating
// the gathered blocks row-wise yields flattened patches.
inline IndexMapPtr patch_offset_map(Grid3 vol, Grid3 patch, int ox, int oy,
                                    int oz) {
  Grid3 tokens{vol.x / patch.x, vol.y / patch.y, vol.z / patch.z};
  auto map = std::make_shared<IndexMap>(std::size_t(tokens.count()));
  std::int64_t t = 0;
  for (int z = 0; z < tokens.z; ++z)
    for (int y = 0; y < tokens.y; ++y)
      for (int x = 0; x < tokens.x; ++x, ++t)
        (*map)[std::size_t(t)] =
            vol.flat(x * patch.x + ox, y * patch.y + oy, z * patch.z + oz);
  return map;
}

// Factor-2 merge neighbor map: for neighbor offset (ox,oy,oz) in {0,1}^3,
// merged token t reads source token 2*t + offset, -1 past an odd edge.
inline IndexMapPtr merge_offset_map(Grid3 tokens, int ox, int oy, int oz) {
  Grid3 merged{(tokens.x + 1) / 2, (tokens.y + 1) / 2, (tokens.z + 1) / 2};
  auto map = std::make_shared<IndexMap>(std::size_t(merged.count()));
  std::int64_t t = 0;
  for (int z = 0; z < merged.z; ++z)
    for (int y = 0; y < merged.y; ++y)
      for (int x = 0; x < merged.x; ++x, ++t) {
        int sx = 2 * x + ox, sy = 2 * y + oy, sz = 2 * z + oz;
        bool in = sx < tokens.x && sy < tokens.y && sz < tokens.z;
        (*map)[std::size_t(t)] = in ? tokens.flat(sx, sy, sz) : -1;
      }
  return map;
}

inline Grid3 merged_grid(Grid3 tokens) {
  return {(tokens.x + 1) / 2, (tokens.y + 1) / 2, (tokens.z + 1) / 2};
}

// Window partition for (optionally shifted) windowed attention. The grid is
// conceptually padded with `shift` zero tokens on the low side and up to a
// window multiple on the high side; windows then tile the padded grid. Slot
// order: windows x-fastest over the window grid, tokens x-fastest inside each
// window. Entries of -1 are pad tokens.
struct WindowPlan {
  Grid3 window;
  int n_windows = 0;
  int window_len = 0;      // tokens per window
  IndexMapPtr partition;   // n_windows*window_len slots -> token index or -1
  IndexMapPtr reverse;     // token index -> slot index
};

inline WindowPlan window_partition_plan(Grid3 tokens, Grid3 window,
                                        Grid3 shift) {
  Grid3 wgrid{(tokens.x + shift.x + window.x - 1) / window.x,
              (tokens.y + shift.y + window.y - 1) / window.y,
              (tokens.z + shift.z + window.z - 1) / window.z};
  WindowPlan plan;
  plan.window = window;
  plan.n_windows = int(wgrid.count());
  plan.window_len = int(window.count());

  auto part = std::make_shared<IndexMap>(
      std::size_t(plan.n_windows) * std::size_t(plan.window_len), -1);
  auto rev = std::make_shared<IndexMap>(std::size_t(tokens.count()), -1);

  std::int64_t slot = 0;
  for (int wz = 0; wz < wgrid.z; ++wz)
    for (int wy = 0; wy < wgrid.y; ++wy)
      for (int wx = 0; wx < wgrid.x; ++wx)
        for (int lz = 0; lz < window.z; ++lz)
          for (int ly = 0; ly < window.y; ++ly)
            for (int lx = 0; lx < window.x; ++lx, ++slot) {
              int sx = wx * window.x + lx - shift.x;
              int sy = wy * window.y + ly - shift.y;
              int sz = wz * window.z + lz - shift.z;
              bool in = sx >= 0 && sx < tokens.x && sy >= 0 && sy < tokens.y &&
                        sz >= 0 && sz < tokens.z;
              if (in) {
                std::int64_t t = tokens.flat(sx, sy, sz);
                (*part)[std::size_t(slot)] = t;
                (*rev)[std::size_t(t)] = slot;
              }
            }
  plan.partition = std::move(part);
  plan.reverse = std::move(rev);
  return plan;
}

// Relative position bias lookup: index(i,j) = row of the bias table holding
// the learned bias for key i seen from query j within one window.
inline std::vector<std::int32_t> relative_bias_index(Grid3 window) {
  int n = int(window.count());
  std::vector<std::int32_t> idx(std::size_t(n) * std::size_t(n));
  auto coord = [&](int t, int& x, int& y, int& z) {
    x = t % window.x;
    y = (t / window.x) % window.y;
    z = t / (window.x * window.y);
  };
  int sx = 2 * window.x - 1, sy = 2 * window.y - 1;
  for (int j = 0; j < n; ++j) {
    int jx, jy, jz;
    coord(j, jx, jy, jz);
    for (int i = 0; i < n; ++i) {
      int ix, iy, iz;
      coord(i, ix, iy, iz);
      int rx = ix - jx + window.x - 1;
      int ry = iy - jy + window.y - 1;
      int rz = iz - jz + window.z - 1;
      idx[std::size_t(j) * n + i] = std::int32_t((rz * sy + ry) * sx + rx);
    }
  }
  return idx;
}

inline int relative_bias_rows(Grid3 window) {
  return (2 * window.x - 1) * (2 * window.y - 1) * (2 * window.z - 1);
}

// Separable trilinear resize plan between voxel grids (voxel-center aligned,
// same convention as volume resampling at matched extents).
struct ResizePlan {
  Grid3 in, out;
  std::vector<LinCell<double>> cx, cy, cz;
};

inline ResizePlan resize_plan(Grid3 in, Grid3 out) {
  ResizePlan p;
  p.in = in;
  p.out = out;
  auto axis = [](int n_in, int n_out) {
    auto cells = std::vector<LinCell<double>>(std::size_t(n_out));
    double r = double(n_in) / double(n_out);
    for (int i = 0; i < n_out; ++i)
      cells[std::size_t(i)] = lin_cell((i + 0.5) * r - 0.5, n_in);
    return cells;
  };
  p.cx = axis(in.x, out.x);
  p.cy = axis(in.y, out.y);
  p.cz = axis(in.z, out.z);
  return p;
}

}  // namespace anapred
