#pragma once

#include "anapred/graph_spatial.hpp"

namespace anapred {

// Training objective weights: image similarity, two structure overlaps and
// the field-smoothness regularizer.
struct LossWeights {
  double w_image = 1.0;
  double w_gtvp = 1.0;
  double w_gtvn = 1.0;
  double lambda = 0.01;
};

struct LossBreakdown {
  double total = 0, ssim = 0, dice_p = 0, dice_n = 0, diffusion = 0;
};

// Structural-similarity constants for images normalized to [-1, 1]
// (data range 2): C1 = (0.01*2)^2, C2 = (0.03*2)^2, Gaussian window 7, s=1.5.
inline constexpr double kSsimC1 = 0.0004;
inline constexpr double kSsimC2 = 0.0036;
inline constexpr int kSsimWindow = 7;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kDiceEps = 1e-5;

namespace detail {

template <typename T>
Mat<T> blur3_apply(const Mat<T>& x, Grid3 grid,
                   const std::vector<T>& kernel) {
  return blur_axis_apply(
      blur_axis_apply(blur_axis_apply(x, grid, 0, kernel), grid, 1, kernel),
      grid, 2, kernel);
}

// Reciprocal of the in-bounds window mass: windows truncated at the border
// are renormalized so constant images keep their exact statistics there.
template <typename T>
Mat<T> window_mass_recip(Grid3 grid, const std::vector<T>& kernel) {
  Mat<T> ones = Mat<T>::Ones(1, grid.count());
  Mat<T> z = blur3_apply(ones, grid, kernel);
  return z.cwiseInverse();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph builders (differentiable)

// Mean local structural similarity between two single-channel images (1 x V),
// as a 1x1 node.
template <typename T>
Var ssim_mean_node(Graph<T>& g, Var a, Var b, Grid3 grid) {
  if (g.val(a).rows() != 1 || g.val(b).rows() != 1 ||
      g.val(a).cols() != grid.count() || g.val(b).cols() != grid.count())
    throw ConfigError("ssim expects single-channel images on the given grid");
  auto kernel = gaussian_kernel<T>(kSsimWindow, kSsimSigma);
  Var recip = g.input(detail::window_mass_recip(grid, *kernel));
  auto wmean = [&](Var x) {
    return g.mul(gaussian_blur3(g, x, grid, kernel), recip);
  };
  Var mu_a = wmean(a);
  Var mu_b = wmean(b);
  Var mu_aa = g.mul(mu_a, mu_a);
  Var mu_bb = g.mul(mu_b, mu_b);
  Var mu_ab = g.mul(mu_a, mu_b);
  Var var_a = g.sub(wmean(g.mul(a, a)), mu_aa);
  Var var_b = g.sub(wmean(g.mul(b, b)), mu_bb);
  Var cov = g.sub(wmean(g.mul(a, b)), mu_ab);

  Var n1 = g.affine(mu_ab, T(2), T(kSsimC1));
  Var n2 = g.affine(cov, T(2), T(kSsimC2));
  Var d1 = g.affine(g.add(mu_aa, mu_bb), T(1), T(kSsimC1));
  Var d2 = g.affine(g.add(var_a, var_b), T(1), T(kSsimC2));
  Var ssim_map = g.div(g.mul(n1, n2), g.mul(d1, d2));
  return g.mean_all(ssim_map);
}

template <typename T>
Var ssim_loss_node(Graph<T>& g, Var a, Var b, Grid3 grid) {
  return g.affine(ssim_mean_node(g, a, b, grid), T(-1), T(1));
}

// 1 - (2*sum(ab) + eps) / (sum(a) + sum(b) + eps) over soft masks in [0,1].
template <typename T>
Var soft_dice_loss_node(Graph<T>& g, Var a, Var b) {
  if (g.val(a).rows() != g.val(b).rows() ||
      g.val(a).cols() != g.val(b).cols())
    throw ConfigError("dice operands must share a shape");
  Var num = g.affine(g.dot_all(a, b), T(2), T(kDiceEps));
  Var den = g.affine(g.add(g.sum_all(a), g.sum_all(b)), T(1), T(kDiceEps));
  return g.affine(g.div(num, den), T(-1), T(1));
}

template <typename T>
struct CompositeLossNodes {
  Var total, ssim, dice_p, dice_n, diffusion;
};

// Full training objective. Baseline image/masks (each 1 x V) are warped by
// phi (3 x V, voxel units) with soft trilinear sampling — masks included, so
// structure overlap stays differentiable — and compared against the targets.
template <typename T>
CompositeLossNodes<T> composite_loss_nodes(Graph<T>& g, Var base_image,
                                           Var base_p, Var base_n,
                                           Var tgt_image, Var tgt_p, Var tgt_n,
                                           Var phi, Grid3 grid,
                                           const LossWeights& w) {
  Var stacked = g.concat_rows({base_image, base_p, base_n});
  Var warped = warp_trilinear(g, stacked, phi, grid);
  Var wi = g.slice_rows(warped, 0, 1);
  Var wp = g.slice_rows(warped, 1, 1);
  Var wn = g.slice_rows(warped, 2, 1);

  CompositeLossNodes<T> out;
  out.ssim = ssim_loss_node(g, wi, tgt_image, grid);
  out.dice_p = soft_dice_loss_node(g, wp, tgt_p);
  out.dice_n = soft_dice_loss_node(g, wn, tgt_n);
  out.diffusion = diffusion_penalty(g, phi, grid);
  out.total = g.add(
      g.add(g.scale(out.ssim, T(w.w_image)), g.scale(out.dice_p, T(w.w_gtvp))),
      g.add(g.scale(out.dice_n, T(w.w_gtvn)),
            g.scale(out.diffusion, T(w.lambda))));
  return out;
}

template <typename T>
LossBreakdown breakdown_of(const Graph<T>& g, const CompositeLossNodes<T>& n) {
  LossBreakdown b;
  b.total = double(g.val(n.total)(0, 0));
  b.ssim = double(g.val(n.ssim)(0, 0));
  b.dice_p = double(g.val(n.dice_p)(0, 0));
  b.dice_n = double(g.val(n.dice_n)(0, 0));
  b.diffusion = double(g.val(n.diffusion)(0, 0));
  return b;
}

// ---------------------------------------------------------------------------
// Plain evaluation (no graph) — shared by the evaluation metrics; same
// formulas and constants as the graph builders above.

inline double ssim_mean_value(const Mat<double>& a, const Mat<double>& b,
                              Grid3 grid) {
  if (a.rows() != 1 || b.rows() != 1 || a.cols() != grid.count() ||
      b.cols() != grid.count())
    throw ConfigError("ssim expects single-channel images on the given grid");
  auto kernel = gaussian_kernel<double>(kSsimWindow, kSsimSigma);
  Mat<double> recip = detail::window_mass_recip(grid, *kernel);
  auto wmean = [&](const Mat<double>& x) {
    return Mat<double>(
        detail::blur3_apply(x, grid, *kernel).cwiseProduct(recip));
  };
  Mat<double> mu_a = wmean(a), mu_b = wmean(b);
  Mat<double> mu_aa = mu_a.cwiseProduct(mu_a);
  Mat<double> mu_bb = mu_b.cwiseProduct(mu_b);
  Mat<double> mu_ab = mu_a.cwiseProduct(mu_b);
  Mat<double> var_a = wmean(Mat<double>(a.cwiseProduct(a))) - mu_aa;
  Mat<double> var_b = wmean(Mat<double>(b.cwiseProduct(b))) - mu_bb;
  Mat<double> cov = wmean(Mat<double>(a.cwiseProduct(b))) - mu_ab;

  Mat<double> num = (2.0 * mu_ab.array() + kSsimC1).matrix().cwiseProduct(
      (2.0 * cov.array() + kSsimC2).matrix());
  Mat<double> den =
      ((mu_aa + mu_bb).array() + kSsimC1)
          .matrix()
          .cwiseProduct(((var_a + var_b).array() + kSsimC2).matrix());
  return num.cwiseQuotient(den).mean();
}

inline double ssim_loss_value(const Mat<double>& a, const Mat<double>& b,
                              Grid3 grid) {
  return 1.0 - ssim_mean_value(a, b, grid);
}

inline double soft_dice_loss_value(const Mat<double>& a,
                                   const Mat<double>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ConfigError("dice operands must share a shape");
  double num = 2.0 * a.cwiseProduct(b).sum() + kDiceEps;
  double den = a.sum() + b.sum() + kDiceEps;
  return 1.0 - num / den;
}

inline double diffusion_loss_value(const Mat<double>& phi, Grid3 grid) {
  Graph<double> g;
  Var p = g.input(phi);
  return g.val(diffusion_penalty(g, p, grid))(0, 0);
}

}  // namespace anapred
