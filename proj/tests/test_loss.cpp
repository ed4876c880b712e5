#include <doctest.h>

#include "anapred/loss.hpp"
#include "fd_check.hpp"

using namespace anapred;

namespace {

Mat<double> random_image(Grid3 g, std::uint64_t seed, double lo = -1,
                         double hi = 1) {
  Rng rng(seed);
  Mat<double> m(1, g.count());
  for (Eigen::Index i = 0; i < m.cols(); ++i)
    m(0, i) = rng.uniform(lo, hi);
  return m;
}

// Independent windowed-statistics oracle: direct per-voxel loop over the
// 7x7x7 separable Gaussian window, truncated at borders and renormalized.
double ssim_oracle(const Mat<double>& a, const Mat<double>& b, Grid3 g) {
  const int half = kSsimWindow / 2;
  std::vector<double> w1(kSsimWindow);
  double wsum1 = 0;
  for (int i = 0; i < kSsimWindow; ++i) {
    w1[std::size_t(i)] =
        std::exp(-0.5 * (i - half) * (i - half) / (kSsimSigma * kSsimSigma));
    wsum1 += w1[std::size_t(i)];
  }
  for (auto& v : w1) v /= wsum1;

  double acc = 0;
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x) {
        double wsum = 0, sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (int dz = -half; dz <= half; ++dz)
          for (int dy = -half; dy <= half; ++dy)
            for (int dx = -half; dx <= half; ++dx) {
              int px = x + dx, py = y + dy, pz = z + dz;
              if (px < 0 || px >= g.x || py < 0 || py >= g.y || pz < 0 ||
                  pz >= g.z)
                continue;
              double w = w1[std::size_t(dx + half)] *
                         w1[std::size_t(dy + half)] *
                         w1[std::size_t(dz + half)];
              double va = a(0, g.flat(px, py, pz));
              double vb = b(0, g.flat(px, py, pz));
              wsum += w;
              sa += w * va;
              sb += w * vb;
              saa += w * va * va;
              sbb += w * vb * vb;
              sab += w * va * vb;
            }
        double mu_a = sa / wsum, mu_b = sb / wsum;
        double var_a = saa / wsum - mu_a * mu_a;
        double var_b = sbb / wsum - mu_b * mu_b;
        double cov = sab / wsum - mu_a * mu_b;
        acc += ((2 * mu_a * mu_b + kSsimC1) * (2 * cov + kSsimC2)) /
               ((mu_a * mu_a + mu_b * mu_b + kSsimC1) *
                (var_a + var_b + kSsimC2));
      }
  return acc / double(g.count());
}

}  // namespace

TEST_CASE("identical images have zero dissimilarity") {
  for (Grid3 g : {Grid3{9, 8, 7}, Grid3{3, 3, 3}, Grid3{1, 1, 1}}) {
    Mat<double> a = random_image(g, 501);
    CHECK(std::abs(ssim_loss_value(a, a, g)) < 1e-12);
  }
}

TEST_CASE("constant images reproduce the closed-form similarity") {
  Grid3 g{10, 9, 8};
  Mat<double> a = Mat<double>::Zero(1, g.count());
  Mat<double> b = Mat<double>::Constant(1, g.count(), 0.5);
  double loss = ssim_loss_value(a, b, g);
  double closed = 1.0 - kSsimC1 / (0.25 + kSsimC1);
  CHECK(std::abs(loss - closed) < 1e-12);
  CHECK(loss == doctest::Approx(0.998403).epsilon(1e-5));
}

TEST_CASE("windowed similarity matches the brute-force oracle") {
  Rng shapes(601);
  for (int t = 0; t < 25; ++t) {
    Grid3 g{int(shapes.uniform_int(1, 12)), int(shapes.uniform_int(1, 12)),
            int(shapes.uniform_int(1, 12))};
    Mat<double> a = random_image(g, 700 + std::uint64_t(t));
    Mat<double> b = random_image(g, 800 + std::uint64_t(t));
    double mine = ssim_mean_value(a, b, g);
    double ref = ssim_oracle(a, b, g);
    CHECK(std::abs(mine - ref) < 1e-5);
  }
}

TEST_CASE("similarity is symmetric in its arguments") {
  Grid3 g{11, 7, 5};
  Mat<double> a = random_image(g, 901);
  Mat<double> b = random_image(g, 902);
  CHECK(std::abs(ssim_loss_value(a, b, g) - ssim_loss_value(b, a, g)) < 1e-9);
}

TEST_CASE("graph and plain similarity agree") {
  Grid3 gr{8, 6, 5};
  Mat<double> a = random_image(gr, 911);
  Mat<double> b = random_image(gr, 912);
  Graph<double> g;
  double node = g.val(ssim_mean_node(g, g.input(a), g.input(b), gr))(0, 0);
  CHECK(std::abs(node - ssim_mean_value(a, b, gr)) < 1e-14);
}

TEST_CASE("overlap loss counts soft mask agreement") {
  Grid3 g{4, 4, 2};
  Mat<double> a = Mat<double>::Zero(1, g.count());
  Mat<double> b = Mat<double>::Zero(1, g.count());
  for (int i = 0; i < 8; ++i) a(0, i) = 1;            // voxels 0..7
  for (int i = 4; i < 12; ++i) b(0, i) = 1;           // overlap 4
  CHECK(soft_dice_loss_value(a, a) == 0.0);           // identical: exact zero
  CHECK(soft_dice_loss_value(a, b) ==
        doctest::Approx(0.5).epsilon(1e-5));          // 1 - 8/16
  Mat<double> c = Mat<double>::Zero(1, g.count());
  for (int i = 12; i < 20; ++i) c(0, i) = 1;          // disjoint from a
  CHECK(soft_dice_loss_value(a, c) > 0.999);
  Mat<double> empty = Mat<double>::Zero(1, g.count());
  CHECK(soft_dice_loss_value(empty, empty) == 0.0);   // both absent: no loss
  CHECK_THROWS_AS(
      soft_dice_loss_value(a, Mat<double>::Zero(1, 3)), ConfigError);
}

TEST_CASE("field smoothness penalty: plain evaluation") {
  Grid3 g{6, 6, 6};
  Mat<double> ramp = Mat<double>::Zero(3, g.count());
  for (int z = 0; z < g.z; ++z)
    for (int y = 0; y < g.y; ++y)
      for (int x = 0; x < g.x; ++x) ramp(0, g.flat(x, y, z)) = x;
  CHECK(diffusion_loss_value(ramp, g) == doctest::Approx(1.0 / 9).epsilon(1e-12));
  CHECK(diffusion_loss_value(Mat<double>::Zero(3, g.count()), g) == 0.0);
  Mat<double> rnd(3, g.count());
  {
    Rng rng(921);
    for (Eigen::Index c = 0; c < rnd.cols(); ++c)
      for (int r = 0; r < 3; ++r) rnd(r, c) = rng.normal();
  }
  double l1 = diffusion_loss_value(rnd, g);
  double l3 = diffusion_loss_value(Mat<double>(3.0 * rnd), g);
  CHECK(std::abs(l3 - 9.0 * l1) < 1e-9 * std::max(1.0, l3));
}

TEST_CASE("composite breakdown sums to the total") {
  Grid3 gr{7, 6, 5};
  Mat<double> img = random_image(gr, 931);
  Mat<double> tgt = random_image(gr, 932);
  Mat<double> p0 = random_image(gr, 933, 0, 1);
  Mat<double> p1 = random_image(gr, 934, 0, 1);
  Mat<double> n0 = random_image(gr, 935, 0, 1);
  Mat<double> n1 = random_image(gr, 936, 0, 1);
  Mat<double> phi(3, gr.count());
  {
    Rng rng(937);
    for (Eigen::Index c = 0; c < phi.cols(); ++c)
      for (int r = 0; r < 3; ++r) phi(r, c) = rng.uniform(-0.4, 0.4);
  }
  LossWeights w;  // paper configuration: 1.0 / 1.0 / 1.0 / 0.01
  Graph<double> g;
  auto nodes = composite_loss_nodes(g, g.input(img), g.input(p0), g.input(n0),
                                    g.input(tgt), g.input(p1), g.input(n1),
                                    g.input(phi), gr, w);
  LossBreakdown b = breakdown_of(g, nodes);
  double recomposed = w.w_image * b.ssim + w.w_gtvp * b.dice_p +
                      w.w_gtvn * b.dice_n + w.lambda * b.diffusion;
  CHECK(std::abs(b.total - recomposed) < 1e-9);
  CHECK(b.ssim >= 0.0);
  CHECK(b.dice_p >= 0.0);
  CHECK(b.dice_n >= 0.0);
  CHECK(b.diffusion >= 0.0);
}

TEST_CASE("perfect alignment with a zero field scores under 1e-3") {
  Grid3 gr{10, 8, 6};
  // Smooth-ish image and binary masks; targets are exact copies.
  Mat<double> img(1, gr.count());
  Mat<double> p(1, gr.count()), n(1, gr.count());
  for (int z = 0; z < gr.z; ++z)
    for (int y = 0; y < gr.y; ++y)
      for (int x = 0; x < gr.x; ++x) {
        auto o = gr.flat(x, y, z);
        img(0, o) = 0.8 * std::sin(0.7 * x) * std::cos(0.5 * y + 0.3 * z);
        p(0, o) = (x >= 2 && x <= 4 && y >= 2 && y <= 4 && z >= 1 && z <= 3);
        n(0, o) = (x >= 6 && x <= 8 && y >= 3 && y <= 6);
      }
  Mat<double> zero_phi = Mat<double>::Zero(3, gr.count());
  Graph<double> g;
  auto nodes = composite_loss_nodes(g, g.input(img), g.input(p), g.input(n),
                                    g.input(img), g.input(p), g.input(n),
                                    g.input(zero_phi), gr, LossWeights{});
  CHECK(g.val(nodes.total)(0, 0) < 1e-3);
  CHECK(g.val(nodes.total)(0, 0) >= 0.0);
}

TEST_CASE("loss gradients with respect to the field match finite differences") {
  Grid3 gr{5, 4, 3};
  Mat<double> img = random_image(gr, 941);
  Mat<double> tgt = random_image(gr, 942);
  Mat<double> pm = random_image(gr, 943, 0, 1);
  Mat<double> pt = random_image(gr, 944, 0, 1);
  Mat<double> phi0(3, gr.count());
  {
    Rng rng(945);
    for (Eigen::Index c = 0; c < phi0.cols(); ++c)
      for (int r = 0; r < 3; ++r) phi0(r, c) = rng.uniform(-0.4, 0.4);
  }

  SUBCASE("image similarity") {
    double rel = fd_max_rel({phi0}, [&](Graph<double>& g,
                                        const std::vector<Var>& leaves) {
      Var warped = warp_trilinear(g, g.input(img), leaves[0], gr);
      return ssim_loss_node(g, warped, g.input(tgt), gr);
    });
    CHECK(rel < 1e-6);
  }
  SUBCASE("structure overlap") {
    double rel = fd_max_rel({phi0}, [&](Graph<double>& g,
                                        const std::vector<Var>& leaves) {
      Var warped = warp_trilinear(g, g.input(pm), leaves[0], gr);
      return soft_dice_loss_node(g, warped, g.input(pt));
    });
    CHECK(rel < 1e-6);
  }
  SUBCASE("composite objective") {
    double rel = fd_max_rel({phi0}, [&](Graph<double>& g,
                                        const std::vector<Var>& leaves) {
      auto nodes = composite_loss_nodes(
          g, g.input(img), g.input(pm), g.input(pm), g.input(tgt), g.input(pt),
          g.input(pt), leaves[0], gr, LossWeights{});
      return nodes.total;
    });
    CHECK(rel < 1e-6);
  }
}
