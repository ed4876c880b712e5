#include <doctest.h>

#include "anapred/graph_spatial.hpp"
#include "fd_check.hpp"

using namespace anapred;

namespace {

Mat<double> randm(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0,
                  double hi = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

Var probe_loss(Graph<double>& g, Var y, const Mat<double>& probe) {
  return g.dot_all(y, g.input(probe));
}

}  // namespace

TEST_CASE("conv3 gradients match finite differences") {
  Rng rng(201);
  Grid3 grid{4, 3, 3};
  int cin = 2, cout = 3;
  Mat<double> x = randm(rng, cin, grid.count());
  Mat<double> w = randm(rng, cout, 27 * cin, -0.3, 0.3);
  Mat<double> b = randm(rng, cout, 1);
  Mat<double> probe = randm(rng, cout, grid.count());
  auto maps = conv_tap_maps(grid);

  CHECK(fd_max_rel({x, w, b}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, conv3(g, v[0], v[1], v[2], maps), probe);
        }) < 1e-7);
}

TEST_CASE("conv3 with a centered identity kernel reproduces its input") {
  Grid3 grid{3, 3, 2};
  Rng rng(202);
  Mat<double> x = randm(rng, 2, grid.count());
  Mat<double> w = Mat<double>::Zero(2, 27 * 2);
  w.middleCols(13 * 2, 2).setIdentity();  // center tap only
  Graph<double> g;
  Var y = conv3(g, g.input(x), g.input(w), g.input(Mat<double>::Zero(2, 1)),
                conv_tap_maps(grid));
  CHECK((g.val(y) - x).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("resize gradients match finite differences both ways") {
  Rng rng(203);
  Grid3 a{4, 3, 2}, b{7, 5, 3};
  Mat<double> up_in = randm(rng, 2, a.count());
  Mat<double> down_in = randm(rng, 2, b.count());
  Mat<double> probe_up = randm(rng, 2, b.count());
  Mat<double> probe_down = randm(rng, 2, a.count());
  auto up = std::make_shared<ResizePlan>(resize_plan(a, b));
  auto down = std::make_shared<ResizePlan>(resize_plan(b, a));

  CHECK(fd_max_rel({up_in}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, resize_trilinear(g, v[0], up), probe_up);
        }) < 1e-7);
  CHECK(fd_max_rel({down_in}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, resize_trilinear(g, v[0], down), probe_down);
        }) < 1e-7);
}

TEST_CASE("resize to the same grid is the identity") {
  Rng rng(204);
  Grid3 a{5, 4, 3};
  Mat<double> x = randm(rng, 3, a.count());
  Graph<double> g;
  auto plan = std::make_shared<ResizePlan>(resize_plan(a, a));
  CHECK((g.val(resize_trilinear(g, g.input(x), plan)) - x).cwiseAbs().maxCoeff() <
        1e-14);
}

TEST_CASE("resize of a constant field is constant") {
  Grid3 a{4, 4, 2}, b{8, 8, 3};
  Graph<double> g;
  auto plan = std::make_shared<ResizePlan>(resize_plan(a, b));
  Var y = resize_trilinear(g, g.input(Mat<double>::Constant(1, a.count(), 2.5)),
                           plan);
  CHECK((g.val(y).array() - 2.5).abs().maxCoeff() < 1e-12);
}

TEST_CASE("avg_pool halves grids by block means") {
  Rng rng(205);
  Grid3 grid{4, 4, 2};
  Mat<double> x = randm(rng, 2, grid.count());
  Mat<double> probe = randm(rng, 2, 8);

  CHECK(fd_max_rel({x}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, avg_pool(g, v[0], grid, {2, 2, 1}), probe);
        }) < 1e-7);

  Graph<double> g;
  Var y = avg_pool(g, g.input(x), grid, {2, 2, 2});
  double want = 0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) want += x(0, grid.flat(dx, dy, dz));
  CHECK(g.val(y)(0, 0) == doctest::Approx(want / 8));
  CHECK_THROWS(avg_pool(g, g.input(x), grid, {3, 2, 1}));
}

TEST_CASE("gaussian blur keeps constants, mass, and is self-adjoint") {
  Rng rng(206);
  Grid3 grid{6, 5, 4};
  auto kernel = gaussian_kernel<double>(7, 1.5);

  double ksum = 0;
  for (double k : *kernel) ksum += k;
  CHECK(ksum == doctest::Approx(1.0).epsilon(1e-12));

  Mat<double> x = randm(rng, 1, grid.count());
  Mat<double> probe = randm(rng, 1, grid.count());
  CHECK(fd_max_rel({x}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, gaussian_blur3(g, v[0], grid, kernel), probe);
        }) < 1e-7);

  // Self-adjointness of one axis pass: <Bx, y> == <x, By>.
  Mat<double> y = randm(rng, 1, grid.count());
  double lhs = (blur_axis_apply(x, grid, 0, *kernel).array() * y.array()).sum();
  double rhs = (x.array() * blur_axis_apply(y, grid, 0, *kernel).array()).sum();
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  // Interior of a constant field stays constant (borders truncate).
  Graph<double> g;
  Var c = gaussian_blur3(g, g.input(Mat<double>::Ones(1, grid.count())), grid,
                         kernel);
  CHECK(g.val(c)(0, grid.flat(3, 2, 2)) < 1.0 + 1e-12);
  CHECK(g.val(c)(0, grid.flat(0, 0, 0)) < 1.0);  // truncated, not renormalized
}

TEST_CASE("warp gradients match finite differences") {
  Rng rng(207);
  Grid3 grid{5, 4, 3};
  Mat<double> img = randm(rng, 2, grid.count());
  Mat<double> phi = randm(rng, 3, grid.count(), -0.6, 0.6);
  Mat<double> probe = randm(rng, 2, grid.count());

  CHECK(fd_max_rel({img, phi}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, warp_trilinear(g, v[0], v[1], grid), probe);
        }) < 1e-6);
}

TEST_CASE("zero field warp is the identity") {
  Rng rng(208);
  Grid3 grid{4, 4, 3};
  Mat<double> img = randm(rng, 3, grid.count());
  Graph<double> g;
  Var y = warp_trilinear(g, g.input(img), g.input(Mat<double>::Zero(3, grid.count())),
                         grid);
  CHECK((g.val(y) - img).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("diffusion penalty: value, scaling, and gradient") {
  Rng rng(209);
  Grid3 grid{4, 4, 4};

  // Unit ramp along x in the x component: single unit derivative among the
  // nine per-voxel terms.
  Mat<double> ramp = Mat<double>::Zero(3, grid.count());
  for (int z = 0; z < grid.z; ++z)
    for (int y = 0; y < grid.y; ++y)
      for (int x = 0; x < grid.x; ++x) ramp(0, grid.flat(x, y, z)) = double(x);
  Graph<double> g;
  CHECK(g.val(diffusion_penalty(g, g.input(ramp), grid))(0, 0) ==
        doctest::Approx(1.0 / 9.0).epsilon(1e-12));

  Mat<double> constant = Mat<double>::Constant(3, grid.count(), 1.7);
  CHECK(g.val(diffusion_penalty(g, g.input(constant), grid))(0, 0) == 0.0);

  Mat<double> phi = randm(rng, 3, grid.count());
  double l1 = g.val(diffusion_penalty(g, g.input(phi), grid))(0, 0);
  double l3 = g.val(diffusion_penalty(g, g.input((3.0 * phi).eval()), grid))(0, 0);
  CHECK(l3 == doctest::Approx(9.0 * l1).epsilon(1e-9));

  Grid3 small{3, 3, 2};
  Mat<double> sphi = randm(rng, 3, small.count());
  CHECK(fd_max_rel({sphi}, [&](Graph<double>& gg, const std::vector<Var>& v) {
          return diffusion_penalty(gg, v[0], small);
        }) < 1e-7);
}

TEST_CASE("window attention: gradients match finite differences") {
  Rng rng(210);
  Grid3 window{2, 2, 1};
  int wl = int(window.count());
  int heads = 2, dh = 3, n_win = 2;
  int dim = heads * dh;
  auto rel = std::make_shared<std::vector<std::int32_t>>(relative_bias_index(window));
  auto pad = std::make_shared<std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{0, 0, 0, 1, 0, 0, 0, 0});

  Mat<double> q = randm(rng, dim, n_win * wl);
  Mat<double> k = randm(rng, dim, n_win * wl);
  Mat<double> v = randm(rng, dim, n_win * wl);
  Mat<double> bt = randm(rng, relative_bias_rows(window), heads, -0.5, 0.5);
  Mat<double> probe = randm(rng, dim, n_win * wl);

  CHECK(fd_max_rel({q, k, v, bt},
                   [&](Graph<double>& g, const std::vector<Var>& vars) {
                     return probe_loss(
                         g,
                         window_attention(g, vars[0], vars[1], vars[2], vars[3],
                                          rel, pad, n_win, wl, heads),
                         probe);
                   }) < 1e-6);
}

TEST_CASE("attention weights form a probability over unmasked keys") {
  // If every value column equals the same vector, the output must reproduce
  // it exactly for every query regardless of scores: weights sum to one.
  Rng rng(211);
  Grid3 window{2, 2, 1};
  int wl = int(window.count());
  int heads = 2, dh = 2, n_win = 2, dim = heads * dh;
  auto rel = std::make_shared<std::vector<std::int32_t>>(relative_bias_index(window));
  auto pad = std::make_shared<std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 0, 0});

  Vec<double> c = randm(rng, dim, 1);
  Mat<double> v = c.replicate(1, n_win * wl);
  Graph<double> g;
  Var out = window_attention(g, g.input(randm(rng, dim, n_win * wl)),
                             g.input(randm(rng, dim, n_win * wl)), g.input(v),
                             g.input(randm(rng, relative_bias_rows(window), heads)),
                             rel, pad, n_win, wl, heads);
  for (Eigen::Index j = 0; j < n_win * wl; ++j)
    CHECK((g.val(out).col(j) - c).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("masked pad keys receive no attention") {
  // Give the pad key an enormous value; outputs must ignore it.
  Grid3 window{2, 1, 1};
  int wl = 2, heads = 1, dh = 1, n_win = 1;
  auto rel = std::make_shared<std::vector<std::int32_t>>(relative_bias_index(window));
  auto pad = std::make_shared<std::vector<std::uint8_t>>(
      std::vector<std::uint8_t>{0, 1});

  Mat<double> q(1, 2), k(1, 2), v(1, 2), bt(3, 1);
  q << 1, 1;
  k << 1, 50;  // pad key would dominate if unmasked
  v << 2, 999;
  bt.setZero();
  Graph<double> g;
  Var out = window_attention(g, g.input(q), g.input(k), g.input(v), g.input(bt),
                             rel, pad, n_win, wl, heads);
  CHECK(g.val(out)(0, 0) == doctest::Approx(2.0));
  CHECK(g.val(out)(0, 1) == doctest::Approx(2.0));
}
