#include <doctest.h>

#include "anapred/graph.hpp"
#include "fd_check.hpp"

using namespace anapred;

namespace {

Mat<double> randm(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Dot against a fixed probe so every output entry carries distinct weight.
Var probe_loss(Graph<double>& g, Var y, const Mat<double>& probe) {
  return g.dot_all(y, g.input(probe));
}

}  // namespace

TEST_CASE("elementwise op gradients match finite differences") {
  Rng rng(101);
  Mat<double> a = randm(rng, 3, 4), b = randm(rng, 3, 4);
  b.array() += 2.5;  // keep divisors away from zero
  Mat<double> probe = randm(rng, 3, 4);

  auto check = [&](auto op) {
    return fd_max_rel({a, b}, [&](Graph<double>& g, const std::vector<Var>& v) {
      return probe_loss(g, op(g, v[0], v[1]), probe);
    });
  };
  CHECK(check([](Graph<double>& g, Var x, Var y) { return g.add(x, y); }) < 1e-7);
  CHECK(check([](Graph<double>& g, Var x, Var y) { return g.sub(x, y); }) < 1e-7);
  CHECK(check([](Graph<double>& g, Var x, Var y) { return g.mul(x, y); }) < 1e-7);
  CHECK(check([](Graph<double>& g, Var x, Var y) { return g.div(x, y); }) < 1e-7);
  CHECK(check([](Graph<double>& g, Var x, Var y) {
          return g.mul(g.affine(x, 1.7, -0.3), y);
        }) < 1e-7);
}

TEST_CASE("activation gradients match finite differences") {
  Rng rng(102);
  Mat<double> x = randm(rng, 4, 5, -2, 2);
  // keep clear of the leaky-relu kink so central differences are valid
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.2;
  Mat<double> probe = randm(rng, 4, 5);

  CHECK(fd_max_rel({x}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, g.gelu(v[0]), probe);
        }) < 1e-7);
  CHECK(fd_max_rel({x}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, g.leaky_relu(v[0], 0.01), probe);
        }) < 1e-7);
}

TEST_CASE("matmul and linear gradients match finite differences") {
  Rng rng(103);
  Mat<double> w = randm(rng, 3, 5), x = randm(rng, 5, 4), b = randm(rng, 3, 1);
  Mat<double> probe = randm(rng, 3, 4);

  CHECK(fd_max_rel({w, x}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, g.matmul(v[0], v[1]), probe);
        }) < 1e-7);
  CHECK(fd_max_rel({w, x, b}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, g.linear(v[0], v[1], v[2]), probe);
        }) < 1e-7);
}

TEST_CASE("layer norm gradient matches finite differences") {
  Rng rng(104);
  Mat<double> x = randm(rng, 6, 5, -2, 2);
  Mat<double> gamma = randm(rng, 6, 1, 0.5, 1.5);
  Mat<double> beta = randm(rng, 6, 1);
  Mat<double> probe = randm(rng, 6, 5);

  CHECK(fd_max_rel({x, gamma, beta},
                   [&](Graph<double>& g, const std::vector<Var>& v) {
                     return probe_loss(g, g.layer_norm(v[0], v[1], v[2]), probe);
                   }) < 1e-6);
}

TEST_CASE("layer norm normalizes each column") {
  Rng rng(105);
  Graph<double> g;
  Var x = g.input(randm(rng, 8, 3, -3, 3));
  Var ones = g.input(Mat<double>::Ones(8, 1));
  Var zeros = g.input(Mat<double>::Zero(8, 1));
  const Mat<double>& y = g.val(g.layer_norm(x, ones, zeros));
  for (Eigen::Index c = 0; c < y.cols(); ++c) {
    CHECK(std::abs(y.col(c).mean()) < 1e-12);
    CHECK(y.col(c).squaredNorm() / 8.0 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("gather, concat and slice gradients match finite differences") {
  Rng rng(106);
  Mat<double> a = randm(rng, 3, 5), b = randm(rng, 2, 5);
  auto idx = std::make_shared<IndexMap>(IndexMap{4, -1, 0, 0, 2, 3});
  Mat<double> probe_g = randm(rng, 3, 6);
  Mat<double> probe_c = randm(rng, 5, 5);
  Mat<double> probe_s = randm(rng, 2, 5);

  CHECK(fd_max_rel({a}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, g.gather(v[0], idx), probe_g);
        }) < 1e-7);
  CHECK(fd_max_rel({a, b}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, g.concat_rows({v[0], v[1]}), probe_c);
        }) < 1e-7);
  CHECK(fd_max_rel({a}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return probe_loss(g, g.slice_rows(v[0], 1, 2), probe_s);
        }) < 1e-7);
}

TEST_CASE("gather maps negative indices to zero columns") {
  Graph<double> g;
  Mat<double> a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  auto idx = std::make_shared<IndexMap>(IndexMap{2, -1, 1});
  const Mat<double>& y = g.val(g.gather(g.input(a), idx));
  CHECK(y(0, 0) == 3);
  CHECK(y(0, 1) == 0);
  CHECK(y(1, 1) == 0);
  CHECK(y(1, 2) == 5);
}

TEST_CASE("reduction gradients match finite differences") {
  Rng rng(107);
  Mat<double> a = randm(rng, 3, 4), b = randm(rng, 3, 4);
  CHECK(fd_max_rel({a}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return g.sum_all(v[0]);
        }) < 1e-7);
  CHECK(fd_max_rel({a}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return g.mean_all(v[0]);
        }) < 1e-7);
  CHECK(fd_max_rel({a, b}, [&](Graph<double>& g, const std::vector<Var>& v) {
          return g.dot_all(v[0], v[1]);
        }) < 1e-7);
}

TEST_CASE("shared subexpressions accumulate gradient from every consumer") {
  Graph<double> g;
  Mat<double> x0(1, 1);
  x0 << 3.0;
  Var x = g.param(x0);
  Var y = g.add(g.mul(x, x), x);  // x^2 + x, dy/dx = 2x + 1 = 7
  g.backward(y);
  CHECK(g.grad(x)(0, 0) == doctest::Approx(7.0));
}

TEST_CASE("input-only subgraphs are pruned from backward") {
  Graph<double> g;
  Var a = g.input(Mat<double>::Ones(2, 2));
  Var b = g.input(Mat<double>::Ones(2, 2));
  Var c = g.mul(a, b);
  CHECK(!g.needs_grad(c));
  Var p = g.param(Mat<double>::Ones(2, 2));
  Var loss = g.sum_all(g.mul(c, p));
  g.backward(loss);
  CHECK(g.grad(p).sum() == doctest::Approx(4.0));
}

TEST_CASE("backward on a parameter-free loss throws") {
  Graph<double> g;
  Var a = g.input(Mat<double>::Ones(2, 2));
  Var loss = g.sum_all(a);
  CHECK_THROWS(g.backward(loss));
}
