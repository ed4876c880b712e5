#pragma once

#include <algorithm>
#include <vector>

#include "anapred/graph.hpp"

// Central-difference gradient oracle. `build` records ops over the leaf vars
// (all registered as parameters) and returns the scalar loss var; every leaf
// entry is probed at ±eps and compared against the graph's analytic gradient.
// Returns the max relative error, |a-n| / max(1, |a|, |n|).
using Leaves = std::vector<anapred::Mat<double>>;

template <typename Builder>
double fd_max_rel(const Leaves& leaves, Builder build, double eps = 1e-5) {
  using anapred::Graph;
  using anapred::Var;

  auto eval = [&](const Leaves& ls) {
    Graph<double> g;
    std::vector<Var> vs;
    vs.reserve(ls.size());
    for (const auto& m : ls) vs.push_back(g.param(m));
    return g.val(build(g, vs))(0, 0);
  };

  Graph<double> g;
  std::vector<Var> vs;
  vs.reserve(leaves.size());
  for (const auto& m : leaves) vs.push_back(g.param(m));
  Var loss = build(g, vs);
  g.backward(loss);

  double worst = 0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const auto& analytic = g.grad(vs[l]);
    for (Eigen::Index j = 0; j < leaves[l].cols(); ++j)
      for (Eigen::Index i = 0; i < leaves[l].rows(); ++i) {
        Leaves p = leaves;
        p[l](i, j) += eps;
        double fp = eval(p);
        p[l](i, j) -= 2 * eps;
        double fm = eval(p);
        double num = (fp - fm) / (2 * eps);
        double a = analytic(i, j);
        worst = std::max(worst, std::abs(a - num) /
                                    std::max({1.0, std::abs(a), std::abs(num)}));
      }
  }
  return worst;
}
