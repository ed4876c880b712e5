#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "anapred/tensor.hpp"

namespace anapred {

// Handle into a Graph's node tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Tape-based reverse-mode autodiff over feature-major matrices. Values are
// computed eagerly as ops are recorded; backward() replays the tape in
// reverse. Scalar type T is float for training and double for gradient
// checking. Backward closures capture node ids, never node references: the
// tape vector may reallocate while recording.
template <typename T>
class Graph {
 public:
  Var input(Mat<T> v) { return push(std::move(v), false, {}); }
  Var param(Mat<T> v) { return push(std::move(v), true, {}); }

  const Mat<T>& val(Var v) const { return nodes_[v.id].value; }
  const Mat<T>& grad(Var v) const { return nodes_[v.id].grad; }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    return record((val(a) + val(b)).eval(), {a, b}, [a, b](Graph& g, const Mat<T>& dy) {
      g.acc(a, dy);
      g.acc(b, dy);
    });
  }

  Var sub(Var a, Var b) {
    return record((val(a) - val(b)).eval(), {a, b}, [a, b](Graph& g, const Mat<T>& dy) {
      g.acc(a, dy);
      g.acc(b, -dy);
    });
  }

  Var mul(Var a, Var b) {
    return record((val(a).array() * val(b).array()).matrix().eval(), {a, b},
                  [a, b](Graph& g, const Mat<T>& dy) {
                    g.acc(a, (dy.array() * g.val(b).array()).matrix());
                    g.acc(b, (dy.array() * g.val(a).array()).matrix());
                  });
  }

  Var div(Var a, Var b) {
    return record((val(a).array() / val(b).array()).matrix().eval(), {a, b},
                  [a, b](Graph& g, const Mat<T>& dy) {
                    g.acc(a, (dy.array() / g.val(b).array()).matrix());
                    g.acc(b, (-dy.array() * g.val(a).array() /
                              (g.val(b).array() * g.val(b).array()))
                                 .matrix());
                  });
  }

  // k*x + c elementwise
  Var affine(Var x, T k, T c) {
    return record((val(x).array() * k + c).matrix().eval(), {x},
                  [x, k](Graph& g, const Mat<T>& dy) { g.acc(x, dy * k); });
  }

  Var scale(Var x, T k) { return affine(x, k, T(0)); }

  Var leaky_relu(Var x, T slope) {
    return record(
        val(x).unaryExpr([slope](T v) { return v >= T(0) ? v : slope * v; }).eval(),
        {x}, [x, slope](Graph& g, const Mat<T>& dy) {
          g.acc(x, (g.val(x).array() >= T(0))
                       .select(dy.array(), dy.array() * slope)
                       .matrix());
        });
  }

  Var gelu(Var x) {
    // Exact form x·Φ(x); derivative Φ(x) + x·φ(x).
    auto cdf = [](T v) { return T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2))); };
    return record(val(x).unaryExpr([cdf](T v) { return v * cdf(v); }).eval(), {x},
                  [x, cdf](Graph& g, const Mat<T>& dy) {
                    const T inv_sqrt2pi = T(0.3989422804014327);
                    auto& xv = g.val(x);
                    g.acc(x, (dy.array() *
                              xv.unaryExpr([&](T v) {
                                  return cdf(v) + v * inv_sqrt2pi *
                                                      std::exp(T(-0.5) * v * v);
                                }).array())
                                 .matrix());
                  });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    return record((val(a) * val(b)).eval(), {a, b}, [a, b](Graph& g, const Mat<T>& dy) {
      g.acc(a, dy * g.val(b).transpose());
      g.acc(b, g.val(a).transpose() * dy);
    });
  }

  // W·x + bias (bias is rows×1, broadcast over columns)
  Var linear(Var w, Var x, Var bias) {
    Mat<T> y = val(w) * val(x);
    y.colwise() += Vec<T>(val(bias).col(0));
    return record(std::move(y), {w, x, bias}, [w, x, bias](Graph& g, const Mat<T>& dy) {
      g.acc(w, dy * g.val(x).transpose());
      g.acc(x, g.val(w).transpose() * dy);
      g.acc(bias, dy.rowwise().sum());
    });
  }

  // Per-column normalization over the feature dim; gamma/beta are rows×1.
  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Mat<T>& xv = val(x);
    auto n = T(xv.rows());
    auto cache = std::make_shared<Mat<T>>(xv.rows(), xv.cols());  // normalized x
    auto inv_std = std::make_shared<Vec<T>>(xv.cols());
    Mat<T> y(xv.rows(), xv.cols());
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      T mu = xv.col(c).mean();
      T var = (xv.col(c).array() - mu).square().sum() / n;
      T is = T(1) / std::sqrt(var + eps);
      (*inv_std)[c] = is;
      cache->col(c) = (xv.col(c).array() - mu) * is;
      y.col(c) = cache->col(c).array() * val(gamma).col(0).array() +
                 val(beta).col(0).array();
    }
    return record(std::move(y), {x, gamma, beta},
                  [x, gamma, beta, cache, inv_std, n](Graph& g, const Mat<T>& dy) {
                    g.acc(gamma, (dy.array() * cache->array()).rowwise().sum().matrix());
                    g.acc(beta, dy.rowwise().sum());
                    if (!g.needs_grad(x)) return;
                    Mat<T> dx(dy.rows(), dy.cols());
                    for (Eigen::Index c = 0; c < dy.cols(); ++c) {
                      Vec<T> dxhat =
                          (dy.col(c).array() * g.val(gamma).col(0).array()).matrix();
                      T m1 = dxhat.mean();
                      T m2 = (dxhat.array() * cache->col(c).array()).sum() / n;
                      dx.col(c) = ((dxhat.array() - m1 -
                                    cache->col(c).array() * m2) *
                                   (*inv_std)[c])
                                      .matrix();
                    }
                    g.acc(x, dx);
                  });
  }

  // ---- shape plumbing ----

  Var gather(Var x, IndexMapPtr idx) {
    return record(gather_cols(val(x), *idx), {x},
                  [x, idx](Graph& g, const Mat<T>& dy) {
                    if (!g.needs_grad(x)) return;
                    scatter_add_cols(g.nodes_[x.id].grad, dy, *idx);
                  });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    Eigen::Index rows = 0;
    Eigen::Index cols = val(parts.front()).cols();
    for (Var p : parts) rows += val(p).rows();
    Mat<T> y(rows, cols);
    Eigen::Index r = 0;
    for (Var p : parts) {
      y.middleRows(r, val(p).rows()) = val(p);
      r += val(p).rows();
    }
    auto list = std::make_shared<std::vector<Var>>(parts);
    return record(std::move(y), parts, [list](Graph& g, const Mat<T>& dy) {
      Eigen::Index r = 0;
      for (Var p : *list) {
        Eigen::Index n = g.val(p).rows();
        g.acc(p, dy.middleRows(r, n));
        r += n;
      }
    });
  }

  Var slice_rows(Var x, Eigen::Index r0, Eigen::Index nrows) {
    return record(val(x).middleRows(r0, nrows).eval(), {x},
                  [x, r0, nrows](Graph& g, const Mat<T>& dy) {
                    if (!g.needs_grad(x)) return;
                    g.nodes_[x.id].grad.middleRows(r0, nrows) += dy;
                  });
  }

  // ---- reductions (1×1 results) ----

  Var sum_all(Var x) {
    Mat<T> y(1, 1);
    y(0, 0) = val(x).sum();
    return record(std::move(y), {x}, [x](Graph& g, const Mat<T>& dy) {
      g.acc(x, Mat<T>::Constant(g.val(x).rows(), g.val(x).cols(), dy(0, 0)));
    });
  }

  Var mean_all(Var x) {
    T inv = T(1) / T(val(x).size());
    Mat<T> y(1, 1);
    y(0, 0) = val(x).sum() * inv;
    return record(std::move(y), {x}, [x, inv](Graph& g, const Mat<T>& dy) {
      g.acc(x, Mat<T>::Constant(g.val(x).rows(), g.val(x).cols(), dy(0, 0) * inv));
    });
  }

  Var dot_all(Var a, Var b) {
    Mat<T> y(1, 1);
    y(0, 0) = (val(a).array() * val(b).array()).sum();
    return record(std::move(y), {a, b}, [a, b](Graph& g, const Mat<T>& dy) {
      g.acc(a, dy(0, 0) * g.val(b));
      g.acc(b, dy(0, 0) * g.val(a));
    });
  }

  // ---- custom op plumbing ----

  using BackFn = std::function<void(Graph&, const Mat<T>&)>;

  // Record a node whose value is already computed; `back` receives this
  // node's upstream gradient and must accumulate into the parents via acc().
  Var record(Mat<T> value, const std::vector<Var>& parents, BackFn back) {
    bool needs = false;
    for (Var p : parents) needs = needs || nodes_[p.id].needs_grad;
    if (!needs) return push(std::move(value), false, {});
    return push(std::move(value), true, std::move(back));
  }

  template <typename E>
  void acc(Var v, const E& e) {
    if (nodes_[v.id].needs_grad) nodes_[v.id].grad += e;
  }

  // Direct mutable access for scatter-style accumulation.
  Mat<T>& grad_ref(Var v) { return nodes_[v.id].grad; }

  void backward(Var loss) {
    assert(val(loss).rows() == 1 && val(loss).cols() == 1);
    for (std::int32_t i = 0; i <= loss.id; ++i)
      if (nodes_[i].needs_grad)
        nodes_[i].grad = Mat<T>::Zero(nodes_[i].value.rows(), nodes_[i].value.cols());
    if (!nodes_[loss.id].needs_grad)
      throw std::runtime_error("loss does not depend on any parameter");
    nodes_[loss.id].grad(0, 0) = T(1);
    for (std::int32_t i = loss.id; i >= 0; --i) {
      auto& n = nodes_[i];
      if (n.needs_grad && n.back) n.back(*this, n.grad);
    }
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    BackFn back;
    bool needs_grad = false;
  };

  Var push(Mat<T> value, bool needs, BackFn back) {
    nodes_.push_back(Node{std::move(value), {}, std::move(back), needs});
    return Var{std::int32_t(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

}  // namespace anapred
