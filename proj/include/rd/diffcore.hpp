#pragma once

// Reverse-mode differentiable computation over dense float64 tensors.
// A Tape records one training step's operations and is discarded after
// backward(); there is no persistent graph. Dense matrix products are
// delegated to Eigen, everything else is plain loops.

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rd/common.hpp"
#include "rd/tensor.hpp"

namespace rd::diff {

using EigenMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EigenMat>;
using ConstMatMap = Eigen::Map<const EigenMat>;

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Act { Linear, Softplus, Selu, LeakyRelu };
enum class OutAct { Linear, Softplus };

inline const char* act_name(Act a) {
  switch (a) {
    case Act::Linear: return "linear";
    case Act::Softplus: return "softplus";
    case Act::Selu: return "selu";
    case Act::LeakyRelu: return "leaky-relu";
  }
  return "?";
}

inline Act act_from_name(const std::string& s) {
  if (s == "linear") return Act::Linear;
  if (s == "softplus") return Act::Softplus;
  if (s == "selu") return Act::Selu;
  if (s == "leaky-relu") return Act::LeakyRelu;
  throw UsageError("unknown activation '" + s +
                   "' (expected linear|softplus|selu|leaky-relu)");
}

namespace detail {

constexpr double kSeluLambda = 1.0507009873554804934193349852946;
constexpr double kSeluAlpha = 1.6732632423543772848170429916717;
constexpr double kLeakySlope = 0.01;

inline double softplus_val(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}
inline double softplus_grad(double x) {
  if (x > 30.0) return 1.0;
  if (x < -30.0) return std::exp(x);
  return 1.0 / (1.0 + std::exp(-x));
}

inline double act_val(Act a, double x) {
  switch (a) {
    case Act::Linear: return x;
    case Act::Softplus: return softplus_val(x);
    case Act::Selu:
      return x > 0.0 ? kSeluLambda * x
                     : kSeluLambda * kSeluAlpha * (std::exp(x) - 1.0);
    case Act::LeakyRelu: return x > 0.0 ? x : kLeakySlope * x;
  }
  return x;
}
inline double act_grad(Act a, double x) {
  switch (a) {
    case Act::Linear: return 1.0;
    case Act::Softplus: return softplus_grad(x);
    case Act::Selu:
      return x > 0.0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(x);
    case Act::LeakyRelu: return x > 0.0 ? 1.0 : kLeakySlope;
  }
  return 1.0;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
 public:
  Var leaf(Tensor v) { return push(std::move(v), true, {}, nullptr); }
  Var constant(Tensor v) { return push(std::move(v), false, {}, nullptr); }
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& val(Var x) const { return node(x).value; }
  double scalar_val(Var x) const {
    const Tensor& t = val(x);
    if (t.numel() != 1) throw ShapeError("scalar_val: tensor is not a scalar");
    return t.data[0];
  }

  // Gradient of the last backward() target w.r.t. x; zeros if x was unused.
  const Tensor& grad(Var x) const {
    const Node& n = node(x);
    if (n.grad.numel() == 0) {
      zero_cache_ = Tensor::zeros(n.value.shape);
      return zero_cache_;
    }
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // -- elementwise binary ----------------------------------------------------

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Tensor out = val(a);
    const Tensor& vb = val(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
    return push(std::move(out), needs(a) || needs(b), {a.idx, b.idx},
                [](Tape& t, const Node& self) {
                  t.accumulate(self.parents[0], self.grad);
                  t.accumulate(self.parents[1], self.grad);
                });
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Tensor out = val(a);
    const Tensor& vb = val(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
    return push(std::move(out), needs(a) || needs(b), {a.idx, b.idx},
                [](Tape& t, const Node& self) {
                  t.accumulate(self.parents[0], self.grad);
                  Tensor neg = self.grad;
                  for (double& x : neg.data) x = -x;
                  t.accumulate(self.parents[1], neg);
                });
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Tensor out = val(a);
    const Tensor& vb = val(b);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
    return push(std::move(out), needs(a) || needs(b), {a.idx, b.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va = t.node_at(self.parents[0]).value;
                  const Tensor& vb2 = t.node_at(self.parents[1]).value;
                  Tensor ga = self.grad;
                  for (std::size_t i = 0; i < ga.numel(); ++i)
                    ga.data[i] *= vb2.data[i];
                  t.accumulate(self.parents[0], ga);
                  Tensor gb = self.grad;
                  for (std::size_t i = 0; i < gb.numel(); ++i)
                    gb.data[i] *= va.data[i];
                  t.accumulate(self.parents[1], gb);
                });
  }

  // -- scalar-constant ops ---------------------------------------------------

  Var add_scalar(Var a, double c) {
    Tensor out = val(a);
    for (double& x : out.data) x += c;
    return push(std::move(out), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  t.accumulate(self.parents[0], self.grad);
                });
  }

  Var mul_scalar(Var a, double c) {
    Tensor out = val(a);
    for (double& x : out.data) x *= c;
    return push(std::move(out), needs(a), {a.idx},
                [c](Tape& t, const Node& self) {
                  Tensor g = self.grad;
                  for (double& x : g.data) x *= c;
                  t.accumulate(self.parents[0], g);
                });
  }

  Var neg(Var a) { return mul_scalar(a, -1.0); }

  // -- broadcasting: [B,N] op [N] ---------------------------------------------

  Var add_rowvec(Var m, Var v) {
    const Tensor& vm = val(m);
    const Tensor& vv = val(v);
    if (vm.rank() != 2 || vv.rank() != 1 || vm.cols() != vv.numel())
      throw ShapeError("add_rowvec: want [B,N] + [N], got " + vm.shape_str() +
                       " + " + vv.shape_str());
    Tensor out = vm;
    for (std::size_t i = 0; i < vm.rows(); ++i)
      for (std::size_t j = 0; j < vm.cols(); ++j)
        out.at(i, j) += vv.data[j];
    return push(std::move(out), needs(m) || needs(v), {m.idx, v.idx},
                [](Tape& t, const Node& self) {
                  t.accumulate(self.parents[0], self.grad);
                  const Tensor& g = self.grad;
                  Tensor gv = Tensor::zeros({g.cols()});
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      gv.data[j] += g.at(i, j);
                  t.accumulate(self.parents[1], gv);
                });
  }

  Var mul_rowvec(Var m, Var v) {
    const Tensor& vm = val(m);
    const Tensor& vv = val(v);
    if (vm.rank() != 2 || vv.rank() != 1 || vm.cols() != vv.numel())
      throw ShapeError("mul_rowvec: want [B,N] * [N], got " + vm.shape_str() +
                       " * " + vv.shape_str());
    Tensor out = vm;
    for (std::size_t i = 0; i < vm.rows(); ++i)
      for (std::size_t j = 0; j < vm.cols(); ++j)
        out.at(i, j) *= vv.data[j];
    return push(std::move(out), needs(m) || needs(v), {m.idx, v.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& vm2 = t.node_at(self.parents[0]).value;
                  const Tensor& vv2 = t.node_at(self.parents[1]).value;
                  const Tensor& g = self.grad;
                  Tensor gm = g;
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      gm.at(i, j) *= vv2.data[j];
                  t.accumulate(self.parents[0], gm);
                  Tensor gv = Tensor::zeros({g.cols()});
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < g.cols(); ++j)
                      gv.data[j] += g.at(i, j) * vm2.at(i, j);
                  t.accumulate(self.parents[1], gv);
                });
  }

  // -- matmul ------------------------------------------------------------------

  Var matmul(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows())
      throw ShapeError("matmul: incompatible shapes " + va.shape_str() + " x " +
                       vb.shape_str());
    Tensor out = Tensor::zeros({va.rows(), vb.cols()});
    ConstMatMap A(va.data.data(), va.rows(), va.cols());
    ConstMatMap B(vb.data.data(), vb.rows(), vb.cols());
    MatMap C(out.data.data(), out.rows(), out.cols());
    C.noalias() = A * B;
    return push(std::move(out), needs(a) || needs(b), {a.idx, b.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  const Tensor& vb2 = t.node_at(self.parents[1]).value;
                  const Tensor& g = self.grad;
                  ConstMatMap A(va2.data.data(), va2.rows(), va2.cols());
                  ConstMatMap B(vb2.data.data(), vb2.rows(), vb2.cols());
                  ConstMatMap G(g.data.data(), g.rows(), g.cols());
                  if (t.node_at(self.parents[0]).requires_grad) {
                    Tensor ga = Tensor::zeros(va2.shape);
                    MatMap GA(ga.data.data(), ga.rows(), ga.cols());
                    GA.noalias() = G * B.transpose();
                    t.accumulate(self.parents[0], ga);
                  }
                  if (t.node_at(self.parents[1]).requires_grad) {
                    Tensor gb = Tensor::zeros(vb2.shape);
                    MatMap GB(gb.data.data(), gb.rows(), gb.cols());
                    GB.noalias() = A.transpose() * G;
                    t.accumulate(self.parents[1], gb);
                  }
                });
  }

  // -- elementwise unary -------------------------------------------------------

  Var exp_(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = std::exp(x);
    return push(std::move(out), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  Tensor g = self.grad;
                  for (std::size_t i = 0; i < g.numel(); ++i)
                    g.data[i] *= self.value.data[i];
                  t.accumulate(self.parents[0], g);
                });
  }

  Var log_(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = std::log(x);
    return push(std::move(out), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va = t.node_at(self.parents[0]).value;
                  Tensor g = self.grad;
                  for (std::size_t i = 0; i < g.numel(); ++i)
                    g.data[i] /= va.data[i];
                  t.accumulate(self.parents[0], g);
                });
  }

  Var tanh_(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = std::tanh(x);
    return push(std::move(out), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  Tensor g = self.grad;
                  for (std::size_t i = 0; i < g.numel(); ++i)
                    g.data[i] *= 1.0 - self.value.data[i] * self.value.data[i];
                  t.accumulate(self.parents[0], g);
                });
  }

  Var square(Var a) {
    Tensor out = val(a);
    for (double& x : out.data) x = x * x;
    return push(std::move(out), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va = t.node_at(self.parents[0]).value;
                  Tensor g = self.grad;
                  for (std::size_t i = 0; i < g.numel(); ++i)
                    g.data[i] *= 2.0 * va.data[i];
                  t.accumulate(self.parents[0], g);
                });
  }

  Var activation(Var a, Act act) {
    if (act == Act::Linear) return a;
    const Tensor& va = val(a);
    Tensor out = va;
    for (double& x : out.data) x = detail::act_val(act, x);
    return push(std::move(out), needs(a), {a.idx},
                [act](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  Tensor g = self.grad;
                  for (std::size_t i = 0; i < g.numel(); ++i)
                    g.data[i] *= detail::act_grad(act, va2.data[i]);
                  t.accumulate(self.parents[0], g);
                });
  }

  Var softplus(Var a) { return activation(a, Act::Softplus); }

  // Hard clamp; gradient passes through strictly inside [lo, hi].
  Var clamp(Var a, double lo, double hi) {
    const Tensor& va = val(a);
    Tensor out = va;
    for (double& x : out.data) x = std::min(hi, std::max(lo, x));
    return push(std::move(out), needs(a), {a.idx},
                [lo, hi](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  Tensor g = self.grad;
                  for (std::size_t i = 0; i < g.numel(); ++i)
                    if (va2.data[i] <= lo || va2.data[i] >= hi) g.data[i] = 0.0;
                  t.accumulate(self.parents[0], g);
                });
  }

  // -- reductions ----------------------------------------------------------------

  Var sum_all(Var a) {
    const Tensor& va = val(a);
    double s = 0.0;
    for (double x : va.data) s += x;
    return push(Tensor::scalar(s), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  Tensor g = Tensor::full(va2.shape, self.grad.data[0]);
                  t.accumulate(self.parents[0], g);
                });
  }

  Var mean_all(Var a) {
    const Tensor& va = val(a);
    if (va.numel() == 0) throw ShapeError("mean_all: empty tensor");
    double inv = 1.0 / static_cast<double>(va.numel());
    return mul_scalar(sum_all(a), inv);
  }

  // [B,N] -> [B], sum over the row.
  Var row_sum(Var a) {
    const Tensor& va = val(a);
    if (va.rank() != 2) throw ShapeError("row_sum: want rank-2 input");
    Tensor out = Tensor::zeros({va.rows()});
    for (std::size_t i = 0; i < va.rows(); ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < va.cols(); ++j) s += va.at(i, j);
      out.data[i] = s;
    }
    return push(std::move(out), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  Tensor g = Tensor::zeros(va2.shape);
                  for (std::size_t i = 0; i < va2.rows(); ++i)
                    for (std::size_t j = 0; j < va2.cols(); ++j)
                      g.at(i, j) = self.grad.data[i];
                  t.accumulate(self.parents[0], g);
                });
  }

  // Numerically stable log-sum-exp over all entries -> scalar.
  // Gradient is the softmax of the inputs.
  Var logsumexp(Var a) {
    const Tensor& va = val(a);
    if (va.numel() == 0) throw ShapeError("logsumexp: empty axis");
    double m = va.data[0];
    for (double x : va.data) m = std::max(m, x);
    double s = 0.0;
    for (double x : va.data) s += std::exp(x - m);
    double lse = m + std::log(s);
    return push(Tensor::scalar(lse), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  double out = self.value.data[0];
                  Tensor g = Tensor::zeros(va2.shape);
                  for (std::size_t i = 0; i < va2.numel(); ++i)
                    g.data[i] = self.grad.data[0] * std::exp(va2.data[i] - out);
                  t.accumulate(self.parents[0], g);
                });
  }

  // [B,N] -> [B], log-sum-exp along each row.
  Var row_logsumexp(Var a) {
    const Tensor& va = val(a);
    if (va.rank() != 2) throw ShapeError("row_logsumexp: want rank-2 input");
    if (va.cols() == 0) throw ShapeError("row_logsumexp: empty axis");
    Tensor out = Tensor::zeros({va.rows()});
    for (std::size_t i = 0; i < va.rows(); ++i) {
      double m = va.at(i, 0);
      for (std::size_t j = 0; j < va.cols(); ++j) m = std::max(m, va.at(i, j));
      double s = 0.0;
      for (std::size_t j = 0; j < va.cols(); ++j) s += std::exp(va.at(i, j) - m);
      out.data[i] = m + std::log(s);
    }
    return push(std::move(out), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  Tensor g = Tensor::zeros(va2.shape);
                  for (std::size_t i = 0; i < va2.rows(); ++i)
                    for (std::size_t j = 0; j < va2.cols(); ++j)
                      g.at(i, j) = self.grad.data[i] *
                                   std::exp(va2.at(i, j) - self.value.data[i]);
                  t.accumulate(self.parents[0], g);
                });
  }

  // -- shaping ---------------------------------------------------------------------

  Var reshape(Var a, std::vector<std::size_t> shape) {
    const Tensor& va = val(a);
    if (Tensor::numel_of(shape) != va.numel())
      throw ShapeError("reshape: element count mismatch");
    Tensor out(shape, va.data);
    return push(std::move(out), needs(a), {a.idx},
                [](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  Tensor g(va2.shape, self.grad.data);
                  t.accumulate(self.parents[0], g);
                });
  }

  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Tensor& va = val(a);
    if (va.rank() != 2 || c1 > va.cols() || c0 >= c1)
      throw ShapeError("slice_cols: bad column range");
    Tensor out = Tensor::zeros({va.rows(), c1 - c0});
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = c0; j < c1; ++j) out.at(i, j - c0) = va.at(i, j);
    return push(std::move(out), needs(a), {a.idx},
                [c0, c1](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  Tensor g = Tensor::zeros(va2.shape);
                  for (std::size_t i = 0; i < va2.rows(); ++i)
                    for (std::size_t j = c0; j < c1; ++j)
                      g.at(i, j) = self.grad.at(i, j - c0);
                  t.accumulate(self.parents[0], g);
                });
  }

  Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
    const Tensor& va = val(a);
    bool vec = va.rank() == 1;
    std::size_t nrows = vec ? va.numel() : va.rows();
    if (r1 > nrows || r0 >= r1) throw ShapeError("slice_rows: bad row range");
    std::size_t width = vec ? 1 : va.cols();
    Tensor out = vec ? Tensor::zeros({r1 - r0})
                     : Tensor::zeros({r1 - r0, width});
    std::copy(va.data.begin() + r0 * width, va.data.begin() + r1 * width,
              out.data.begin());
    return push(std::move(out), needs(a), {a.idx},
                [r0, width](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  Tensor g = Tensor::zeros(va2.shape);
                  std::copy(self.grad.data.begin(), self.grad.data.end(),
                            g.data.begin() + r0 * width);
                  t.accumulate(self.parents[0], g);
                });
  }

  Var concat_cols(Var a, Var b) {
    const Tensor& va = val(a);
    const Tensor& vb = val(b);
    if (va.rank() != 2 || vb.rank() != 2 || va.rows() != vb.rows())
      throw ShapeError("concat_cols: row mismatch");
    Tensor out = Tensor::zeros({va.rows(), va.cols() + vb.cols()});
    for (std::size_t i = 0; i < va.rows(); ++i) {
      for (std::size_t j = 0; j < va.cols(); ++j) out.at(i, j) = va.at(i, j);
      for (std::size_t j = 0; j < vb.cols(); ++j)
        out.at(i, va.cols() + j) = vb.at(i, j);
    }
    std::size_t ca = va.cols();
    return push(std::move(out), needs(a) || needs(b), {a.idx, b.idx},
                [ca](Tape& t, const Node& self) {
                  const Tensor& va2 = t.node_at(self.parents[0]).value;
                  const Tensor& vb2 = t.node_at(self.parents[1]).value;
                  Tensor ga = Tensor::zeros(va2.shape);
                  Tensor gb = Tensor::zeros(vb2.shape);
                  for (std::size_t i = 0; i < va2.rows(); ++i) {
                    for (std::size_t j = 0; j < va2.cols(); ++j)
                      ga.at(i, j) = self.grad.at(i, j);
                    for (std::size_t j = 0; j < vb2.cols(); ++j)
                      gb.at(i, j) = self.grad.at(i, ca + j);
                  }
                  t.accumulate(self.parents[0], ga);
                  t.accumulate(self.parents[1], gb);
                });
  }

  // m scalar nodes -> one [m] vector node.
  Var stack_scalars(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("stack_scalars: empty input");
    Tensor out = Tensor::zeros({xs.size()});
    bool any = false;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (val(xs[i]).numel() != 1)
        throw ShapeError("stack_scalars: inputs must be scalars");
      out.data[i] = val(xs[i]).data[0];
      any = any || needs(xs[i]);
    }
    std::vector<int> parents;
    parents.reserve(xs.size());
    for (Var v : xs) parents.push_back(v.idx);
    Node n;
    n.value = std::move(out);
    n.requires_grad = any;
    n.extra_parents = std::move(parents);
    n.back = [](Tape& t, const Node& self) {
      for (std::size_t i = 0; i < self.extra_parents.size(); ++i)
        t.accumulate(self.extra_parents[i],
                     Tensor::scalar(self.grad.data[i]));
    };
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // -- backward -------------------------------------------------------------------

  void backward(Var loss) {
    const Tensor& lv = val(loss);
    if (lv.numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got " +
                       lv.shape_str());
    for (auto& n : nodes_) n.grad = Tensor();
    node_mut(loss).grad = Tensor::scalar(1.0);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.numel() == 0 || !n.back) continue;
      n.back(*this, n);
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::array<int, 2> parents{-1, -1};
    std::vector<int> extra_parents;  // only for stack_scalars
    std::function<void(Tape&, const Node&)> back;
  };

  Var push(Tensor value, bool track_grad,
           std::initializer_list<int> parents,
           std::function<void(Tape&, const Node&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = track_grad;
    int i = 0;
    for (int p : parents) n.parents[static_cast<std::size_t>(i++)] = p;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Node& node(Var v) const {
    if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
      throw UsageError("Tape: invalid Var handle");
    return nodes_[static_cast<std::size_t>(v.idx)];
  }
  Node& node_mut(Var v) {
    return const_cast<Node&>(node(v));
  }
  const Node& node_at(int idx) const {
    return nodes_[static_cast<std::size_t>(idx)];
  }

  bool needs(Var v) const { return node(v).requires_grad; }

  void check_same(Var a, Var b, const char* op) const {
    if (!val(a).same_shape(val(b)))
      throw ShapeError(std::string(op) + ": shape mismatch " +
                       val(a).shape_str() + " vs " + val(b).shape_str());
  }

  void accumulate(int idx, const Tensor& g) {
    if (idx < 0) return;
    Node& n = nodes_[static_cast<std::size_t>(idx)];
    if (!n.requires_grad) return;
    if (n.grad.numel() == 0) {
      n.grad = g;
      return;
    }
    for (std::size_t i = 0; i < g.numel(); ++i) n.grad.data[i] += g.data[i];
  }

  std::vector<Node> nodes_;
  mutable Tensor zero_cache_;
};

// ---------------------------------------------------------------------------
// MLP spec, parameter store, Adam
// ---------------------------------------------------------------------------

struct MLPSpec {
  std::vector<std::size_t> widths;  // input, hidden..., output
  Act hidden = Act::Softplus;
  OutAct output = OutAct::Linear;

  std::size_t layers() const { return widths.size() - 1; }
  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }

  void validate() const {
    if (widths.size() < 2)
      throw UsageError("MLPSpec: need at least input and output widths");
    for (std::size_t w : widths)
      if (w == 0) throw UsageError("MLPSpec: zero layer width");
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (lr <= 0 || beta1 <= 0 || beta2 <= 0 || eps <= 0)
      throw UsageError("AdamConfig: hyperparameters must be positive");
    if (beta1 >= 1 || beta2 >= 1)
      throw UsageError("AdamConfig: beta1/beta2 must be < 1");
  }
};

class ParamStore {
 public:
  using GradMap = std::map<std::string, Tensor>;

  void insert(const std::string& name, Tensor t) {
    if (params_.count(name))
      throw UsageError("ParamStore: duplicate parameter '" + name + "'");
    params_.emplace(name, std::move(t));
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end())
      throw UsageError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end())
      throw UsageError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Tensor>& all() const { return params_; }
  std::map<std::string, Tensor>& all_mut() { return params_; }

  long long step_count() const { return t_; }

  // Standard Adam with bias correction; grads must be keyed exactly like the
  // parameters. The step counter is shared across all parameters.
  void adam_step(const GradMap& grads, const AdamConfig& cfg) {
    cfg.validate();
    for (const auto& [name, g] : grads)
      if (!params_.count(name))
        throw UsageError("adam_step: gradient for unknown parameter '" + name +
                         "'");
    for (const auto& [name, p] : params_)
      if (!grads.count(name))
        throw UsageError("adam_step: missing gradient for parameter '" + name +
                         "'");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params_) {
      const Tensor& g = grads.at(name);
      if (!g.same_shape(p))
        throw ShapeError("adam_step: gradient shape mismatch for '" + name +
                         "'");
      Moments& mo = adam_[name];
      if (mo.m.numel() == 0) {
        mo.m = Tensor::zeros(p.shape);
        mo.v = Tensor::zeros(p.shape);
      }
      for (std::size_t i = 0; i < p.numel(); ++i) {
        double gi = g.data[i];
        mo.m.data[i] = cfg.beta1 * mo.m.data[i] + (1.0 - cfg.beta1) * gi;
        mo.v.data[i] = cfg.beta2 * mo.v.data[i] + (1.0 - cfg.beta2) * gi * gi;
        double mhat = mo.m.data[i] / bc1;
        double vhat = mo.v.data[i] / bc2;
        p.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      }
    }
  }

 private:
  struct Moments {
    Tensor m, v;
  };
  std::map<std::string, Tensor> params_;
  std::map<std::string, Moments> adam_;
  long long t_ = 0;
};

// Glorot-normal initialization for one dense layer.
inline Tensor glorot_normal(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  double sd = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  Tensor w = Tensor::zeros({fan_in, fan_out});
  for (double& x : w.data) x = sd * rng.normal();
  return w;
}

inline void init_mlp_params(ParamStore& store, const std::string& prefix,
                            const MLPSpec& spec, Rng& rng) {
  spec.validate();
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    store.insert(prefix + ".W" + std::to_string(l),
                 glorot_normal(spec.widths[l], spec.widths[l + 1], rng));
    store.insert(prefix + ".b" + std::to_string(l),
                 Tensor::zeros({spec.widths[l + 1]}));
  }
}

// Binds every parameter in the store as a tape leaf so one backward pass
// yields a full gradient map.
struct TapeParams {
  std::map<std::string, Var> leaves;

  static TapeParams bind(Tape& tape, const ParamStore& store) {
    TapeParams tp;
    for (const auto& [name, t] : store.all()) tp.leaves[name] = tape.leaf(t);
    return tp;
  }

  Var at(const std::string& name) const {
    auto it = leaves.find(name);
    if (it == leaves.end())
      throw UsageError("TapeParams: parameter '" + name + "' not bound");
    return it->second;
  }

  ParamStore::GradMap gradients(const Tape& tape) const {
    ParamStore::GradMap g;
    for (const auto& [name, v] : leaves) g[name] = tape.grad(v);
    return g;
  }
};

// Affine + activation composition through the tape.
// Shape mismatches report the offending layer.
inline Var mlp_forward(Tape& tape, const MLPSpec& spec, const TapeParams& tp,
                       const std::string& prefix, Var input) {
  spec.validate();
  const Tensor& in = tape.val(input);
  if (in.rank() != 2 || in.cols() != spec.input_width())
    throw ShapeError("mlp_forward(" + prefix + "): layer 0 expects input width " +
                     std::to_string(spec.input_width()) + ", got " +
                     in.shape_str());
  Var h = input;
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    Var w = tp.at(prefix + ".W" + std::to_string(l));
    Var b = tp.at(prefix + ".b" + std::to_string(l));
    if (tape.val(h).cols() != tape.val(w).rows())
      throw ShapeError("mlp_forward(" + prefix + "): layer " +
                       std::to_string(l) + " width mismatch");
    h = tape.add_rowvec(tape.matmul(h, w), b);
    bool last = (l + 2 == spec.widths.size());
    if (!last) {
      h = tape.activation(h, spec.hidden);
    } else if (spec.output == OutAct::Softplus) {
      h = tape.softplus(h);
    }
  }
  return h;
}

// Frozen-parameter forward pass without a tape; safe for concurrent use.
inline Tensor mlp_eval(const MLPSpec& spec, const ParamStore& store,
                       const std::string& prefix, const Tensor& input) {
  spec.validate();
  if (input.rank() != 2 || input.cols() != spec.input_width())
    throw ShapeError("mlp_eval(" + prefix + "): layer 0 expects input width " +
                     std::to_string(spec.input_width()) + ", got " +
                     input.shape_str());
  Tensor h = input;
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    const Tensor& w = store.at(prefix + ".W" + std::to_string(l));
    const Tensor& b = store.at(prefix + ".b" + std::to_string(l));
    Tensor out = Tensor::zeros({h.rows(), w.cols()});
    ConstMatMap H(h.data.data(), h.rows(), h.cols());
    ConstMatMap W(w.data.data(), w.rows(), w.cols());
    MatMap O(out.data.data(), out.rows(), out.cols());
    O.noalias() = H * W;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += b.data[j];
    bool last = (l + 2 == spec.widths.size());
    if (!last) {
      for (double& x : out.data) x = detail::act_val(spec.hidden, x);
    } else if (spec.output == OutAct::Softplus) {
      for (double& x : out.data) x = detail::softplus_val(x);
    }
    h = std::move(out);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Parameter checkpoints: versioned JSON, name -> (shape, row-major values).
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "rd-params-v1";

inline void save_params(const ParamStore& store, const std::string& path) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  nlohmann::json tensors = nlohmann::json::object();
  for (const auto& [name, t] : store.all()) {
    tensors[name] = {{"shape", t.shape}, {"data", t.data}};
  }
  j["tensors"] = std::move(tensors);
  std::ofstream os(path);
  if (!os) throw IoError("save_params: cannot open '" + path + "'");
  os << j.dump(2) << "\n";
}

inline ParamStore load_params(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("load_params: cannot open '" + path + "'");
  nlohmann::json j;
  is >> j;
  if (!j.contains("format") || j["format"] != kCheckpointFormat)
    throw IoError("load_params: unsupported checkpoint format in '" + path +
                  "'");
  ParamStore store;
  for (auto it = j["tensors"].begin(); it != j["tensors"].end(); ++it) {
    std::vector<std::size_t> shape =
        it.value()["shape"].get<std::vector<std::size_t>>();
    std::vector<double> data = it.value()["data"].get<std::vector<double>>();
    store.insert(it.key(), Tensor(std::move(shape), std::move(data)));
  }
  return store;
}

}  // namespace rd::diff
