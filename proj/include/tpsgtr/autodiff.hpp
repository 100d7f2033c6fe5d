#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tpsgtr/tensor.hpp"

namespace tpsgtr {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid for the tape's lifetime.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

using GradientMap = std::map<std::string, Tensor>;

// Reverse-mode differentiation tape. Records primitive operations in forward
// order; backward() replays them in exact reverse order, accumulating
// gradients for every registered parameter (zero for parameters off the loss
// path). A tape is confined to one evaluation and must not be shared across
// concurrent evaluations.
class Tape {
  enum class Op : std::uint8_t {
    input,
    param,
    add,
    mul,
    scale,
    matvec,
    row,
    concat,
    slice,
    tanh,
    sigmoid,
    softmax,
    log_softmax,
    pick,
    sum,
    dot,
    weighted_sum,
  };

  struct Node {
    Op op;
    bool requires_grad;
    int a = -1, b = -1;       // primary operands
    int pbegin = 0, pcount = 0;  // operand list for concat / weighted_sum
    int index = 0, extent = 0;   // row / pick / slice parameters
    double factor = 0.0;         // scale multiplier
    Tensor value;
  };

 public:
  Var input(Tensor value) { return push(Op::input, std::move(value), false); }

  Var param(const std::string& name, Tensor value) {
    for (const auto& [n, id] : params_) {
      if (n == name) throw ContractError("parameter '" + name + "' registered twice");
    }
    Var v = push(Op::param, std::move(value), true);
    params_.emplace_back(name, v.id);
    return v;
  }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }

  Var add(Var a, Var b) {
    Node n = binary(Op::add, a, b);
    n.value = tpsgtr::add(val(a), val(b));
    return push(std::move(n));
  }

  Var mul(Var a, Var b) {
    Node n = binary(Op::mul, a, b);
    n.value = tpsgtr::mul(val(a), val(b));
    return push(std::move(n));
  }

  Var scale(Var a, double k) {
    Node n = unary(Op::scale, a);
    n.factor = k;
    n.value = tpsgtr::scale(val(a), k);
    return push(std::move(n));
  }

  Var matvec(Var m, Var x) {
    Node n = binary(Op::matvec, m, x);
    n.value = tpsgtr::matvec(val(m), val(x));
    return push(std::move(n));
  }

  // Row of a matrix; the usual embedding lookup.
  Var row(Var m, std::size_t r) {
    const Tensor& mv = val(m);
    if (mv.rank() != 2 || r >= mv.rows()) {
      throw DimensionError("row " + std::to_string(r) + " out of range for shape " + shape_str(mv.shape()));
    }
    Node n = unary(Op::row, m);
    n.index = static_cast<int>(r);
    Tensor out({mv.cols()});
    for (std::size_t c = 0; c < mv.cols(); ++c) out[c] = mv.at(r, c);
    n.value = std::move(out);
    return push(std::move(n));
  }

  Var concat(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat of zero vectors");
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    bool grad = false;
    for (Var p : parts) {
      vals.push_back(val(p));
      grad = grad || nodes_[check(p)].requires_grad;
    }
    Node n;
    n.op = Op::concat;
    n.requires_grad = grad;
    n.pbegin = static_cast<int>(operands_.size());
    n.pcount = static_cast<int>(parts.size());
    for (Var p : parts) operands_.push_back(p.id);
    n.value = tpsgtr::concat(vals);
    return push(std::move(n));
  }

  Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

  Var slice(Var a, std::size_t offset, std::size_t len) {
    const Tensor& av = val(a);
    if (av.rank() != 1 || offset + len > av.size()) {
      throw DimensionError("slice [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                           ") out of range for shape " + shape_str(av.shape()));
    }
    Node n = unary(Op::slice, a);
    n.index = static_cast<int>(offset);
    n.extent = static_cast<int>(len);
    Tensor out({len});
    for (std::size_t i = 0; i < len; ++i) out[i] = av[offset + i];
    n.value = std::move(out);
    return push(std::move(n));
  }

  Var tanh(Var a) {
    Node n = unary(Op::tanh, a);
    n.value = tpsgtr::tanh(val(a));
    return push(std::move(n));
  }

  Var sigmoid(Var a) {
    Node n = unary(Op::sigmoid, a);
    n.value = tpsgtr::sigmoid(val(a));
    return push(std::move(n));
  }

  Var softmax(Var a) {
    Node n = unary(Op::softmax, a);
    n.value = tpsgtr::softmax(val(a));
    return push(std::move(n));
  }

  Var log_softmax(Var a) {
    Node n = unary(Op::log_softmax, a);
    n.value = tpsgtr::log_softmax(val(a));
    return push(std::move(n));
  }

  // Scalar element of a vector.
  Var pick(Var a, std::size_t i) {
    const Tensor& av = val(a);
    if (av.rank() != 1 || i >= av.size()) {
      throw DimensionError("pick index " + std::to_string(i) + " out of range for shape " + shape_str(av.shape()));
    }
    Node n = unary(Op::pick, a);
    n.index = static_cast<int>(i);
    n.value = Tensor::scalar(av[i]);
    return push(std::move(n));
  }

  Var sum(Var a) {
    Node n = unary(Op::sum, a);
    n.value = Tensor::scalar(tpsgtr::sum(val(a)));
    return push(std::move(n));
  }

  Var dot(Var a, Var b) {
    Node n = binary(Op::dot, a, b);
    n.value = Tensor::scalar(tpsgtr::dot(val(a), val(b)));
    return push(std::move(n));
  }

  // sum_i coeffs[i] * vectors[i]; coefficient count must match vector count.
  Var weighted_sum(Var coeffs, std::span<const Var> vectors) {
    const Tensor& cv = val(coeffs);
    if (cv.rank() != 1 || cv.size() != vectors.size()) {
      throw DimensionError("weighted_sum: " + std::to_string(vectors.size()) + " vectors vs coefficient shape " +
                           shape_str(cv.shape()));
    }
    bool grad = nodes_[check(coeffs)].requires_grad;
    Tensor acc({val(vectors[0]).size()});
    for (std::size_t i = 0; i < vectors.size(); ++i) {
      const Tensor& vi = val(vectors[i]);
      require_same_shape(acc, vi, "weighted_sum");
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += cv[i] * vi[j];
      grad = grad || nodes_[check(vectors[i])].requires_grad;
    }
    Node n;
    n.op = Op::weighted_sum;
    n.requires_grad = grad;
    n.a = coeffs.id;
    n.pbegin = static_cast<int>(operands_.size());
    n.pcount = static_cast<int>(vectors.size());
    for (Var v : vectors) operands_.push_back(v.id);
    n.value = std::move(acc);
    return push(std::move(n));
  }

  // Gradients of a scalar loss with respect to every registered parameter.
  GradientMap backward(Var loss) {
    const int lid = check(loss);
    if (nodes_[lid].value.size() != 1) {
      throw ContractError("backward expects a scalar loss, got shape " + shape_str(nodes_[lid].value.shape()));
    }
    std::vector<Tensor> grads(nodes_.size());
    std::vector<char> seeded(nodes_.size(), 0);
    auto grad_of = [&](int id) -> Tensor& {
      if (!seeded[id]) {
        grads[id] = Tensor(nodes_[id].value.shape());
        seeded[id] = 1;
      }
      return grads[id];
    };
    grad_of(lid)[0] = 1.0;

    for (int id = lid; id >= 0; --id) {
      if (!seeded[id] || !nodes_[id].requires_grad) continue;
      const Node& n = nodes_[id];
      const Tensor& g = grads[id];
      switch (n.op) {
        case Op::input:
        case Op::param:
          break;
        case Op::add: {
          accumulate(grad_of, n.a, g);
          accumulate(grad_of, n.b, g);
          break;
        }
        case Op::mul: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            const Tensor& bv = nodes_[n.b].value;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
          }
          if (wants(n.b)) {
            Tensor& gb = grad_of(n.b);
            const Tensor& av = nodes_[n.a].value;
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
          }
          break;
        }
        case Op::scale: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.factor * g[i];
          }
          break;
        }
        case Op::matvec: {
          const Tensor& mv = nodes_[n.a].value;
          const Tensor& xv = nodes_[n.b].value;
          const std::size_t rows = mv.rows(), cols = mv.cols();
          if (wants(n.a)) {
            Tensor& gm = grad_of(n.a);
            for (std::size_t r = 0; r < rows; ++r) {
              const double gr = g[r];
              if (gr == 0.0) continue;
              double* grow = gm.data().data() + r * cols;
              for (std::size_t c = 0; c < cols; ++c) grow[c] += gr * xv[c];
            }
          }
          if (wants(n.b)) {
            Tensor& gx = grad_of(n.b);
            for (std::size_t r = 0; r < rows; ++r) {
              const double gr = g[r];
              if (gr == 0.0) continue;
              const double* row = mv.data().data() + r * cols;
              for (std::size_t c = 0; c < cols; ++c) gx[c] += gr * row[c];
            }
          }
          break;
        }
        case Op::row: {
          if (wants(n.a)) {
            Tensor& gm = grad_of(n.a);
            const std::size_t cols = nodes_[n.a].value.cols();
            double* grow = gm.data().data() + static_cast<std::size_t>(n.index) * cols;
            for (std::size_t c = 0; c < cols; ++c) grow[c] += g[c];
          }
          break;
        }
        case Op::concat: {
          std::size_t off = 0;
          for (int k = 0; k < n.pcount; ++k) {
            const int pid = operands_[n.pbegin + k];
            const std::size_t len = nodes_[pid].value.size();
            if (wants(pid)) {
              Tensor& gp = grad_of(pid);
              for (std::size_t i = 0; i < len; ++i) gp[i] += g[off + i];
            }
            off += len;
          }
          break;
        }
        case Op::slice: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            for (int i = 0; i < n.extent; ++i) ga[n.index + i] += g[i];
          }
          break;
        }
        case Op::tanh: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            const Tensor& y = n.value;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
          }
          break;
        }
        case Op::sigmoid: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            const Tensor& y = n.value;
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
          }
          break;
        }
        case Op::softmax: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            const Tensor& y = n.value;
            double gy = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) gy += g[i] * y[i];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += y[i] * (g[i] - gy);
          }
          break;
        }
        case Op::log_softmax: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            const Tensor& y = n.value;
            double gs = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) gs += g[i];
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] - std::exp(y[i]) * gs;
          }
          break;
        }
        case Op::pick: {
          if (wants(n.a)) grad_of(n.a)[n.index] += g[0];
          break;
        }
        case Op::sum: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
          }
          break;
        }
        case Op::dot: {
          if (wants(n.a)) {
            Tensor& ga = grad_of(n.a);
            const Tensor& bv = nodes_[n.b].value;
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * bv[i];
          }
          if (wants(n.b)) {
            Tensor& gb = grad_of(n.b);
            const Tensor& av = nodes_[n.a].value;
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * av[i];
          }
          break;
        }
        case Op::weighted_sum: {
          const Tensor& cv = nodes_[n.a].value;
          const bool want_coeffs = wants(n.a);
          for (int k = 0; k < n.pcount; ++k) {
            const int pid = operands_[n.pbegin + k];
            const Tensor& vk = nodes_[pid].value;
            if (want_coeffs) {
              double acc = 0.0;
              for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * vk[i];
              grad_of(n.a)[k] += acc;
            }
            if (wants(pid)) {
              Tensor& gv = grad_of(pid);
              const double ck = cv[k];
              for (std::size_t i = 0; i < g.size(); ++i) gv[i] += ck * g[i];
            }
          }
          break;
        }
      }
    }

    GradientMap out;
    for (const auto& [name, id] : params_) {
      out[name] = seeded[id] ? std::move(grads[id]) : Tensor(nodes_[id].value.shape());
    }
    return out;
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  std::vector<int> operands_;
  std::vector<std::pair<std::string, int>> params_;

  int check(Var v) const {
    if (v.tape != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw ContractError("variable does not belong to this tape");
    }
    return v.id;
  }

  const Tensor& val(Var v) const { return nodes_[check(v)].value; }

  bool wants(int id) const { return nodes_[id].requires_grad; }

  template <typename GradOf>
  void accumulate(GradOf& grad_of, int id, const Tensor& g) {
    if (!wants(id)) return;
    Tensor& dst = grad_of(id);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  Node unary(Op op, Var a) {
    Node n;
    n.op = op;
    n.a = check(a);
    n.requires_grad = nodes_[n.a].requires_grad;
    return n;
  }

  Node binary(Op op, Var a, Var b) {
    Node n;
    n.op = op;
    n.a = check(a);
    n.b = check(b);
    n.requires_grad = nodes_[n.a].requires_grad || nodes_[n.b].requires_grad;
    return n;
  }

  Var push(Op op, Tensor value, bool requires_grad) {
    Node n;
    n.op = op;
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }
};

// A scalar function of named parameters, expressed as a tape program. The
// function must register each entry of the parameter map exactly once via
// Tape::param and return the scalar loss node.
using ScalarFn = std::function<Var(Tape&, const std::map<std::string, Tensor>&)>;

struct FdReport {
  double max_rel_error = 0.0;
  std::map<std::string, double> per_param;
};

namespace detail {

inline double eval_scalar(const ScalarFn& f, const std::map<std::string, Tensor>& params) {
  Tape t;
  Var loss = f(t, params);
  const Tensor& v = t.value(loss);
  if (v.size() != 1) throw ContractError("scalar function returned shape " + shape_str(v.shape()));
  return v[0];
}

}  // namespace detail

// Central-difference check of backward() against f, coordinate by coordinate.
// Relative error is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline FdReport finite_difference_report(const ScalarFn& f, std::map<std::string, Tensor> params, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw ArgumentError("finite-difference step " + std::to_string(eps) + " outside [1e-7, 1e-4]");
  }

  Tape tape;
  Var loss = f(tape, params);
  if (tape.value(loss).size() != 1) {
    throw ContractError("scalar function returned shape " + shape_str(tape.value(loss).shape()));
  }
  const double base = tape.value(loss)[0];
  GradientMap analytic = tape.backward(loss);

  if (detail::eval_scalar(f, params) != base) {
    throw ContractError("function is not deterministic: repeated evaluations differ");
  }

  FdReport report;
  for (auto& [name, tensor] : params) {
    if (analytic.find(name) == analytic.end()) {
      throw ContractError("function did not register parameter '" + name + "'");
    }
    double worst = 0.0;
    const Tensor& grad = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + eps;
      const double up = detail::eval_scalar(f, params);
      tensor[i] = saved - eps;
      const double down = detail::eval_scalar(f, params);
      tensor[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = grad[i];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
    report.per_param[name] = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  return report;
}

inline double finite_difference_check(const ScalarFn& f, std::map<std::string, Tensor> params, double eps) {
  return finite_difference_report(f, std::move(params), eps).max_rel_error;
}

}  // namespace tpsgtr
