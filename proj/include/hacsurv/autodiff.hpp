#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hacsurv/common.hpp"

namespace hacsurv::ad {

enum class Op : std::uint8_t {
  Leaf,
  Const,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Exp,
  Log,
  Pow,  // constant exponent, kept in d1
  Tanh,
  Sigmoid,
  Softplus,
  Max,
  Custom,  // caller-supplied local partials over an arbitrary parent list
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Pow: return "pow";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Max: return "max";
    case Op::Custom: return "custom";
  }
  return "?";
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::int32_t idx = -1;
  double val = 0.0;

  double value() const { return val; }
};

// Append-only computation record. Parent indices always precede a node, so a
// single reverse sweep propagates adjoints exactly once per node.
class Tape {
 public:
  struct Node {
    Op op;
    std::int32_t p0 = -1;  // Custom: offset into the parent pool
    std::int32_t p1 = -1;  // Custom: parent count
    double d0 = 0.0;       // local d(node)/d(p0); Pow keeps the exponent in d1
    double d1 = 0.0;
  };

  Tape() { nodes_.reserve(1024); }

  std::size_t size() const { return nodes_.size(); }

  // Checkpoint/rewind; invalidates Vars created after the mark.
  struct Mark {
    std::size_t nodes;
    std::size_t pool;
  };
  Mark mark() const { return {nodes_.size(), pool_parents_.size()}; }
  void rewind(Mark m) {
    nodes_.resize(m.nodes);
    values_.resize(m.nodes);
    pool_parents_.resize(m.pool);
    pool_partials_.resize(m.pool);
  }

  Var leaf(double v) { return push(Op::Leaf, v, -1, -1, 0, 0); }
  Var constant(double v) { return push(Op::Const, v, -1, -1, 0, 0); }

  Var add(Var a, Var b) { return push(Op::Add, a.val + b.val, a.idx, b.idx, 1, 1); }
  Var sub(Var a, Var b) { return push(Op::Sub, a.val - b.val, a.idx, b.idx, 1, -1); }
  Var mul(Var a, Var b) { return push(Op::Mul, a.val * b.val, a.idx, b.idx, b.val, a.val); }
  Var div(Var a, Var b) {
    double v = a.val / b.val;
    return push(Op::Div, v, a.idx, b.idx, 1.0 / b.val, -v / b.val);
  }
  Var neg(Var a) { return push(Op::Neg, -a.val, a.idx, -1, -1, 0); }
  Var exp(Var a) {
    double v = std::exp(a.val);
    return push(Op::Exp, v, a.idx, -1, v, 0);
  }
  Var log(Var a) { return push(Op::Log, std::log(a.val), a.idx, -1, 1.0 / a.val, 0); }
  Var pow(Var a, double p) {
    double v = std::pow(a.val, p);
    return push(Op::Pow, v, a.idx, -1, p * std::pow(a.val, p - 1.0), p);
  }
  Var tanh(Var a) {
    double v = std::tanh(a.val);
    return push(Op::Tanh, v, a.idx, -1, 1.0 - v * v, 0);
  }
  Var sigmoid(Var a) {
    double v = 1.0 / (1.0 + std::exp(-a.val));
    return push(Op::Sigmoid, v, a.idx, -1, v * (1.0 - v), 0);
  }
  Var softplus(Var a) {
    // log(1+e^x), stable on both tails.
    double v = a.val > 0 ? a.val + std::log1p(std::exp(-a.val))
                         : std::log1p(std::exp(a.val));
    double s = 1.0 / (1.0 + std::exp(-a.val));
    return push(Op::Softplus, v, a.idx, -1, s, 0);
  }
  Var max(Var a, Var b) {
    bool left = a.val >= b.val;
    return push(Op::Max, left ? a.val : b.val, a.idx, b.idx, left ? 1.0 : 0.0,
                left ? 0.0 : 1.0);
  }

  // Node with externally derived local partials (implicit functions, frozen
  // generator evaluations). Opaque to grad_vars.
  Var custom(double value, std::span<const Var> parents,
             std::span<const double> partials, const char* what = "custom") {
    if (parents.size() != partials.size())
      throw StructureError("custom node: parent/partial size mismatch");
    auto offset = static_cast<std::int32_t>(pool_parents_.size());
    for (std::size_t i = 0; i < parents.size(); ++i) {
      pool_parents_.push_back(parents[i].idx);
      pool_partials_.push_back(partials[i]);
      if (!finite(partials[i]))
        throw NumericError(std::string("non-finite partial in ") + what);
    }
    Node n{Op::Custom, offset, static_cast<std::int32_t>(parents.size()), 0, 0};
    return push_node(n, value, what);
  }

  double value(std::int32_t idx) const { return values_[static_cast<std::size_t>(idx)]; }

  // Plain reverse sweep: adjoints as doubles.
  std::vector<double> gradient(Var root) const {
    std::vector<double> adj;
    gradient_into(root, adj);
    return adj;
  }

  // Same sweep into a caller-owned buffer (training loops reuse it).
  void gradient_into(Var root, std::vector<double>& adj) const {
    check_root(root);
    adj.assign(nodes_.size(), 0.0);
    adj[static_cast<std::size_t>(root.idx)] = 1.0;
    for (std::int32_t i = root.idx; i >= 0; --i) {
      double a = adj[static_cast<std::size_t>(i)];
      if (a == 0.0) continue;
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      switch (n.op) {
        case Op::Leaf:
        case Op::Const:
          break;
        case Op::Custom: {
          for (std::int32_t k = 0; k < n.p1; ++k) {
            adj[static_cast<std::size_t>(pool_parents_[static_cast<std::size_t>(n.p0 + k)])] +=
                a * pool_partials_[static_cast<std::size_t>(n.p0 + k)];
          }
          break;
        }
        case Op::Pow:
          adj[static_cast<std::size_t>(n.p0)] += a * n.d0;
          break;
        default:
          adj[static_cast<std::size_t>(n.p0)] += a * n.d0;
          if (n.p1 >= 0) adj[static_cast<std::size_t>(n.p1)] += a * n.d1;
          break;
      }
    }
  }

  // Reverse sweep recorded on the tape itself: each adjoint is a Var, so the
  // result can be differentiated again. Custom nodes are rejected because
  // their partials are opaque numbers.
  std::vector<Var> gradient_vars(Var root) {
    check_root(root);
    std::vector<Var> adj(static_cast<std::size_t>(root.idx) + 1);
    std::vector<bool> seen(static_cast<std::size_t>(root.idx) + 1, false);
    adj[static_cast<std::size_t>(root.idx)] = constant(1.0);
    seen[static_cast<std::size_t>(root.idx)] = true;
    auto accum = [&](std::int32_t p, Var contrib) {
      if (seen[static_cast<std::size_t>(p)])
        adj[static_cast<std::size_t>(p)] = add(adj[static_cast<std::size_t>(p)], contrib);
      else {
        adj[static_cast<std::size_t>(p)] = contrib;
        seen[static_cast<std::size_t>(p)] = true;
      }
    };
    for (std::int32_t i = root.idx; i >= 0; --i) {
      if (!seen[static_cast<std::size_t>(i)]) continue;
      Var a = adj[static_cast<std::size_t>(i)];
      const Node n = nodes_[static_cast<std::size_t>(i)];  // copy: tape grows below
      Var self{this, i, values_[static_cast<std::size_t>(i)]};
      Var parent0{this, n.p0, n.p0 >= 0 ? values_[static_cast<std::size_t>(n.p0)] : 0.0};
      Var parent1{this, n.p1, n.p1 >= 0 ? values_[static_cast<std::size_t>(n.p1)] : 0.0};
      switch (n.op) {
        case Op::Leaf:
        case Op::Const:
          break;
        case Op::Custom:
          throw StructureError(
              "gradient_vars: custom node is not differentiable twice");
        case Op::Add:
          accum(n.p0, a);
          accum(n.p1, a);
          break;
        case Op::Sub:
          accum(n.p0, a);
          accum(n.p1, neg(a));
          break;
        case Op::Mul:
          accum(n.p0, mul(a, parent1));
          accum(n.p1, mul(a, parent0));
          break;
        case Op::Div:
          accum(n.p0, div(a, parent1));
          accum(n.p1, neg(div(mul(a, self), parent1)));
          break;
        case Op::Neg:
          accum(n.p0, neg(a));
          break;
        case Op::Exp:
          accum(n.p0, mul(a, self));
          break;
        case Op::Log:
          accum(n.p0, div(a, parent0));
          break;
        case Op::Pow:
          accum(n.p0, mul(a, mul(constant(n.d1), pow(parent0, n.d1 - 1.0))));
          break;
        case Op::Tanh:
          accum(n.p0, mul(a, sub(constant(1.0), mul(self, self))));
          break;
        case Op::Sigmoid:
          accum(n.p0, mul(a, mul(self, sub(constant(1.0), self))));
          break;
        case Op::Softplus:
          accum(n.p0, mul(a, sigmoid(parent0)));
          break;
        case Op::Max:
          accum(n.p0, mul(a, constant(n.d0)));
          accum(n.p1, mul(a, constant(n.d1)));
          break;
      }
    }
    return adj;
  }

 private:
  void check_root(Var root) const {
    if (root.tape != this || root.idx < 0 ||
        static_cast<std::size_t>(root.idx) >= nodes_.size())
      throw StructureError("backward: root does not belong to this tape");
    if (!finite(root.val)) throw NumericError("backward: non-finite root value");
  }

  Var push(Op op, double value, std::int32_t p0, std::int32_t p1, double d0,
           double d1) {
    Node n{op, p0, p1, d0, d1};
    return push_node(n, value, op_name(op));
  }

  Var push_node(const Node& n, double value, const char* what) {
    if (!finite(value))
      throw NumericError(std::string("non-finite value produced by primitive '") +
                         what + "'");
    nodes_.push_back(n);
    values_.push_back(value);
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1), value};
  }

  std::vector<Node> nodes_;
  std::vector<double> values_;
  std::vector<std::int32_t> pool_parents_;
  std::vector<double> pool_partials_;
};

// Operator sugar; every operand must live on the same tape.
inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator/(Var a, Var b) { return a.tape->div(a, b); }
inline Var operator-(Var a) { return a.tape->neg(a); }
inline Var operator+(Var a, double b) { return a.tape->add(a, a.tape->constant(b)); }
inline Var operator+(double a, Var b) { return b.tape->add(b.tape->constant(a), b); }
inline Var operator-(Var a, double b) { return a.tape->sub(a, a.tape->constant(b)); }
inline Var operator-(double a, Var b) { return b.tape->sub(b.tape->constant(a), b); }
inline Var operator*(Var a, double b) { return a.tape->mul(a, a.tape->constant(b)); }
inline Var operator*(double a, Var b) { return b.tape->mul(b.tape->constant(a), b); }
inline Var operator/(Var a, double b) { return a.tape->div(a, a.tape->constant(b)); }
inline Var operator/(double a, Var b) { return b.tape->div(b.tape->constant(a), b); }

inline Var exp(Var a) { return a.tape->exp(a); }
inline Var log(Var a) { return a.tape->log(a); }
inline Var pow(Var a, double p) { return a.tape->pow(a, p); }
inline Var tanh(Var a) { return a.tape->tanh(a); }
inline Var sigmoid(Var a) { return a.tape->sigmoid(a); }
inline Var softplus(Var a) { return a.tape->softplus(a); }
inline Var max(Var a, Var b) { return a.tape->max(a, b); }

inline double backward(Var root, Var wrt) {
  return root.tape->gradient(root)[static_cast<std::size_t>(wrt.idx)];
}

// d^2 f / dx^2 via reverse-over-reverse: the first backward pass is recorded
// with tape primitives, then differentiated again.
inline double second_derivative(const std::function<Var(Var)>& f, double x) {
  Tape tape;
  Var vx = tape.leaf(x);
  Var y = f(vx);
  std::vector<Var> g = tape.gradient_vars(y);
  Var gx = g[static_cast<std::size_t>(vx.idx)];
  if (gx.tape == nullptr) return 0.0;  // f does not depend on x
  return backward(gx, vx);
}

}  // namespace hacsurv::ad
