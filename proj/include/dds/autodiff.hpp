// Reverse-mode differentiation over an explicit operation record.
//
// A Graph is an append-only tape of primitive operations. Leaves are added
// with input()/constant(); every other node names its producing operation and
// its operands, so the record is acyclic by construction and replaying it is
// bit-exact. Records are built once and re-executed many times: update leaf
// values in place, call forward(), then backward() to accumulate gradients
// for every differentiable leaf.
//
// The primitive set is exactly what the flows and the decomposition loss
// need; there is no general broadcasting.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dds/tensor.hpp"

namespace dds {

// SELU constants from Klambauer et al.
inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;

inline double selu(double x) {
  return x > 0.0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * std::expm1(x);
}

inline double selu_derivative(double x) {
  return x > 0.0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(x);
}

enum class Op : std::uint8_t {
  kLeaf,
  kMatmul,     // a[m,k] * b[k,n]
  kAdd,        // a + b, same shape
  kSub,        // a - b, same shape
  kMul,        // a ⊙ b, same shape
  kDiv,        // a ⊘ b, same shape
  kScalarMul,  // a * s, s is 1x1
  kConstMul,   // a * c
  kConstAdd,   // a + c
  kSelu,
  kTanh,
  kExp,
  kLog,
  kSum,        // -> 1x1
  kL2Norm,     // -> 1x1
  kSliceCols,  // a[:, lo:hi]
  kConcatCols, // [a | b]
  kPermuteCols,// out[:, j] = a[:, perm[j]]
  kBiasAdd,    // a[m,n] + b[1,n] per row
  kClampMin,   // max(a, c) elementwise
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kScalarMul: return "scalar_mul";
    case Op::kConstMul: return "const_mul";
    case Op::kConstAdd: return "const_add";
    case Op::kSelu: return "selu";
    case Op::kTanh: return "tanh";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSum: return "sum";
    case Op::kL2Norm: return "l2norm";
    case Op::kSliceCols: return "slice_cols";
    case Op::kConcatCols: return "concat_cols";
    case Op::kPermuteCols: return "permute_cols";
    case Op::kBiasAdd: return "bias_add";
    case Op::kClampMin: return "clamp_min";
  }
  return "?";
}

using NodeId = int;

class Graph {
 public:
  NodeId input(Tensor v, bool differentiable = true) {
    return push(Op::kLeaf, -1, -1, std::move(v), differentiable);
  }

  NodeId constant(Tensor v) { return input(std::move(v), false); }

  NodeId matmul(NodeId a, NodeId b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (ta.cols() != tb.rows())
      throw std::invalid_argument("matmul: inner dimensions disagree (" +
                                  ta.shape_str() + " * " + tb.shape_str() + ")");
    return push(Op::kMatmul, a, b, Tensor(ta.rows(), tb.cols()));
  }

  NodeId add(NodeId a, NodeId b) { return binary_same(Op::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary_same(Op::kSub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary_same(Op::kMul, a, b); }
  NodeId div(NodeId a, NodeId b) { return binary_same(Op::kDiv, a, b); }

  NodeId scalar_mul(NodeId a, NodeId s) {
    if (val(s).size() != 1)
      throw std::invalid_argument("scalar_mul: multiplier must be 1x1");
    return push(Op::kScalarMul, a, s, Tensor(val(a).rows(), val(a).cols()));
  }

  NodeId const_mul(NodeId a, double c) {
    NodeId id = push(Op::kConstMul, a, -1, Tensor(val(a).rows(), val(a).cols()));
    nodes_[id].c = c;
    return id;
  }

  NodeId const_add(NodeId a, double c) {
    NodeId id = push(Op::kConstAdd, a, -1, Tensor(val(a).rows(), val(a).cols()));
    nodes_[id].c = c;
    return id;
  }

  NodeId selu_op(NodeId a) { return unary(Op::kSelu, a); }
  NodeId tanh_op(NodeId a) { return unary(Op::kTanh, a); }
  NodeId exp_op(NodeId a) { return unary(Op::kExp, a); }
  NodeId log_op(NodeId a) { return unary(Op::kLog, a); }

  NodeId sum(NodeId a) { return push(Op::kSum, a, -1, Tensor(1, 1)); }
  NodeId l2norm(NodeId a) { return push(Op::kL2Norm, a, -1, Tensor(1, 1)); }

  NodeId slice_cols(NodeId a, std::size_t lo, std::size_t hi) {
    const auto& t = val(a);
    if (lo > hi || hi > t.cols())
      throw std::invalid_argument("slice_cols: bad range");
    NodeId id = push(Op::kSliceCols, a, -1, Tensor(t.rows(), hi - lo));
    nodes_[id].lo = lo;
    nodes_[id].hi = hi;
    return id;
  }

  NodeId concat_cols(NodeId a, NodeId b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (ta.rows() != tb.rows())
      throw std::invalid_argument("concat_cols: row counts disagree");
    return push(Op::kConcatCols, a, b, Tensor(ta.rows(), ta.cols() + tb.cols()));
  }

  NodeId permute_cols(NodeId a, std::vector<std::size_t> perm) {
    const auto& t = val(a);
    if (perm.size() != t.cols())
      throw std::invalid_argument("permute_cols: permutation size mismatch");
    NodeId id = push(Op::kPermuteCols, a, -1, Tensor(t.rows(), t.cols()));
    nodes_[id].perm = std::move(perm);
    return id;
  }

  NodeId bias_add(NodeId a, NodeId b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (tb.rows() != 1 || tb.cols() != ta.cols())
      throw std::invalid_argument("bias_add: bias must be 1x" + std::to_string(ta.cols()));
    return push(Op::kBiasAdd, a, b, Tensor(ta.rows(), ta.cols()));
  }

  NodeId clamp_min(NodeId a, double floor) {
    NodeId id = push(Op::kClampMin, a, -1, Tensor(val(a).rows(), val(a).cols()));
    nodes_[id].c = floor;
    return id;
  }

  // --- execution ---

  // Recomputes every node in record order. Returns the output value when the
  // record ends in a scalar, NaN shape errors aside.
  double forward() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      eval(static_cast<NodeId>(i));
      if (check_finite_ && !nodes_[i].val.all_finite())
        throw std::runtime_error(std::string("non-finite value produced by op '") +
                                 op_name(nodes_[i].op) + "' (node " +
                                 std::to_string(i) + ")");
    }
    const Tensor& out = nodes_.back().val;
    return out.size() == 1 ? out[0] : std::nan("");
  }

  // Accumulates d(output)/d(node) into each differentiable node's grad
  // buffer. The record must end in a scalar.
  void backward() {
    if (nodes_.empty()) throw std::logic_error("backward: empty record");
    if (nodes_.back().val.size() != 1)
      throw std::invalid_argument("backward: output is not a scalar (" +
                                  nodes_.back().val.shape_str() + ")");
    for (auto& n : nodes_)
      if (n.requires_grad) n.grad.fill(0.0);
    nodes_.back().grad[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      if (!nodes_[i].requires_grad || nodes_[i].op == Op::kLeaf) continue;
      propagate(i);
      if (check_finite_) {
        auto check = [&](NodeId in) {
          if (in >= 0 && nodes_[in].requires_grad && !nodes_[in].grad.all_finite())
            throw std::runtime_error(std::string("non-finite gradient in backward of op '") +
                                     op_name(nodes_[i].op) + "' (node " +
                                     std::to_string(i) + ")");
        };
        check(nodes_[i].a);
        check(nodes_[i].b);
      }
    }
  }

  const Tensor& value(NodeId id) const { return nodes_[id].val; }
  const Tensor& grad(NodeId id) const {
    if (!nodes_[id].requires_grad)
      throw std::logic_error("grad: node does not require gradients");
    return nodes_[id].grad;
  }

  // Mutable access to a leaf's value buffer (shape is fixed).
  Tensor& leaf_value(NodeId id) {
    if (nodes_[id].op != Op::kLeaf) throw std::logic_error("leaf_value: not a leaf");
    return nodes_[id].val;
  }

  void set_value(NodeId id, const Tensor& v) {
    Tensor& dst = leaf_value(id);
    if (!dst.same_shape(v)) throw std::invalid_argument("set_value: shape mismatch");
    dst = v;
  }

  NodeId output() const { return static_cast<NodeId>(nodes_.size()) - 1; }
  std::size_t node_count() const { return nodes_.size(); }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  bool is_leaf(NodeId id) const { return nodes_[id].op == Op::kLeaf; }

  std::vector<NodeId> differentiable_leaves() const {
    std::vector<NodeId> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::kLeaf && nodes_[i].requires_grad)
        out.push_back(static_cast<NodeId>(i));
    return out;
  }

  // Full validation (finiteness scan per node) — used by the one-shot
  // evaluate_with_gradient entry point; hot loops leave it off and check the
  // final loss only.
  void set_check_finite(bool on) { check_finite_ = on; }

 private:
  struct Node {
    Op op;
    NodeId a = -1, b = -1;
    Tensor val, grad;
    bool requires_grad = false;
    double c = 0.0;
    std::size_t lo = 0, hi = 0;
    std::vector<std::size_t> perm;
  };

  const Tensor& val(NodeId id) const { return nodes_[id].val; }

  NodeId push(Op op, NodeId a, NodeId b, Tensor shape, bool leaf_diff = false) {
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    if (op == Op::kLeaf) {
      n.requires_grad = leaf_diff;
    } else {
      n.requires_grad = (a >= 0 && nodes_[a].requires_grad) ||
                        (b >= 0 && nodes_[b].requires_grad);
    }
    n.val = std::move(shape);
    if (n.requires_grad) n.grad = Tensor(n.val.rows(), n.val.cols());
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size()) - 1;
  }

  NodeId unary(Op op, NodeId a) {
    return push(op, a, -1, Tensor(val(a).rows(), val(a).cols()));
  }

  NodeId binary_same(Op op, NodeId a, NodeId b) {
    if (!val(a).same_shape(val(b)))
      throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch (" +
                                  val(a).shape_str() + " vs " + val(b).shape_str() + ")");
    return push(op, a, b, Tensor(val(a).rows(), val(a).cols()));
  }

  void eval(NodeId id) {
    Node& n = nodes_[id];
    if (n.op == Op::kLeaf) return;
    const Tensor* A = n.a >= 0 ? &nodes_[n.a].val : nullptr;
    const Tensor* B = n.b >= 0 ? &nodes_[n.b].val : nullptr;
    double* o = n.val.data();
    const std::size_t sz = n.val.size();
    switch (n.op) {
      case Op::kMatmul:
        matmul_nn(o, A->data(), B->data(), A->rows(), A->cols(), B->cols(), false);
        break;
      case Op::kAdd:
        for (std::size_t i = 0; i < sz; ++i) o[i] = (*A)[i] + (*B)[i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < sz; ++i) o[i] = (*A)[i] - (*B)[i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < sz; ++i) o[i] = (*A)[i] * (*B)[i];
        break;
      case Op::kDiv:
        for (std::size_t i = 0; i < sz; ++i) o[i] = (*A)[i] / (*B)[i];
        break;
      case Op::kScalarMul: {
        const double s = (*B)[0];
        for (std::size_t i = 0; i < sz; ++i) o[i] = (*A)[i] * s;
        break;
      }
      case Op::kConstMul:
        for (std::size_t i = 0; i < sz; ++i) o[i] = (*A)[i] * n.c;
        break;
      case Op::kConstAdd:
        for (std::size_t i = 0; i < sz; ++i) o[i] = (*A)[i] + n.c;
        break;
      case Op::kSelu:
        for (std::size_t i = 0; i < sz; ++i) o[i] = selu((*A)[i]);
        break;
      case Op::kTanh:
        for (std::size_t i = 0; i < sz; ++i) o[i] = std::tanh((*A)[i]);
        break;
      case Op::kExp:
        for (std::size_t i = 0; i < sz; ++i) o[i] = std::exp((*A)[i]);
        break;
      case Op::kLog:
        for (std::size_t i = 0; i < sz; ++i) o[i] = std::log((*A)[i]);
        break;
      case Op::kSum: {
        double s = 0.0;
        for (std::size_t i = 0; i < A->size(); ++i) s += (*A)[i];
        o[0] = s;
        break;
      }
      case Op::kL2Norm: {
        double s = 0.0;
        for (std::size_t i = 0; i < A->size(); ++i) s += (*A)[i] * (*A)[i];
        o[0] = std::sqrt(s);
        break;
      }
      case Op::kSliceCols: {
        const std::size_t w = n.hi - n.lo;
        for (std::size_t r = 0; r < A->rows(); ++r)
          for (std::size_t j = 0; j < w; ++j) o[r * w + j] = A->at(r, n.lo + j);
        break;
      }
      case Op::kConcatCols: {
        const std::size_t ca = A->cols(), cb = B->cols();
        for (std::size_t r = 0; r < A->rows(); ++r) {
          for (std::size_t j = 0; j < ca; ++j) o[r * (ca + cb) + j] = A->at(r, j);
          for (std::size_t j = 0; j < cb; ++j) o[r * (ca + cb) + ca + j] = B->at(r, j);
        }
        break;
      }
      case Op::kPermuteCols: {
        const std::size_t cc = A->cols();
        for (std::size_t r = 0; r < A->rows(); ++r)
          for (std::size_t j = 0; j < cc; ++j) o[r * cc + j] = A->at(r, n.perm[j]);
        break;
      }
      case Op::kBiasAdd: {
        const std::size_t cc = A->cols();
        for (std::size_t r = 0; r < A->rows(); ++r)
          for (std::size_t j = 0; j < cc; ++j) o[r * cc + j] = A->at(r, j) + (*B)[j];
        break;
      }
      case Op::kClampMin:
        for (std::size_t i = 0; i < sz; ++i) o[i] = (*A)[i] > n.c ? (*A)[i] : n.c;
        break;
      case Op::kLeaf:
        break;
    }
  }

  void propagate(NodeId id) {
    Node& n = nodes_[id];
    const Tensor& g = n.grad;
    Tensor* ga = (n.a >= 0 && nodes_[n.a].requires_grad) ? &nodes_[n.a].grad : nullptr;
    Tensor* gb = (n.b >= 0 && nodes_[n.b].requires_grad) ? &nodes_[n.b].grad : nullptr;
    const Tensor* A = n.a >= 0 ? &nodes_[n.a].val : nullptr;
    const Tensor* B = n.b >= 0 ? &nodes_[n.b].val : nullptr;
    const std::size_t sz = n.val.size();
    switch (n.op) {
      case Op::kMatmul:
        if (ga) matmul_nt(ga->data(), g.data(), B->data(), A->rows(), B->cols(), A->cols(), true);
        if (gb) matmul_tn(gb->data(), A->data(), g.data(), A->cols(), A->rows(), B->cols(), true);
        break;
      case Op::kAdd:
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i];
        if (gb) for (std::size_t i = 0; i < sz; ++i) (*gb)[i] += g[i];
        break;
      case Op::kSub:
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i];
        if (gb) for (std::size_t i = 0; i < sz; ++i) (*gb)[i] -= g[i];
        break;
      case Op::kMul:
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i] * (*B)[i];
        if (gb) for (std::size_t i = 0; i < sz; ++i) (*gb)[i] += g[i] * (*A)[i];
        break;
      case Op::kDiv:
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i] / (*B)[i];
        if (gb)
          for (std::size_t i = 0; i < sz; ++i)
            (*gb)[i] -= g[i] * (*A)[i] / ((*B)[i] * (*B)[i]);
        break;
      case Op::kScalarMul: {
        const double s = (*B)[0];
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i] * s;
        if (gb) {
          double acc = 0.0;
          for (std::size_t i = 0; i < sz; ++i) acc += g[i] * (*A)[i];
          (*gb)[0] += acc;
        }
        break;
      }
      case Op::kConstMul:
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i] * n.c;
        break;
      case Op::kConstAdd:
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i];
        break;
      case Op::kSelu:
        if (ga)
          for (std::size_t i = 0; i < sz; ++i)
            (*ga)[i] += g[i] * selu_derivative((*A)[i]);
        break;
      case Op::kTanh:
        if (ga)
          for (std::size_t i = 0; i < sz; ++i)
            (*ga)[i] += g[i] * (1.0 - n.val[i] * n.val[i]);
        break;
      case Op::kExp:
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i] * n.val[i];
        break;
      case Op::kLog:
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i] / (*A)[i];
        break;
      case Op::kSum:
        if (ga) {
          const double gs = g[0];
          for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += gs;
        }
        break;
      case Op::kL2Norm:
        if (ga) {
          // Subgradient 0 at the origin.
          const double norm = n.val[0];
          const double gs = norm > 0.0 ? g[0] / norm : 0.0;
          for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += gs * (*A)[i];
        }
        break;
      case Op::kSliceCols:
        if (ga) {
          const std::size_t w = n.hi - n.lo;
          for (std::size_t r = 0; r < ga->rows(); ++r)
            for (std::size_t j = 0; j < w; ++j) ga->at(r, n.lo + j) += g[r * w + j];
        }
        break;
      case Op::kConcatCols: {
        const std::size_t ca = A->cols(), cb = B->cols();
        for (std::size_t r = 0; r < n.val.rows(); ++r) {
          if (ga)
            for (std::size_t j = 0; j < ca; ++j)
              ga->at(r, j) += g[r * (ca + cb) + j];
          if (gb)
            for (std::size_t j = 0; j < cb; ++j)
              gb->at(r, j) += g[r * (ca + cb) + ca + j];
        }
        break;
      }
      case Op::kPermuteCols:
        if (ga) {
          const std::size_t cc = ga->cols();
          for (std::size_t r = 0; r < ga->rows(); ++r)
            for (std::size_t j = 0; j < cc; ++j)
              ga->at(r, n.perm[j]) += g[r * cc + j];
        }
        break;
      case Op::kBiasAdd: {
        const std::size_t cc = n.val.cols();
        if (ga) for (std::size_t i = 0; i < sz; ++i) (*ga)[i] += g[i];
        if (gb)
          for (std::size_t r = 0; r < n.val.rows(); ++r)
            for (std::size_t j = 0; j < cc; ++j) (*gb)[j] += g[r * cc + j];
        break;
      }
      case Op::kClampMin:
        if (ga)
          for (std::size_t i = 0; i < sz; ++i)
            if ((*A)[i] > n.c) (*ga)[i] += g[i];
        break;
      case Op::kLeaf:
        break;
    }
  }

  std::vector<Node> nodes_;
  bool check_finite_ = false;
};

struct GradientEval {
  double value = 0.0;
  std::map<NodeId, Tensor> gradients;  // one entry per differentiable leaf
};

// One-shot evaluation with full finiteness checks on.
inline GradientEval evaluate_with_gradient(Graph& g) {
  g.set_check_finite(true);
  const double value = g.forward();
  g.backward();
  g.set_check_finite(false);
  GradientEval out;
  out.value = value;
  for (NodeId leaf : g.differentiable_leaves()) out.gradients[leaf] = g.grad(leaf);
  return out;
}

// Central differences (f(x+h) - f(x-h)) / 2h per coordinate of one leaf.
// Verification oracle; independent of the backward pass.
inline Tensor finite_difference_gradient(Graph& g, NodeId leaf, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_difference_gradient: step must be > 0");
  Tensor& x = g.leaf_value(leaf);
  if (g.value(g.output()).size() != 1 && g.forward(),
      g.value(g.output()).size() != 1)
    throw std::invalid_argument("finite_difference_gradient: record must end in a scalar");
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double fp = g.forward();
    x[i] = orig - step;
    const double fm = g.forward();
    x[i] = orig;
    out[i] = (fp - fm) / (2.0 * step);
  }
  g.forward();  // restore cached values
  return out;
}

}  // namespace dds
