#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "icrl/diffcore/tensor.hpp"

namespace icrl::diff {

enum class OpKind : std::uint8_t {
  Constant,
  Parameter,
  MatMul,
  BatchMatMul,
  Add,
  Sub,
  Mul,
  Scale,
  AddBroadcast,
  LayerNorm,
  Softmax,
  CausalSoftmax,
  Embedding,
  Gelu,
  Relu,
  Tanh,
  Dropout,
  MaskAggregate,
  Concat,
  Permute,
  Reshape,
  L2Normalize,
  Sum,
  Mean,
  CrossEntropy,
  Mse,
  Detach,
  Conv2d,
  Upsample2x,
  CausalAttention,
};

inline const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Constant: return "constant";
    case OpKind::Parameter: return "parameter";
    case OpKind::MatMul: return "matmul";
    case OpKind::BatchMatMul: return "bmm";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddBroadcast: return "add_broadcast";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Softmax: return "softmax";
    case OpKind::CausalSoftmax: return "causal_softmax";
    case OpKind::Embedding: return "embedding";
    case OpKind::Gelu: return "gelu";
    case OpKind::Relu: return "relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Dropout: return "dropout";
    case OpKind::MaskAggregate: return "mask_aggregate";
    case OpKind::Concat: return "concat";
    case OpKind::Permute: return "permute";
    case OpKind::Reshape: return "reshape";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::Mse: return "mse";
    case OpKind::Detach: return "detach";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Upsample2x: return "upsample2x";
    case OpKind::CausalAttention: return "causal_attention";
  }
  return "?";
}

/// A trainable tensor living outside any graph. Graphs read `value` and
/// accumulate into `grad`.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool decay = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v, bool wd = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(wd) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    else grad.fill(T(0));
  }
};

template <typename T>
class Graph;

/// Handle to a node of a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Shape& shape() const { return graph->node(id).shape; }
  const Tensor<T>& value() const { return graph->node(id).value; }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
};

/// Lazily evaluated computation graph. Nodes are appended in creation order,
/// which is a topological order since inputs must exist first.
template <typename T>
class Graph {
 public:
  using Kernel = std::function<void(Graph&, int)>;

  struct Node {
    OpKind op = OpKind::Constant;
    std::vector<int> inputs;
    Shape shape;
    Tensor<T> value;
    Tensor<T> grad;
    bool evaluated = false;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    Kernel forward_fn;
    Kernel backward_fn;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.op = OpKind::Constant;
    n.shape = value.shape();
    n.value = std::move(value);
    n.evaluated = true;
    return push(std::move(n));
  }

  Var<T> parameter(Parameter<T>& p) {
    Node n;
    n.op = OpKind::Parameter;
    n.shape = p.value.shape();
    n.param = &p;
    n.needs_grad = true;
    n.forward_fn = [](Graph& g, int self) {
      auto& node = g.node(self);
      node.value = node.param->value;
    };
    return push(std::move(n));
  }

  /// Appends an op node. `fwd` must fill node(self).value with `shape`;
  /// `bwd` reads node(self).grad and accumulates into inputs via grad_of().
  Var<T> add_op(OpKind op, std::vector<int> inputs, Shape shape, Kernel fwd,
                Kernel bwd) {
    Node n;
    n.op = op;
    n.shape = std::move(shape);
    for (int in : inputs) n.needs_grad = n.needs_grad || nodes_.at(in).needs_grad;
    n.inputs = std::move(inputs);
    n.forward_fn = std::move(fwd);
    n.backward_fn = std::move(bwd);
    return push(std::move(n));
  }

  Node& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return nodes_.size(); }

  bool wants_grad(int id) const { return node(id).needs_grad; }

  /// Gradient buffer of a node, zero-allocated on first use.
  Tensor<T>& grad_of(int id) {
    auto& n = node(id);
    if (n.grad.shape() != n.shape || n.grad.size() != shape_numel(n.shape)) {
      n.grad = Tensor<T>(n.shape);
    }
    return n.grad;
  }

  /// Evaluates every unevaluated ancestor of `root` in creation order.
  const Tensor<T>& forward(Var<T> root) {
    check_owner(root);
    auto reach = reachable(root.id);
    for (int id = 0; id <= root.id; ++id) {
      if (!reach[static_cast<std::size_t>(id)]) continue;
      auto& n = node(id);
      if (n.evaluated) continue;
      n.forward_fn(*this, id);
      n.evaluated = true;
      if (n.value.shape() != n.shape) {
        throw ShapeError(std::string(op_name(n.op)) + ": kernel produced " +
                         shape_str(n.value.shape()) + ", expected " + shape_str(n.shape));
      }
      if (!n.value.all_finite()) {
        throw NumericError(std::string(op_name(n.op)) + ": non-finite output of shape " +
                           shape_str(n.shape));
      }
    }
    return node(root.id).value;
  }

  /// Reverse pass from a scalar root. Parameter leaves accumulate into
  /// Parameter::grad; constant leaves are left untouched.
  void backward(Var<T> root) {
    check_owner(root);
    auto& r = node(root.id);
    if (!r.evaluated) throw GraphError("backward called before forward");
    if (r.value.size() != 1) {
      throw GraphError("backward root must be scalar, got " + shape_str(r.shape));
    }
    auto reach = reachable(root.id);
    for (int id = 0; id <= root.id; ++id) {
      if (reach[static_cast<std::size_t>(id)]) node(id).grad = Tensor<T>();
    }
    grad_of(root.id)[0] = T(1);
    for (int id = root.id; id >= 0; --id) {
      auto& n = node(id);
      if (!reach[static_cast<std::size_t>(id)] || !n.needs_grad || n.grad.empty()) continue;
      if (n.op == OpKind::Parameter) {
        auto& p = *n.param;
        if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
        for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
      } else if (n.backward_fn) {
        n.backward_fn(*this, id);
      }
    }
  }

 private:
  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  void check_owner(Var<T> v) const {
    if (v.graph != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
      throw GraphError("variable does not belong to this graph");
    }
  }

  std::vector<char> reachable(int root) const {
    std::vector<char> seen(static_cast<std::size_t>(root) + 1, 0);
    std::vector<int> stack{root};
    seen[static_cast<std::size_t>(root)] = 1;
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      for (int in : node(id).inputs) {
        if (!seen[static_cast<std::size_t>(in)]) {
          seen[static_cast<std::size_t>(in)] = 1;
          stack.push_back(in);
        }
      }
    }
    return seen;
  }

  std::vector<Node> nodes_;
};

}  // namespace icrl::diff
