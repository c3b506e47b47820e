#pragma once

// Tape-based reverse mode. The vector-Jacobian product of every op is itself
// written in terms of graph ops, so backward(..., create_graph = true) yields
// gradients that can be differentiated again.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mlab/kernels.hpp"
#include "mlab/tensor.hpp"

namespace mlab {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
  Leaf,
  Add,
  Sub,
  Hadamard,
  Scale,
  MatMul,
  Conv2d,
  Conv2dInputGrad,
  Conv2dWeightGrad,
  MaxPool2x2,
  Gather,
  Scatter,
  Relu,
  Reshape,
  ChannelBroadcast,
  ChannelSum,
  AffineNorm,
  Sum,
  Mean,
  Fill,
  Softmax,
  SoftmaxCrossEntropy,
  Dot,
  L2Norm,
  Reciprocal,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Hadamard: return "hadamard";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dInputGrad: return "conv2d_input_grad";
    case Op::Conv2dWeightGrad: return "conv2d_weight_grad";
    case Op::MaxPool2x2: return "maxpool2x2";
    case Op::Gather: return "gather";
    case Op::Scatter: return "scatter";
    case Op::Relu: return "relu";
    case Op::Reshape: return "flatten";
    case Op::ChannelBroadcast: return "channel_broadcast";
    case Op::ChannelSum: return "channel_sum";
    case Op::AffineNorm: return "affine_norm";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Fill: return "fill";
    case Op::Softmax: return "softmax";
    case Op::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case Op::Dot: return "dot";
    case Op::L2Norm: return "l2_norm";
    case Op::Reciprocal: return "reciprocal";
  }
  return "unknown";
}

inline std::optional<Op> op_from_name(std::string_view name) {
  for (int i = 0; i <= static_cast<int>(Op::Reciprocal); ++i) {
    const auto op = static_cast<Op>(i);
    if (op_name(op) == name) return op;
  }
  return std::nullopt;
}

struct Node {
  Op op = Op::Leaf;
  std::vector<NodeId> inputs;
  std::shared_ptr<const Tensor> value;
  bool requires_grad = false;
  // Op attributes; only the ones an op needs are populated.
  double factor = 0.0;
  bool trans_a = false;
  bool trans_b = false;
  Shape shape;
  std::shared_ptr<const std::vector<std::size_t>> index;
};

class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  NodeId id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Named parameter handles (the ParamRef collection of a ParamSet).
using VarMap = std::map<std::string, Var>;

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var parameter(Tensor value) { return leaf(std::move(value), true); }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Constant alias sharing the value of `v`; gradients stop here.
  Var detach(Var v) {
    Node n;
    n.value = nodes_.at(v.id()).value;
    return push(std::move(n));
  }

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
  }

  /// Test hook: the VJP of `op` is scaled by 1.5 so gradient checks fail.
  void inject_fault(std::optional<Op> op) { fault_ = op; }
  std::optional<Op> fault() const noexcept { return fault_; }

  /// Gradients of the scalar `root` with respect to `wrt`, in the same order.
  /// Parameters unreachable from the root get a zero gradient of their shape.
  /// With create_graph the returned gradients are differentiable graph nodes;
  /// otherwise they are constants.
  std::vector<Var> backward(Var root, std::span<const Var> wrt,
                            bool create_graph);

  VarMap grad(Var root, const VarMap& wrt, bool create_graph) {
    std::vector<Var> targets;
    targets.reserve(wrt.size());
    for (const auto& [name, v] : wrt) targets.push_back(v);
    const auto grads = backward(root, targets, create_graph);
    VarMap out;
    std::size_t i = 0;
    for (const auto& [name, v] : wrt) out.emplace(name, grads[i++]);
    return out;
  }

 private:
  Var leaf(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::make_shared<const Tensor>(std::move(value));
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
  std::optional<Op> fault_;
};

inline const Tensor& Var::value() const { return *graph_->node(id_).value; }
inline bool Var::requires_grad() const {
  return graph_->node(id_).requires_grad;
}

namespace detail {

inline Graph& same_graph(const char* op, std::initializer_list<Var> vars) {
  Graph* g = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw Error(std::string(op) + ": uninitialised operand");
    if (g && &v.graph() != g) {
      throw Error(std::string(op) + ": operands belong to different graphs");
    }
    g = &v.graph();
  }
  return *g;
}

inline Var make(Op op, std::initializer_list<Var> inputs, Tensor value,
                Node attrs = {}) {
  Graph& g = same_graph(op_name(op).data(), inputs);
  attrs.op = op;
  attrs.value = std::make_shared<const Tensor>(std::move(value));
  attrs.requires_grad = false;
  for (const Var& v : inputs) {
    attrs.inputs.push_back(v.id());
    attrs.requires_grad = attrs.requires_grad || v.requires_grad();
  }
  return g.push(std::move(attrs));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
  return detail::make(Op::Add, {a, b}, kernels::add(a.value(), b.value()));
}

inline Var sub(Var a, Var b) {
  return detail::make(Op::Sub, {a, b}, kernels::sub(a.value(), b.value()));
}

inline Var hadamard(Var a, Var b) {
  return detail::make(Op::Hadamard, {a, b},
                      kernels::hadamard(a.value(), b.value()));
}

inline Var scale(Var a, double s) {
  Node attrs;
  attrs.factor = s;
  return detail::make(Op::Scale, {a}, kernels::scale(a.value(), s), attrs);
}

inline Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
  Node attrs;
  attrs.trans_a = trans_a;
  attrs.trans_b = trans_b;
  return detail::make(Op::MatMul, {a, b},
                      kernels::matmul(a.value(), b.value(), trans_a, trans_b),
                      attrs);
}

inline Var conv2d(Var x, Var w) {
  return detail::make(Op::Conv2d, {x, w}, kernels::conv2d(x.value(), w.value()));
}

inline Var conv2d_input_grad(Var g, Var w) {
  return detail::make(Op::Conv2dInputGrad, {g, w},
                      kernels::conv2d_input_grad(g.value(), w.value()));
}

inline Var conv2d_weight_grad(Var x, Var g) {
  return detail::make(Op::Conv2dWeightGrad, {x, g},
                      kernels::conv2d_weight_grad(x.value(), g.value()));
}

inline Var maxpool2x2(Var x) {
  const Shape& s = x.shape();
  auto idx = std::make_shared<const std::vector<std::size_t>>(
      kernels::maxpool2x2_argmax(x.value()));
  Node attrs;
  attrs.shape = {s[0], s[1], s[2] / 2, s[3] / 2};
  Tensor out = kernels::gather(x.value(), *idx, attrs.shape);
  attrs.index = std::move(idx);
  return detail::make(Op::MaxPool2x2, {x}, std::move(out), attrs);
}

inline Var gather(Var x, std::shared_ptr<const std::vector<std::size_t>> idx,
                  Shape out_shape) {
  Node attrs;
  Tensor out = kernels::gather(x.value(), *idx, out_shape);
  attrs.shape = std::move(out_shape);
  attrs.index = std::move(idx);
  return detail::make(Op::Gather, {x}, std::move(out), attrs);
}

inline Var scatter(Var g, std::shared_ptr<const std::vector<std::size_t>> idx,
                   Shape out_shape) {
  Node attrs;
  Tensor out = kernels::scatter_add(g.value(), *idx, out_shape);
  attrs.shape = std::move(out_shape);
  attrs.index = std::move(idx);
  return detail::make(Op::Scatter, {g}, std::move(out), attrs);
}

inline Var relu(Var x) {
  return detail::make(Op::Relu, {x}, kernels::relu(x.value()));
}

inline Var reshape(Var x, Shape shape) {
  Node attrs;
  Tensor out = x.value().reshaped(shape);
  attrs.shape = std::move(shape);
  return detail::make(Op::Reshape, {x}, std::move(out), attrs);
}

/// [N, ...] -> [N, prod(...)]
inline Var flatten(Var x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("flatten", "rank >= 1", s);
  return reshape(x, {s[0], x.value().numel() / s[0]});
}

inline Var channel_broadcast(Var v, Shape shape) {
  Node attrs;
  Tensor out = kernels::channel_broadcast(v.value(), shape);
  attrs.shape = std::move(shape);
  return detail::make(Op::ChannelBroadcast, {v}, std::move(out), attrs);
}

inline Var channel_sum(Var x) {
  return detail::make(Op::ChannelSum, {x}, kernels::channel_sum(x.value()));
}

/// Per-channel (axis 1) learnable scale and shift: x * scale[c] + shift[c].
inline Var affine_norm(Var x, Var scale_, Var shift) {
  return detail::make(Op::AffineNorm, {x, scale_, shift},
                      kernels::affine_norm(x.value(), scale_.value(), shift.value()));
}

/// x + b[c] along axis 1 (conv and linear biases).
inline Var add_bias(Var x, Var b) {
  return add(x, channel_broadcast(b, x.shape()));
}

inline Var sum(Var x) {
  return detail::make(Op::Sum, {x}, Tensor::scalar(kernels::sum(x.value())));
}

inline Var mean(Var x) {
  const double n = static_cast<double>(x.value().numel());
  return detail::make(Op::Mean, {x}, Tensor::scalar(kernels::sum(x.value()) / n));
}

/// Scalar s broadcast to `shape`.
inline Var fill(Var s, Shape shape) {
  if (s.value().numel() != 1) throw ShapeError("fill", "scalar", s.shape());
  Node attrs;
  Tensor out = Tensor::full(shape, s.value()[0]);
  attrs.shape = std::move(shape);
  return detail::make(Op::Fill, {s}, std::move(out), attrs);
}

inline Var softmax(Var z) {
  return detail::make(Op::Softmax, {z}, kernels::softmax(z.value()));
}

/// Mean over the batch of the cross-entropy between softmax(z) and labels.
inline Var softmax_cross_entropy(Var z, std::vector<std::size_t> labels) {
  const double loss = kernels::softmax_cross_entropy(z.value(), labels);
  Node attrs;
  attrs.index = std::make_shared<const std::vector<std::size_t>>(std::move(labels));
  return detail::make(Op::SoftmaxCrossEntropy, {z}, Tensor::scalar(loss), attrs);
}

inline Var dot(Var a, Var b) {
  return detail::make(Op::Dot, {a, b},
                      Tensor::scalar(kernels::dot(a.value(), b.value())));
}

inline Var l2_norm(Var x) {
  const double n = std::sqrt(kernels::dot(x.value(), x.value()));
  return detail::make(Op::L2Norm, {x}, Tensor::scalar(n));
}

inline Var reciprocal(Var x) {
  return detail::make(Op::Reciprocal, {x}, kernels::reciprocal(x.value()));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

/// Vector-Jacobian products of one node. Contributions are written into
/// `out[i]` for each input i that needs a gradient.
inline void vjp(Graph& g, NodeId id, Var u, const std::vector<bool>& needs,
                bool create_graph, std::vector<Var>& out) {
  const Node& n = g.node(id);
  // Snapshot what the rules need: pushing nodes may reallocate storage.
  const Op op = n.op;
  const std::vector<NodeId> ids = n.inputs;
  const Shape attr_shape = n.shape;
  const auto index = n.index;
  const double factor = n.factor;
  const bool ta = n.trans_a, tb = n.trans_b;

  auto in = [&](std::size_t i) {
    Var v(&g, ids[i]);
    return create_graph ? v : g.detach(v);
  };
  auto self = [&] {
    Var v(&g, id);
    return create_graph ? v : g.detach(v);
  };
  auto need = [&](std::size_t i) { return static_cast<bool>(needs[ids[i]]); };
  auto shape_of = [&](std::size_t i) { return g.node(ids[i]).value->shape(); };

  out.assign(ids.size(), Var{});
  switch (op) {
    case Op::Leaf:
      break;
    case Op::Add:
      if (need(0)) out[0] = u;
      if (need(1)) out[1] = u;
      break;
    case Op::Sub:
      if (need(0)) out[0] = u;
      if (need(1)) out[1] = scale(u, -1.0);
      break;
    case Op::Hadamard:
      if (need(0)) out[0] = hadamard(u, in(1));
      if (need(1)) out[1] = hadamard(u, in(0));
      break;
    case Op::Scale:
      out[0] = scale(u, factor);
      break;
    case Op::MatMul:
      if (need(0)) {
        out[0] = ta ? matmul(in(1), u, tb, true) : matmul(u, in(1), false, !tb);
      }
      if (need(1)) {
        out[1] = tb ? matmul(u, in(0), true, ta) : matmul(in(0), u, !ta, false);
      }
      break;
    // conv2d, its input adjoint and its kernel adjoint are the three partial
    // derivatives of one trilinear form, so their VJPs close over the trio.
    case Op::Conv2d:
      if (need(0)) out[0] = conv2d_input_grad(u, in(1));
      if (need(1)) out[1] = conv2d_weight_grad(in(0), u);
      break;
    case Op::Conv2dInputGrad:
      if (need(0)) out[0] = conv2d(u, in(1));
      if (need(1)) out[1] = conv2d_weight_grad(u, in(0));
      break;
    case Op::Conv2dWeightGrad:
      if (need(0)) out[0] = conv2d_input_grad(in(1), u);
      if (need(1)) out[1] = conv2d(in(0), u);
      break;
    case Op::MaxPool2x2:
    case Op::Gather:
      out[0] = scatter(u, index, shape_of(0));
      break;
    case Op::Scatter:
      out[0] = gather(u, index, shape_of(0));
      break;
    case Op::Relu:
      out[0] = hadamard(u, g.constant(kernels::relu_mask(*g.node(ids[0]).value)));
      break;
    case Op::Reshape:
      out[0] = reshape(u, shape_of(0));
      break;
    case Op::ChannelBroadcast:
      out[0] = channel_sum(u);
      break;
    case Op::ChannelSum:
      out[0] = channel_broadcast(u, shape_of(0));
      break;
    case Op::AffineNorm: {
      const Shape xs = shape_of(0);
      if (need(0)) out[0] = hadamard(u, channel_broadcast(in(1), xs));
      if (need(1)) out[1] = channel_sum(hadamard(u, in(0)));
      if (need(2)) out[2] = channel_sum(u);
      break;
    }
    case Op::Sum:
      out[0] = fill(u, shape_of(0));
      break;
    case Op::Mean: {
      const Shape xs = shape_of(0);
      out[0] = scale(fill(u, xs), 1.0 / static_cast<double>(numel(xs)));
      break;
    }
    case Op::Fill:
      out[0] = sum(u);
      break;
    case Op::Softmax: {
      // dz = s * (u - rowsum(u * s)), row sums via products with ones.
      const Shape zs = shape_of(0);
      const Var s = self();
      const Var ones_col = g.constant(Tensor::full({zs[1], 1}, 1.0));
      const Var ones_row = g.constant(Tensor::full({1, zs[1]}, 1.0));
      const Var row_dot = matmul(hadamard(u, s), ones_col);
      out[0] = hadamard(s, sub(u, matmul(row_dot, ones_row)));
      break;
    }
    case Op::SoftmaxCrossEntropy: {
      const Shape zs = shape_of(0);
      const Var onehot = g.constant(kernels::one_hot(*index, zs[1]));
      const Var coeff = fill(scale(u, 1.0 / static_cast<double>(zs[0])), zs);
      out[0] = hadamard(coeff, sub(softmax(in(0)), onehot));
      break;
    }
    case Op::Dot:
      if (need(0)) out[0] = hadamard(fill(u, shape_of(0)), in(1));
      if (need(1)) out[1] = hadamard(fill(u, shape_of(1)), in(0));
      break;
    case Op::L2Norm:
      out[0] = hadamard(fill(hadamard(u, reciprocal(self())), shape_of(0)), in(0));
      break;
    case Op::Reciprocal: {
      const Var r = self();
      out[0] = hadamard(u, scale(hadamard(r, r), -1.0));
      break;
    }
  }

  if (g.fault() == op) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (out[i].valid()) out[i] = scale(out[i], 1.5);
    }
  }
}

}  // namespace detail

inline std::vector<Var> Graph::backward(Var root, std::span<const Var> wrt,
                                        bool create_graph) {
  if (&root.graph() != this) throw Error("backward: root from another graph");
  if (!root.shape().empty()) {
    throw ShapeError("backward", "scalar root of shape []", root.shape());
  }
  const NodeId last = root.id();
  const std::size_t count = static_cast<std::size_t>(last) + 1;

  std::vector<bool> is_target(count, false);
  for (const Var& v : wrt) {
    if (&v.graph() != this) throw Error("backward: parameter from another graph");
    if (v.id() <= last) is_target[v.id()] = true;
  }

  // needs[i]: node i lies on a path from some target to the root.
  std::vector<bool> needs(count, false);
  for (std::size_t i = 0; i < count; ++i) {
    const Node& n = nodes_[i];
    if (is_target[i]) {
      needs[i] = true;
      continue;
    }
    if (!n.requires_grad) continue;
    for (NodeId in : n.inputs) {
      if (needs[in]) {
        needs[i] = true;
        break;
      }
    }
  }

  std::vector<Var> grads(count);
  std::vector<Var> contrib;
  if (needs[last]) grads[last] = constant(Tensor::scalar(1.0));
  for (std::size_t k = count; k-- > 0;) {
    if (!needs[k] || !grads[k].valid()) continue;
    if (nodes_[k].op == Op::Leaf) continue;
    detail::vjp(*this, static_cast<NodeId>(k), grads[k], needs, create_graph,
                contrib);
    const std::vector<NodeId> ids = nodes_[k].inputs;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!contrib[i].valid()) continue;
      Var& acc = grads[ids[i]];
      acc = acc.valid() ? add(acc, contrib[i]) : contrib[i];
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (const Var& v : wrt) {
    if (v.id() <= last && grads[v.id()].valid()) {
      out.push_back(create_graph ? grads[v.id()] : detach(grads[v.id()]));
    } else {
      out.push_back(constant(Tensor::zeros(v.shape())));
    }
  }
  return out;
}

}  // namespace mlab
