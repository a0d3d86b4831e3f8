#pragma once

#include "road/autodiff/tensor.hpp"

#include <cstddef>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

namespace road {

enum class OpKind {
  Leaf,
  Constant,
  Conv2d,
  Relu,
  Affine,
  SoftmaxCrossEntropy,
  L2DistanceMap,
  GradReverse,
  PoolAvg2d,
  UpsampleBilinear,
  Sum,
  Mean,
  Scale,
  Add,
  WeightedSum,
  Reshape,
  GatherCells,
  ConcatRows,
};

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

  const Shape& shape() const { return graph_->shape(*this); }
  const Buffer<Scalar>& value() const { return graph_->value(*this); }
  Index dim(std::size_t axis) const { return shape().at(axis); }
  Index size() const { return value().size(); }
  Scalar item() const;

 private:
  Graph<Scalar>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of the requires_grad leaves reached by one backward pass, keyed
/// by the leaf tensor's address.
template <typename Scalar>
using GradientMap = std::unordered_map<const Tensor<Scalar>*, Buffer<Scalar>>;

/// Define-by-run tape. Nodes are appended in evaluation order, which is a
/// valid topological order; backward walks the tape once in reverse.
template <typename Scalar>
class Graph {
 public:
  /// Receives the gradient of the node's output and pushes contributions
  /// into its inputs through Graph::accumulate.
  using BackwardFn = std::function<void(const Buffer<Scalar>& out_grad, Graph& graph)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Registers a tensor owned by the caller. Registering the same tensor
  /// twice returns the same node, so its gradient is accumulated once.
  Var<Scalar> leaf(Tensor<Scalar>& tensor) {
    if (auto it = leaf_ids_.find(&tensor); it != leaf_ids_.end()) return {this, it->second};
    Node node;
    node.kind = OpKind::Leaf;
    node.shape = tensor.shape();
    node.value = tensor.data();
    node.needs_grad = tensor.requires_grad();
    node.leaf = &tensor;
    auto v = push(std::move(node));
    leaf_ids_.emplace(&tensor, v.id());
    return v;
  }

  Var<Scalar> constant(Shape shape, Buffer<Scalar> value) {
    if (shape_size(shape) != value.size()) throw ShapeError("constant shape mismatch");
    Node node;
    node.kind = OpKind::Constant;
    node.shape = std::move(shape);
    node.value = std::move(value);
    return push(std::move(node));
  }

  Var<Scalar> constant(const Tensor<Scalar>& tensor) { return constant(tensor.shape(), tensor.data()); }

  /// Appends an op node. The backward function is dropped when no input
  /// needs a gradient, so constant subgraphs cost nothing in backward.
  Var<Scalar> record(OpKind kind, Shape shape, Buffer<Scalar> value,
                     std::vector<std::size_t> inputs, BackwardFn backward) {
    Node node;
    node.kind = kind;
    node.shape = std::move(shape);
    node.value = std::move(value);
    for (auto id : inputs) node.needs_grad = node.needs_grad || nodes_.at(id).needs_grad;
    node.inputs = std::move(inputs);
    if (node.needs_grad) node.backward = std::move(backward);
    return push(std::move(node));
  }

  bool needs_grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).needs_grad; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  const Shape& shape(const Var<Scalar>& v) const { return nodes_.at(v.id()).shape; }
  const Buffer<Scalar>& value(const Var<Scalar>& v) const { return nodes_.at(v.id()).value; }
  OpKind kind(const Var<Scalar>& v) const { return nodes_.at(v.id()).kind; }
  std::size_t size() const { return nodes_.size(); }

  /// Adds a gradient contribution to node `id`. No-op for nodes that do not
  /// need a gradient.
  template <typename Derived>
  void accumulate(std::size_t id, const Eigen::ArrayBase<Derived>& contribution) {
    Node& node = nodes_[id];
    if (!node.needs_grad) return;
    if (node.grad.size() == 0) {
      node.grad = contribution;
    } else {
      node.grad += contribution;
    }
  }

  /// Gradient of node `id` from the most recent backward pass (empty when
  /// the node was not reached).
  const Buffer<Scalar>& grad(const Var<Scalar>& v) const { return nodes_.at(v.id()).grad; }

  /// Reverse pass from a scalar loss. Node gradients are reset first, so a
  /// second call on the same graph computes the same values; leaf tensors
  /// accumulate into their own grad buffers (call zero_grad between steps).
  GradientMap<Scalar> backward(const Var<Scalar>& loss) {
    if (loss.size() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_string(shape(loss)));
    }
    for (auto& node : nodes_) node.grad.resize(0);
    GradientMap<Scalar> grads;
    if (!nodes_[loss.id()].needs_grad) return grads;
    nodes_[loss.id()].grad = Buffer<Scalar>::Ones(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.grad.size() == 0 || !node.backward) continue;
      // Inputs always have smaller ids, so accumulate never aliases g.
      const Buffer<Scalar>& g = node.grad;
      node.backward(g, *this);
    }
    for (auto& node : nodes_) {
      if (node.kind != OpKind::Leaf || node.leaf == nullptr || !node.needs_grad) continue;
      if (node.grad.size() == 0) continue;
      node.leaf->accumulate_grad(node.grad);
      grads.emplace(node.leaf, node.grad);
    }
    return grads;
  }

 private:
  struct Node {
    OpKind kind = OpKind::Constant;
    Shape shape;
    Buffer<Scalar> value;
    Buffer<Scalar> grad;
    std::vector<std::size_t> inputs;
    bool needs_grad = false;
    Tensor<Scalar>* leaf = nullptr;
    BackwardFn backward;
  };

  Var<Scalar> push(Node node) {
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<Scalar>*, std::size_t> leaf_ids_;
};

template <typename Scalar>
Scalar Var<Scalar>::item() const {
  const auto& v = value();
  if (v.size() != 1) throw ContractError("item() on non-scalar of shape " + shape_string(shape()));
  return v[0];
}

}  // namespace road
