#pragma once

#include "ckm/error.hpp"
#include "ckm/ndarray.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace ckm::ad {

using ckm::Index;
using ckm::Shape;

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

namespace detail {
inline thread_local bool grad_enabled = true;
// When set, piecewise ops (relu, abs) fold the branch taken by every element
// into this hash so callers can tell which smooth piece an evaluation is on.
inline thread_local std::uint64_t* branch_hash = nullptr;

template <typename Bools>
void record_branches(const Bools& taken) {
  if (!branch_hash) return;
  std::uint64_t h = *branch_hash;
  for (Eigen::Index i = 0; i < taken.size(); ++i) {
    h = (h ^ static_cast<std::uint64_t>(taken[i] ? 0x9e3779b97f4a7c15ULL : 0x632be59bd9b4e019ULL)) *
        0x100000001b3ULL;
  }
  *branch_hash = h;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled; }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// One value in the computation graph. Interior nodes own a backward rule that
/// reads their own gradient and accumulates into their parents.
template <typename Scalar>
struct Node {
  Shape shape;
  Buffer<Scalar> value;
  Buffer<Scalar> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Buffer<Scalar>& grad_buffer() {
    if (grad.size() == 0) grad = Buffer<Scalar>::Zero(value.size());
    return grad;
  }

  template <typename Expr>
  void accumulate(const Expr& contribution) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = contribution;
    } else {
      grad += contribution;
    }
  }
};

/// Shared handle to a graph node. Copies alias the same storage.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from_buffer(Shape shape, Buffer<Scalar> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size()) {
      throw InvalidArgument("Tensor: shape " + shape_to_string(shape) + " does not match " +
                            std::to_string(data.size()) + " values");
    }
    auto node = std::make_shared<Node<Scalar>>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor constant(Shape shape, Scalar fill, bool requires_grad = false) {
    const Index n = shape_numel(shape);
    return from_buffer(std::move(shape), Buffer<Scalar>::Constant(n, fill), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return constant(std::move(shape), Scalar(0), requires_grad);
  }

  static Tensor scalar(Scalar v) { return constant({}, v); }

  static Tensor from_ndarray(const NdArray<Scalar>& array, bool requires_grad = false) {
    return from_buffer(array.shape, array.data, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  Index dim(std::size_t i) const { return node_->shape.at(i); }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  Index numel() const { return node_->value.size(); }

  const Buffer<Scalar>& value() const { return node_->value; }
  /// Mutable access for optimizers and initializers; only valid on leaves.
  Buffer<Scalar>& mutable_value() {
    if (!node_->is_leaf) throw GraphError("mutable_value: tensor is not a leaf");
    return node_->value;
  }
  Scalar item() const {
    if (numel() != 1) throw InvalidArgument("item: tensor has " + std::to_string(numel()) + " values");
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    if (!node_->is_leaf) throw GraphError("set_requires_grad: tensor is not a leaf");
    node_->requires_grad = flag;
  }
  bool has_grad() const { return node_->grad.size() != 0; }
  /// Gradient buffer; zeros if nothing has been accumulated yet.
  Buffer<Scalar> grad() const {
    return has_grad() ? node_->grad : Buffer<Scalar>::Zero(node_->value.size());
  }
  void zero_grad() { node_->grad.resize(0); }

  Tensor detach() const { return from_buffer(shape(), value(), false); }
  NdArray<Scalar> to_ndarray() const {
    NdArray<Scalar> out;
    out.shape = shape();
    out.data = value();
    return out;
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Creates an op result. The backward rule is recorded only when gradients are
/// enabled and at least one input requires them.
template <typename Scalar, typename Fn>
Tensor<Scalar> make_result(const char* op, Shape shape, Buffer<Scalar> value,
                           std::vector<Tensor<Scalar>> inputs, Fn&& backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs_grad = false;
  for (const auto& in : inputs) {
    if (in.node()->consumed) {
      throw GraphError(std::string(op) + ": input belongs to a graph that was already backpropagated");
    }
    needs_grad = needs_grad || in.requires_grad();
  }
  if (grad_enabled() && needs_grad) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::forward<Fn>(backward);
  }
  return Tensor<Scalar>(std::move(node));
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate; interior
/// nodes are released, so a second call on the same graph throws GraphError.
template <typename Scalar>
void backward(const Tensor<Scalar>& root) {
  if (root.numel() != 1) {
    throw InvalidArgument("backward: root must be a scalar, got shape " +
                          shape_to_string(root.shape()));
  }
  auto* root_node = root.node().get();
  if (root_node->consumed) throw GraphError("backward: graph was already backpropagated");
  if (!root_node->requires_grad) throw GraphError("backward: root does not require grad");

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> seen;
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack{{root_node, 0}};
  seen.insert(root_node);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->consumed) throw GraphError("backward: graph was already backpropagated");
      if (parent->requires_grad && !parent->is_leaf && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root_node->accumulate(Buffer<Scalar>::Ones(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Scalar>* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
  for (Node<Scalar>* node : order) {
    if (node->is_leaf) continue;
    node->backward = nullptr;
    node->parents.clear();
    node->grad.resize(0);
    node->consumed = true;
  }
}

}  // namespace ckm::ad
