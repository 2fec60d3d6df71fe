#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "sib/autodiff/tensor.hpp"

namespace sib::ad {

class Graph;

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,
  AddScalar,
  MatMul,
  Transpose,
  Conv2d,
  Conv2dInputGrad,
  Conv2dWeightGrad,
  AvgPool2d,
  AvgPool2dAdjoint,
  MaxPool2d,
  Gather,
  ScatterAdd,
  Relu,
  Abs,
  Sigmoid,
  Exp,
  Log,
  Sqrt,
  SumTo,
  BroadcastTo,
  Reshape,
  Concat,
  Slice,
  PadSlice,
  Softmax,
  LogSoftmax,
  Blur3x3,
};

std::string_view op_name(OpKind kind);

using IndexList = std::shared_ptr<const std::vector<std::size_t>>;

// Per-primitive attributes. Only the fields relevant to a kind are read.
struct Attrs {
  double scalar = 0.0;  // Scale factor, AddScalar constant, softmax temperature
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t kernel = 2;  // pooling window
  std::size_t axis = 0;
  std::size_t offset = 0;
  std::size_t length = 0;
  Shape shape;  // target/auxiliary shape: reshape, broadcast, conv adjoint shapes, gather output
  IndexList indices;
};

// A tensor bound into a Graph. Constants carry no graph node.
class DiffValue {
 public:
  DiffValue() : value_(std::make_shared<const Tensor>()) {}
  explicit DiffValue(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}
  DiffValue(std::shared_ptr<const Tensor> value, Graph* graph, int node)
      : value_(std::move(value)), graph_(graph), node_(node) {}

  const Tensor& value() const { return *value_; }
  const std::shared_ptr<const Tensor>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  std::size_t size() const { return value_->size(); }

  bool requires_grad() const { return node_ >= 0; }
  Graph* graph() const { return graph_; }
  int node() const { return node_; }

  // Same value, cut from the graph.
  DiffValue detach() const { return DiffValue(value_, nullptr, -1); }

 private:
  std::shared_ptr<const Tensor> value_;
  Graph* graph_ = nullptr;
  int node_ = -1;
};

inline DiffValue constant(Tensor t) { return DiffValue(std::move(t)); }

struct Slot {
  int node = -1;  // -1: constant input
  std::shared_ptr<const Tensor> value;
};

struct Node {
  OpKind kind = OpKind::Leaf;
  std::vector<Slot> inputs;
  Attrs attrs;
  std::shared_ptr<const Tensor> value;
};

// Append-only record of primitive applications. Parents always precede
// children, so insertion order is a topological order.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  DiffValue variable(Tensor value);
  DiffValue variable(const DiffValue& value) { return variable(value.value()); }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  DiffValue record(OpKind kind, std::vector<Slot> inputs, Attrs attrs, Tensor value);

 private:
  std::vector<Node> nodes_;
};

// While alive, primitives on this thread produce constants (no recording).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Forward evaluation of one primitive, recorded when any input requires grad.
// Throws ShapeError on non-conforming shapes and DomainError on bad attributes.
DiffValue apply_primitive(OpKind kind, std::span<const DiffValue> inputs, const Attrs& attrs = {});

struct GradOptions {
  // Record the backward pass so the returned gradients are differentiable.
  bool retain_graph = false;
  // Guided backpropagation: ReLU additionally zeroes negative incoming gradients.
  bool guided_relu = false;
};

struct Gradients {
  std::vector<DiffValue> grads;  // aligned with `wrt`
  std::vector<bool> unreachable;

  const DiffValue& operator[](std::size_t i) const { return grads.at(i); }
  bool any_unreachable() const;
};

// d(output)/d(wrt) for a scalar output. Unreachable entries get zero gradients
// and are flagged rather than raising.
Gradients backward(const DiffValue& output, std::span<const DiffValue> wrt, GradOptions options = {});

// J^T * cotangent for each input, where J = d(outputs)/d(input).
Gradients vjp(const DiffValue& outputs, std::span<const DiffValue> inputs, const Tensor& cotangent,
              GradOptions options = {});

}  // namespace sib::ad
