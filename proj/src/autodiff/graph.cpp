#include "sib/autodiff/graph.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "sib/autodiff/kernels.hpp"
#include "sib/autodiff/ops.hpp"
#include "sib/errors.hpp"

namespace sib::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Conv2dInputGrad: return "conv2d_input_grad";
    case OpKind::Conv2dWeightGrad: return "conv2d_weight_grad";
    case OpKind::AvgPool2d: return "avgpool2d";
    case OpKind::AvgPool2dAdjoint: return "avgpool2d_adjoint";
    case OpKind::MaxPool2d: return "maxpool2d";
    case OpKind::Gather: return "gather";
    case OpKind::ScatterAdd: return "scatter_add";
    case OpKind::Relu: return "relu";
    case OpKind::Abs: return "abs";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::SumTo: return "sum_to";
    case OpKind::BroadcastTo: return "broadcast_to";
    case OpKind::Reshape: return "reshape";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::PadSlice: return "pad_slice";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Blur3x3: return "blur3x3";
  }
  return "unknown";
}

DiffValue Graph::variable(Tensor value) { return record(OpKind::Leaf, {}, {}, std::move(value)); }

DiffValue Graph::record(OpKind kind, std::vector<Slot> inputs, Attrs attrs, Tensor value) {
  for (const Slot& s : inputs) {
    if (s.node >= static_cast<int>(nodes_.size())) throw ContractError("graph: parent index does not precede node");
  }
  Node n;
  n.kind = kind;
  n.inputs = std::move(inputs);
  n.attrs = std::move(attrs);
  n.value = std::make_shared<const Tensor>(std::move(value));
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size()) - 1;
  return DiffValue(nodes_.back().value, this, id);
}

namespace {

thread_local bool g_grad_mode = true;

std::string shape_msg(OpKind kind, const Shape& a, const Shape& b) {
  return std::string(op_name(kind)) + ": shape mismatch " + to_string(a) + " vs " + to_string(b);
}

template <typename F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor y(x.shape());
  const double* xp = x.data().data();
  double* yp = y.data().data();
  for (std::size_t i = 0; i < x.size(); ++i) yp[i] = f(xp[i]);
  return y;
}

template <typename F>
Tensor map_binary(OpKind kind, const Tensor& a, const Tensor& b, F f) {
  if (a.shape() != b.shape()) throw ShapeError(shape_msg(kind, a.shape(), b.shape()));
  Tensor y(a.shape());
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* yp = y.data().data();
  for (std::size_t i = 0; i < a.size(); ++i) yp[i] = f(ap[i], bp[i]);
  return y;
}

void require_arity(OpKind kind, std::size_t got, std::size_t want) {
  if (got != want) {
    throw ContractError(std::string(op_name(kind)) + ": expected " + std::to_string(want) + " inputs, got " +
                        std::to_string(got));
  }
}

Tensor forward_value(OpKind kind, const std::vector<const Tensor*>& in, Attrs& attrs) {
  const auto arity = [&](std::size_t n) { require_arity(kind, in.size(), n); };
  switch (kind) {
    case OpKind::Leaf:
      throw ContractError("apply_primitive: leaf is not a primitive");
    case OpKind::Add:
      arity(2);
      return map_binary(kind, *in[0], *in[1], [](double a, double b) { return a + b; });
    case OpKind::Sub:
      arity(2);
      return map_binary(kind, *in[0], *in[1], [](double a, double b) { return a - b; });
    case OpKind::Mul:
      arity(2);
      return map_binary(kind, *in[0], *in[1], [](double a, double b) { return a * b; });
    case OpKind::Div:
      arity(2);
      return map_binary(kind, *in[0], *in[1], [](double a, double b) { return a / b; });
    case OpKind::Neg:
      arity(1);
      return map_unary(*in[0], [](double a) { return -a; });
    case OpKind::Scale: {
      arity(1);
      const double s = attrs.scalar;
      return map_unary(*in[0], [s](double a) { return a * s; });
    }
    case OpKind::AddScalar: {
      arity(1);
      const double s = attrs.scalar;
      return map_unary(*in[0], [s](double a) { return a + s; });
    }
    case OpKind::MatMul:
      arity(2);
      return kernels::matmul(*in[0], *in[1]);
    case OpKind::Transpose:
      arity(1);
      return kernels::transpose(*in[0]);
    case OpKind::Conv2d:
      arity(2);
      return kernels::conv2d(*in[0], *in[1], attrs.stride, attrs.pad);
    case OpKind::Conv2dInputGrad:
      arity(2);
      return kernels::conv2d_input_grad(*in[0], *in[1], attrs.shape, attrs.stride, attrs.pad);
    case OpKind::Conv2dWeightGrad:
      arity(2);
      return kernels::conv2d_weight_grad(*in[0], *in[1], attrs.shape, attrs.stride, attrs.pad);
    case OpKind::AvgPool2d:
      arity(1);
      return kernels::avgpool2d(*in[0], attrs.kernel);
    case OpKind::AvgPool2dAdjoint:
      arity(1);
      return kernels::avgpool2d_adjoint(*in[0], attrs.kernel, attrs.shape);
    case OpKind::MaxPool2d: {
      arity(1);
      attrs.indices = std::make_shared<const std::vector<std::size_t>>(kernels::maxpool2d_indices(*in[0], attrs.kernel));
      attrs.shape = kernels::pooled_shape(in[0]->shape(), attrs.kernel);
      return kernels::gather(*in[0], *attrs.indices, attrs.shape);
    }
    case OpKind::Gather:
      arity(1);
      if (!attrs.indices) throw ContractError("gather: missing indices");
      return kernels::gather(*in[0], *attrs.indices, attrs.shape);
    case OpKind::ScatterAdd:
      arity(1);
      if (!attrs.indices) throw ContractError("scatter_add: missing indices");
      return kernels::scatter_add(*in[0], *attrs.indices, attrs.shape);
    case OpKind::Relu:
      arity(1);
      return map_unary(*in[0], [](double a) { return a > 0.0 ? a : 0.0; });
    case OpKind::Abs:
      arity(1);
      return map_unary(*in[0], [](double a) { return std::fabs(a); });
    case OpKind::Sigmoid:
      arity(1);
      return map_unary(*in[0], [](double a) {
        if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
        const double e = std::exp(a);
        return e / (1.0 + e);
      });
    case OpKind::Exp:
      arity(1);
      return map_unary(*in[0], [](double a) { return std::exp(a); });
    case OpKind::Log:
      arity(1);
      return map_unary(*in[0], [](double a) { return std::log(a); });
    case OpKind::Sqrt:
      arity(1);
      return map_unary(*in[0], [](double a) { return std::sqrt(a); });
    case OpKind::SumTo:
      arity(1);
      return kernels::sum_to(*in[0], attrs.shape);
    case OpKind::BroadcastTo:
      arity(1);
      return kernels::broadcast_to(*in[0], attrs.shape);
    case OpKind::Reshape:
      arity(1);
      return in[0]->reshaped(attrs.shape);
    case OpKind::Concat:
      if (in.empty()) throw ContractError("concat: no inputs");
      return kernels::concat(in, attrs.axis);
    case OpKind::Slice:
      arity(1);
      return kernels::slice(*in[0], attrs.axis, attrs.offset, attrs.length);
    case OpKind::PadSlice:
      arity(1);
      return kernels::pad_slice(*in[0], attrs.axis, attrs.offset, attrs.length);
    case OpKind::Softmax:
      arity(1);
      return kernels::softmax(*in[0], attrs.scalar);
    case OpKind::LogSoftmax:
      arity(1);
      return kernels::log_softmax(*in[0], attrs.scalar);
    case OpKind::Blur3x3:
      arity(1);
      return kernels::blur3x3(*in[0]);
  }
  throw ContractError("apply_primitive: unknown op kind");
}

Tensor step_mask(const Tensor& x) {
  return map_unary(x, [](double a) { return a > 0.0 ? 1.0 : 0.0; });
}

Tensor sign_of(const Tensor& x) {
  return map_unary(x, [](double a) { return a > 0.0 ? 1.0 : (a < 0.0 ? -1.0 : 0.0); });
}

// Vector-Jacobian rules. Each is written with forward primitives so that the
// backward pass itself is recorded (and differentiable) when grad mode is on.
void backward_rule(const Node& node, int self, Graph& graph, const DiffValue& gy, const std::vector<bool>& need,
                   bool guided, std::vector<std::optional<DiffValue>>& out) {
  auto in = [&](std::size_t i) {
    const Slot& s = node.inputs[i];
    return DiffValue(s.value, s.node >= 0 ? &graph : nullptr, s.node);
  };
  const DiffValue y(node.value, &graph, self);
  const Attrs& a = node.attrs;
  auto set = [&](std::size_t i, auto&& make) {
    if (need[i]) out[i] = make();
  };

  switch (node.kind) {
    case OpKind::Leaf:
      return;
    case OpKind::Add:
      set(0, [&] { return gy; });
      set(1, [&] { return gy; });
      return;
    case OpKind::Sub:
      set(0, [&] { return gy; });
      set(1, [&] { return neg(gy); });
      return;
    case OpKind::Mul:
      set(0, [&] { return mul(gy, in(1)); });
      set(1, [&] { return mul(gy, in(0)); });
      return;
    case OpKind::Div:
      set(0, [&] { return div(gy, in(1)); });
      set(1, [&] { return neg(div(mul(gy, y), in(1))); });
      return;
    case OpKind::Neg:
      set(0, [&] { return neg(gy); });
      return;
    case OpKind::Scale:
      set(0, [&] { return scale(gy, a.scalar); });
      return;
    case OpKind::AddScalar:
      set(0, [&] { return gy; });
      return;
    case OpKind::MatMul:
      set(0, [&] { return matmul(gy, transpose(in(1))); });
      set(1, [&] { return matmul(transpose(in(0)), gy); });
      return;
    case OpKind::Transpose:
      set(0, [&] { return transpose(gy); });
      return;
    case OpKind::Conv2d:
      set(0, [&] { return conv2d_input_grad(gy, in(1), in(0).shape(), a.stride, a.pad); });
      set(1, [&] { return conv2d_weight_grad(in(0), gy, in(1).shape(), a.stride, a.pad); });
      return;
    case OpKind::Conv2dInputGrad:
      // y = T(g, w) with <G, T(g, w)> = <conv(G, w), g> = <w, Wg(G, g)>
      set(0, [&] { return conv2d(gy, in(1), a.stride, a.pad); });
      set(1, [&] { return conv2d_weight_grad(gy, in(0), in(1).shape(), a.stride, a.pad); });
      return;
    case OpKind::Conv2dWeightGrad:
      // y = Wg(x, g) with <G, Wg(x, g)> = <conv(x, G), g> = <x, T(g, G)>
      set(0, [&] { return conv2d_input_grad(in(1), gy, in(0).shape(), a.stride, a.pad); });
      set(1, [&] { return conv2d(in(0), gy, a.stride, a.pad); });
      return;
    case OpKind::AvgPool2d:
      set(0, [&] { return avgpool2d_adjoint(gy, a.kernel, in(0).shape()); });
      return;
    case OpKind::AvgPool2dAdjoint:
      set(0, [&] { return avgpool2d(gy, a.kernel); });
      return;
    case OpKind::MaxPool2d:
    case OpKind::Gather:
      set(0, [&] { return scatter_add(gy, a.indices, in(0).shape()); });
      return;
    case OpKind::ScatterAdd:
      set(0, [&] { return gather(gy, a.indices, in(0).shape()); });
      return;
    case OpKind::Relu:
      set(0, [&] {
        Tensor mask = step_mask(in(0).value());
        if (guided) {
          const auto& g = gy.value();
          for (std::size_t i = 0; i < mask.size(); ++i) {
            if (!(g[i] > 0.0)) mask[i] = 0.0;
          }
        }
        return mul(gy, constant(std::move(mask)));
      });
      return;
    case OpKind::Abs:
      set(0, [&] { return mul(gy, constant(sign_of(in(0).value()))); });
      return;
    case OpKind::Sigmoid:
      set(0, [&] { return mul(gy, mul(y, add_scalar(neg(y), 1.0))); });
      return;
    case OpKind::Exp:
      set(0, [&] { return mul(gy, y); });
      return;
    case OpKind::Log:
      set(0, [&] { return div(gy, in(0)); });
      return;
    case OpKind::Sqrt:
      set(0, [&] { return scale(div(gy, y), 0.5); });
      return;
    case OpKind::SumTo:
      set(0, [&] { return broadcast_to(gy, in(0).shape()); });
      return;
    case OpKind::BroadcastTo:
      set(0, [&] { return sum_to(gy, in(0).shape()); });
      return;
    case OpKind::Reshape:
      set(0, [&] { return reshape(gy, in(0).shape()); });
      return;
    case OpKind::Concat: {
      std::size_t offset = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const std::size_t len = node.inputs[i].value->shape()[a.axis];
        set(i, [&] { return slice(gy, a.axis, offset, len); });
        offset += len;
      }
      return;
    }
    case OpKind::Slice:
      set(0, [&] { return pad_slice(gy, a.axis, a.offset, in(0).shape()[a.axis]); });
      return;
    case OpKind::PadSlice:
      set(0, [&] { return slice(gy, a.axis, a.offset, in(0).shape()[a.axis]); });
      return;
    case OpKind::Softmax:
      set(0, [&] {
        const std::size_t last = y.shape().size() - 1;
        const DiffValue dot = broadcast_to(sum_axis(mul(gy, y), last), y.shape());
        return scale(mul(y, sub(gy, dot)), 1.0 / a.scalar);
      });
      return;
    case OpKind::LogSoftmax:
      set(0, [&] {
        const std::size_t last = y.shape().size() - 1;
        const DiffValue p = softmax(in(0), a.scalar);
        const DiffValue total = broadcast_to(sum_axis(gy, last), y.shape());
        return scale(sub(gy, mul(p, total)), 1.0 / a.scalar);
      });
      return;
    case OpKind::Blur3x3:
      // symmetric kernel with zero padding: self-adjoint
      set(0, [&] { return blur3x3(gy); });
      return;
  }
}

Gradients run_backward(const DiffValue& output, std::span<const DiffValue> wrt, const Tensor& seed,
                       GradOptions options) {
  Gradients result;
  result.grads.reserve(wrt.size());
  result.unreachable.assign(wrt.size(), true);

  Graph* graph = output.graph();
  for (const DiffValue& w : wrt) {
    if (!w.requires_grad()) throw ContractError("backward: wrt entry does not require grad");
    if (graph && w.graph() != graph) throw ContractError("backward: wrt entry belongs to a different graph");
  }

  std::vector<std::optional<DiffValue>> grads;
  if (graph && output.requires_grad()) {
    const int out_id = output.node();
    const std::size_t count = static_cast<std::size_t>(out_id) + 1;
    std::vector<char> is_wrt(count, 0), relevant(count, 0);
    for (const DiffValue& w : wrt) {
      if (w.node() <= out_id) is_wrt[static_cast<std::size_t>(w.node())] = 1;
    }
    for (std::size_t i = 0; i < count; ++i) {
      if (is_wrt[i]) {
        relevant[i] = 1;
        continue;
      }
      for (const Slot& s : graph->node(i).inputs) {
        if (s.node >= 0 && relevant[static_cast<std::size_t>(s.node)]) {
          relevant[i] = 1;
          break;
        }
      }
    }

    std::optional<NoGradGuard> guard;
    if (!options.retain_graph) guard.emplace();

    grads.resize(count);
    grads[count - 1] = constant(seed);
    if (relevant[count - 1]) {
      for (std::size_t k = count; k-- > 0;) {
        if (!grads[k] || !relevant[k]) continue;
        const Node node = graph->node(k);  // copy: recording may grow the node vector
        if (node.kind == OpKind::Leaf) continue;
        std::vector<bool> need(node.inputs.size(), false);
        bool any = false;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          const int p = node.inputs[i].node;
          need[i] = p >= 0 && relevant[static_cast<std::size_t>(p)];
          any = any || need[i];
        }
        if (!any) continue;
        std::vector<std::optional<DiffValue>> contrib(node.inputs.size());
        backward_rule(node, static_cast<int>(k), *graph, *grads[k], need, options.guided_relu, contrib);
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          if (!contrib[i]) continue;
          auto& slot = grads[static_cast<std::size_t>(node.inputs[i].node)];
          slot = slot ? add(*slot, *contrib[i]) : *contrib[i];
        }
        // Interior gradients are no longer needed once propagated, unless requested.
        if (!is_wrt[k]) grads[k].reset();
      }
    }
  }

  for (std::size_t i = 0; i < wrt.size(); ++i) {
    const auto id = static_cast<std::size_t>(wrt[i].node());
    if (id < grads.size() && grads[id]) {
      result.grads.push_back(*grads[id]);
      result.unreachable[i] = false;
    } else {
      result.grads.push_back(constant(Tensor(wrt[i].shape())));
    }
  }
  return result;
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_mode) { g_grad_mode = false; }
NoGradGuard::~NoGradGuard() { g_grad_mode = previous_; }

bool grad_mode_enabled() { return g_grad_mode; }

DiffValue apply_primitive(OpKind kind, std::span<const DiffValue> inputs, const Attrs& attrs) {
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  Graph* graph = nullptr;
  for (const DiffValue& v : inputs) {
    values.push_back(&v.value());
    if (v.requires_grad()) {
      if (graph && v.graph() != graph) {
        throw ContractError(std::string(op_name(kind)) + ": inputs belong to different graphs");
      }
      graph = v.graph();
    }
  }
  if ((kind == OpKind::Softmax || kind == OpKind::LogSoftmax) && !(attrs.scalar > 0.0)) {
    throw DomainError(std::string(op_name(kind)) + ": temperature must be > 0, got " + std::to_string(attrs.scalar));
  }
  Attrs effective = attrs;
  Tensor value = forward_value(kind, values, effective);
  if (!graph || !g_grad_mode) return DiffValue(std::move(value));
  std::vector<Slot> slots;
  slots.reserve(inputs.size());
  for (const DiffValue& v : inputs) slots.push_back(Slot{v.node(), v.value_ptr()});
  return graph->record(kind, std::move(slots), std::move(effective), std::move(value));
}

bool Gradients::any_unreachable() const {
  return std::any_of(unreachable.begin(), unreachable.end(), [](bool b) { return b; });
}

Gradients backward(const DiffValue& output, std::span<const DiffValue> wrt, GradOptions options) {
  if (output.size() != 1) {
    throw ContractError("backward: output must be scalar, got shape " + to_string(output.shape()));
  }
  return run_backward(output, wrt, Tensor(output.shape(), 1.0), options);
}

Gradients vjp(const DiffValue& outputs, std::span<const DiffValue> inputs, const Tensor& cotangent,
              GradOptions options) {
  if (cotangent.shape() != outputs.shape()) {
    throw ContractError("vjp: cotangent shape " + to_string(cotangent.shape()) + " != outputs shape " +
                        to_string(outputs.shape()));
  }
  return run_backward(outputs, inputs, cotangent, options);
}

}  // namespace sib::ad
