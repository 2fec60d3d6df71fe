#include "sib/autodiff/ops.hpp"

#include "sib/autodiff/kernels.hpp"
#include "sib/errors.hpp"

namespace sib::ad {

namespace {

DiffValue unary(OpKind kind, const DiffValue& x, const Attrs& attrs = {}) {
  const DiffValue in[] = {x};
  return apply_primitive(kind, in, attrs);
}

DiffValue binary(OpKind kind, const DiffValue& a, const DiffValue& b, const Attrs& attrs = {}) {
  const DiffValue in[] = {a, b};
  return apply_primitive(kind, in, attrs);
}

Attrs with_scalar(double s) {
  Attrs a;
  a.scalar = s;
  return a;
}

Attrs with_shape(Shape s) {
  Attrs a;
  a.shape = std::move(s);
  return a;
}

Attrs conv_attrs(std::size_t stride, std::size_t pad, Shape shape = {}) {
  Attrs a;
  a.stride = stride;
  a.pad = pad;
  a.shape = std::move(shape);
  return a;
}

Attrs pool_attrs(std::size_t k, Shape shape = {}) {
  Attrs a;
  a.kernel = k;
  a.shape = std::move(shape);
  return a;
}

}  // namespace

DiffValue add(const DiffValue& a, const DiffValue& b) { return binary(OpKind::Add, a, b); }
DiffValue sub(const DiffValue& a, const DiffValue& b) { return binary(OpKind::Sub, a, b); }
DiffValue mul(const DiffValue& a, const DiffValue& b) { return binary(OpKind::Mul, a, b); }
DiffValue div(const DiffValue& a, const DiffValue& b) { return binary(OpKind::Div, a, b); }
DiffValue neg(const DiffValue& a) { return unary(OpKind::Neg, a); }
DiffValue scale(const DiffValue& a, double factor) { return unary(OpKind::Scale, a, with_scalar(factor)); }
DiffValue add_scalar(const DiffValue& a, double c) { return unary(OpKind::AddScalar, a, with_scalar(c)); }

DiffValue matmul(const DiffValue& a, const DiffValue& b) { return binary(OpKind::MatMul, a, b); }
DiffValue transpose(const DiffValue& a) { return unary(OpKind::Transpose, a); }

DiffValue conv2d(const DiffValue& x, const DiffValue& w, std::size_t stride, std::size_t pad) {
  return binary(OpKind::Conv2d, x, w, conv_attrs(stride, pad));
}

DiffValue conv2d_input_grad(const DiffValue& g, const DiffValue& w, const Shape& input_shape, std::size_t stride,
                            std::size_t pad) {
  return binary(OpKind::Conv2dInputGrad, g, w, conv_attrs(stride, pad, input_shape));
}

DiffValue conv2d_weight_grad(const DiffValue& x, const DiffValue& g, const Shape& weight_shape, std::size_t stride,
                             std::size_t pad) {
  return binary(OpKind::Conv2dWeightGrad, x, g, conv_attrs(stride, pad, weight_shape));
}

DiffValue avgpool2d(const DiffValue& x, std::size_t k) { return unary(OpKind::AvgPool2d, x, pool_attrs(k)); }

DiffValue avgpool2d_adjoint(const DiffValue& g, std::size_t k, const Shape& input_shape) {
  return unary(OpKind::AvgPool2dAdjoint, g, pool_attrs(k, input_shape));
}

DiffValue maxpool2d(const DiffValue& x, std::size_t k) { return unary(OpKind::MaxPool2d, x, pool_attrs(k)); }

DiffValue gather(const DiffValue& x, IndexList idx, const Shape& out_shape) {
  Attrs a = with_shape(out_shape);
  a.indices = std::move(idx);
  return unary(OpKind::Gather, x, a);
}

DiffValue scatter_add(const DiffValue& g, IndexList idx, const Shape& out_shape) {
  Attrs a = with_shape(out_shape);
  a.indices = std::move(idx);
  return unary(OpKind::ScatterAdd, g, a);
}

DiffValue amax(const DiffValue& x, std::size_t axis) {
  auto idx = std::make_shared<const std::vector<std::size_t>>(kernels::argmax_trailing(x.value(), axis));
  Shape out = x.shape();
  for (std::size_t d = axis; d < out.size(); ++d) out[d] = 1;
  return gather(x, std::move(idx), out);
}

DiffValue amin(const DiffValue& x, std::size_t axis) { return neg(amax(neg(x), axis)); }

DiffValue relu(const DiffValue& x) { return unary(OpKind::Relu, x); }
DiffValue abs(const DiffValue& x) { return unary(OpKind::Abs, x); }
DiffValue sigmoid(const DiffValue& x) { return unary(OpKind::Sigmoid, x); }
DiffValue exp(const DiffValue& x) { return unary(OpKind::Exp, x); }
DiffValue log(const DiffValue& x) { return unary(OpKind::Log, x); }
DiffValue sqrt(const DiffValue& x) { return unary(OpKind::Sqrt, x); }
DiffValue square(const DiffValue& x) { return mul(x, x); }

DiffValue sum_to(const DiffValue& x, const Shape& shape) { return unary(OpKind::SumTo, x, with_shape(shape)); }
DiffValue broadcast_to(const DiffValue& x, const Shape& shape) {
  return unary(OpKind::BroadcastTo, x, with_shape(shape));
}
DiffValue reshape(const DiffValue& x, const Shape& shape) { return unary(OpKind::Reshape, x, with_shape(shape)); }

DiffValue sum(const DiffValue& x) {
  const DiffValue s = sum_to(x, Shape(x.shape().size(), 1));
  return reshape(s, Shape{});
}

DiffValue mean(const DiffValue& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

DiffValue sum_axis(const DiffValue& x, std::size_t axis) {
  if (axis >= x.shape().size()) {
    throw ShapeError("sum_axis: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
  }
  Shape s = x.shape();
  s[axis] = 1;
  return sum_to(x, s);
}

DiffValue mean_axis(const DiffValue& x, std::size_t axis) {
  const double n = static_cast<double>(x.shape().at(axis));
  return scale(sum_axis(x, axis), 1.0 / n);
}

DiffValue concat(const std::vector<DiffValue>& xs, std::size_t axis) {
  Attrs a;
  a.axis = axis;
  return apply_primitive(OpKind::Concat, xs, a);
}

DiffValue slice(const DiffValue& x, std::size_t axis, std::size_t offset, std::size_t length) {
  Attrs a;
  a.axis = axis;
  a.offset = offset;
  a.length = length;
  return unary(OpKind::Slice, x, a);
}

DiffValue pad_slice(const DiffValue& x, std::size_t axis, std::size_t offset, std::size_t full_length) {
  Attrs a;
  a.axis = axis;
  a.offset = offset;
  a.length = full_length;
  return unary(OpKind::PadSlice, x, a);
}

DiffValue softmax(const DiffValue& x, double tau) { return unary(OpKind::Softmax, x, with_scalar(tau)); }
DiffValue log_softmax(const DiffValue& x, double tau) { return unary(OpKind::LogSoftmax, x, with_scalar(tau)); }
DiffValue blur3x3(const DiffValue& x) { return unary(OpKind::Blur3x3, x); }

}  // namespace sib::ad
