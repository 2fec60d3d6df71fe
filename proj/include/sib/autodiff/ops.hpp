#pragma once

#include <cstddef>
#include <vector>

#include "sib/autodiff/graph.hpp"

namespace sib::ad {

// Elementwise binary ops require identical shapes; broadcast explicitly.
DiffValue add(const DiffValue& a, const DiffValue& b);
DiffValue sub(const DiffValue& a, const DiffValue& b);
DiffValue mul(const DiffValue& a, const DiffValue& b);
DiffValue div(const DiffValue& a, const DiffValue& b);
DiffValue neg(const DiffValue& a);
DiffValue scale(const DiffValue& a, double factor);
DiffValue add_scalar(const DiffValue& a, double c);

inline DiffValue operator+(const DiffValue& a, const DiffValue& b) { return add(a, b); }
inline DiffValue operator-(const DiffValue& a, const DiffValue& b) { return sub(a, b); }
inline DiffValue operator*(const DiffValue& a, const DiffValue& b) { return mul(a, b); }
inline DiffValue operator/(const DiffValue& a, const DiffValue& b) { return div(a, b); }
inline DiffValue operator-(const DiffValue& a) { return neg(a); }
inline DiffValue operator*(const DiffValue& a, double s) { return scale(a, s); }
inline DiffValue operator*(double s, const DiffValue& a) { return scale(a, s); }

DiffValue matmul(const DiffValue& a, const DiffValue& b);
DiffValue transpose(const DiffValue& a);

DiffValue conv2d(const DiffValue& x, const DiffValue& w, std::size_t stride = 1, std::size_t pad = 0);
DiffValue conv2d_input_grad(const DiffValue& g, const DiffValue& w, const Shape& input_shape, std::size_t stride,
                            std::size_t pad);
DiffValue conv2d_weight_grad(const DiffValue& x, const DiffValue& g, const Shape& weight_shape, std::size_t stride,
                             std::size_t pad);

DiffValue avgpool2d(const DiffValue& x, std::size_t k);
DiffValue avgpool2d_adjoint(const DiffValue& g, std::size_t k, const Shape& input_shape);
DiffValue maxpool2d(const DiffValue& x, std::size_t k);
DiffValue gather(const DiffValue& x, IndexList idx, const Shape& out_shape);
DiffValue scatter_add(const DiffValue& g, IndexList idx, const Shape& out_shape);
// Max over all axes from `axis` on; result keeps those axes with size 1.
DiffValue amax(const DiffValue& x, std::size_t axis);
DiffValue amin(const DiffValue& x, std::size_t axis);

DiffValue relu(const DiffValue& x);
DiffValue abs(const DiffValue& x);
DiffValue sigmoid(const DiffValue& x);
DiffValue exp(const DiffValue& x);
DiffValue log(const DiffValue& x);
DiffValue sqrt(const DiffValue& x);
DiffValue square(const DiffValue& x);

DiffValue sum_to(const DiffValue& x, const Shape& shape);
DiffValue broadcast_to(const DiffValue& x, const Shape& shape);
DiffValue reshape(const DiffValue& x, const Shape& shape);
DiffValue sum(const DiffValue& x);   // rank-0 result
DiffValue mean(const DiffValue& x);  // rank-0 result
// Sum/mean over one axis, keeping it with size 1.
DiffValue sum_axis(const DiffValue& x, std::size_t axis);
DiffValue mean_axis(const DiffValue& x, std::size_t axis);

DiffValue concat(const std::vector<DiffValue>& xs, std::size_t axis);
DiffValue slice(const DiffValue& x, std::size_t axis, std::size_t offset, std::size_t length);
DiffValue pad_slice(const DiffValue& x, std::size_t axis, std::size_t offset, std::size_t full_length);

DiffValue softmax(const DiffValue& x, double tau = 1.0);
DiffValue log_softmax(const DiffValue& x, double tau = 1.0);
DiffValue blur3x3(const DiffValue& x);

}  // namespace sib::ad
