#pragma once

// Value-level implementations of the primitives. No graph, no recording.

#include <cstddef>
#include <vector>

#include "sib/autodiff/tensor.hpp"

namespace sib::ad::kernels {

struct ConvGeometry {
  std::size_t n, cin, h, w;      // input
  std::size_t cout, kh, kw;      // weight
  std::size_t oh, ow;            // output
  std::size_t stride, pad;
};

ConvGeometry conv_geometry(const Shape& input, const Shape& weight, std::size_t stride, std::size_t pad);

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad);
// Adjoint of conv2d in x: maps an output-shaped gradient back to `input_shape`.
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& input_shape, std::size_t stride,
                         std::size_t pad);
// Adjoint of conv2d in w: produces a tensor of `weight_shape`.
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& weight_shape, std::size_t stride,
                          std::size_t pad);

Tensor avgpool2d(const Tensor& x, std::size_t k);
Tensor avgpool2d_adjoint(const Tensor& g, std::size_t k, const Shape& input_shape);

// Flat argmax index per k x k window; ties resolve to the lowest flat index.
std::vector<std::size_t> maxpool2d_indices(const Tensor& x, std::size_t k);
Shape pooled_shape(const Shape& input, std::size_t k);

// Argmax over the trailing axes starting at `axis`; ties -> lowest flat index.
std::vector<std::size_t> argmax_trailing(const Tensor& x, std::size_t axis);

Tensor gather(const Tensor& x, const std::vector<std::size_t>& idx, const Shape& out_shape);
Tensor scatter_add(const Tensor& g, const std::vector<std::size_t>& idx, const Shape& out_shape);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Same-rank numpy-style broadcasting: every dim of `from` is 1 or equal to the target.
bool broadcastable(const Shape& from, const Shape& to);
Tensor broadcast_to(const Tensor& x, const Shape& shape);
Tensor sum_to(const Tensor& x, const Shape& shape);

Tensor concat(const std::vector<const Tensor*>& xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t offset, std::size_t length);
Tensor pad_slice(const Tensor& x, std::size_t axis, std::size_t offset, std::size_t full_length);

Tensor softmax(const Tensor& x, double tau);       // over the last axis
Tensor log_softmax(const Tensor& x, double tau);   // over the last axis

// Fixed [1,2,1] x [1,2,1] / 16 kernel over the last two axes, zero padded.
Tensor blur3x3(const Tensor& x);

// Bilinear resize of the last two axes (align-corners = false, edge clamped).
Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w);

}  // namespace sib::ad::kernels
