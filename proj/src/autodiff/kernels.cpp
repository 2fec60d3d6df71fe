#include "sib/autodiff/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sib/errors.hpp"

namespace sib::ad::kernels {

namespace {

// Output positions o with 0 <= o*stride + k - pad < length.
std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t stride, std::size_t pad,
                                                 std::size_t length, std::size_t out_length) {
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  if (length - 1 + pad < k) return {0, 0};
  std::size_t hi = (length - 1 + pad - k) / stride + 1;
  hi = std::min(hi, out_length);
  if (lo >= hi) return {0, 0};
  return {lo, hi};
}

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + ": expected rank-4 NCHW tensor, got " + to_string(s));
}

Shape strides_of(const Shape& s) {
  Shape st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// For each linear index of `big`, the linear index into the broadcast source `small`.
template <typename F>
void for_each_broadcast(const Shape& small, const Shape& big, F&& f) {
  const std::size_t rank = big.size();
  const Shape small_strides = strides_of(small);
  Shape eff(rank);
  for (std::size_t d = 0; d < rank; ++d) eff[d] = small[d] == 1 ? 0 : small_strides[d];
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = numel(big);
  std::size_t src = 0;
  for (std::size_t i = 0; i < total; ++i) {
    f(i, src);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += eff[d];
      if (idx[d] < big[d]) break;
      src -= eff[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

ConvGeometry conv_geometry(const Shape& input, const Shape& weight, std::size_t stride, std::size_t pad) {
  require_rank4(input, "conv2d");
  require_rank4(weight, "conv2d");
  if (stride == 0) throw DomainError("conv2d: stride must be positive");
  if (input[1] != weight[1]) {
    throw ShapeError("conv2d: input channels " + std::to_string(input[1]) + " != weight channels " +
                     std::to_string(weight[1]) + " (input " + to_string(input) + ", weight " + to_string(weight) +
                     ")");
  }
  if (input[2] + 2 * pad < weight[2] || input[3] + 2 * pad < weight[3]) {
    throw ShapeError("conv2d: kernel " + to_string(weight) + " larger than padded input " + to_string(input));
  }
  ConvGeometry g{};
  g.n = input[0];
  g.cin = input[1];
  g.h = input[2];
  g.w = input[3];
  g.cout = weight[0];
  g.kh = weight[2];
  g.kw = weight[3];
  g.stride = stride;
  g.pad = pad;
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const auto g = conv_geometry(x.shape(), w.shape(), stride, pad);
  Tensor y({g.n, g.cout, g.oh, g.ow});
  const double* xp = x.data().data();
  const double* wp = w.data().data();
  double* yp = y.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      double* yplane = yp + (n * g.cout + co) * g.oh * g.ow;
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* xplane = xp + (n * g.cin + ci) * g.h * g.w;
        const double* wk = wp + (co * g.cin + ci) * g.kh * g.kw;
        for (std::size_t a = 0; a < g.kh; ++a) {
          const auto [r0, r1] = valid_range(a, stride, pad, g.h, g.oh);
          for (std::size_t b = 0; b < g.kw; ++b) {
            const auto [c0, c1] = valid_range(b, stride, pad, g.w, g.ow);
            const double wv = wk[a * g.kw + b];
            for (std::size_t r = r0; r < r1; ++r) {
              const double* xrow = xplane + (r * stride + a - pad) * g.w;
              double* yrow = yplane + r * g.ow;
              for (std::size_t c = c0; c < c1; ++c) yrow[c] += wv * xrow[c * stride + b - pad];
            }
          }
        }
      }
    }
  }
  return y;
}

Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, const Shape& input_shape, std::size_t stride,
                         std::size_t pad) {
  const auto g = conv_geometry(input_shape, w.shape(), stride, pad);
  const Shape expect{g.n, g.cout, g.oh, g.ow};
  if (gy.shape() != expect) {
    throw ShapeError("conv2d_input_grad: gradient shape " + to_string(gy.shape()) + " != " + to_string(expect));
  }
  Tensor gx(input_shape);
  const double* gp = gy.data().data();
  const double* wp = w.data().data();
  double* xp = gx.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      const double* gplane = gp + (n * g.cout + co) * g.oh * g.ow;
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        double* xplane = xp + (n * g.cin + ci) * g.h * g.w;
        const double* wk = wp + (co * g.cin + ci) * g.kh * g.kw;
        for (std::size_t a = 0; a < g.kh; ++a) {
          const auto [r0, r1] = valid_range(a, stride, pad, g.h, g.oh);
          for (std::size_t b = 0; b < g.kw; ++b) {
            const auto [c0, c1] = valid_range(b, stride, pad, g.w, g.ow);
            const double wv = wk[a * g.kw + b];
            for (std::size_t r = r0; r < r1; ++r) {
              double* xrow = xplane + (r * stride + a - pad) * g.w;
              const double* grow = gplane + r * g.ow;
              for (std::size_t c = c0; c < c1; ++c) xrow[c * stride + b - pad] += wv * grow[c];
            }
          }
        }
      }
    }
  }
  return gx;
}

Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, const Shape& weight_shape, std::size_t stride,
                          std::size_t pad) {
  const auto g = conv_geometry(x.shape(), weight_shape, stride, pad);
  const Shape expect{g.n, g.cout, g.oh, g.ow};
  if (gy.shape() != expect) {
    throw ShapeError("conv2d_weight_grad: gradient shape " + to_string(gy.shape()) + " != " + to_string(expect));
  }
  Tensor gw(weight_shape);
  const double* gp = gy.data().data();
  const double* xp = x.data().data();
  double* wp = gw.data().data();
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t co = 0; co < g.cout; ++co) {
      const double* gplane = gp + (n * g.cout + co) * g.oh * g.ow;
      for (std::size_t ci = 0; ci < g.cin; ++ci) {
        const double* xplane = xp + (n * g.cin + ci) * g.h * g.w;
        double* wk = wp + (co * g.cin + ci) * g.kh * g.kw;
        for (std::size_t a = 0; a < g.kh; ++a) {
          const auto [r0, r1] = valid_range(a, stride, pad, g.h, g.oh);
          for (std::size_t b = 0; b < g.kw; ++b) {
            const auto [c0, c1] = valid_range(b, stride, pad, g.w, g.ow);
            double acc = 0.0;
            for (std::size_t r = r0; r < r1; ++r) {
              const double* xrow = xplane + (r * stride + a - pad) * g.w;
              const double* grow = gplane + r * g.ow;
              for (std::size_t c = c0; c < c1; ++c) acc += grow[c] * xrow[c * stride + b - pad];
            }
            wk[a * g.kw + b] += acc;
          }
        }
      }
    }
  }
  return gw;
}

Shape pooled_shape(const Shape& input, std::size_t k) {
  if (input.size() < 2) throw ShapeError("pool2d: rank < 2 input " + to_string(input));
  if (k == 0) throw DomainError("pool2d: window must be positive");
  const std::size_t h = input[input.size() - 2];
  const std::size_t w = input[input.size() - 1];
  if (h % k != 0 || w % k != 0) {
    throw ShapeError("pool2d: spatial dims of " + to_string(input) + " not divisible by window " +
                     std::to_string(k));
  }
  Shape out = input;
  out[out.size() - 2] = h / k;
  out[out.size() - 1] = w / k;
  return out;
}

Tensor avgpool2d(const Tensor& x, std::size_t k) {
  const Shape out_shape = pooled_shape(x.shape(), k);
  const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
  const std::size_t oh = h / k, ow = w / k;
  const std::size_t planes = x.size() / (h * w);
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor y(out_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xp = x.data().data() + p * h * w;
    double* yp = y.data().data() + p * oh * ow;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) yp[(i / k) * ow + j / k] += xp[i * w + j];
    }
    for (std::size_t i = 0; i < oh * ow; ++i) yp[i] *= inv;
  }
  return y;
}

Tensor avgpool2d_adjoint(const Tensor& g, std::size_t k, const Shape& input_shape) {
  const Shape out_shape = pooled_shape(input_shape, k);
  if (g.shape() != out_shape) {
    throw ShapeError("avgpool2d_adjoint: gradient " + to_string(g.shape()) + " != " + to_string(out_shape));
  }
  const std::size_t h = input_shape[input_shape.size() - 2], w = input_shape[input_shape.size() - 1];
  const std::size_t ow = w / k;
  const std::size_t planes = numel(input_shape) / (h * w);
  const double inv = 1.0 / static_cast<double>(k * k);
  Tensor x(input_shape);
  for (std::size_t p = 0; p < planes; ++p) {
    const double* gp = g.data().data() + p * (h / k) * ow;
    double* xp = x.data().data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) xp[i * w + j] = gp[(i / k) * ow + j / k] * inv;
    }
  }
  return x;
}

std::vector<std::size_t> maxpool2d_indices(const Tensor& x, std::size_t k) {
  const Shape out_shape = pooled_shape(x.shape(), k);
  const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
  const std::size_t oh = h / k, ow = w / k;
  const std::size_t planes = x.size() / (h * w);
  std::vector<std::size_t> idx(numel(out_shape));
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * h * w;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = base + (i * k) * w + j * k;
        for (std::size_t a = 0; a < k; ++a) {
          for (std::size_t b = 0; b < k; ++b) {
            const std::size_t at = base + (i * k + a) * w + j * k + b;
            if (x[at] > x[best]) best = at;  // strict: earliest (lowest flat index) wins ties
          }
        }
        idx[p * oh * ow + i * ow + j] = best;
      }
    }
  }
  return idx;
}

std::vector<std::size_t> argmax_trailing(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("amax: axis " + std::to_string(axis) + " >= rank of " + to_string(x.shape()));
  std::size_t inner = 1;
  for (std::size_t d = axis; d < x.rank(); ++d) inner *= x.shape()[d];
  const std::size_t outer = x.size() / inner;
  std::vector<std::size_t> idx(outer);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t best = o * inner;
    for (std::size_t i = 1; i < inner; ++i) {
      if (x[o * inner + i] > x[best]) best = o * inner + i;
    }
    idx[o] = best;
  }
  return idx;
}

Tensor gather(const Tensor& x, const std::vector<std::size_t>& idx, const Shape& out_shape) {
  if (numel(out_shape) != idx.size()) {
    throw ShapeError("gather: " + std::to_string(idx.size()) + " indices for output " + to_string(out_shape));
  }
  Tensor y(out_shape);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= x.size()) throw ShapeError("gather: index out of range for " + to_string(x.shape()));
    y[j] = x[idx[j]];
  }
  return y;
}

Tensor scatter_add(const Tensor& g, const std::vector<std::size_t>& idx, const Shape& out_shape) {
  if (g.size() != idx.size()) {
    throw ShapeError("scatter_add: " + std::to_string(idx.size()) + " indices for source " + to_string(g.shape()));
  }
  Tensor y(out_shape);
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= y.size()) throw ShapeError("scatter_add: index out of range for " + to_string(out_shape));
    y[idx[j]] += g[j];
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* cp = c.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ap[i * k + p];
      const double* brow = bp + p * n;
      double* crow = cp + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + to_string(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor t({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  }
  return t;
}

bool broadcastable(const Shape& from, const Shape& to) {
  if (from.size() != to.size()) return false;
  for (std::size_t d = 0; d < from.size(); ++d) {
    if (from[d] != 1 && from[d] != to[d]) return false;
  }
  return true;
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  if (!broadcastable(x.shape(), shape)) {
    throw ShapeError("broadcast_to: cannot broadcast " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor y(shape);
  for_each_broadcast(x.shape(), shape, [&](std::size_t i, std::size_t src) { y[i] = x[src]; });
  return y;
}

Tensor sum_to(const Tensor& x, const Shape& shape) {
  if (!broadcastable(shape, x.shape())) {
    throw ShapeError("sum_to: cannot reduce " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor y(shape);
  for_each_broadcast(shape, x.shape(), [&](std::size_t i, std::size_t dst) { y[dst] += x[i]; });
  return y;
}

Tensor concat(const std::vector<const Tensor*>& xs, std::size_t axis) {
  if (xs.empty()) throw ContractError("concat: no inputs");
  const Shape& first = xs.front()->shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
  Shape out = first;
  out[axis] = 0;
  for (const Tensor* t : xs) {
    const Shape& s = t->shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw ShapeError("concat: shape " + to_string(s) + " incompatible with " + to_string(first));
    out[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  Tensor y(out);
  std::size_t col = 0;
  for (const Tensor* t : xs) {
    const std::size_t block = t->shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t->data().data() + o * block, block, y.data().data() + o * out[axis] * inner + col);
    }
    col += block;
  }
  return y;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t offset, std::size_t length) {
  if (axis >= x.rank() || length == 0 || offset + length > x.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                     ") invalid on axis " + std::to_string(axis) + " of " + to_string(x.shape()));
  }
  Shape out = x.shape();
  out[axis] = length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out[d];
  for (std::size_t d = axis + 1; d < out.size(); ++d) inner *= out[d];
  Tensor y(out);
  const std::size_t full = x.shape()[axis];
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + (o * full + offset) * inner, length * inner, y.data().data() + o * length * inner);
  }
  return y;
}

Tensor pad_slice(const Tensor& x, std::size_t axis, std::size_t offset, std::size_t full_length) {
  if (axis >= x.rank() || offset + x.shape()[axis] > full_length) {
    throw ShapeError("pad_slice: cannot embed " + to_string(x.shape()) + " at offset " + std::to_string(offset) +
                     " into length " + std::to_string(full_length));
  }
  Shape out = x.shape();
  const std::size_t length = out[axis];
  out[axis] = full_length;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out[d];
  for (std::size_t d = axis + 1; d < out.size(); ++d) inner *= out[d];
  Tensor y(out);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * length * inner, length * inner,
                y.data().data() + (o * full_length + offset) * inner);
  }
  return y;
}

Tensor softmax(const Tensor& x, double tau) {
  if (!(tau > 0.0)) throw DomainError("softmax: temperature must be > 0");
  if (x.rank() == 0) throw ShapeError("softmax: rank-0 input");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * c;
    double* yr = y.data().data() + r * c;
    const double mx = *std::max_element(xr, xr + c);
    double sum = 0.0;
    for (std::size_t i = 0; i < c; ++i) {
      yr[i] = std::exp((xr[i] - mx) / tau);
      sum += yr[i];
    }
    for (std::size_t i = 0; i < c; ++i) yr[i] /= sum;
  }
  return y;
}

Tensor log_softmax(const Tensor& x, double tau) {
  if (!(tau > 0.0)) throw DomainError("log_softmax: temperature must be > 0");
  if (x.rank() == 0) throw ShapeError("log_softmax: rank-0 input");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  Tensor y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * c;
    double* yr = y.data().data() + r * c;
    const double mx = *std::max_element(xr, xr + c);
    double sum = 0.0;
    for (std::size_t i = 0; i < c; ++i) sum += std::exp((xr[i] - mx) / tau);
    const double lse = std::log(sum);
    for (std::size_t i = 0; i < c; ++i) yr[i] = (xr[i] - mx) / tau - lse;
  }
  return y;
}

Tensor blur3x3(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("blur3x3: rank < 2 input " + to_string(x.shape()));
  const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
  const std::size_t planes = x.size() / (h * w);
  constexpr double k[3] = {0.25, 0.5, 0.25};
  Tensor tmp(x.shape());
  Tensor y(x.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xp = x.data().data() + p * h * w;
    double* tp = tmp.data().data() + p * h * w;
    double* yp = y.data().data() + p * h * w;
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double acc = k[1] * xp[i * w + j];
        if (j > 0) acc += k[0] * xp[i * w + j - 1];
        if (j + 1 < w) acc += k[2] * xp[i * w + j + 1];
        tp[i * w + j] = acc;
      }
    }
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        double acc = k[1] * tp[i * w + j];
        if (i > 0) acc += k[0] * tp[(i - 1) * w + j];
        if (i + 1 < h) acc += k[2] * tp[(i + 1) * w + j];
        yp[i * w + j] = acc;
      }
    }
  }
  return y;
}

Tensor resize_bilinear(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() < 2) throw ShapeError("resize_bilinear: rank < 2 input " + to_string(x.shape()));
  const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
  const std::size_t planes = x.size() / (h * w);
  Shape out = x.shape();
  out[out.size() - 2] = out_h;
  out[out.size() - 1] = out_w;
  Tensor y(out);
  auto source = [](std::size_t dst, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& t) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    t = s - static_cast<double>(i0);
  };
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xp = x.data().data() + p * h * w;
    double* yp = y.data().data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      std::size_t r0, r1;
      double tr;
      source(i, h, out_h, r0, r1, tr);
      for (std::size_t j = 0; j < out_w; ++j) {
        std::size_t c0, c1;
        double tc;
        source(j, w, out_w, c0, c1, tc);
        const double top = xp[r0 * w + c0] * (1 - tc) + xp[r0 * w + c1] * tc;
        const double bot = xp[r1 * w + c0] * (1 - tc) + xp[r1 * w + c1] * tc;
        yp[i * out_w + j] = top * (1 - tr) + bot * tr;
      }
    }
  }
  return y;
}

}  // namespace sib::ad::kernels
