#include "sib/core/objective.hpp"

#include <cmath>

#include "sib/autodiff/kernels.hpp"
#include "sib/autodiff/ops.hpp"
#include "sib/errors.hpp"

namespace sib::core {

using ad::DiffValue;
using ad::Shape;
using ad::Tensor;

VjpDecoding compute_vjp_decoding(const models::Classifier& model, const Tensor& x, double tau,
                                 const models::BoundParams& params, ad::Graph& graph, bool retain,
                                 const Tensor* cotangent) {
  if (x.rank() != 4) throw ShapeError("decoding expects N x C x h x w input, got " + ad::to_string(x.shape()));
  VjpDecoding d;
  d.x = graph.variable(x);
  d.forward = models::forward(model, d.x, tau, params);
  d.cotangent = cotangent ? *cotangent : d.forward.posterior.value();
  const auto g = ad::vjp(d.forward.posterior, std::vector{d.x}, d.cotangent, {.retain_graph = retain});
  const Shape& s = x.shape();
  DiffValue r = g[0];
  if (s[1] != 1) r = ad::sum_axis(r, 1);
  d.R = ad::reshape(r, {s[0], s[2], s[3]});
  return d;
}

void validate(const MaskParams& p) {
  if (!(p.threshold > 0.0 && p.threshold < 1.0)) {
    throw ConfigError("mask threshold must lie in (0, 1), got " + std::to_string(p.threshold));
  }
  if (!(p.sharpness > 0.0)) throw ConfigError("mask sharpness must be positive, got " + std::to_string(p.sharpness));
}

DiffValue generate_mask(const DiffValue& R, const MaskParams& params) {
  validate(params);
  if (R.shape().size() == 2) {
    const Shape s = R.shape();
    return ad::reshape(generate_mask(ad::reshape(R, {1, s[0], s[1]}), params), s);
  }
  if (R.shape().size() != 3) throw ShapeError("generate_mask expects h x w or N x h x w, got " + ad::to_string(R.shape()));
  const Shape& s = R.shape();
  const std::size_t n = s[0];

  const DiffValue blurred =
      ad::blur3x3(ad::abs(R)) / ad::constant(ad::kernels::blur3x3(Tensor(s, 1.0)));
  const DiffValue hi = ad::amax(blurred, 1);  // N x 1 x 1
  const DiffValue lo = ad::amin(blurred, 1);
  const DiffValue range = hi - lo;

  // Images without spread get a zero numerator and a unit denominator.
  Tensor keep({n, 1, 1}), pad({n, 1, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const bool flat = !(range.value()[i] > 1e-12 * std::abs(hi.value()[i]));
    keep[i] = flat ? 0.0 : 1.0;
    pad[i] = flat ? 1.0 : 0.0;
  }
  const DiffValue num = (blurred - ad::broadcast_to(lo, s)) * ad::broadcast_to(ad::constant(keep), s);
  const DiffValue den = ad::broadcast_to(range + ad::constant(pad), s);
  const DiffValue normalized = num / den;
  return ad::sigmoid(ad::scale(ad::add_scalar(normalized, -params.threshold), 1.0 / params.sharpness));
}

MaskedDecomposition split(const DiffValue& R, const DiffValue& X, const DiffValue& M) {
  const Shape& rs = R.shape();
  const Shape& xs = X.shape();
  if (rs.size() != 3 || M.shape() != rs || xs.size() != 4 || xs[0] != rs[0] || xs[2] != rs[1] || xs[3] != rs[2]) {
    throw ShapeError("split: R " + ad::to_string(rs) + ", X " + ad::to_string(xs) + ", M " +
                     ad::to_string(M.shape()));
  }
  MaskedDecomposition d{.R = R, .X = X, .M = M, .R_fg = {}, .R_bg = {}, .X_fg = {}, .X_bg = {}};
  const DiffValue inv = ad::add_scalar(-M, 1.0);
  d.R_fg = R * M;
  d.R_bg = R * inv;
  const Shape m4 = {rs[0], 1, rs[1], rs[2]};
  d.X_fg = X * ad::broadcast_to(ad::reshape(M, m4), xs);
  d.X_bg = X * ad::broadcast_to(ad::reshape(inv, m4), xs);
  return d;
}

namespace {

void check_pair(const DiffValue& A, const DiffValue& B) {
  if (A.shape().size() != 2 || B.shape().size() != 2 || A.shape()[0] != B.shape()[0]) {
    throw ShapeError("hsic: A " + ad::to_string(A.shape()) + ", B " + ad::to_string(B.shape()));
  }
  if (A.shape()[0] < 2) throw ContractError("hsic needs at least 2 samples");
}

DiffValue center_rows(const DiffValue& A) { return A - ad::broadcast_to(ad::mean_axis(A, 0), A.shape()); }

// Centered A with each feature divided by its sample standard deviation;
// features without spread become zero.
DiffValue standardize_features(const DiffValue& A) {
  const std::size_t n = A.shape()[0], d = A.shape()[1];
  const DiffValue c = center_rows(A);
  const DiffValue var = ad::scale(ad::sum_axis(ad::square(c), 0), 1.0 / static_cast<double>(n - 1));
  Tensor keep({1, d}), pad({1, d});
  for (std::size_t j = 0; j < d; ++j) {
    // Relative floor separates genuine spread from rounding left by centering.
    double sq = 0;
    for (std::size_t i = 0; i < n; ++i) sq += A.value()[i * d + j] * A.value()[i * d + j];
    const bool flat = !(var.value()[j] > 1e-24 * sq / static_cast<double>(n) + 1e-300);
    keep[j] = flat ? 0.0 : 1.0;
    pad[j] = flat ? 1.0 : 0.0;
  }
  const DiffValue sd = ad::sqrt(var + ad::constant(pad));
  return (c * ad::broadcast_to(ad::constant(keep), A.shape())) / ad::broadcast_to(sd, A.shape());
}

// Centered A divided by the square root of its total sample variance.
DiffValue normalize_total(const DiffValue& A, bool& flat) {
  const std::size_t n = A.shape()[0];
  const DiffValue c = center_rows(A);
  const DiffValue total = ad::scale(ad::sum(ad::square(c)), 1.0 / static_cast<double>(n - 1));
  double sq = 0;
  for (double v : A.value().data()) sq += v * v;
  flat = !(total.value().item() > 1e-24 * sq / static_cast<double>(n) + 1e-300);
  if (flat) return c;
  return c / ad::broadcast_to(ad::reshape(ad::sqrt(total), {1, 1}), A.shape());
}

}  // namespace

DiffValue flatten_rows(const DiffValue& x) {
  if (x.shape().empty()) throw ShapeError("flatten_rows on a scalar");
  const std::size_t n = x.shape()[0];
  return ad::reshape(x, {n, x.size() / n});
}

DiffValue hsic_linear(const DiffValue& A, const DiffValue& B) {
  check_pair(A, B);
  const std::size_t n = A.shape()[0];
  const DiffValue ac = center_rows(A);
  const DiffValue bc = center_rows(B);
  // tr(K H L H) = sum((H K H) .* (H L H)) for symmetric K, L.
  const DiffValue k = ad::matmul(ac, ad::transpose(ac));
  const DiffValue l = ad::matmul(bc, ad::transpose(bc));
  const double denom = static_cast<double>(n - 1) * static_cast<double>(n - 1);
  return ad::scale(ad::sum(k * l), 1.0 / denom);
}

HsicScaling parse_hsic_scaling(const std::string& s) {
  if (s == "raw") return HsicScaling::Raw;
  if (s == "feature") return HsicScaling::Feature;
  if (s == "global") return HsicScaling::Global;
  throw ConfigError("hsic scaling must be raw, feature or global, got '" + s + "'");
}

std::string to_string(HsicScaling s) {
  switch (s) {
    case HsicScaling::Raw: return "raw";
    case HsicScaling::Feature: return "feature";
    case HsicScaling::Global: return "global";
  }
  return "?";
}

DiffValue hsic_scaled(const DiffValue& A, const DiffValue& B, HsicScaling scaling) {
  check_pair(A, B);
  switch (scaling) {
    case HsicScaling::Raw:
      return hsic_linear(A, B);
    case HsicScaling::Feature: {
      const double de = static_cast<double>(A.shape()[1]) * static_cast<double>(B.shape()[1]);
      return ad::scale(hsic_linear(standardize_features(A), standardize_features(B)), 1.0 / de);
    }
    case HsicScaling::Global: {
      bool flat_a = false, flat_b = false;
      const DiffValue a = normalize_total(A, flat_a);
      const DiffValue b = normalize_total(B, flat_b);
      if (flat_a || flat_b) return ad::scale(hsic_linear(a, b), 0.0);
      return hsic_linear(a, b);
    }
  }
  throw ContractError("unknown hsic scaling");
}

DiffValue loss_fg(const MaskedDecomposition& d, HsicScaling scaling) {
  return -hsic_scaled(flatten_rows(d.R_fg), flatten_rows(d.X_fg), scaling);
}

BgVariance parse_bg_variance(const std::string& s) {
  if (s == "batch") return BgVariance::Batch;
  if (s == "spatial") return BgVariance::Spatial;
  throw ConfigError("bg variance must be batch or spatial, got '" + s + "'");
}

std::string to_string(BgVariance v) { return v == BgVariance::Batch ? "batch" : "spatial"; }

DiffValue loss_bg(const MaskedDecomposition& d, BgVariance mode) {
  const DiffValue r = flatten_rows(d.R_bg);
  if (r.shape()[0] < 2) throw ContractError("loss_bg needs at least 2 samples");
  const std::size_t axis = mode == BgVariance::Batch ? 0 : 1;
  const DiffValue c = r - ad::broadcast_to(ad::mean_axis(r, axis), r.shape());
  return ad::mean(ad::mean_axis(ad::square(c), axis));
}

SibLossTerms sib_loss(const models::Classifier& model, const Tensor& x, std::span<const std::size_t> labels,
                      const SibConfig& config, const models::BoundParams& params, ad::Graph& graph,
                      const Tensor* cotangent) {
  validate(config.mask);
  if (x.rank() != 4 || x.dim(0) < 2) throw ContractError("sib_loss needs a batch of at least 2 samples");
  if (!(config.gamma >= 0.0) || !std::isfinite(config.gamma)) throw ConfigError("gamma must be finite and >= 0");
  const bool active = config.gamma != 0.0 || config.use_bg;

  SibLossTerms t;
  t.gamma = config.gamma;
  t.decoding = compute_vjp_decoding(model, x, config.tau, params, graph, active, cotangent);
  t.l_ce = models::cross_entropy(t.decoding.forward.logits, labels, config.tau);

  const DiffValue R = active ? t.decoding.R : t.decoding.R.detach();
  const DiffValue X = ad::constant(x);
  const DiffValue M = config.force_full_mask ? ad::constant(Tensor(R.shape(), 1.0)) : generate_mask(R, config.mask);
  t.decomposition = split(R, X, M);
  t.l_fg = loss_fg(t.decomposition, config.hsic);
  t.l_bg = loss_bg(t.decomposition, config.bg_variance);

  DiffValue total = t.l_ce;
  if (config.use_bg) total = total + t.l_bg;
  if (config.gamma != 0.0) total = total + ad::scale(t.l_fg, config.gamma);
  t.total = total;
  return t;
}

}  // namespace sib::core
