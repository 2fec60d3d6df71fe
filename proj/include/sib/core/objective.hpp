#pragma once

#include <cstddef>
#include <span>
#include <string>

#include "sib/autodiff/graph.hpp"
#include "sib/models/classifier.hpp"

namespace sib::core {

struct VjpDecoding {
  ad::DiffValue x;          // N x C x h x w input, a variable on the graph
  models::ForwardResult forward;
  ad::DiffValue R;          // N x h x w, J^T p summed over image channels
  ad::Tensor cotangent;     // frozen posterior used as the VJP cotangent
};

// R = J^T p with J = d posterior / d x and p held constant. With `retain`, R is
// differentiable w.r.t. the bound parameters. A non-null `cotangent` replaces p.
VjpDecoding compute_vjp_decoding(const models::Classifier& model, const ad::Tensor& x, double tau,
                                 const models::BoundParams& params, ad::Graph& graph, bool retain = true,
                                 const ad::Tensor* cotangent = nullptr);

struct MaskParams {
  double threshold = 0.5;
  double sharpness = 0.1;
};

void validate(const MaskParams& p);

// M = sigmoid((minmax(blur(|R|)) - t) / s) per image. The blur renormalizes at
// the border so constant maps stay constant; a map with no spread normalizes
// to zero. Accepts h x w or N x h x w.
ad::DiffValue generate_mask(const ad::DiffValue& R, const MaskParams& params = {});

struct MaskedDecomposition {
  ad::DiffValue R, X, M;  // R, M: N x h x w; X: N x C x h x w
  ad::DiffValue R_fg, R_bg, X_fg, X_bg;
};

MaskedDecomposition split(const ad::DiffValue& R, const ad::DiffValue& X, const ad::DiffValue& M);

// tr(K H L H) / (n-1)^2 with K = A A^T, L = B B^T. A: n x d, B: n x e.
ad::DiffValue hsic_linear(const ad::DiffValue& A, const ad::DiffValue& B);

enum class HsicScaling {
  Raw,      // features used as given
  Feature,  // per-feature zero mean, unit variance; result divided by d*e
  Global,   // per-feature zero mean, each side divided by its total variance
};

HsicScaling parse_hsic_scaling(const std::string& s);
std::string to_string(HsicScaling s);

// Feature scaling applied before hsic_linear; both scaled forms lie in [0, 1].
ad::DiffValue hsic_scaled(const ad::DiffValue& A, const ad::DiffValue& B, HsicScaling scaling);

// Flattens every axis after the first: N x ... -> N x rest.
ad::DiffValue flatten_rows(const ad::DiffValue& x);

ad::DiffValue loss_fg(const MaskedDecomposition& d, HsicScaling scaling = HsicScaling::Feature);

enum class BgVariance {
  Batch,    // per-pixel variance across the batch, averaged over pixels
  Spatial,  // per-sample variance across pixels, averaged over the batch
};

BgVariance parse_bg_variance(const std::string& s);
std::string to_string(BgVariance v);

// Population variance of R_bg.
ad::DiffValue loss_bg(const MaskedDecomposition& d, BgVariance mode = BgVariance::Batch);

struct SibConfig {
  double tau = 1.0;
  double gamma = 1.0;
  bool use_bg = true;      // false: L_bg is computed but not added to the total
  bool force_full_mask = false;
  MaskParams mask;
  HsicScaling hsic = HsicScaling::Feature;
  BgVariance bg_variance = BgVariance::Batch;
};

struct SibLossTerms {
  ad::DiffValue l_ce, l_fg, l_bg, total;
  double gamma = 0.0;
  VjpDecoding decoding;
  MaskedDecomposition decomposition;
};

// total = L_ce + L_bg + gamma * L_fg, all on `graph`. Set use_bg = false and
// gamma = 0 for the cross-entropy-only objective. `cotangent` as in
// compute_vjp_decoding.
SibLossTerms sib_loss(const models::Classifier& model, const ad::Tensor& x, std::span<const std::size_t> labels,
                      const SibConfig& config, const models::BoundParams& params, ad::Graph& graph,
                      const ad::Tensor* cotangent = nullptr);

}  // namespace sib::core
