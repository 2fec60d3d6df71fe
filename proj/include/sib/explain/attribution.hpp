#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "sib/autodiff/graph.hpp"
#include "sib/core/objective.hpp"
#include "sib/models/classifier.hpp"

namespace sib::explain {

enum class Method { Saliency, GuidedBackprop, IntegratedGradients, GradCam, GradCamPP, ScoreCam, Ours };

const std::vector<Method>& all_methods();  // the six post-hoc methods followed by Ours
std::string method_id(Method m);
Method parse_method(const std::string& id);

struct SaliencyMap {
  ad::Tensor scores;  // h x w, nonnegative, max-normalized (all zero when the raw map is)
  Method method = Method::Saliency;
  std::size_t target = 0;
};

struct Options {
  double tau = 1.0;
  std::size_t ig_steps = 32;
  const ad::Tensor* ig_baseline = nullptr;  // defaults to zeros
  core::MaskParams mask;                    // for Ours
};

// Per-sample scalar score for a batch: N x ... -> {N}.
using ScoreFn = std::function<ad::DiffValue(const ad::DiffValue&)>;

// Posterior of class c at temperature tau.
ScoreFn posterior_score(const models::Classifier& model, std::size_t c, double tau);

std::size_t predicted_class(const models::Classifier& model, const ad::Tensor& x, double tau = 1.0);

// Gradient of f at x (1 x C x h x w), optionally with the guided ReLU rule.
ad::Tensor input_gradient(const ScoreFn& f, const ad::Tensor& x, bool guided = false);

// Signed (x - b) * mean of gradients at midpoints b + (k + 0.5)/m (x - b), k < m.
ad::Tensor ig_attribution(const ScoreFn& f, const ad::Tensor& x, const ad::Tensor& baseline, std::size_t steps);

// Channel-max of |g| over a 1 x C x h x w tensor -> h x w.
ad::Tensor channel_max_abs(const ad::Tensor& g);

// CAM combinations from activations A and gradients G (both K x h x w) -> h x w, before upsampling.
ad::Tensor gradcam_combine(const ad::Tensor& A, const ad::Tensor& G);
ad::Tensor gradcam_pp_combine(const ad::Tensor& A, const ad::Tensor& G, double eps = 1e-8);

// ScoreCAM from activations A (K x h' x w'), the input x (1 x C x h x w) and a
// score function. Channels are upsampled to h x w and min-max normalized
// (constant channels become all ones) before masking the input.
// `forward_passes` receives the number of single-image score evaluations.
ad::Tensor scorecam_combine(const ad::Tensor& A, const ad::Tensor& x, const ScoreFn& f,
                            std::size_t* forward_passes = nullptr);

// Scales to max 1; an all-zero (or non-positive) map stays all-zero.
ad::Tensor max_normalize(const ad::Tensor& map);

SaliencyMap saliency(const models::Classifier& model, const ad::Tensor& x, std::size_t c, const Options& o = {});
SaliencyMap guided_backprop(const models::Classifier& model, const ad::Tensor& x, std::size_t c,
                            const Options& o = {});
SaliencyMap integrated_gradients(const models::Classifier& model, const ad::Tensor& x, std::size_t c,
                                 const Options& o = {});
SaliencyMap gradcam(const models::Classifier& model, const ad::Tensor& x, std::size_t c, const Options& o = {});
SaliencyMap gradcam_pp(const models::Classifier& model, const ad::Tensor& x, std::size_t c, const Options& o = {});
SaliencyMap scorecam(const models::Classifier& model, const ad::Tensor& x, std::size_t c, const Options& o = {},
                     std::size_t* forward_passes = nullptr);
// The model's own mask head M(R(x)) rendered as a map.
SaliencyMap ours(const models::Classifier& model, const ad::Tensor& x, std::size_t c, const Options& o = {});

SaliencyMap explain(Method m, const models::Classifier& model, const ad::Tensor& x, std::size_t c,
                    const Options& o = {});

// 8-bit grayscale heatmap and a red-over-gray overlay (P6).
void write_heatmap_pgm(const std::filesystem::path& path, const SaliencyMap& map);
void write_overlay_ppm(const std::filesystem::path& path, const ad::Tensor& image, const SaliencyMap& map);

}  // namespace sib::explain
