#include <gtest/gtest.h>

#include <cmath>

#include "sib/autodiff/kernels.hpp"
#include "sib/autodiff/ops.hpp"
#include "sib/errors.hpp"
#include "sib/explain/attribution.hpp"
#include "support/gradcheck.hpp"

using namespace sib;
using namespace sib::explain;
using ad::DiffValue;
using ad::Tensor;
using testkit::Rng;

namespace {

constexpr std::size_t kSide = 16;

Tensor image(Rng& rng, std::size_t side = kSide) { return testkit::random_tensor(rng, {1, 1, side, side}, 0, 1); }

// Per-sample w . x over all pixels.
ScoreFn linear_score(const Tensor& w) {
  return [w](const DiffValue& x) {
    const std::size_t n = x.shape()[0];
    return ad::reshape(ad::matmul(ad::reshape(x, {n, w.size()}), ad::constant(w.reshaped({w.size(), 1}))), {n});
  };
}

double max_abs(const Tensor& a, const Tensor& b) { return testkit::max_abs_diff(a, b); }

// Fc bias shifted uniformly across classes.
models::Classifier shifted(models::Classifier m, double by) {
  Tensor b = m.params().at("fc.bias");
  for (double& v : b.data()) v += by;
  m.set_param("fc.bias", b);
  return m;
}

}  // namespace

TEST(Methods, IdsRoundTrip) {
  EXPECT_EQ(all_methods().size(), 7u);
  for (Method m : all_methods()) EXPECT_EQ(parse_method(method_id(m)), m);
  EXPECT_THROW((void)parse_method("lime"), ConfigError);
}

TEST(Methods, InvalidClassIsContractError) {
  const auto m = models::build_small_cnn(4, 3, kSide, 0);
  Rng rng(1);
  const Tensor x = image(rng);
  for (Method me : all_methods()) EXPECT_THROW((void)sib::explain::explain(me, m, x, 3), ContractError) << method_id(me);
}

TEST(Methods, MapsAreNormalizedFiniteShapedAndDeterministic) {
  const auto m = models::build_small_cnn(4, 3, kSide, 2);
  Rng rng(2);
  const Tensor x = image(rng);
  const std::size_t c = predicted_class(m, x);
  for (Method me : all_methods()) {
    const auto a = sib::explain::explain(me, m, x, c), b = sib::explain::explain(me, m, x, c);
    EXPECT_EQ(a.scores.shape(), (ad::Shape{kSide, kSide})) << method_id(me);
    EXPECT_EQ(a.scores, b.scores) << method_id(me);
    EXPECT_EQ(a.method, me);
    double mx = 0;
    for (double v : a.scores.data()) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      mx = std::max(mx, v);
    }
    EXPECT_TRUE(mx == 0.0 || mx == 1.0) << method_id(me);
  }
}

TEST(Methods, InvariantToUniformLogitShift) {
  const auto m = models::build_small_cnn(4, 3, kSide, 3);
  const auto m2 = shifted(m, 7.5);
  Rng rng(3);
  const Tensor x = image(rng);
  for (Method me : all_methods()) {
    EXPECT_LT(max_abs(sib::explain::explain(me, m, x, 1).scores, sib::explain::explain(me, m2, x, 1).scores), 1e-9) << method_id(me);
  }
}

TEST(Saliency, ZeroClassHeadGivesZeroMap) {
  auto m = models::build_small_cnn(4, 3, kSide, 4);
  m.set_param("fc.weight", Tensor(m.params().at("fc.weight").shape()));
  Rng rng(4);
  const Tensor x = image(rng);
  for (Method me : all_methods()) {
    if (me == Method::Ours) continue;  // the mask head maps a zero decoding to its floor, normalized to 1
    const auto map = sib::explain::explain(me, m, x, 0);
    for (double v : map.scores.data()) EXPECT_EQ(v, 0.0) << method_id(me);
  }
}

TEST(Saliency, LinearModelMatchesFiniteDifferences) {
  const auto m = models::build_linear({1, 4, 4}, 3, 5);
  Rng rng(5);
  const Tensor x = testkit::random_tensor(rng, {1, 1, 4, 4});
  const std::size_t c = 2;
  const auto f = posterior_score(m, c, 1.0);
  Tensor fd({4, 4});
  const double h = 1e-6;
  for (std::size_t i = 0; i < 16; ++i) {
    Tensor xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    fd[i] = std::abs((f(ad::constant(xp)).value()[0] - f(ad::constant(xm)).value()[0]) / (2 * h));
  }
  EXPECT_LT(max_abs(saliency(m, x, c).scores, max_normalize(fd)), 1e-6);
}

TEST(GuidedBackprop, NoReluMatchesSaliency) {
  const auto m = models::build_linear({1, 5, 5}, 3, 6);
  Rng rng(6);
  const Tensor x = testkit::random_tensor(rng, {1, 1, 5, 5});
  EXPECT_EQ(guided_backprop(m, x, 1).scores, saliency(m, x, 1).scores);
}

TEST(GuidedBackprop, NegativeUpstreamGradientIsBlocked) {
  // f(x) = -relu(x): upstream gradient at the ReLU is -1.
  const ScoreFn f = [](const DiffValue& x) { return ad::reshape(-ad::relu(x), {1}); };
  const Tensor x({1}, 2.0);
  EXPECT_EQ(input_gradient(f, x, false)[0], -1.0);
  EXPECT_EQ(input_gradient(f, x, true)[0], 0.0);
}

TEST(GuidedBackprop, PositiveActivationsAndGradientsMatchSaliency) {
  // Nonnegative weights, positive inputs and a positive head: every ReLU is active
  // and every upstream gradient is positive.
  auto m = models::build_small_cnn(2, 2, kSide, 7);
  for (const auto& name : m.param_names()) {
    Tensor v = m.params().at(name);
    for (double& e : v.data()) e = std::abs(e) + (name.find("bias") != std::string::npos ? 0.01 : 0.0);
    m.set_param(name, v);
  }
  Tensor w = m.params().at("fc.weight");
  for (std::size_t i = 0; i < w.dim(0); ++i) {
    w[i * 2] *= 1e-3;  // keeps the posterior away from saturation
    w[i * 2 + 1] = 0.0;  // class 1 logit constant
  }
  m.set_param("fc.weight", w);
  Rng rng(7);
  const Tensor x = testkit::random_tensor(rng, {1, 1, kSide, kSide}, 0.1, 1.0);
  const auto f = posterior_score(m, 0, 1.0);
  const Tensor g = input_gradient(f, x, false), gg = input_gradient(f, x, true);
  for (double v : g.data()) EXPECT_GT(v, 0.0);
  EXPECT_LT(max_abs(g, gg), 1e-15);
}

TEST(IntegratedGradients, LinearScoreIsExact) {
  Rng rng(8);
  const Tensor w = testkit::random_tensor(rng, {1, 1, 3, 3});
  const Tensor x = testkit::random_tensor(rng, {1, 1, 3, 3});
  for (std::size_t m : {1u, 8u, 33u}) {
    const Tensor a = ig_attribution(linear_score(w), x, Tensor(x.shape()), m);
    for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(a[i], w[i] * x[i], 1e-15);
  }
}

TEST(IntegratedGradients, InputAtBaselineGivesZero) {
  const auto m = models::build_small_cnn(4, 3, kSide, 9);
  Rng rng(9);
  const Tensor x = image(rng);
  const Options o{.tau = 1.0, .ig_steps = 16, .ig_baseline = &x, .mask = {}};
  const auto map = integrated_gradients(m, x, 0, o);
  for (double v : map.scores.data()) EXPECT_EQ(v, 0.0);
}

TEST(IntegratedGradients, TooFewStepsIsContractError) {
  const auto m = models::build_small_cnn(4, 3, kSide, 9);
  Rng rng(9);
  EXPECT_THROW((void)integrated_gradients(m, image(rng), 0, {.tau = 1, .ig_steps = 4, .ig_baseline = nullptr, .mask = {}}),
               ContractError);
}

TEST(IntegratedGradients, CompletenessOnSmoothNetwork) {
  // Sigmoid-activated stand-in for a smooth CNN: conv -> sigmoid -> pool -> dense.
  Rng rng(10);
  const Tensor w1 = testkit::random_tensor(rng, {3, 1, 3, 3}), w2 = testkit::random_tensor(rng, {48, 2});
  const ScoreFn f = [&](const DiffValue& x) {
    const std::size_t n = x.shape()[0];
    const auto h = ad::avgpool2d(ad::sigmoid(ad::conv2d(x, ad::constant(w1), 1, 1)), 2);
    const auto p = ad::softmax(ad::matmul(ad::reshape(h, {n, 48}), ad::constant(w2)));
    return ad::reshape(ad::slice(p, 1, 0, 1), {n});
  };
  const Tensor x = testkit::random_tensor(rng, {1, 1, 8, 8}, 0, 2);
  const Tensor b(x.shape());
  const Tensor a = ig_attribution(f, x, b, 64);
  double total = 0;
  for (double v : a.data()) total += v;
  const double delta = f(ad::constant(x)).value()[0] - f(ad::constant(b)).value()[0];
  EXPECT_LT(std::abs(total - delta), 1e-3 * std::abs(delta));
}

TEST(Linear, SaliencyGuidedAndIgAgreeOnLinearScore) {
  Rng rng(11);
  const Tensor w = testkit::random_tensor(rng, {1, 1, 4, 4});
  const Tensor x = testkit::random_tensor(rng, {1, 1, 4, 4});
  const auto f = linear_score(w);
  const Tensor s = channel_max_abs(input_gradient(f, x));
  const Tensor g = channel_max_abs(input_gradient(f, x, true));
  const Tensor ig = ig_attribution(f, x, Tensor(x.shape()), 32);
  EXPECT_EQ(s, g);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(s[i], std::abs(w[i]));
    EXPECT_NEAR(ig[i], w[i] * x[i], 1e-15);
  }
}

TEST(GradCam, SingleChannelUniformGradientIsReluOfActivation) {
  Rng rng(12);
  const Tensor A = testkit::random_tensor(rng, {1, 4, 4});
  const Tensor G({1, 4, 4}, 0.3);
  const Tensor cam = gradcam_combine(A, G);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(cam[i], 0.3 * std::max(A[i], 0.0), 1e-15);
}

TEST(GradCam, ZeroGradientGivesZeroMap) {
  Rng rng(13);
  const Tensor A = testkit::random_tensor(rng, {3, 4, 4});
  const Tensor cam = gradcam_combine(A, Tensor(A.shape())), pp = gradcam_pp_combine(A, Tensor(A.shape()));
  for (double v : cam.data()) EXPECT_EQ(v, 0.0);
  for (double v : pp.data()) EXPECT_EQ(v, 0.0);
}

TEST(GradCam, UpsampledShapeMatchesInputForAllSides) {
  for (std::size_t side : {16u, 32u, 64u}) {
    const auto m = models::build_small_cnn(2, 2, side, 14);
    Rng rng(14);
    const Tensor x = image(rng, side);
    EXPECT_EQ(gradcam(m, x, 0).scores.shape(), (ad::Shape{side, side}));
    EXPECT_EQ(gradcam_pp(m, x, 0).scores.shape(), (ad::Shape{side, side}));
    EXPECT_EQ(scorecam(m, x, 0).scores.shape(), (ad::Shape{side, side}));
  }
}

TEST(GradCamPP, UniformGradientReducesToGradCamUpToScale) {
  // Channels with equal activation sums share one alpha under a uniform gradient field.
  Rng rng(15);
  Tensor A = testkit::random_tensor(rng, {3, 4, 4}, 0, 1);
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += A[k * 16 + i];
    for (std::size_t i = 0; i < 16; ++i) A[k * 16 + i] *= 8.0 / s;
  }
  const Tensor G({3, 4, 4}, 0.7);
  EXPECT_LT(max_abs(max_normalize(gradcam_pp_combine(A, G)), max_normalize(gradcam_combine(A, G))), 1e-12);
}

TEST(GradCamPP, GuardedDenominatorStaysFinite) {
  // 2 g^2 + S g^3 = 0 at g = -2 / S.
  Tensor A({1, 1, 2}, std::vector<double>{1.0, 1.0});
  const Tensor G({1, 1, 2}, std::vector<double>{-1.0, 1e-5});
  const Tensor cam = gradcam_pp_combine(A, G);
  for (double v : cam.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ScoreCam, ConstantChannelsGiveZeroMap) {
  const Tensor A({3, 4, 4}, 0.8);
  Rng rng(16);
  const Tensor x = testkit::random_tensor(rng, {1, 1, 8, 8});
  const auto f = linear_score(testkit::random_tensor(rng, {1, 1, 8, 8}));
  const Tensor cam = scorecam_combine(A, x, f);
  for (double v : cam.data()) EXPECT_EQ(v, 0.0);
}

TEST(ScoreCam, ChannelMatchingObjectGetsLargestWeight) {
  // Score rises with foreground evidence and falls with background evidence.
  const std::size_t s = 8;
  Tensor gt({1, 1, s, s});
  for (std::size_t i = 2; i < 5; ++i)
    for (std::size_t j = 3; j < 6; ++j) gt[i * s + j] = 1.0;
  Tensor wsc({1, 1, s, s});
  for (std::size_t i = 0; i < wsc.size(); ++i) wsc[i] = gt[i] > 0 ? 1.0 : -0.2;
  const ScoreFn f = [&](const DiffValue& x) { return ad::sigmoid(linear_score(wsc)(x)); };
  Rng rng(17);
  const Tensor x = testkit::random_tensor(rng, {1, 1, s, s}, 0.2, 1.0);
  Tensor A({4, s, s});
  for (std::size_t i = 0; i < s * s; ++i) A[i] = gt[i];
  const Tensor noise = testkit::random_tensor(rng, {3, s, s}, 0, 1);
  for (std::size_t i = 0; i < noise.size(); ++i) A[s * s + i] = noise[i];
  // Per-channel weights from single-channel activations.
  const double base = f(ad::constant(x)).value()[0];
  std::vector<double> weights;
  for (std::size_t k = 0; k < 4; ++k) {
    Tensor one({1, s, s});
    Tensor mask(one.shape());
    const auto plane = ad::kernels::slice(A, 0, k, 1);
    for (std::size_t i = 0; i < s * s; ++i) one[i] = plane[i];
    const auto [lo, hi] = std::minmax_element(one.data().begin(), one.data().end());
    Tensor masked = x;
    for (std::size_t i = 0; i < s * s; ++i) masked[i] *= (one[i] - *lo) / (*hi - *lo);
    weights.push_back(f(ad::constant(masked)).value()[0] - base);
  }
  EXPECT_EQ(std::max_element(weights.begin(), weights.end()) - weights.begin(), 0);
  // The combined map then follows channel 0 most closely on the object.
  const Tensor cam = scorecam_combine(A, x, f);
  double inside = 0, outside = 0;
  for (std::size_t i = 0; i < s * s; ++i) (gt[i] > 0 ? inside : outside) += cam[i];
  EXPECT_GT(inside / 9.0, outside / 55.0);
}

TEST(ScoreCam, ForwardPassCountIsChannelsPlusOne) {
  const auto m = models::build_small_cnn(5, 3, kSide, 18);
  Rng rng(18);
  std::size_t passes = 0;
  (void)scorecam(m, image(rng), 0, {}, &passes);
  EXPECT_EQ(passes, 6u);
}

TEST(Ours, IsTheMaskHeadOfTheDecoding) {
  const auto m = models::build_small_cnn(4, 3, kSide, 19);
  Rng rng(19);
  const Tensor x = image(rng);
  ad::Graph g;
  const auto d = core::compute_vjp_decoding(m, x, 1.0, models::bind_constant(m), g, false);
  const Tensor M = core::generate_mask(d.R).value().reshaped({kSide, kSide});
  EXPECT_LT(max_abs(ours(m, x, 0).scores, max_normalize(M)), 1e-15);
}
