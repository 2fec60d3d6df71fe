#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sib/autodiff/ops.hpp"
#include "sib/core/objective.hpp"
#include "sib/errors.hpp"
#include "support/gradcheck.hpp"

using namespace sib;
using namespace sib::core;
using ad::DiffValue;
using ad::Shape;
using ad::Tensor;
using testkit::Rng;

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Border-renormalized [1,2,1]x[1,2,1] blur by direct summation.
std::vector<double> blur_oracle(const std::vector<double>& a, std::size_t h, std::size_t w) {
  const double k[3] = {1, 2, 1};
  std::vector<double> out(h * w);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      double s = 0, wsum = 0;
      for (int di = -1; di <= 1; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
          const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
          if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
          const double kw = k[di + 1] * k[dj + 1];
          s += kw * a[static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj)];
          wsum += kw;
        }
      }
      out[i * w + j] = s / wsum;
    }
  }
  return out;
}

std::vector<double> normalized_oracle(const Tensor& R) {
  const std::size_t h = R.dim(0), w = R.dim(1);
  std::vector<double> a(h * w);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::abs(R[i]);
  auto b = blur_oracle(a, h, w);
  const auto [lo, hi] = std::minmax_element(b.begin(), b.end());
  const double l = *lo, range = *hi - *lo;
  for (double& v : b) v = range > 0 ? (v - l) / range : 0.0;
  return b;
}

// Brute-force tr(HKH HLH) / (n-1)^2.
double hsic_oracle(const Tensor& A, const Tensor& B) {
  const std::size_t n = A.dim(0), d = A.dim(1), e = B.dim(1);
  auto gram = [n](const Tensor& X, std::size_t f) {
    std::vector<double> K(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < f; ++k) K[i * n + j] += X[i * f + k] * X[j * f + k];
    return K;
  };
  auto center = [n](const std::vector<double>& K) {
    std::vector<double> H(n * n), out(n * n), tmp(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) H[i * n + j] = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) tmp[i * n + j] += H[i * n + k] * K[k * n + j];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) out[i * n + j] += tmp[i * n + k] * H[k * n + j];
    return out;
  };
  const auto kc = center(gram(A, d)), lc = center(gram(B, e));
  double tr = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) tr += kc[i * n + j] * lc[j * n + i];
  return tr / static_cast<double>((n - 1) * (n - 1));
}

double hsic_value(const Tensor& A, const Tensor& B, HsicScaling s = HsicScaling::Raw) {
  return hsic_scaled(ad::constant(A), ad::constant(B), s).value().item();
}

MaskedDecomposition fg_only(const Tensor& r_fg, const Tensor& x_fg) {
  MaskedDecomposition d;
  d.R_fg = ad::constant(r_fg);
  d.X_fg = ad::constant(x_fg);
  return d;
}

MaskedDecomposition bg_only(const Tensor& r_bg) {
  MaskedDecomposition d;
  d.R_bg = ad::constant(r_bg);
  return d;
}

}  // namespace

TEST(Decoding, SingleClassGivesZero) {
  const auto m = models::build_linear({1, 3, 3}, 1, 4);
  Rng rng(1);
  ad::Graph g;
  const auto d = compute_vjp_decoding(m, testkit::random_tensor(rng, {2, 1, 3, 3}), 1.0, models::bind(m, g), g);
  EXPECT_EQ(d.R.shape(), (Shape{2, 3, 3}));
  for (double v : d.R.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Decoding, IdenticalLogitRowsGiveZero) {
  auto m = models::build_linear({1, 2, 2}, 3, 4);
  Rng rng(2);
  const Tensor col = testkit::random_tensor(rng, {4});
  Tensor w({4, 3});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) w[i * 3 + c] = col[i];
  m.set_param("fc.weight", w);
  ad::Graph g;
  const auto d = compute_vjp_decoding(m, testkit::random_tensor(rng, {1, 1, 2, 2}), 1.0, models::bind(m, g), g);
  for (double v : d.R.value().data()) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Decoding, LinearModelMatchesFiniteDifferenceJacobian) {
  const auto m = models::build_linear({1, 2, 2}, 2, 7);
  Rng rng(3);
  const Tensor x = testkit::random_tensor(rng, {1, 1, 2, 2}, -2, 2);
  for (double tau : {1.0, 0.5}) {
    ad::Graph g;
    const auto d = compute_vjp_decoding(m, x, tau, models::bind(m, g), g);
    const Tensor p = models::forward(m, ad::constant(x), tau).posterior.value();
    const double h = 1e-6;
    for (std::size_t i = 0; i < 4; ++i) {
      Tensor xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const Tensor pp = models::forward(m, ad::constant(xp), tau).posterior.value();
      const Tensor pm = models::forward(m, ad::constant(xm), tau).posterior.value();
      double r = 0;
      for (std::size_t c = 0; c < 2; ++c) r += p[c] * (pp[c] - pm[c]) / (2 * h);
      EXPECT_NEAR(d.R.value()[i], r, 1e-6);
    }
  }
}

TEST(Decoding, RetainedDecodingIsParameterDifferentiable) {
  const auto m = models::build_small_cnn(2, 3, 16, 1);
  Rng rng(4);
  ad::Graph g;
  const auto bp = models::bind(m, g);
  const auto d = compute_vjp_decoding(m, testkit::random_tensor(rng, {2, 1, 16, 16}, 0, 1), 1.0, bp, g);
  EXPECT_TRUE(d.R.requires_grad());
  const auto grads = ad::backward(ad::sum(ad::square(d.R)), std::vector{bp.at("conv1.weight")});
  EXPECT_FALSE(grads.unreachable[0]);
}

TEST(Mask, ConstantMapIsNearZeroEverywhere) {
  const auto M = generate_mask(ad::constant(Tensor({5, 6}, 0.37)));
  for (double v : M.value().data()) EXPECT_NEAR(v, sigmoid(-5.0), 1e-15);
  EXPECT_NEAR(sigmoid(-5.0), 0.0067, 1e-4);
  const auto Z = generate_mask(ad::constant(Tensor({2, 4, 4})));
  for (double v : Z.value().data()) EXPECT_NEAR(v, sigmoid(-5.0), 1e-15);
}

TEST(Mask, SinglePeak) {
  Tensor r({8, 8});
  r[3 * 8 + 4] = 5.0;
  const auto M = generate_mask(ad::constant(r)).value();
  EXPECT_GT(M[3 * 8 + 4], 0.95);
  for (std::size_t i = 0; i < 8; ++i) {
    for (std::size_t j = 0; j < 8; ++j) {
      const long di = static_cast<long>(i) - 3, dj = static_cast<long>(j) - 4;
      if (std::abs(di) > 1 || std::abs(dj) > 1) {
        EXPECT_LT(M[i * 8 + j], 0.05);
      }
    }
  }
}

TEST(Mask, MatchesClosedFormAndIsMonotone) {
  Rng rng(5);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor r = testkit::random_tensor(rng, {6, 7}, -3, 3);
    const auto M = generate_mask(ad::constant(r), {.threshold = 0.4, .sharpness = 0.2}).value();
    const auto z = normalized_oracle(r);
    for (std::size_t i = 0; i < z.size(); ++i) {
      EXPECT_NEAR(M[i], sigmoid((z[i] - 0.4) / 0.2), 1e-12);
      EXPECT_GT(M[i], 0.0);
      EXPECT_LT(M[i], 1.0);
      for (std::size_t j = 0; j < z.size(); ++j) {
        if (z[i] <= z[j]) {
          EXPECT_LE(M[i], M[j]);
        }
      }
    }
  }
}

TEST(Mask, BatchedImagesAreIndependent) {
  Rng rng(6);
  const Tensor a = testkit::random_tensor(rng, {4, 4}), b = testkit::random_tensor(rng, {4, 4}, -10, 10);
  std::vector<double> both(a.data().begin(), a.data().end());
  both.insert(both.end(), b.data().begin(), b.data().end());
  const auto M = generate_mask(ad::constant(Tensor({2, 4, 4}, both))).value();
  const auto ma = generate_mask(ad::constant(a)).value(), mb = generate_mask(ad::constant(b)).value();
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(M[i], ma[i]);
    EXPECT_EQ(M[16 + i], mb[i]);
  }
}

TEST(Mask, InvalidParametersAreConfigErrors) {
  const auto r = ad::constant(Tensor({2, 2}, 1.0));
  EXPECT_THROW((void)generate_mask(r, {.threshold = 0.0, .sharpness = 0.1}), ConfigError);
  EXPECT_THROW((void)generate_mask(r, {.threshold = 1.0, .sharpness = 0.1}), ConfigError);
  EXPECT_THROW((void)generate_mask(r, {.threshold = 0.5, .sharpness = 0.0}), ConfigError);
}

TEST(Mask, GradientMatchesFiniteDifferences) {
  Rng rng(7);
  const testkit::Fn f = [](const std::vector<DiffValue>& v) { return generate_mask(v[0]); };
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor r = testkit::distinct_values(rng, {2, 5, 5});
    EXPECT_LT(testkit::gradcheck(f, {r}, rng), 1e-5);
  }
}

TEST(Split, FullMask) {
  Rng rng(8);
  const Tensor r = testkit::random_tensor(rng, {2, 3, 3}), x = testkit::random_tensor(rng, {2, 1, 3, 3});
  const auto d = split(ad::constant(r), ad::constant(x), ad::constant(Tensor({2, 3, 3}, 1.0)));
  EXPECT_EQ(d.R_fg.value(), r);
  EXPECT_EQ(d.R_bg.value(), Tensor({2, 3, 3}));
  EXPECT_EQ(d.X_fg.value(), x);
}

TEST(Split, HalfMask) {
  Rng rng(9);
  const Tensor r = testkit::random_tensor(rng, {1, 3, 3});
  const auto d = split(ad::constant(r), ad::constant(Tensor({1, 1, 3, 3})), ad::constant(Tensor({1, 3, 3}, 0.5)));
  for (std::size_t i = 0; i < r.size(); ++i) {
    EXPECT_EQ(d.R_fg.value()[i], r[i] / 2);
    EXPECT_EQ(d.R_bg.value()[i], r[i] / 2);
  }
}

TEST(Split, ReconstructsR) {
  Rng rng(10);
  for (int rep = 0; rep < 200; ++rep) {
    const Tensor r = testkit::random_tensor(rng, {2, 4, 4}, -10, 10);
    const Tensor m = testkit::random_tensor(rng, {2, 4, 4}, 0, 1);
    const auto d = split(ad::constant(r), ad::constant(Tensor({2, 1, 4, 4})), ad::constant(m));
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_LE(std::abs(d.R_fg.value()[i] + d.R_bg.value()[i] - r[i]), 1e-12);
  }
}

TEST(Split, ShapeMismatchIsContractError) {
  EXPECT_THROW((void)split(ad::constant(Tensor({1, 3, 3})), ad::constant(Tensor({1, 1, 3, 4})),
                           ad::constant(Tensor({1, 3, 3}))),
               ContractError);
}

TEST(Hsic, ConstantRowsGiveZero) {
  Rng rng(11);
  const Tensor a({5, 3}, 2.0);
  const Tensor b = testkit::random_tensor(rng, {5, 2});
  for (auto s : {HsicScaling::Raw, HsicScaling::Feature, HsicScaling::Global}) {
    EXPECT_NEAR(hsic_value(a, b, s), 0.0, 1e-14) << to_string(s);
  }
}

TEST(Hsic, ThreeSampleHandEvaluation) {
  // Centered column c = [-1, 0, 1]; HKH = c c^T; tr((HKH)^2) = (c.c)^2 = 4; divided by (n-1)^2 = 4.
  const Tensor a({3, 1}, std::vector<double>{1, 2, 3});
  EXPECT_NEAR(hsic_value(a, a), 1.0, 1e-15);
}

TEST(Hsic, MatchesBruteForceDoubleSum) {
  Rng rng(12);
  std::uniform_int_distribution<std::size_t> nd(2, 8), fd(1, 5);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = nd(rng);
    const Tensor a = testkit::random_tensor(rng, {n, fd(rng)}, -2, 2);
    const Tensor b = testkit::random_tensor(rng, {n, fd(rng)}, -2, 2);
    const double v = hsic_value(a, b);
    EXPECT_LT(std::abs(v - hsic_oracle(a, b)), 1e-10);
    EXPECT_LT(std::abs(v - hsic_value(b, a)), 1e-12);
    EXPECT_GE(v, -1e-12);
  }
}

TEST(Hsic, InvariantToRowConstantShift) {
  Rng rng(13);
  const Tensor a = testkit::random_tensor(rng, {6, 3}), b = testkit::random_tensor(rng, {6, 2});
  const Tensor shift = testkit::random_tensor(rng, {3}, -5, 5);
  Tensor moved = a;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 3; ++j) moved[i * 3 + j] += shift[j];
  EXPECT_NEAR(hsic_value(a, b), hsic_value(moved, b), 1e-12);
}

TEST(Hsic, IndependentSamplesAreNearZero) {
  Rng rng(14);
  std::normal_distribution<double> nd;
  Tensor a({512, 1}), b({512, 1});
  for (std::size_t i = 0; i < 512; ++i) {
    a[i] = nd(rng);
    b[i] = nd(rng);
  }
  const double indep = hsic_value(a, b, HsicScaling::Feature);
  const double self = hsic_value(a, a, HsicScaling::Feature);
  EXPECT_LT(indep, 0.01);
  EXPECT_GE(self, 10 * indep);
}

TEST(Hsic, ScaledFormsAreScaleInvariantAndBounded) {
  Rng rng(15);
  const Tensor a = testkit::random_tensor(rng, {10, 4}), b = testkit::random_tensor(rng, {10, 3});
  Tensor a2 = a;
  for (std::size_t i = 0; i < a2.size(); ++i) a2[i] *= 1e-4;
  for (auto s : {HsicScaling::Feature, HsicScaling::Global}) {
    EXPECT_NEAR(hsic_value(a, b, s), hsic_value(a2, b, s), 1e-12);
    EXPECT_LE(hsic_value(a, a, s), 1.0 + 1e-12);
    EXPECT_GE(hsic_value(a, b, s), 0.0);
  }
}

TEST(Hsic, TooFewSamplesIsContractError) {
  EXPECT_THROW((void)hsic_value(Tensor({1, 2}), Tensor({1, 2})), ContractError);
  EXPECT_THROW((void)hsic_value(Tensor({3, 2}), Tensor({2, 2})), ContractError);
}

TEST(Hsic, ScaledGradientsMatchFiniteDifferences) {
  Rng rng(16);
  for (auto s : {HsicScaling::Raw, HsicScaling::Feature, HsicScaling::Global}) {
    const testkit::Fn f = [s](const std::vector<DiffValue>& v) {
      return ad::reshape(hsic_scaled(v[0], v[1], s), {1});
    };
    const std::vector<Tensor> in = {testkit::random_tensor(rng, {5, 3}), testkit::random_tensor(rng, {5, 2})};
    EXPECT_LT(testkit::gradcheck(f, in, rng), 1e-5) << to_string(s);
  }
}

TEST(LossFg, ConstantForegroundGivesZero) {
  Rng rng(17);
  const Tensor x = testkit::random_tensor(rng, {4, 1, 3, 3});
  EXPECT_NEAR(loss_fg(fg_only(Tensor({4, 3, 3}, 0.3), x)).value().item(), 0.0, 1e-14);
}

TEST(LossFg, AlignedForegroundIsNegative) {
  Rng rng(18);
  const Tensor x = testkit::random_tensor(rng, {4, 1, 3, 3});
  for (auto s : {HsicScaling::Raw, HsicScaling::Feature, HsicScaling::Global}) {
    EXPECT_LT(loss_fg(fg_only(x.reshaped({4, 3, 3}), x), s).value().item(), 0.0);
  }
}

TEST(LossFg, AddingInputDirectionLowersLoss) {
  Rng rng(19);
  for (int rep = 0; rep < 10; ++rep) {
    const Tensor x = testkit::random_tensor(rng, {64, 1, 3, 3});
    const Tensor r = testkit::random_tensor(rng, {64, 3, 3});
    Tensor mixed = r;
    for (std::size_t i = 0; i < r.size(); ++i) mixed[i] += 0.5 * x[i];
    for (auto s : {HsicScaling::Raw, HsicScaling::Feature, HsicScaling::Global}) {
      EXPECT_LT(loss_fg(fg_only(mixed, x), s).value().item(), loss_fg(fg_only(r, x), s).value().item());
    }
  }
}

TEST(LossBg, IdenticalSamplesGiveZero) {
  Rng rng(20);
  const Tensor one = testkit::random_tensor(rng, {3, 3});
  std::vector<double> v(one.data().begin(), one.data().end());
  v.insert(v.end(), one.data().begin(), one.data().end());
  EXPECT_EQ(loss_bg(bg_only(Tensor({2, 3, 3}, v))).value().item(), 0.0);
}

TEST(LossBg, SinglePixelPopulationVariance) {
  Tensor r({2, 4, 4});
  r[16 + 5] = 2.0;  // pixel 5 takes {0, 2} across the batch
  EXPECT_DOUBLE_EQ(loss_bg(bg_only(r)).value().item(), 1.0 / 16.0);
}

TEST(LossBg, QuadraticInScale) {
  Rng rng(21);
  const Tensor r = testkit::random_tensor(rng, {5, 3, 3});
  Tensor r3 = r;
  for (std::size_t i = 0; i < r.size(); ++i) r3[i] *= 3.0;
  for (auto mode : {BgVariance::Batch, BgVariance::Spatial}) {
    const double base = loss_bg(bg_only(r), mode).value().item();
    EXPECT_GE(base, 0.0);
    EXPECT_NEAR(loss_bg(bg_only(r3), mode).value().item(), 9.0 * base, 1e-12 * base);
  }
}

TEST(LossBg, SingleSampleIsContractError) {
  EXPECT_THROW((void)loss_bg(bg_only(Tensor({1, 3, 3}))), ContractError);
}

namespace {

struct SibFixture {
  models::Classifier model = models::build_small_cnn(2, 3, 16, 21);
  Tensor x;
  std::vector<std::size_t> labels = {0, 1, 2};
  SibFixture() {
    Rng rng(22);
    x = testkit::random_tensor(rng, {3, 1, 16, 16}, 0, 1);
  }
};

}  // namespace

TEST(SibLoss, CollapsesToCrossEntropyWithFullMaskAndNoFg) {
  SibFixture f;
  ad::Graph g;
  const auto t = sib_loss(f.model, f.x, f.labels, {.gamma = 0.0, .force_full_mask = true, .mask = {}}, models::bind(f.model, g), g);
  EXPECT_EQ(t.l_bg.value().item(), 0.0);
  EXPECT_EQ(t.total.value().item(), t.l_ce.value().item());
}

TEST(SibLoss, TotalComposesTerms) {
  SibFixture f;
  ad::Graph g;
  const auto t = sib_loss(f.model, f.x, f.labels, {.gamma = 2.5, .mask = {}}, models::bind(f.model, g), g);
  EXPECT_NEAR(t.total.value().item(),
              t.l_ce.value().item() + t.l_bg.value().item() + 2.5 * t.l_fg.value().item(), 1e-15);
  EXPECT_LE(t.l_fg.value().item(), 0.0);
  EXPECT_GE(t.l_bg.value().item(), 0.0);
}

TEST(SibLoss, ParameterGradientMatchesFiniteDifferences) {
  SibFixture f;
  const auto names = f.model.param_names();
  for (auto s : {HsicScaling::Feature, HsicScaling::Global}) {
    const SibConfig cfg{.gamma = 1.0, .mask = {}, .hsic = s};
    ad::Graph g;
    const auto bp = models::bind(f.model, g);
    const auto t = sib_loss(f.model, f.x, f.labels, cfg, bp, g);
    std::vector<DiffValue> wrt;
    for (const auto& k : names) wrt.push_back(bp.at(k));
    const auto grads = ad::backward(t.total, wrt);

    // The cotangent stays frozen at the base point, matching the analytic path.
    const Tensor p0 = t.decoding.cotangent;
    auto total_at = [&](const models::Classifier& m) {
      ad::Graph g2;
      return sib_loss(m, f.x, f.labels, cfg, models::bind(m, g2), g2, &p0).total.value().item();
    };
    Rng rng(23);
    const double h = 1e-5;
    for (const auto& k : {std::string("conv1.weight"), std::string("conv3.bias"), std::string("fc.weight")}) {
      const std::size_t pi = static_cast<std::size_t>(std::find(names.begin(), names.end(), k) - names.begin());
      const Tensor& theta = f.model.params().at(k);
      Tensor fd(theta.shape());
      for (std::size_t i = 0; i < theta.size(); ++i) {
        auto mp = f.model, mm = f.model;
        Tensor tp = theta, tm = theta;
        tp[i] += h;
        tm[i] -= h;
        mp.set_param(k, tp);
        mm.set_param(k, tm);
        fd[i] = (total_at(mp) - total_at(mm)) / (2 * h);
      }
      EXPECT_LT(testkit::relative_error(grads[pi].value(), fd), 1e-4) << k << " " << to_string(s);
    }
  }
}

TEST(SibLoss, DeterministicBitwise) {
  SibFixture f;
  auto run = [&] {
    ad::Graph g;
    const auto bp = models::bind(f.model, g);
    const auto t = sib_loss(f.model, f.x, f.labels, {}, bp, g);
    return std::pair{t.total.value(), ad::backward(t.total, std::vector{bp.at("conv2.weight")})[0].value()};
  };
  EXPECT_EQ(run(), run());
}

TEST(SibLoss, SingleSampleBatchIsContractError) {
  SibFixture f;
  ad::Graph g;
  const std::vector<std::size_t> one = {0};
  EXPECT_THROW((void)sib_loss(f.model, Tensor({1, 1, 16, 16}), one, {}, models::bind(f.model, g), g), ContractError);
}
