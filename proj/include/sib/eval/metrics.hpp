#pragma once

#include <cstddef>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "sib/autodiff/tensor.hpp"
#include "sib/core/objective.hpp"
#include "sib/data/dataset.hpp"
#include "sib/models/classifier.hpp"

namespace sib::eval {

// Localization against a binary h x w ground-truth mask.

// 1 where score >= threshold, 0 elsewhere. Requires 0 < threshold < 1.
ad::Tensor binarize(const ad::Tensor& scores, double threshold = 0.5);

double pixel_accuracy(const ad::Tensor& pred, const ad::Tensor& gt);

// Mean of foreground and background IoU; a class empty in both masks has IoU 1.
double miou(const ad::Tensor& pred, const ad::Tensor& gt);

// Average precision of the pixel ranking by descending score, ties by flat index.
double pixel_ap(const ad::Tensor& scores, const ad::Tensor& gt);

struct LocalizationSample {
  std::string id;
  double pixel_acc = 0, miou = 0, map = 0;
};

struct LocalizationReport {
  double pixel_acc = 0, miou = 0, map = 0;  // means over per_sample
  std::vector<LocalizationSample> per_sample;
};

LocalizationSample localize(const std::string& id, const ad::Tensor& scores, const ad::Tensor& gt,
                            double threshold = 0.5);
LocalizationReport aggregate(std::vector<LocalizationSample> per_sample);

// Faithfulness curves.

struct FaithfulnessCurve {
  std::vector<double> fractions;    // k / steps, k = 0..steps
  std::vector<double> confidences;
  double auc = 0;                   // trapezoidal over fractions
};

// Batch of N x C x h x w images -> N confidences.
using ConfidenceFn = std::function<std::vector<double>(const ad::Tensor&)>;

// Step k touches the floor(k P / steps) highest-scoring pixels (ties by flat
// index) in every channel. Insertion starts from zeros and copies them from x;
// deletion starts from x and zeroes them. Requires steps >= 10.
FaithfulnessCurve insertion_curve(const ConfidenceFn& f, const ad::Tensor& x, const ad::Tensor& scores,
                                  std::size_t steps = 100, const std::string& id = "");
FaithfulnessCurve deletion_curve(const ConfidenceFn& f, const ad::Tensor& x, const ad::Tensor& scores,
                                 std::size_t steps = 100, const std::string& id = "");

// Posterior of the class the model predicts on x itself.
ConfidenceFn predicted_confidence(const models::Classifier& model, const ad::Tensor& x, double tau = 1.0);

FaithfulnessCurve insertion_curve(const models::Classifier& model, const ad::Tensor& x, const ad::Tensor& scores,
                                  std::size_t steps = 100, const std::string& id = "", double tau = 1.0);
FaithfulnessCurve deletion_curve(const models::Classifier& model, const ad::Tensor& x, const ad::Tensor& scores,
                                 std::size_t steps = 100, const std::string& id = "", double tau = 1.0);

// Information diagnostics.

// exp of population z-scores; zero spread gives all-zero z-scores.
std::vector<double> info_differential(std::span<const double> diffs);

struct MiQuadrants {
  double fg_fg = 0;  // HSIC(X_fg, R_fg)
  double bg_bg = 0;  // HSIC(X_bg, R_bg)
  double fg_bg = 0;  // HSIC(X_fg, R_bg)
  double bg_fg = 0;  // HSIC(X_bg, R_fg)
};

// R, M: N x h x w; X: N x C x h x w; regions from M.
MiQuadrants mi_quadrants(const ad::Tensor& R, const ad::Tensor& X, const ad::Tensor& M,
                         core::HsicScaling scaling = core::HsicScaling::Feature);

// R from the model's VJP decoding, regions from the ground-truth masks.
MiQuadrants mi_quadrants(const models::Classifier& model, const data::Dataset& ds, double tau = 1.0,
                         core::HsicScaling scaling = core::HsicScaling::Feature, std::size_t chunk = 64);

// Per-sample HSIC(R_fg, X_fg) - HSIC(R_bg, X_bg), each over the pixels of one image.
std::vector<double> per_sample_region_gap(const models::Classifier& model, const data::Dataset& ds,
                                          double tau = 1.0);

// Theory checks.

struct BoundCheck {
  double lhs = 0;  // 0.5 log2 det(I + Sigma / sigma^2)
  double rhs = 0;  // tr(Sigma) / (2 sigma^2 ln 2)
  bool holds = false;
};

// Sigma: symmetric PSD d x d; sigma > 0.
BoundCheck variance_bound_check(const ad::Tensor& sigma_matrix, double sigma);

struct SufficiencyCheck {
  double residual = 0;       // max |p_hat - p|; 0 when the condition is violated
  std::size_t rank = 0;      // rank of the restricted Jacobian with the simplex row appended
  std::size_t required = 0;  // number of classes
  bool condition_violated = false;
};

// z = W x + b, p = softmax(z / tau); W: C x D, x: D, mask: D entries in {0, 1}.
// Recovers p from R = J^T p on the masked coordinates by least squares.
SufficiencyCheck sufficiency_check_linear(const ad::Tensor& W, const ad::Tensor& b, const ad::Tensor& x, double tau,
                                          const ad::Tensor& mask);

// Average-rank Spearman correlation. Requires equal lengths >= 2.
double spearman(std::span<const double> a, std::span<const double> b);

// CSV output.

struct ReportRow {
  std::string method, dataset, mode;
  std::uint64_t seed = 0;
  double pixel_acc = 0, miou = 0, map = 0, insertion = 0, deletion = 0;
};

// Header: method,dataset,mode,seed,pixel_acc,miou,map,insertion,deletion
void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows);
// Header: method,dataset,mode,seed,pixel_acc,miou,map
void write_localization_table_csv(std::ostream& out, const std::vector<ReportRow>& rows);
// Header: method,dataset,mode,seed,insertion,deletion
void write_faithfulness_table_csv(std::ostream& out, const std::vector<ReportRow>& rows);
// Joins the two tables row by row; throws ParseError on a schema mismatch.
std::vector<ReportRow> read_report_tables(const std::string& localization, const std::string& faithfulness);
// Header: fraction,confidence
void write_curve_csv(std::ostream& out, const FaithfulnessCurve& curve);
// Header: id,pixel_acc,miou,map
void write_localization_csv(std::ostream& out, const LocalizationReport& report);

}  // namespace sib::eval
