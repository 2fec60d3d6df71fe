#include "sib/eval/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "sib/autodiff/kernels.hpp"
#include "sib/autodiff/ops.hpp"
#include "sib/errors.hpp"

namespace sib::eval {

using ad::DiffValue;
using ad::Shape;
using ad::Tensor;

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + ad::to_string(a.shape()) + " and " + ad::to_string(b.shape()) +
                     " differ");
  }
  if (a.size() == 0) throw ContractError(std::string(op) + ": empty mask");
}

// Flat indices by descending score; stable, so equal scores keep index order.
std::vector<std::size_t> ranking(const Tensor& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

double trapezoid(const std::vector<double>& xs, const std::vector<double>& ys) {
  double a = 0;
  for (std::size_t i = 1; i < xs.size(); ++i) a += 0.5 * (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]);
  return a;
}

FaithfulnessCurve curve(const ConfidenceFn& f, const Tensor& x, const Tensor& scores, std::size_t steps,
                        const std::string& id, bool insertion) {
  if (steps < 10) throw ContractError("faithfulness curves need steps >= 10");
  if (x.rank() != 4 || x.dim(0) != 1) throw ContractError("expected a 1 x C x h x w image");
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3), hw = h * w;
  if (scores.size() != hw) {
    throw ShapeError("saliency map " + ad::to_string(scores.shape()) + " does not match image " +
                     ad::to_string(x.shape()));
  }
  const auto order = ranking(scores.reshaped({hw}));

  // All step images as one batch.
  Tensor batch({steps + 1, c, h, w});
  std::vector<char> touched(hw, 0);
  std::size_t done = 0;
  for (std::size_t k = 0; k <= steps; ++k) {
    const std::size_t target = k * hw / steps;
    for (; done < target; ++done) touched[order[done]] = 1;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < hw; ++i) {
        const bool keep = insertion ? touched[i] != 0 : touched[i] == 0;
        batch[((k * c) + ch) * hw + i] = keep ? x[ch * hw + i] : 0.0;
      }
    }
  }
  FaithfulnessCurve out;
  out.confidences = f(batch);
  if (out.confidences.size() != steps + 1) throw ContractError("confidence function returned the wrong count");
  for (std::size_t k = 0; k <= steps; ++k) {
    out.fractions.push_back(static_cast<double>(k) / static_cast<double>(steps));
    if (!std::isfinite(out.confidences[k])) {
      throw NumericError("non-finite confidence for sample '" + id + "' at step " + std::to_string(k));
    }
  }
  out.auc = trapezoid(out.fractions, out.confidences);
  return out;
}

}  // namespace

Tensor binarize(const Tensor& scores, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw DomainError("binarize threshold must lie in (0, 1)");
  Tensor out(scores.shape());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= threshold ? 1.0 : 0.0;
  return out;
}

double pixel_accuracy(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "pixel_accuracy");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += (pred[i] > 0.5) == (gt[i] > 0.5) ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double miou(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "miou");
  double iou_sum = 0;
  for (bool cls : {true, false}) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = (pred[i] > 0.5) == cls, g = (gt[i] > 0.5) == cls;
      inter += p && g ? 1 : 0;
      uni += p || g ? 1 : 0;
    }
    iou_sum += uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  }
  return iou_sum / 2.0;
}

double pixel_ap(const Tensor& scores, const Tensor& gt) {
  require_same(scores, gt, "pixel_ap");
  std::size_t positives = 0;
  for (double g : gt.data()) positives += g > 0.5 ? 1 : 0;
  if (positives == 0) throw ContractError("pixel_ap: ground truth has no foreground pixel");
  double ap = 0;
  std::size_t hits = 0, rank = 0;
  for (std::size_t i : ranking(scores)) {
    ++rank;
    if (gt[i] > 0.5) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(rank);
    }
  }
  return ap / static_cast<double>(positives);
}

LocalizationSample localize(const std::string& id, const Tensor& scores, const Tensor& gt, double threshold) {
  const Tensor s = scores.reshaped(gt.shape());
  const Tensor pred = binarize(s, threshold);
  return {.id = id, .pixel_acc = pixel_accuracy(pred, gt), .miou = miou(pred, gt), .map = pixel_ap(s, gt)};
}

LocalizationReport aggregate(std::vector<LocalizationSample> per_sample) {
  LocalizationReport r;
  for (const auto& s : per_sample) {
    r.pixel_acc += s.pixel_acc;
    r.miou += s.miou;
    r.map += s.map;
  }
  if (!per_sample.empty()) {
    const double n = static_cast<double>(per_sample.size());
    r.pixel_acc /= n;
    r.miou /= n;
    r.map /= n;
  }
  r.per_sample = std::move(per_sample);
  return r;
}

FaithfulnessCurve insertion_curve(const ConfidenceFn& f, const Tensor& x, const Tensor& scores, std::size_t steps,
                                  const std::string& id) {
  return curve(f, x, scores, steps, id, true);
}

FaithfulnessCurve deletion_curve(const ConfidenceFn& f, const Tensor& x, const Tensor& scores, std::size_t steps,
                                 const std::string& id) {
  return curve(f, x, scores, steps, id, false);
}

ConfidenceFn predicted_confidence(const models::Classifier& model, const Tensor& x, double tau) {
  const auto fwd = models::forward(model, ad::constant(x), tau);
  const std::size_t c = models::predict(fwd.logits.value()).at(0);
  return [&model, c, tau](const Tensor& batch) {
    constexpr std::size_t kChunk = 128;
    const std::size_t n = batch.dim(0), k = model.classes();
    std::vector<double> out;
    out.reserve(n);
    for (std::size_t start = 0; start < n; start += kChunk) {
      const std::size_t len = std::min(kChunk, n - start);
      const Tensor p = models::forward(model, ad::constant(ad::kernels::slice(batch, 0, start, len)), tau)
                           .posterior.value();
      for (std::size_t i = 0; i < len; ++i) out.push_back(p[i * k + c]);
    }
    return out;
  };
}

FaithfulnessCurve insertion_curve(const models::Classifier& model, const Tensor& x, const Tensor& scores,
                                  std::size_t steps, const std::string& id, double tau) {
  return insertion_curve(predicted_confidence(model, x, tau), x, scores, steps, id);
}

FaithfulnessCurve deletion_curve(const models::Classifier& model, const Tensor& x, const Tensor& scores,
                                 std::size_t steps, const std::string& id, double tau) {
  return deletion_curve(predicted_confidence(model, x, tau), x, scores, steps, id);
}

std::vector<double> info_differential(std::span<const double> diffs) {
  if (diffs.size() < 2) throw ContractError("info_differential needs at least 2 values");
  const double n = static_cast<double>(diffs.size());
  const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / n;
  double var = 0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out;
  out.reserve(diffs.size());
  for (double d : diffs) out.push_back(sd > 0 ? std::exp((d - mean) / sd) : 1.0);
  return out;
}

MiQuadrants mi_quadrants(const Tensor& R, const Tensor& X, const Tensor& M, core::HsicScaling scaling) {
  const auto d = core::split(ad::constant(R), ad::constant(X), ad::constant(M));
  auto h = [&](const DiffValue& x, const DiffValue& r) {
    return core::hsic_scaled(core::flatten_rows(x), core::flatten_rows(r), scaling).value().item();
  };
  return {.fg_fg = h(d.X_fg, d.R_fg), .bg_bg = h(d.X_bg, d.R_bg), .fg_bg = h(d.X_fg, d.R_bg),
          .bg_fg = h(d.X_bg, d.R_fg)};
}

namespace {

struct Decoded {
  Tensor R, X, M;
};

// R, stacked images and ground-truth masks over the whole dataset.
Decoded decode_all(const models::Classifier& model, const data::Dataset& ds, double tau, std::size_t chunk) {
  if (ds.size() < 2) throw ContractError("need at least 2 samples");
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const data::Batch all = data::make_batch(ds, idx);
  std::vector<Tensor> parts;
  const auto params = models::bind_constant(model);
  for (std::size_t start = 0; start < ds.size(); start += std::max<std::size_t>(chunk, 1)) {
    const std::size_t len = std::min(std::max<std::size_t>(chunk, 1), ds.size() - start);
    ad::Graph g;
    parts.push_back(
        core::compute_vjp_decoding(model, ad::kernels::slice(all.x, 0, start, len), tau, params, g, false).R.value());
  }
  std::vector<const Tensor*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  return {ad::kernels::concat(ptrs, 0), all.x, all.masks};
}

}  // namespace

MiQuadrants mi_quadrants(const models::Classifier& model, const data::Dataset& ds, double tau,
                         core::HsicScaling scaling, std::size_t chunk) {
  const Decoded d = decode_all(model, ds, tau, chunk);
  return mi_quadrants(d.R, d.X, d.M, scaling);
}

std::vector<double> per_sample_region_gap(const models::Classifier& model, const data::Dataset& ds, double tau) {
  const Decoded d = decode_all(model, ds, tau, 64);
  const std::size_t n = d.R.dim(0), hw = d.R.size() / n, c = d.X.dim(1);
  std::vector<double> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    // Pixels are the observations; features are R (1) and the image channels (C).
    Tensor r_fg({hw, 1}), r_bg({hw, 1}), x_fg({hw, c}), x_bg({hw, c});
    for (std::size_t i = 0; i < hw; ++i) {
      const double m = d.M[s * hw + i], r = d.R[s * hw + i];
      r_fg[i] = r * m;
      r_bg[i] = r * (1 - m);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double x = d.X[(s * c + ch) * hw + i];
        x_fg[i * c + ch] = x * m;
        x_bg[i * c + ch] = x * (1 - m);
      }
    }
    auto h = [](const Tensor& a, const Tensor& b) {
      return core::hsic_scaled(ad::constant(a), ad::constant(b), core::HsicScaling::Feature).value().item();
    };
    out.push_back(h(r_fg, x_fg) - h(r_bg, x_bg));
  }
  return out;
}

BoundCheck variance_bound_check(const Tensor& sigma_matrix, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw DomainError("sigma must be positive and finite");
  if (sigma_matrix.rank() != 2 || sigma_matrix.dim(0) != sigma_matrix.dim(1) || sigma_matrix.dim(0) == 0) {
    throw ShapeError("covariance must be a nonempty square matrix, got " + ad::to_string(sigma_matrix.shape()));
  }
  const auto d = static_cast<Eigen::Index>(sigma_matrix.dim(0));
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> S(
      sigma_matrix.data().data(), d, d);
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) throw ContractError("covariance is not symmetric");
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(S);
  if (eig.eigenvalues().minCoeff() < -1e-10 * scale) throw ContractError("covariance is not positive semidefinite");

  BoundCheck out;
  const double s2 = sigma * sigma;
  for (Eigen::Index i = 0; i < d; ++i) out.lhs += std::log1p(std::max(eig.eigenvalues()[i], 0.0) / s2);
  out.lhs *= 0.5 / std::log(2.0);
  out.rhs = S.trace() / (2.0 * s2 * std::log(2.0));
  out.holds = out.lhs <= out.rhs + 1e-12;
  return out;
}

SufficiencyCheck sufficiency_check_linear(const Tensor& W, const Tensor& b, const Tensor& x, double tau,
                                          const Tensor& mask) {
  if (!(tau > 0.0)) throw DomainError("tau must be positive");
  if (W.rank() != 2) throw ShapeError("W must be C x D");
  const std::size_t C = W.dim(0), D = W.dim(1);
  if (b.size() != C || x.size() != D || mask.size() != D) throw ShapeError("b, x or mask size mismatch");

  Eigen::VectorXd z(static_cast<Eigen::Index>(C));
  for (std::size_t c = 0; c < C; ++c) {
    double s = b[c];
    for (std::size_t j = 0; j < D; ++j) s += W[c * D + j] * x[j];
    z[static_cast<Eigen::Index>(c)] = s / tau;
  }
  const Eigen::VectorXd e = (z.array() - z.maxCoeff()).exp();
  const Eigen::VectorXd p = e / e.sum();

  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < D; ++j) {
    if (mask[j] > 0.5) kept.push_back(j);
  }
  SufficiencyCheck out;
  out.required = C;
  if (kept.empty()) {
    out.condition_violated = true;
    return out;
  }
  // J = (1/tau) (diag p - p p^T) W, restricted to kept columns: C x |M|.
  Eigen::MatrixXd Wm(static_cast<Eigen::Index>(C), static_cast<Eigen::Index>(kept.size()));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < kept.size(); ++k) {
      Wm(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) = W[c * D + kept[k]];
    }
  }
  const Eigen::MatrixXd Js = (Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose()) * Wm / tau;
  const Eigen::VectorXd R = Js.transpose() * p;

  // Solve [J^T; 1^T] q = [R; 1].
  Eigen::MatrixXd A(Js.cols() + 1, static_cast<Eigen::Index>(C));
  A.topRows(Js.cols()) = Js.transpose();
  A.bottomRows(1).setOnes();
  Eigen::VectorXd rhs(Js.cols() + 1);
  rhs.head(Js.cols()) = R;
  rhs[Js.cols()] = 1.0;
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  out.rank = static_cast<std::size_t>(qr.rank());
  if (out.rank < C) {
    out.condition_violated = true;
    return out;
  }
  out.residual = (qr.solve(rhs) - p).cwiseAbs().maxCoeff();
  return out;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("spearman needs two equal-length series of >= 2");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n, mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "method,dataset,mode,seed,pixel_acc,miou,map,insertion,deletion\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%llu,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(r.seed),
                  r.pixel_acc, r.miou, r.map, r.insertion, r.deletion);
    out << r.method << ',' << r.dataset << ',' << r.mode << buf;
  }
}

void write_localization_table_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "method,dataset,mode,seed,pixel_acc,miou,map\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%llu,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(r.seed), r.pixel_acc,
                  r.miou, r.map);
    out << r.method << ',' << r.dataset << ',' << r.mode << buf;
  }
}

void write_faithfulness_table_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "method,dataset,mode,seed,insertion,deletion\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%llu,%.17g,%.17g\n", static_cast<unsigned long long>(r.seed), r.insertion,
                  r.deletion);
    out << r.method << ',' << r.dataset << ',' << r.mode << buf;
  }
}

namespace {

std::vector<std::vector<std::string>> csv_rows(const std::string& text, const std::string& header, std::size_t cols) {
  std::istringstream in(text);
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line) || line != header) throw ParseError("unexpected header '" + line + "'", 0);
  offset += line.size() + 1;
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != cols) throw ParseError("expected " + std::to_string(cols) + " columns", offset);
    rows.push_back(std::move(f));
    offset += line.size() + 1;
  }
  return rows;
}

double cell_value(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ParseError("not a number: '" + s + "'", 0);
}

}  // namespace

std::vector<ReportRow> read_report_tables(const std::string& localization, const std::string& faithfulness) {
  const auto a = csv_rows(localization, "method,dataset,mode,seed,pixel_acc,miou,map", 7);
  const auto b = csv_rows(faithfulness, "method,dataset,mode,seed,insertion,deletion", 6);
  if (a.size() != b.size()) throw ParseError("tables have different row counts", 0);
  std::vector<ReportRow> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::equal(a[i].begin(), a[i].begin() + 4, b[i].begin())) {
      throw ParseError("row " + std::to_string(i + 1) + " keys differ between tables", 0);
    }
    out.push_back({.method = a[i][0], .dataset = a[i][1], .mode = a[i][2],
                   .seed = static_cast<std::uint64_t>(cell_value(a[i][3])), .pixel_acc = cell_value(a[i][4]),
                   .miou = cell_value(a[i][5]), .map = cell_value(a[i][6]), .insertion = cell_value(b[i][4]),
                   .deletion = cell_value(b[i][5])});
  }
  return out;
}

void write_curve_csv(std::ostream& out, const FaithfulnessCurve& curve) {
  out << "fraction,confidence\n";
  char buf[96];
  for (std::size_t i = 0; i < curve.fractions.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", curve.fractions[i], curve.confidences[i]);
    out << buf;
  }
}

void write_localization_csv(std::ostream& out, const LocalizationReport& report) {
  out << "id,pixel_acc,miou,map\n";
  char buf[128];
  for (const auto& s : report.per_sample) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", s.pixel_acc, s.miou, s.map);
    out << s.id << buf;
  }
}

}  // namespace sib::eval
