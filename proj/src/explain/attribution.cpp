#include "sib/explain/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sib/autodiff/kernels.hpp"
#include "sib/autodiff/ops.hpp"
#include "sib/data/dataset.hpp"
#include "sib/errors.hpp"

namespace sib::explain {

using ad::DiffValue;
using ad::Shape;
using ad::Tensor;

const std::vector<Method>& all_methods() {
  static const std::vector<Method> m = {Method::Saliency, Method::GuidedBackprop, Method::IntegratedGradients,
                                        Method::GradCam,  Method::GradCamPP,      Method::ScoreCam,
                                        Method::Ours};
  return m;
}

std::string method_id(Method m) {
  switch (m) {
    case Method::Saliency: return "saliency";
    case Method::GuidedBackprop: return "guided_backprop";
    case Method::IntegratedGradients: return "integrated_gradients";
    case Method::GradCam: return "gradcam";
    case Method::GradCamPP: return "gradcam_pp";
    case Method::ScoreCam: return "scorecam";
    case Method::Ours: return "ours";
  }
  return "?";
}

Method parse_method(const std::string& id) {
  for (Method m : all_methods()) {
    if (method_id(m) == id) return m;
  }
  throw ConfigError("unknown attribution method '" + id + "'");
}

namespace {

void check_image(const models::Classifier& model, const Tensor& x) {
  const Shape& in = model.input_shape();
  if (x.rank() != 4 || x.dim(0) != 1 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1)) {
    throw ContractError("expected a 1 x " + ad::to_string(in) + " image, got " + ad::to_string(x.shape()));
  }
}

void check_class(const models::Classifier& model, std::size_t c) {
  if (c >= model.classes()) {
    throw ContractError("target class " + std::to_string(c) + " out of range for " +
                        std::to_string(model.classes()) + " classes");
  }
}

DiffValue column(const DiffValue& m, std::size_t c) {
  const std::size_t n = m.shape()[0], k = m.shape()[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(n);
  for (std::size_t i = 0; i < n; ++i) (*idx)[i] = i * k + c;
  return ad::gather(m, idx, {n});
}

// Spatial size of the input (last two axes).
std::pair<std::size_t, std::size_t> spatial(const Tensor& x) { return {x.dim(x.rank() - 2), x.dim(x.rank() - 1)}; }

SaliencyMap emit(Tensor map, Method m, std::size_t c) {
  return {.scores = max_normalize(map), .method = m, .target = c};
}

struct CamInputs {
  Tensor A, G;  // K x h' x w'
};

CamInputs cam_inputs(const models::Classifier& model, const Tensor& x, std::size_t c, double tau) {
  ad::Graph g;
  const DiffValue xv = g.variable(x);
  const auto r = models::forward(model, xv, tau);
  const DiffValue s = column(r.posterior, c);
  const auto grads = ad::backward(ad::sum(s), std::vector{r.captured});
  const Shape& cs = r.captured.shape();
  const Shape k3 = {cs[1], cs[2], cs[3]};
  return {r.captured.value().reshaped(k3), grads[0].value().reshaped(k3)};
}

Tensor upsample_to(const Tensor& cam, const Tensor& x) {
  const auto [h, w] = spatial(x);
  if (cam.dim(0) == h && cam.dim(1) == w) return cam;
  return ad::kernels::resize_bilinear(cam, h, w);
}

}  // namespace

ScoreFn posterior_score(const models::Classifier& model, std::size_t c, double tau) {
  check_class(model, c);
  return [&model, c, tau](const DiffValue& x) { return column(models::forward(model, x, tau).posterior, c); };
}

std::size_t predicted_class(const models::Classifier& model, const Tensor& x, double tau) {
  check_image(model, x);
  return models::predict(models::forward(model, ad::constant(x), tau).logits.value()).at(0);
}

Tensor input_gradient(const ScoreFn& f, const Tensor& x, bool guided) {
  ad::Graph g;
  const DiffValue xv = g.variable(x);
  const DiffValue s = f(xv);
  return ad::backward(ad::sum(s), std::vector{xv}, {.retain_graph = false, .guided_relu = guided})[0].value();
}

Tensor ig_attribution(const ScoreFn& f, const Tensor& x, const Tensor& baseline, std::size_t steps) {
  if (baseline.shape() != x.shape()) {
    throw ShapeError("ig baseline " + ad::to_string(baseline.shape()) + " vs input " + ad::to_string(x.shape()));
  }
  if (x.rank() < 1 || x.dim(0) != 1) throw ContractError("ig expects a single-image batch");
  if (steps == 0) throw ContractError("ig needs at least one step");
  const std::size_t p = x.size();
  Shape bs = x.shape();
  bs[0] = steps;
  Tensor path(bs);
  for (std::size_t k = 0; k < steps; ++k) {
    const double a = (static_cast<double>(k) + 0.5) / static_cast<double>(steps);
    for (std::size_t i = 0; i < p; ++i) path[k * p + i] = baseline[i] + a * (x[i] - baseline[i]);
  }
  const Tensor g = input_gradient(f, path);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < p; ++i) {
    double mean = 0;
    for (std::size_t k = 0; k < steps; ++k) mean += g[k * p + i];
    out[i] = (x[i] - baseline[i]) * mean / static_cast<double>(steps);
  }
  return out;
}

Tensor channel_max_abs(const Tensor& g) {
  if (g.rank() != 4 || g.dim(0) != 1) throw ShapeError("channel_max_abs expects 1 x C x h x w");
  const std::size_t c = g.dim(1), hw = g.dim(2) * g.dim(3);
  Tensor out({g.dim(2), g.dim(3)});
  for (std::size_t i = 0; i < hw; ++i) {
    double m = 0;
    for (std::size_t k = 0; k < c; ++k) m = std::max(m, std::abs(g[k * hw + i]));
    out[i] = m;
  }
  return out;
}

Tensor gradcam_combine(const Tensor& A, const Tensor& G) {
  if (A.rank() != 3 || A.shape() != G.shape()) throw ShapeError("gradcam: A and G must be matching K x h x w");
  const std::size_t k = A.dim(0), hw = A.dim(1) * A.dim(2);
  Tensor cam({A.dim(1), A.dim(2)});
  for (std::size_t ch = 0; ch < k; ++ch) {
    double w = 0;
    for (std::size_t i = 0; i < hw; ++i) w += G[ch * hw + i];
    w /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += w * A[ch * hw + i];
  }
  for (std::size_t i = 0; i < hw; ++i) cam[i] = std::max(cam[i], 0.0);
  return cam;
}

Tensor gradcam_pp_combine(const Tensor& A, const Tensor& G, double eps) {
  if (A.rank() != 3 || A.shape() != G.shape()) throw ShapeError("gradcam++: A and G must be matching K x h x w");
  const std::size_t k = A.dim(0), hw = A.dim(1) * A.dim(2);
  Tensor cam({A.dim(1), A.dim(2)});
  for (std::size_t ch = 0; ch < k; ++ch) {
    double total = 0;
    for (std::size_t i = 0; i < hw; ++i) total += A[ch * hw + i];
    double w = 0;
    for (std::size_t i = 0; i < hw; ++i) {
      const double g = G[ch * hw + i], g2 = g * g, g3 = g2 * g;
      double denom = 2.0 * g2 + total * g3;
      if (std::abs(denom) < eps) denom = eps;
      w += (g2 / denom) * std::max(g, 0.0);
    }
    for (std::size_t i = 0; i < hw; ++i) cam[i] += w * A[ch * hw + i];
  }
  for (std::size_t i = 0; i < hw; ++i) cam[i] = std::max(cam[i], 0.0);
  return cam;
}

Tensor scorecam_combine(const Tensor& A, const Tensor& x, const ScoreFn& f, std::size_t* forward_passes) {
  if (A.rank() != 3 || x.rank() != 4 || x.dim(0) != 1) throw ShapeError("scorecam: A must be K x h x w, x 1 x C x h x w");
  const auto [h, w] = spatial(x);
  const std::size_t k = A.dim(0), fhw = A.dim(1) * A.dim(2), chans = x.dim(1);
  std::size_t passes = 0;
  auto score = [&](const Tensor& input) {
    ++passes;
    return f(ad::constant(input)).value()[0];
  };
  const double base = score(x);
  Tensor cam({A.dim(1), A.dim(2)});
  for (std::size_t ch = 0; ch < k; ++ch) {
    const Tensor plane = ad::kernels::slice(A, 0, ch, 1).reshaped({A.dim(1), A.dim(2)});
    Tensor up = (A.dim(1) == h && A.dim(2) == w) ? plane : ad::kernels::resize_bilinear(plane, h, w);
    const auto [lo, hi] = std::minmax_element(up.data().begin(), up.data().end());
    const double l = *lo, range = *hi - *lo;
    for (double& v : up.data()) v = range > 0 ? (v - l) / range : 1.0;
    Tensor masked = x;
    for (std::size_t c = 0; c < chans; ++c)
      for (std::size_t i = 0; i < h * w; ++i) masked[c * h * w + i] *= up[i];
    const double weight = score(masked) - base;
    for (std::size_t i = 0; i < fhw; ++i) cam[i] += weight * A[ch * fhw + i];
  }
  for (double& v : cam.data()) v = std::max(v, 0.0);
  if (forward_passes) *forward_passes = passes;
  return cam;
}

Tensor max_normalize(const Tensor& map) {
  double m = 0;
  for (double v : map.data()) {
    if (!std::isfinite(v)) throw NumericError("non-finite saliency score");
    m = std::max(m, v);
  }
  Tensor out(map.shape());
  if (m > 0) {
    for (std::size_t i = 0; i < map.size(); ++i) out[i] = std::max(map[i], 0.0) / m;
  }
  return out;
}

SaliencyMap saliency(const models::Classifier& model, const Tensor& x, std::size_t c, const Options& o) {
  check_image(model, x);
  return emit(channel_max_abs(input_gradient(posterior_score(model, c, o.tau), x)), Method::Saliency, c);
}

SaliencyMap guided_backprop(const models::Classifier& model, const Tensor& x, std::size_t c, const Options& o) {
  check_image(model, x);
  return emit(channel_max_abs(input_gradient(posterior_score(model, c, o.tau), x, true)), Method::GuidedBackprop,
              c);
}

SaliencyMap integrated_gradients(const models::Classifier& model, const Tensor& x, std::size_t c,
                                 const Options& o) {
  check_image(model, x);
  if (o.ig_steps < 8) throw ContractError("integrated gradients needs at least 8 steps");
  const Tensor zeros(x.shape());
  const Tensor& b = o.ig_baseline ? *o.ig_baseline : zeros;
  return emit(channel_max_abs(ig_attribution(posterior_score(model, c, o.tau), x, b, o.ig_steps)),
              Method::IntegratedGradients, c);
}

SaliencyMap gradcam(const models::Classifier& model, const Tensor& x, std::size_t c, const Options& o) {
  check_image(model, x);
  check_class(model, c);
  const CamInputs in = cam_inputs(model, x, c, o.tau);
  return emit(upsample_to(gradcam_combine(in.A, in.G), x), Method::GradCam, c);
}

SaliencyMap gradcam_pp(const models::Classifier& model, const Tensor& x, std::size_t c, const Options& o) {
  check_image(model, x);
  check_class(model, c);
  const CamInputs in = cam_inputs(model, x, c, o.tau);
  return emit(upsample_to(gradcam_pp_combine(in.A, in.G), x), Method::GradCamPP, c);
}

SaliencyMap scorecam(const models::Classifier& model, const Tensor& x, std::size_t c, const Options& o,
                     std::size_t* forward_passes) {
  check_image(model, x);
  check_class(model, c);
  const auto r = models::forward(model, ad::constant(x), o.tau);
  const Shape& cs = r.captured.shape();
  const Tensor A = r.captured.value().reshaped({cs[1], cs[2], cs[3]});
  std::size_t passes = 0;
  Tensor cam = scorecam_combine(A, x, posterior_score(model, c, o.tau), &passes);
  // The activation forward above is shared with the baseline score.
  if (forward_passes) *forward_passes = passes;
  return emit(upsample_to(cam, x), Method::ScoreCam, c);
}

SaliencyMap ours(const models::Classifier& model, const Tensor& x, std::size_t c, const Options& o) {
  check_image(model, x);
  check_class(model, c);
  ad::Graph g;
  const auto d = core::compute_vjp_decoding(model, x, o.tau, models::bind_constant(model), g, false);
  const Tensor m = core::generate_mask(d.R, o.mask).value();
  return emit(m.reshaped({m.dim(1), m.dim(2)}), Method::Ours, c);
}

SaliencyMap explain(Method m, const models::Classifier& model, const Tensor& x, std::size_t c, const Options& o) {
  switch (m) {
    case Method::Saliency: return saliency(model, x, c, o);
    case Method::GuidedBackprop: return guided_backprop(model, x, c, o);
    case Method::IntegratedGradients: return integrated_gradients(model, x, c, o);
    case Method::GradCam: return gradcam(model, x, c, o);
    case Method::GradCamPP: return gradcam_pp(model, x, c, o);
    case Method::ScoreCam: return scorecam(model, x, c, o);
    case Method::Ours: return ours(model, x, c, o);
  }
  throw ContractError("unknown method");
}

void write_heatmap_pgm(const std::filesystem::path& path, const SaliencyMap& map) {
  data::write_pgm(path, map.scores);
}

void write_overlay_ppm(const std::filesystem::path& path, const Tensor& image, const SaliencyMap& map) {
  const std::size_t h = map.scores.dim(0), w = map.scores.dim(1);
  if (image.size() < h * w) throw ShapeError("overlay image smaller than map");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  for (std::size_t i = 0; i < h * w; ++i) {
    const double g = std::clamp(image[i], 0.0, 1.0), a = map.scores[i];
    const double base = g * (1.0 - a);
    const unsigned char px[3] = {static_cast<unsigned char>(std::lround((base + a) * 255.0)),
                                 static_cast<unsigned char>(std::lround(base * 255.0)),
                                 static_cast<unsigned char>(std::lround(base * 255.0))};
    out.write(reinterpret_cast<const char*>(px), 3);
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace sib::explain
