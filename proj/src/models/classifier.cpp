#include "sib/models/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "sib/autodiff/ops.hpp"
#include "sib/errors.hpp"

namespace sib::models {

using ad::DiffValue;
using ad::Shape;
using ad::Tensor;

namespace {

// Walks the layer list and returns the per-sample output shape, validating as it goes.
Shape output_shape(const Shape& input, const std::vector<LayerSpec>& layers, const ParamMap& params) {
  Shape s = input;
  auto need = [&](const std::string& key, const Shape& shape) {
    const auto it = params.find(key);
    if (it == params.end()) throw ContractError("missing parameter " + key);
    if (it->second.shape() != shape) {
      throw ShapeError("parameter " + key + " has shape " + ad::to_string(it->second.shape()) + ", expected " +
                       ad::to_string(shape));
    }
  };
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        if (s.size() != 3 || s[0] != l.in) throw ShapeError("layer " + l.name + ": input " + ad::to_string(s));
        need(l.name + ".weight", {l.out, l.in, l.kernel, l.kernel});
        need(l.name + ".bias", {1, l.out, 1, 1});
        if (s[1] + 2 * l.pad < l.kernel || s[2] + 2 * l.pad < l.kernel) {
          throw ShapeError("layer " + l.name + ": kernel larger than padded input");
        }
        s = {l.out, s[1] + 2 * l.pad - l.kernel + 1, s[2] + 2 * l.pad - l.kernel + 1};
        break;
      case LayerKind::Relu:
        break;
      case LayerKind::AvgPool:
        if (s.size() != 3 || l.pool == 0 || s[1] % l.pool || s[2] % l.pool) {
          throw ShapeError("layer " + l.name + ": pool " + std::to_string(l.pool) + " on " + ad::to_string(s));
        }
        s = {s[0], s[1] / l.pool, s[2] / l.pool};
        break;
      case LayerKind::Flatten:
        s = {ad::numel(s)};
        break;
      case LayerKind::Dense:
        if (s.size() != 1 || s[0] != l.in) throw ShapeError("layer " + l.name + ": input " + ad::to_string(s));
        need(l.name + ".weight", {l.in, l.out});
        need(l.name + ".bias", {1, l.out});
        s = {l.out};
        break;
    }
  }
  return s;
}

Tensor he_normal(std::mt19937_64& rng, const Shape& shape, std::size_t fan_in) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

void init_params(ParamMap& params, const std::vector<LayerSpec>& layers, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (const auto& l : layers) {
    if (l.kind == LayerKind::Conv) {
      params[l.name + ".weight"] = he_normal(rng, {l.out, l.in, l.kernel, l.kernel}, l.in * l.kernel * l.kernel);
      params[l.name + ".bias"] = Tensor({1, l.out, 1, 1});
    } else if (l.kind == LayerKind::Dense) {
      params[l.name + ".weight"] = he_normal(rng, {l.in, l.out}, l.in);
      params[l.name + ".bias"] = Tensor({1, l.out});
    }
  }
}

}  // namespace

Classifier::Classifier(Shape input_shape, std::vector<LayerSpec> layers, ParamMap params, std::string capture_layer)
    : input_shape_(std::move(input_shape)),
      layers_(std::move(layers)),
      params_(std::move(params)),
      capture_layer_(std::move(capture_layer)) {
  const Shape out = output_shape(input_shape_, layers_, params_);
  if (out.size() != 1) throw ShapeError("classifier must end in a flat layer, got " + ad::to_string(out));
  classes_ = out[0];
  std::size_t expected = 0;
  for (const auto& l : layers_) expected += (l.kind == LayerKind::Conv || l.kind == LayerKind::Dense) ? 2 : 0;
  if (params_.size() != expected) throw ContractError("unexpected extra parameters");
  if (!capture_layer_.empty()) {
    bool found = false;
    for (const auto& l : layers_) found = found || l.name == capture_layer_;
    if (!found) throw ContractError("capture layer " + capture_layer_ + " not in model");
  }
}

std::vector<std::string> Classifier::param_names() const {
  std::vector<std::string> names;
  for (const auto& [k, v] : params_) names.push_back(k);
  return names;
}

void Classifier::set_param(const std::string& name, Tensor value) {
  const auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter " + name);
  if (it->second.shape() != value.shape()) {
    throw ShapeError("parameter " + name + ": " + ad::to_string(value.shape()) + " vs " +
                     ad::to_string(it->second.shape()));
  }
  it->second = std::move(value);
}

void Classifier::set_params(ParamMap params) {
  if (params.size() != params_.size()) throw ContractError("parameter count mismatch");
  for (auto& [k, v] : params) {
    if (!params_.contains(k)) throw ContractError("unknown parameter " + k);
    if (params_.at(k).shape() != v.shape()) throw ShapeError("parameter " + k + " shape mismatch");
  }
  params_ = std::move(params);
}

Classifier build_small_cnn(std::size_t channels, std::size_t classes, std::size_t image_side, std::uint64_t seed) {
  if (image_side != 16 && image_side != 32 && image_side != 64) {
    throw ConfigError("image_side must be 16, 32 or 64, got " + std::to_string(image_side));
  }
  if (classes < 2) throw ConfigError("classes must be >= 2");
  if (channels == 0) throw ConfigError("channels must be positive");
  std::vector<LayerSpec> layers;
  std::size_t in = 1;
  for (int b = 1; b <= 3; ++b) {
    const std::string id = std::to_string(b);
    layers.push_back({.kind = LayerKind::Conv, .name = "conv" + id, .in = in, .out = channels, .kernel = 3, .pad = 1});
    layers.push_back({.kind = LayerKind::Relu, .name = "relu" + id});
    layers.push_back({.kind = LayerKind::AvgPool, .name = "pool" + id, .pool = 2});
    in = channels;
  }
  const std::size_t side = image_side / 8;
  layers.push_back({.kind = LayerKind::Flatten, .name = "flatten"});
  layers.push_back({.kind = LayerKind::Dense, .name = "fc", .in = channels * side * side, .out = classes});
  ParamMap params;
  init_params(params, layers, seed);
  return Classifier({1, image_side, image_side}, std::move(layers), std::move(params), "relu3");
}

Classifier build_linear(const Shape& input_shape, std::size_t classes, std::uint64_t seed) {
  if (classes == 0) throw ConfigError("classes must be positive");
  std::vector<LayerSpec> layers = {
      {.kind = LayerKind::Flatten, .name = "flatten"},
      {.kind = LayerKind::Dense, .name = "fc", .in = ad::numel(input_shape), .out = classes},
  };
  ParamMap params;
  init_params(params, layers, seed);
  return Classifier(input_shape, std::move(layers), std::move(params), "");
}

BoundParams bind(const Classifier& model, ad::Graph& graph) {
  BoundParams out;
  for (const auto& [k, v] : model.params()) out.emplace(k, graph.variable(v));
  return out;
}

BoundParams bind_constant(const Classifier& model) {
  BoundParams out;
  for (const auto& [k, v] : model.params()) out.emplace(k, ad::constant(v));
  return out;
}

ForwardResult forward(const Classifier& model, const DiffValue& x, double tau, const BoundParams& params) {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive");
  const Shape& in = model.input_shape();
  if (x.shape().size() != in.size() + 1 || !std::equal(in.begin(), in.end(), x.shape().begin() + 1)) {
    throw ContractError("input shape " + ad::to_string(x.shape()) + " does not match N x " + ad::to_string(in));
  }
  const std::size_t n = x.shape()[0];
  auto param = [&](const std::string& key) -> const DiffValue& {
    const auto it = params.find(key);
    if (it == params.end()) throw ContractError("missing bound parameter " + key);
    return it->second;
  };
  ForwardResult r;
  DiffValue h = x;
  if (model.capture_layer().empty()) r.captured = x;
  for (const auto& l : model.layers()) {
    switch (l.kind) {
      case LayerKind::Conv: {
        h = ad::conv2d(h, param(l.name + ".weight"), 1, l.pad);
        h = h + ad::broadcast_to(param(l.name + ".bias"), h.shape());
        break;
      }
      case LayerKind::Relu:
        h = ad::relu(h);
        break;
      case LayerKind::AvgPool:
        h = ad::avgpool2d(h, l.pool);
        break;
      case LayerKind::Flatten:
        h = ad::reshape(h, {n, h.size() / n});
        break;
      case LayerKind::Dense:
        h = ad::matmul(h, param(l.name + ".weight"));
        h = h + ad::broadcast_to(param(l.name + ".bias"), h.shape());
        break;
    }
    if (l.name == model.capture_layer()) r.captured = h;
  }
  r.logits = h;
  r.posterior = ad::softmax(h, tau);
  return r;
}

ForwardResult forward(const Classifier& model, const DiffValue& x, double tau) {
  return forward(model, x, tau, bind_constant(model));
}

DiffValue cross_entropy(const DiffValue& logits, std::span<const std::size_t> labels, double tau) {
  if (logits.shape().size() != 2 || logits.shape()[0] != labels.size()) {
    throw ShapeError("cross_entropy: logits " + ad::to_string(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.size(), c = logits.shape()[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw ContractError("label " + std::to_string(labels[i]) + " out of range");
    (*idx)[i] = i * c + labels[i];
  }
  const DiffValue picked = ad::gather(ad::log_softmax(logits, tau), idx, {n});
  return -ad::mean(picked);
}

std::vector<std::size_t> predict(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("predict expects N x C logits, got " + ad::to_string(logits.shape()));
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (logits[i * c + k] > logits[i * c + best]) best = k;
    }
    out[i] = best;
  }
  return out;
}

Tensor stack(std::span<const Tensor> images) {
  if (images.empty()) throw ContractError("stack of zero images");
  const Shape& s = images[0].shape();
  Shape out = {images.size()};
  out.insert(out.end(), s.begin(), s.end());
  std::vector<double> data;
  data.reserve(ad::numel(out));
  for (const auto& im : images) {
    if (im.shape() != s) throw ShapeError("stack: " + ad::to_string(im.shape()) + " vs " + ad::to_string(s));
    data.insert(data.end(), im.data().begin(), im.data().end());
  }
  return Tensor(std::move(out), std::move(data));
}

void sgd_step(Classifier& model, const ParamMap& grads, OptimState& state) {
  const ParamMap& params = model.params();
  if (grads.size() != params.size()) throw ContractError("gradient keys do not match parameter keys");
  for (const auto& [k, g] : grads) {
    const auto it = params.find(k);
    if (it == params.end()) throw ContractError("gradient for unknown parameter " + k);
    if (it->second.shape() != g.shape()) throw ShapeError("gradient " + k + " shape mismatch");
  }
  ParamMap next = params;
  for (auto& [k, theta] : next) {
    const Tensor& g = grads.at(k);
    auto [vit, inserted] = state.velocity.try_emplace(k, Tensor(theta.shape()));
    Tensor& m = vit->second;
    if (m.shape() != theta.shape()) throw ShapeError("optimizer state " + k + " shape mismatch");
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = state.momentum * m[i] + g[i];
      theta[i] -= state.lr * m[i];
    }
  }
  model.set_params(std::move(next));
}

namespace {

constexpr char kMagic[4] = {'S', 'I', 'B', 'P'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& offset) {
  if (bytes.size() - offset < 4) throw ParseError("truncated u32", offset);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
  offset += 4;
  return v;
}

}  // namespace

std::vector<std::uint8_t> save_params(const ParamMap& params) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    ad::write_tensor(out, t);
  }
  return out;
}

ParamMap load_params(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError("bad parameter magic", 0);
  std::size_t offset = 4;
  const std::uint32_t count = get_u32(bytes, offset);
  ParamMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = offset;
    const std::uint32_t len = get_u32(bytes, offset);
    if (bytes.size() - offset < len) throw ParseError("truncated parameter name", offset);
    std::string name(reinterpret_cast<const char*>(bytes.data() + offset), len);
    offset += len;
    Tensor t = ad::read_tensor(bytes, offset);
    if (!out.emplace(std::move(name), std::move(t)).second) throw ParseError("duplicate parameter name", at);
  }
  if (offset != bytes.size()) throw ParseError("trailing bytes after parameters", offset);
  return out;
}

}  // namespace sib::models
