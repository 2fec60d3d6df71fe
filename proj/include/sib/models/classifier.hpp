#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "sib/autodiff/graph.hpp"
#include "sib/autodiff/tensor.hpp"

namespace sib::models {

enum class LayerKind { Conv, Relu, AvgPool, Flatten, Dense };

struct LayerSpec {
  LayerKind kind;
  std::string name;
  // Conv: in/out channels, 3x3 kernel with `pad`. Dense: in/out features.
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel = 0;
  std::size_t pad = 0;
  // AvgPool window.
  std::size_t pool = 0;
};

// Ordered by name, which fixes the enumeration order for optimizer state and files.
using ParamMap = std::map<std::string, ad::Tensor>;
using BoundParams = std::map<std::string, ad::DiffValue>;

class Classifier {
 public:
  // input_shape is per-sample (channels, height, width). capture_layer names the
  // layer whose output is recorded; empty means the input itself.
  Classifier(ad::Shape input_shape, std::vector<LayerSpec> layers, ParamMap params, std::string capture_layer);

  const ad::Shape& input_shape() const { return input_shape_; }
  std::size_t classes() const { return classes_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  const std::string& capture_layer() const { return capture_layer_; }

  const ParamMap& params() const { return params_; }
  std::vector<std::string> param_names() const;
  // Replaces all parameters; keys and shapes must match the current ones.
  void set_params(ParamMap params);
  void set_param(const std::string& name, ad::Tensor value);

 private:
  ad::Shape input_shape_;
  std::vector<LayerSpec> layers_;
  ParamMap params_;
  std::string capture_layer_;
  std::size_t classes_ = 0;
};

// 3 x [conv3x3 pad 1 -> ReLU -> avgpool 2], then one dense layer. Captures the
// post-ReLU output of the last conv block.
Classifier build_small_cnn(std::size_t channels, std::size_t classes, std::size_t image_side, std::uint64_t seed);

// Flatten -> dense. Captures the input. Allows a single class.
Classifier build_linear(const ad::Shape& input_shape, std::size_t classes, std::uint64_t seed);

struct ForwardResult {
  ad::DiffValue logits;     // N x C
  ad::DiffValue posterior;  // softmax(logits / tau)
  ad::DiffValue captured;   // N x K x h x w
};

// Parameters as variables on `graph`.
BoundParams bind(const Classifier& model, ad::Graph& graph);
// Parameters as constants.
BoundParams bind_constant(const Classifier& model);

// x is N x (input_shape).
ForwardResult forward(const Classifier& model, const ad::DiffValue& x, double tau, const BoundParams& params);
ForwardResult forward(const Classifier& model, const ad::DiffValue& x, double tau = 1.0);

// Mean over the batch of -log softmax(logits / tau)[label].
ad::DiffValue cross_entropy(const ad::DiffValue& logits, std::span<const std::size_t> labels, double tau = 1.0);

// Row-wise argmax; ties resolve to the lowest class index.
std::vector<std::size_t> predict(const ad::Tensor& logits);

// Stacks per-sample images (each of input_shape) into a batch tensor.
ad::Tensor stack(std::span<const ad::Tensor> images);

struct OptimState {
  double lr = 0.01;
  double momentum = 0.9;
  ParamMap velocity;  // filled lazily with zeros matching the parameters
};

// m <- mu*m + g; theta <- theta - lr*m.
void sgd_step(Classifier& model, const ParamMap& grads, OptimState& state);

std::vector<std::uint8_t> save_params(const ParamMap& params);
ParamMap load_params(std::span<const std::uint8_t> bytes);

}  // namespace sib::models
