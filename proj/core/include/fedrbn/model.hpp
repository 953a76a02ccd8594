#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "fedrbn/dual_bn.hpp"
#include "fedrbn/tensor.hpp"

namespace fedrbn {

struct LinearLayer {
  std::size_t in = 0, out = 0;
  std::vector<double> weight;  // out x in, row-major
  std::vector<double> bias;    // out

  LinearLayer() = default;
  LinearLayer(std::size_t in, std::size_t out);

  friend bool operator==(const LinearLayer&, const LinearLayer&) = default;
};

struct ReluLayer {
  std::size_t width = 0;
  friend bool operator==(const ReluLayer&, const ReluLayer&) = default;
};

using Layer = std::variant<LinearLayer, ReluLayer, DBNState>;

/// Feed-forward classifier. `bn_mode` selects the path of every dual-BN layer
/// for the next pass; `training` selects batch vs running statistics.
struct Model {
  std::vector<Layer> layers;
  BnPath bn_mode = BnPath::clean;
  bool training = false;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t dbn_count() const;

  /// Checks consecutive widths; throws DimensionError.
  void validate() const;

  friend bool operator==(const Model&, const Model&) = default;
};

struct MlpSpec {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t classes = 10;
};

/// input -> [linear -> dbn -> relu] per hidden width -> linear -> logits.
/// Linear weights use He-uniform init, biases zero, BN at identity.
Model make_mlp(const MlpSpec& spec, std::uint64_t seed);

struct LinearGrad {
  std::vector<double> weight, bias;
};
struct AffineGrad {
  std::vector<double> weight, bias;
};
using LayerGrad = std::variant<std::monostate, LinearGrad, AffineGrad>;

/// Gradients for every trainable parameter, aligned with Model::layers.
/// Running statistics never appear here.
struct Gradients {
  std::vector<LayerGrad> layers;

  static Gradients zeros_like(const Model& model);
  Gradients& scale(double factor);
  Gradients& add_scaled(double factor, const Gradients& other);
  /// Flat view of all entries in layer order (weights before biases).
  std::vector<double> flatten() const;
};

struct LossGrad {
  double loss = 0.0;
  Gradients grads;
  Tensor input_grad;
};

/// Runs the model. In training mode the active path's running stats move
/// toward the batch moments.
Tensor forward(Model& model, const Tensor& x);

/// Eval-mode logits through an explicit path, ignoring model.bn_mode.
/// Throws ContractError if the model is in training mode.
Tensor eval_logits(const Model& model, const Tensor& x, BnPath path);

/// Mean softmax cross-entropy, its exact gradients and dloss/dx. Performs the
/// same running-stat update as forward() when training.
LossGrad loss_and_grad(Model& model, const Tensor& x, const Tensor& one_hot);

/// Loss and dloss/dx of an eval-mode model; nothing is mutated.
LossGrad loss_and_grad_eval(const Model& model, const Tensor& x, const Tensor& one_hot);

/// p <- p - lr * g for every trainable parameter.
void sgd_step(Model& model, const Gradients& grads, double lr);

Tensor one_hot(std::span<const std::size_t> labels, std::size_t classes);

/// Numerically stable mean cross-entropy of logits against class indices.
double cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Row-wise argmax, ties to the lowest index.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

// Parameter enumeration for aggregation and checkpoints.
enum class ParamKind : std::uint8_t {
  linear_weight,
  linear_bias,
  bn_weight,
  bn_bias,
  bn_mean,
  bn_var,
  bn_noise_mean,
  bn_noise_var,
};

constexpr bool is_bn_kind(ParamKind k) noexcept {
  return k != ParamKind::linear_weight && k != ParamKind::linear_bias;
}

struct ParamRef {
  ParamKind kind;
  std::size_t layer;
  std::span<double> values;
};

struct ConstParamRef {
  ParamKind kind;
  std::size_t layer;
  std::span<const double> values;
};

std::vector<ParamRef> param_refs(Model& model);
std::vector<ConstParamRef> param_refs(const Model& model);

}  // namespace fedrbn
