#pragma once

// Probabilistic U-Net with a variational-dropout output layer.
//
//   backbone   4-scale U-Net on x, final feature map {F, H, W}
//   prior      encoder on x       -> N(mu, diag exp(logvar)) over z in R^L
//   posterior  encoder on (x, y)  -> same family
//   head       [features ; broadcast z] -> 1x1 conv -> ReLU -> 1x1 conv -> ReLU
//              -> 1x1 conv with weights w ~ q(w), deterministic bias -> logits
//
// q(w) is multiplicative Gaussian noise on the last kernel:
// w = m * (1 + sqrt(alpha) * eps), one log_alpha per weight.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "calseg/autodiff.hpp"
#include "calseg/datagen.hpp"

namespace calseg {

inline constexpr double kLogVarianceMin = -10.0;
inline constexpr double kLogVarianceMax = 10.0;

struct ModelConfig {
  int height = 64;
  int width = 64;
  int base_width = 16;
  int latent_dim = 6;
  bool variational_dropout = true;
  double log_alpha_init = -4.0;
  std::uint64_t seed = 0;

  /// Backbone channels per scale; the finest scale has base_width channels.
  std::vector<int> backbone_widths() const;
  /// Prior/posterior encoder channels per scale.
  std::vector<int> encoder_widths() const;
  int head_width() const { return base_width; }
  static constexpr int scales = 4;

  /// Throws ConfigError for sizes not divisible by 2^(scales-1), etc.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct LatentGaussian {
  Tensor mean;          // {L}
  Tensor log_variance;  // {L}, within [kLogVarianceMin, kLogVarianceMax]
};

struct DropoutPosterior {
  Tensor weight_means;  // {1, F, 1, 1}
  Tensor log_alpha;     // same shape, within [kLogAlphaMin, kLogAlphaMax]
};

class ProbUNet {
 public:
  explicit ProbUNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  Parameter& parameter(std::string_view name);
  const Parameter& parameter(std::string_view name) const;
  std::size_t parameter_index(std::string_view name) const;
  std::size_t parameter_count() const;

  /// Whether the optimizer should update this parameter.
  bool is_trainable(const Parameter& p) const;

  DropoutPosterior dropout_posterior() const;
  /// Keeps log_alpha inside its clamp range after an optimizer step.
  void project_parameters();

  void zero_grad();

  /// Writes <stem>.bin (raw parameters) and <stem>.json (architecture sidecar).
  void save(const std::filesystem::path& stem) const;
  static ProbUNet load(const std::filesystem::path& stem);

 private:
  void add(std::string name, Shape shape, double init_std, Rng& rng);

  ModelConfig config_;
  std::vector<Parameter> params_;
};

struct LatentVars {
  Var mean;
  Var log_variance;
};

/// Builds the network on a Graph. Bound to a mutable model, parameters are
/// graph leaves whose gradients flow into Parameter::grad; bound to a const
/// model they are constants.
class ForwardPass {
 public:
  ForwardPass(Graph& graph, ProbUNet& model);
  ForwardPass(Graph& graph, const ProbUNet& model);

  Graph& graph() { return graph_; }

  /// {1, H, W} constant from an image; ShapeError on size mismatch.
  Var image(const ImagePatch& x);
  Var mask(const BinaryMask& y);

  Var features(Var x);
  LatentVars prior(Var x);
  LatentVars posterior(Var x, Var y);
  Var sample_latent(const LatentVars& g, const Tensor& noise);
  /// Sampled last-layer kernel {1, F, 1, 1}; the means when dropout is off.
  Var sample_weights(const Tensor& noise);
  /// Logits {1, H, W}.
  Var decode(Var features, Var z, Var w);
  /// Clamped log_alpha as a graph value.
  Var log_alpha();

  Var param(std::string_view name);

 private:
  LatentVars encode(std::string_view prefix, Var input);

  Graph& graph_;
  const ProbUNet& model_;
  ProbUNet* trainable_;
  std::vector<std::optional<Var>> bound_;
};

// Tensor-level forms of the network's pieces (no gradient tracking).

LatentGaussian prior_params(const ProbUNet& model, const ImagePatch& x);
LatentGaussian posterior_params(const ProbUNet& model, const ImagePatch& x, const BinaryMask& y);
/// mean + exp(log_variance / 2) * noise
Tensor sample_latent(const LatentGaussian& g, const Tensor& noise);
/// weight_means * (1 + sqrt(exp(log_alpha)) * noise)
Tensor sample_weights(const DropoutPosterior& d, const Tensor& noise);
/// Logit map {H, W}.
Tensor decode(const ProbUNet& model, const ImagePatch& x, const Tensor& z, const Tensor& w);

}  // namespace calseg
