#pragma once

// Training objective:
//
//   total = reconstruction + beta * latent_kl + weight_kl / N + gamma * calibration
//
// reconstruction  BCE summed over pixels, averaged over (image, annotation) pairs,
//                 decoded from posterior-net latents and sampled dropout weights
// latent_kl       KL(q(z|x,y) || p(z|x)), averaged over pairs
// weight_kl       dropout KL approximation summed over the last-layer weights
// calibration     per-image mean over pixels of CE(p_g, p_m), averaged over images,
//                 where p_m is the K-sample prior-net predictive mean

#include <vector>

#include "calseg/datagen.hpp"
#include "calseg/model.hpp"

namespace calseg {

inline constexpr double kProbabilityEps = 1e-7;

struct LossBreakdown {
  double reconstruction = 0.0;
  double latent_kl = 0.0;
  double weight_kl = 0.0;
  double calibration = 0.0;
  double total = 0.0;
};

struct ObjectiveConfig {
  double beta = 1.0;
  double gamma = 100.0;
  int k_samples = 4;
  /// N in weight_kl / N: number of (image, annotation) training pairs.
  double dataset_size = 1.0;
};

/// One (image, annotation index) pair.
struct BatchEntry {
  const DatasetItem* item = nullptr;
  int annotation = 0;
};

struct Batch {
  std::vector<BatchEntry> entries;

  /// Distinct images in order of first appearance.
  std::vector<const DatasetItem*> images() const;
};

/// Throws ConfigError unless every image in the batch appears with each of
/// its D annotations exactly once.
void validate_batch(const Batch& batch);

/// Closed-form KL between diagonal Gaussians, summed over dimensions.
double gaussian_kl(const LatentGaussian& q, const LatentGaussian& p);
/// Summed dropout KL penalty; entries are clamped to the log_alpha range.
double vd_kl(const Tensor& log_alpha);
/// BCE from logits summed over pixels.
double reconstruction_nll(const Tensor& logits, const BinaryMask& y);
/// Mean over pixels of -[p_g log p_m + (1 - p_g) log(1 - p_m)], p_m clamped to [eps, 1 - eps].
double calibration_loss(const Tensor& p_g, const Tensor& p_m);

/// (1/K) sum_k sigmoid(decode(x, z_k, w_k)), z_k from the prior net and w_k
/// from q(w). Draws, per sample, L latent then F weight normals from rng.
Tensor estimate_pm(const ProbUNet& model, const ImagePatch& x, int k_samples, Rng& rng);

/// Evaluates the objective on a batch. With accumulate_gradients the gradient
/// of `total` is added into the model's Parameter::grad. Noise is drawn from
/// rng in a fixed order, so equal rng states give equal losses.
LossBreakdown total_loss(const Batch& batch, ProbUNet& model, const ObjectiveConfig& config, Rng& rng,
                         bool accumulate_gradients);

}  // namespace calseg
