#pragma once

// Monte-Carlo predictive distribution and its law-of-total-variance split:
//   predictive = E_theta[p (1 - p)] + Var_theta[p] = pbar (1 - pbar)
//                 (aleatoric)          (epistemic)

#include <vector>

#include "calseg/datagen.hpp"
#include "calseg/model.hpp"

namespace calseg {

struct ProbMapSampleSet {
  std::vector<Tensor> maps;  // S maps {H, W}, values in [0, 1]

  int sample_count() const { return static_cast<int>(maps.size()); }
};

struct UncertaintyMaps {
  Tensor aleatoric;
  Tensor epistemic;
  Tensor predictive;
};

/// S forward passes, each with fresh z from the prior net and fresh w from
/// q(w). Noise is drawn from rng up front (latent, then weight, per sample);
/// the passes themselves run in parallel.
ProbMapSampleSet draw_samples(const ProbUNet& model, const ImagePatch& x, int samples, Rng& rng);

/// Population (1/S) moments per pixel; ValidationError for S < 1,
/// ShapeError for mismatched map shapes.
UncertaintyMaps decompose(const ProbMapSampleSet& samples);

/// Threshold at 0.5; ties go to foreground.
std::vector<BinaryMask> binarize_samples(const ProbMapSampleSet& samples);

}  // namespace calseg
