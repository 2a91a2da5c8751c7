#include "calseg/uncertainty.hpp"

#include "calseg/errors.hpp"

namespace calseg {

ProbMapSampleSet draw_samples(const ProbUNet& model, const ImagePatch& x, int samples, Rng& rng) {
  if (samples < 1) throw ConfigError("draw_samples needs S >= 1");
  const ModelConfig& c = model.config();
  std::vector<Tensor> latent_noise, weight_noise;
  for (int s = 0; s < samples; ++s) {
    latent_noise.push_back(standard_normal({c.latent_dim}, rng));
    weight_noise.push_back(standard_normal({1, c.head_width(), 1, 1}, rng));
  }
  Tensor feats;
  LatentGaussian prior;
  {
    Graph g;
    ForwardPass fp(g, model);
    Var xv = fp.image(x);
    feats = g.value(fp.features(xv));
    LatentVars p = fp.prior(xv);
    prior = {g.value(p.mean), g.value(p.log_variance)};
  }
  ProbMapSampleSet out;
  out.maps.resize(static_cast<std::size_t>(samples));
#pragma omp parallel for schedule(dynamic)
  for (int s = 0; s < samples; ++s) {
    Graph g;
    ForwardPass fp(g, model);
    LatentVars p{g.constant(prior.mean), g.constant(prior.log_variance)};
    Var z = fp.sample_latent(p, latent_noise[s]);
    Var w = fp.sample_weights(weight_noise[s]);
    Var prob = ops::sigmoid(g, fp.decode(g.constant(feats), z, w));
    out.maps[s] = g.value(prob).reshaped({c.height, c.width});
  }
  return out;
}

UncertaintyMaps decompose(const ProbMapSampleSet& samples) {
  if (samples.maps.empty()) throw ValidationError("decompose needs at least one sample");
  const Shape shape = samples.maps[0].shape();
  for (const auto& m : samples.maps) require_same_shape(m.shape(), shape, "decompose");
  UncertaintyMaps u{Tensor(shape), Tensor(shape), Tensor(shape)};
  const double s = static_cast<double>(samples.maps.size());
  const std::size_t n = samples.maps[0].size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0, bernoulli = 0.0;
    for (const auto& m : samples.maps) {
      mean += m[i];
      bernoulli += m[i] * (1.0 - m[i]);
    }
    mean /= s;
    double spread = 0.0;
    for (const auto& m : samples.maps) spread += (m[i] - mean) * (m[i] - mean);
    u.aleatoric[i] = bernoulli / s;
    u.epistemic[i] = spread / s;
    u.predictive[i] = u.aleatoric[i] + u.epistemic[i];
  }
  return u;
}

std::vector<BinaryMask> binarize_samples(const ProbMapSampleSet& samples) {
  std::vector<BinaryMask> out;
  out.reserve(samples.maps.size());
  for (const auto& m : samples.maps) {
    if (m.rank() != 2) throw ShapeError("probability map must be {H, W}");
    BinaryMask b(m.dim(0), m.dim(1));
    for (std::size_t i = 0; i < m.size(); ++i) b.set(i, m[i] >= 0.5);
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace calseg
