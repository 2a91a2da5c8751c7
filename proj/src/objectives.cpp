#include "calseg/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "calseg/dropout_kl.hpp"
#include "calseg/errors.hpp"

namespace calseg {

std::vector<const DatasetItem*> Batch::images() const {
  std::vector<const DatasetItem*> out;
  for (const auto& e : entries) {
    if (std::find(out.begin(), out.end(), e.item) == out.end()) out.push_back(e.item);
  }
  return out;
}

void validate_batch(const Batch& batch) {
  if (batch.entries.empty()) throw ConfigError("empty batch");
  std::map<const DatasetItem*, std::multiset<int>> seen;
  for (const auto& e : batch.entries) {
    if (e.item == nullptr) throw ConfigError("batch entry without an image");
    seen[e.item].insert(e.annotation);
  }
  for (const auto& [item, annotations] : seen) {
    const int d = item->annotations.grader_count();
    std::multiset<int> expected;
    for (int j = 0; j < d; ++j) expected.insert(j);
    if (annotations != expected) {
      throw ConfigError("batch splits the annotation set of " + item->image.id + ": all " + std::to_string(d) +
                        " annotations must be in the same batch exactly once");
    }
  }
}

double gaussian_kl(const LatentGaussian& q, const LatentGaussian& p) {
  const std::size_t n = q.mean.size();
  if (q.log_variance.size() != n || p.mean.size() != n || p.log_variance.size() != n) {
    throw ShapeError("gaussian_kl: length mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = q.mean[i] - p.mean[i];
    s += 0.5 * (p.log_variance[i] - q.log_variance[i] + (std::exp(q.log_variance[i]) + d * d) * std::exp(-p.log_variance[i]) - 1.0);
  }
  return s;
}

double vd_kl(const Tensor& log_alpha) {
  double s = 0.0;
  for (double v : log_alpha.data()) s += dropout_kl_entry(v);
  return s;
}

double reconstruction_nll(const Tensor& logits, const BinaryMask& y) {
  if (logits.size() != y.size()) throw ShapeError("reconstruction_nll: logits/mask size");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double l = logits[i];
    s += std::max(l, 0.0) - l * y[i] + std::log1p(std::exp(-std::abs(l)));
  }
  return s;
}

double calibration_loss(const Tensor& p_g, const Tensor& p_m) {
  require_same_shape(p_g.shape(), p_m.shape(), "calibration_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < p_g.size(); ++i) {
    const double p = std::clamp(p_m[i], kProbabilityEps, 1.0 - kProbabilityEps);
    s -= p_g[i] * std::log(p) + (1.0 - p_g[i]) * std::log1p(-p);
  }
  return s / static_cast<double>(p_g.size());
}

namespace {

struct SampleNoise {
  Tensor latent;
  Tensor weight;
};

SampleNoise draw_noise(const ModelConfig& c, Rng& rng) {
  SampleNoise n;
  n.latent = standard_normal({c.latent_dim}, rng);
  n.weight = standard_normal({1, c.head_width(), 1, 1}, rng);
  return n;
}

Var predictive_mean(ForwardPass& fp, Var feats, const LatentVars& prior, const std::vector<SampleNoise>& noise) {
  std::vector<Var> probs;
  for (const auto& n : noise) {
    Var z = fp.sample_latent(prior, n.latent);
    Var w = fp.sample_weights(n.weight);
    probs.push_back(ops::sigmoid(fp.graph(), fp.decode(feats, z, w)));
  }
  return ops::average(fp.graph(), probs);
}

}  // namespace

Tensor estimate_pm(const ProbUNet& model, const ImagePatch& x, int k_samples, Rng& rng) {
  if (k_samples < 1) throw ConfigError("estimate_pm needs K >= 1");
  std::vector<SampleNoise> noise;
  for (int k = 0; k < k_samples; ++k) noise.push_back(draw_noise(model.config(), rng));
  Graph g;
  ForwardPass fp(g, model);
  Var xv = fp.image(x);
  Var pm = predictive_mean(fp, fp.features(xv), fp.prior(xv), noise);
  return g.value(pm).reshaped({x.height(), x.width()});
}

LossBreakdown total_loss(const Batch& batch, ProbUNet& model, const ObjectiveConfig& config, Rng& rng,
                         bool accumulate_gradients) {
  validate_batch(batch);
  if (config.beta < 0 || config.gamma < 0) throw ConfigError("beta and gamma must be nonnegative");
  if (config.k_samples < 1) throw ConfigError("K must be >= 1");
  if (!(config.dataset_size > 0)) throw ConfigError("dataset size N must be positive");
  const ModelConfig& mc = model.config();
  const auto images = batch.images();
  const double pairs = static_cast<double>(batch.entries.size());
  const double n_images = static_cast<double>(images.size());

  LossBreakdown out;
  for (const DatasetItem* item : images) {
    std::vector<int> annotations;
    std::vector<SampleNoise> recon_noise;
    for (const auto& e : batch.entries) {
      if (e.item != item) continue;
      annotations.push_back(e.annotation);
      recon_noise.push_back(draw_noise(mc, rng));
    }
    std::vector<SampleNoise> cal_noise;
    for (int k = 0; k < config.k_samples; ++k) cal_noise.push_back(draw_noise(mc, rng));

    Graph g;
    std::optional<ForwardPass> trainable;
    std::optional<ForwardPass> frozen;
    if (accumulate_gradients) {
      trainable.emplace(g, model);
    } else {
      frozen.emplace(g, static_cast<const ProbUNet&>(model));
    }
    ForwardPass& fp = accumulate_gradients ? *trainable : *frozen;

    Var x = fp.image(item->image);
    Var feats = fp.features(x);
    LatentVars prior = fp.prior(x);
    std::vector<std::pair<double, Var>> terms;
    for (std::size_t j = 0; j < annotations.size(); ++j) {
      const BinaryMask& y = item->annotations.masks[annotations[j]];
      LatentVars post = fp.posterior(x, fp.mask(y));
      Var z = fp.sample_latent(post, recon_noise[j].latent);
      Var w = fp.sample_weights(recon_noise[j].weight);
      Var nll = ops::bce_with_logits_sum(g, fp.decode(feats, z, w), y.to_tensor());
      Var kl = ops::gaussian_kl(g, post.mean, post.log_variance, prior.mean, prior.log_variance);
      out.reconstruction += g.value(nll)[0] / pairs;
      out.latent_kl += g.value(kl)[0] / pairs;
      terms.emplace_back(1.0 / pairs, nll);
      terms.emplace_back(config.beta / pairs, kl);
    }

    double calibration = 0.0;
    if (accumulate_gradients && config.gamma > 0.0) {
      Var pm = predictive_mean(fp, feats, prior, cal_noise);
      Var cal = ops::cross_entropy_mean(g, ops::reshape(g, pm, {mc.height, mc.width}), item->stats.mean_map, kProbabilityEps);
      calibration = g.value(cal)[0];
      terms.emplace_back(config.gamma / n_images, cal);
    } else {
      // No gradient needed: evaluate on a detached graph sharing the feature values.
      Graph detached;
      ForwardPass dfp(detached, static_cast<const ProbUNet&>(model));
      LatentVars dprior{detached.constant(g.value(prior.mean)), detached.constant(g.value(prior.log_variance))};
      Var pm = predictive_mean(dfp, detached.constant(g.value(feats)), dprior, cal_noise);
      calibration = calibration_loss(item->stats.mean_map, detached.value(pm).reshaped({mc.height, mc.width}));
    }
    out.calibration += calibration / n_images;

    if (accumulate_gradients) g.backward(ops::weighted_sum(g, terms));
  }

  {
    Graph g;
    std::optional<ForwardPass> trainable;
    std::optional<ForwardPass> frozen;
    if (accumulate_gradients) {
      trainable.emplace(g, model);
    } else {
      frozen.emplace(g, static_cast<const ProbUNet&>(model));
    }
    ForwardPass& fp = accumulate_gradients ? *trainable : *frozen;
    Var kl = ops::dropout_kl(g, fp.log_alpha());
    out.weight_kl = g.value(kl)[0];
    if (accumulate_gradients) g.backward(kl, 1.0 / config.dataset_size);
  }

  out.total = out.reconstruction + config.beta * out.latent_kl + out.weight_kl / config.dataset_size +
              config.gamma * out.calibration;
  return out;
}

}  // namespace calseg
