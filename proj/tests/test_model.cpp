#include <doctest.h>

#include <fstream>

#include <json.hpp>

#include "calseg/dropout_kl.hpp"
#include "calseg/errors.hpp"
#include "calseg/model.hpp"
#include "calseg/objectives.hpp"
#include "helpers.hpp"

using namespace calseg;

namespace {

ModelConfig tiny_config(bool dropout = true) {
  ModelConfig c;
  c.height = 16;
  c.width = 8;
  c.base_width = 4;
  c.latent_dim = 3;
  c.variational_dropout = dropout;
  c.seed = 11;
  return c;
}

ImagePatch random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {"x" + std::to_string(seed), testing::random_map(h, w, rng)};
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.height = 12;
  CHECK_THROWS_AS(ProbUNet{c}, ConfigError);
  c = tiny_config();
  c.log_alpha_init = 5.0;
  CHECK_THROWS_AS(ProbUNet{c}, ConfigError);
  CHECK(ModelConfig::from_json(tiny_config().to_json()).to_json() == tiny_config().to_json());
}

TEST_CASE("initialization is deterministic in the seed") {
  const ProbUNet a(tiny_config()), b(tiny_config());
  ModelConfig other = tiny_config();
  other.seed = 12;
  const ProbUNet c(other);
  bool any_diff = false;
  for (std::size_t k = 0; k < a.parameters().size(); ++k) {
    CHECK(a.parameters()[k].value == b.parameters()[k].value);
    any_diff = any_diff || !(a.parameters()[k].value == c.parameters()[k].value);
  }
  CHECK(any_diff);
  const auto posterior = a.dropout_posterior();
  for (double v : posterior.log_alpha.data()) CHECK(v == -4.0);
}

TEST_CASE("prior and posterior nets") {
  const ProbUNet model(tiny_config());
  const ImagePatch x = random_image(16, 8, 1);
  std::mt19937_64 rng(2);
  const BinaryMask y = testing::random_mask(16, 8, rng);

  const LatentGaussian p1 = prior_params(model, x), p2 = prior_params(model, x);
  CHECK(p1.mean == p2.mean);
  CHECK(p1.log_variance == p2.log_variance);
  CHECK(p1.mean.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::isfinite(p1.mean[i]));
    CHECK(p1.log_variance[i] >= kLogVarianceMin);
    CHECK(p1.log_variance[i] <= kLogVarianceMax);
  }

  const LatentGaussian q = posterior_params(model, x, y);
  CHECK(posterior_params(model, x, y).mean == q.mean);
  const double kl = gaussian_kl(q, p1);
  CHECK(std::isfinite(kl));
  CHECK(kl >= 0.0);

  BinaryMask flipped(16, 8);
  for (std::size_t i = 0; i < y.size(); ++i) flipped.set(i, y[i] == 0);
  CHECK_FALSE(posterior_params(model, x, flipped).mean == q.mean);

  CHECK_THROWS_AS(prior_params(model, random_image(8, 8, 3)), ShapeError);
  CHECK_THROWS_AS(posterior_params(model, x, BinaryMask(8, 8)), ShapeError);
}

TEST_CASE("sample_latent") {
  const LatentGaussian g{Tensor({3}, {0.5, -1.0, 2.0}), Tensor({3}, {0.0, 0.0, 0.0})};
  CHECK(sample_latent(g, Tensor({3})) == g.mean);
  const Tensor z = sample_latent(g, Tensor({3}, {1.0, 0.0, 0.0}));
  CHECK(z[0] == 1.5);
  CHECK(z[1] == -1.0);
  CHECK_THROWS_AS(sample_latent(g, Tensor({2})), ShapeError);

  // Monte-Carlo variance of 1e5 reparameterized draws.
  const LatentGaussian h{Tensor({2}, {0.3, -0.2}), Tensor({2}, {-1.2, 0.8})};
  Rng rng = make_rng(4);
  double s[2] = {0, 0}, ss[2] = {0, 0};
  const int n = 100000;
  for (int k = 0; k < n; ++k) {
    const Tensor zz = sample_latent(h, standard_normal({2}, rng));
    for (int d = 0; d < 2; ++d) {
      s[d] += zz[d];
      ss[d] += zz[d] * zz[d];
    }
  }
  for (int d = 0; d < 2; ++d) {
    const double var = ss[d] / n - (s[d] / n) * (s[d] / n);
    CHECK(std::abs(var / std::exp(h.log_variance[d]) - 1.0) < 0.05);
  }
}

TEST_CASE("sample_weights") {
  DropoutPosterior d{Tensor({1, 2, 1, 1}, {0.4, -0.7}), Tensor({1, 2, 1, 1}, {-1.0, -3.0})};
  CHECK(sample_weights(d, Tensor({1, 2, 1, 1})) == d.weight_means);
  CHECK_THROWS_AS(sample_weights(d, Tensor({1, 3, 1, 1})), ShapeError);

  DropoutPosterior quiet{d.weight_means, Tensor({1, 2, 1, 1}, kLogAlphaMin)};
  for (double e : {-1.0, -0.5, 0.5, 1.0}) {
    const Tensor w = sample_weights(quiet, Tensor({1, 2, 1, 1}, e));
    for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(w[i] / d.weight_means[i] - 1.0) <= 0.02);
  }

  Rng rng = make_rng(5);
  const int n = 100000;
  double s[2] = {0, 0}, ss[2] = {0, 0};
  for (int k = 0; k < n; ++k) {
    const Tensor w = sample_weights(d, standard_normal({1, 2, 1, 1}, rng));
    for (int i = 0; i < 2; ++i) {
      s[i] += w[i];
      ss[i] += w[i] * w[i];
    }
  }
  for (int i = 0; i < 2; ++i) {
    const double mean = s[i] / n, var = ss[i] / n - mean * mean;
    const double m = d.weight_means[i];
    CHECK(std::abs(var / (m * m) / std::exp(d.log_alpha[i]) - 1.0) < 0.05);
  }
}

TEST_CASE("decode") {
  ProbUNet model(tiny_config());
  model.parameter("head.out_bias").value[0] = 0.37;
  const ImagePatch x = random_image(16, 8, 6);
  const Tensor z({3}, {0.1, -0.4, 0.8});

  const Tensor zero_w({1, 4, 1, 1});
  const Tensor flat = decode(model, x, z, zero_w);
  CHECK(flat.shape() == Shape{16, 8});
  for (double v : flat.data()) CHECK(v == doctest::Approx(0.37));

  const Tensor w = model.dropout_posterior().weight_means;
  const Tensor logits = decode(model, x, z, w);
  for (double v : logits.data()) {
    const double p = 1.0 / (1.0 + std::exp(-v));
    CHECK(p > 0.0);
    CHECK(p < 1.0);
  }
  CHECK_THROWS_AS(decode(model, x, Tensor({2}), w), ShapeError);
  CHECK_THROWS_AS(decode(model, x, z, Tensor({1, 3, 1, 1})), ShapeError);

  // d(sum of logits)/dz against central differences. At step 1e-3 some head
  // ReLUs change side and the difference quotient is off by ~0.3%.
  Graph g;
  ForwardPass fp(g, static_cast<const ProbUNet&>(model));
  Var xv = fp.image(x);
  Var zv = g.variable(z);
  Var out = fp.decode(fp.features(xv), zv, g.constant(w));
  double total = 0.0;
  for (double v : g.value(out).data()) total += v;
  Var sum = g.record(Tensor({1}, {total}), {out}, [out](Graph& gr) {
    const double seed = gr.grad(Var{gr.size() - 1})[0];
    for (auto& v : gr.grad(out).data()) v += seed;
  });
  g.backward(sum);
  const double h = 1e-6;
  for (int l = 0; l < 3; ++l) {
    Tensor zp = z, zm = z;
    zp[l] += h;
    zm[l] -= h;
    const Tensor lp = decode(model, x, zp, w), lm = decode(model, x, zm, w);
    double fp_sum = 0.0, fm_sum = 0.0;
    for (double v : lp.data()) fp_sum += v;
    for (double v : lm.data()) fm_sum += v;
    const double fd = (fp_sum - fm_sum) / (2 * h);
    const double an = g.grad(zv)[l];
    CAPTURE(fd);
    CAPTURE(an);
    CHECK(std::abs(fd - an) <= 1e-4 * std::max(std::abs(fd), 1e-8));
  }
}

TEST_CASE("dropout off: log_alpha frozen at the floor and sampled weights are the means") {
  ProbUNet model(tiny_config(false));
  const Parameter& la = model.parameter("dropout.log_alpha");
  CHECK_FALSE(model.is_trainable(la));
  CHECK(model.is_trainable(model.parameter("dropout.weight_means")));
  for (double v : la.value.data()) CHECK(v == kLogAlphaMin);
  Graph g;
  ForwardPass fp(g, model);
  Rng rng = make_rng(7);
  Var w = fp.sample_weights(standard_normal({1, 4, 1, 1}, rng));
  CHECK(g.value(w) == model.parameter("dropout.weight_means").value);
}

TEST_CASE("project_parameters clamps log_alpha") {
  ProbUNet model(tiny_config());
  auto& la = model.parameter("dropout.log_alpha").value;
  la[0] = -20.0;
  la[1] = 7.0;
  model.project_parameters();
  CHECK(la[0] == kLogAlphaMin);
  CHECK(la[1] == kLogAlphaMax);
}

TEST_CASE("checkpoint round trip and architecture mismatch") {
  const auto dir = testing::scratch_dir("ckpt");
  ProbUNet model(tiny_config());
  model.parameter("head.out_bias").value[0] = 1.25;
  model.save(dir / "m");
  const ProbUNet back = ProbUNet::load(dir / "m");
  CHECK(back.config().to_json() == model.config().to_json());
  for (std::size_t k = 0; k < model.parameters().size(); ++k) {
    CHECK(back.parameters()[k].name == model.parameters()[k].name);
    CHECK(back.parameters()[k].value == model.parameters()[k].value);
  }

  // Sidecar claiming a different architecture than the binary holds.
  nlohmann::json side;
  std::ifstream(dir / "m.json") >> side;
  side["model"]["base_width"] = 6;
  std::ofstream(dir / "m.json") << side.dump();
  CHECK_THROWS_AS(ProbUNet::load(dir / "m"), ConfigError);
  CHECK_THROWS_AS(ProbUNet::load(dir / "absent"), IoError);
  std::filesystem::remove_all(dir);
}
