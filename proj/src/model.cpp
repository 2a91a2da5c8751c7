#include "calseg/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "calseg/dropout_kl.hpp"
#include "calseg/errors.hpp"

namespace calseg {

using nlohmann::json;
namespace fs = std::filesystem;

std::vector<int> ModelConfig::backbone_widths() const {
  return {base_width, base_width, 2 * base_width, 2 * base_width};
}

std::vector<int> ModelConfig::encoder_widths() const {
  const int half = std::max(1, base_width / 2);
  return {half, base_width, base_width, base_width};
}

void ModelConfig::validate() const {
  const int factor = 1 << (scales - 1);
  if (height < 8 || width < 8 || height % factor || width % factor) {
    throw ConfigError("model input " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be at least 8 and divisible by " + std::to_string(factor));
  }
  if (base_width < 1) throw ConfigError("base_width must be >= 1");
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (log_alpha_init < kLogAlphaMin || log_alpha_init > kLogAlphaMax) throw ConfigError("log_alpha_init outside clamp range");
}

json ModelConfig::to_json() const {
  return {{"height", height},
          {"width", width},
          {"base_width", base_width},
          {"latent_dim", latent_dim},
          {"variational_dropout", variational_dropout},
          {"log_alpha_init", log_alpha_init},
          {"seed", seed},
          {"scales", scales}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.base_width = j.at("base_width").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.variational_dropout = j.at("variational_dropout").get<bool>();
  c.log_alpha_init = j.at("log_alpha_init").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("scales") && j.at("scales").get<int>() != scales) throw ConfigError("checkpoint scale count mismatch");
  c.validate();
  return c;
}

ProbUNet::ProbUNet(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng = make_rng(config_.seed, 0xC0FFEE);
  auto he = [](int fan_in) { return std::sqrt(2.0 / fan_in); };
  const auto bw = config_.backbone_widths();
  const auto ew = config_.encoder_widths();
  const int latent = config_.latent_dim;

  for (int l = 0; l < ModelConfig::scales; ++l) {
    const int in = l == 0 ? 1 : bw[l - 1];
    add("backbone.enc" + std::to_string(l) + ".weight", {bw[l], in, 3, 3}, he(9 * in), rng);
    add("backbone.enc" + std::to_string(l) + ".bias", {bw[l]}, 0.0, rng);
  }
  for (int l = ModelConfig::scales - 2; l >= 0; --l) {
    const int in = bw[l + 1] + bw[l];
    add("backbone.dec" + std::to_string(l) + ".weight", {bw[l], in, 3, 3}, he(9 * in), rng);
    add("backbone.dec" + std::to_string(l) + ".bias", {bw[l]}, 0.0, rng);
  }
  for (const std::string net : {"prior", "posterior"}) {
    for (int l = 0; l < ModelConfig::scales; ++l) {
      const int in = l == 0 ? (net == "prior" ? 1 : 2) : ew[l - 1];
      add(net + ".enc" + std::to_string(l) + ".weight", {ew[l], in, 3, 3}, he(9 * in), rng);
      add(net + ".enc" + std::to_string(l) + ".bias", {ew[l]}, 0.0, rng);
    }
    add(net + ".latent.weight", {2 * latent, ew.back(), 1, 1}, std::sqrt(1.0 / ew.back()), rng);
    add(net + ".latent.bias", {2 * latent}, 0.0, rng);
  }
  const int f = bw[0], hw = config_.head_width();
  add("head.conv0.weight", {hw, f + latent, 1, 1}, he(f + latent), rng);
  add("head.conv0.bias", {hw}, 0.0, rng);
  add("head.conv1.weight", {hw, hw, 1, 1}, he(hw), rng);
  add("head.conv1.bias", {hw}, 0.0, rng);
  add("dropout.weight_means", {1, hw, 1, 1}, std::sqrt(1.0 / hw), rng);
  add("dropout.log_alpha", {1, hw, 1, 1}, 0.0, rng);
  add("head.out_bias", {1}, 0.0, rng);
  parameter("dropout.log_alpha").value.fill(config_.variational_dropout ? config_.log_alpha_init : kLogAlphaMin);
}

void ProbUNet::add(std::string name, Shape shape, double init_std, Rng& rng) {
  Tensor value(shape);
  if (init_std > 0.0) {
    std::normal_distribution<double> normal(0.0, init_std);
    for (auto& v : value.data()) v = normal(rng);
  }
  params_.emplace_back(std::move(name), std::move(value));
}

std::size_t ProbUNet::parameter_index(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  throw ConfigError("unknown parameter '" + std::string(name) + "'");
}

Parameter& ProbUNet::parameter(std::string_view name) { return params_[parameter_index(name)]; }
const Parameter& ProbUNet::parameter(std::string_view name) const { return params_[parameter_index(name)]; }

std::size_t ProbUNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

bool ProbUNet::is_trainable(const Parameter& p) const {
  return config_.variational_dropout || p.name != "dropout.log_alpha";
}

DropoutPosterior ProbUNet::dropout_posterior() const {
  DropoutPosterior d{parameter("dropout.weight_means").value, parameter("dropout.log_alpha").value};
  for (auto& v : d.log_alpha.data()) v = std::clamp(v, kLogAlphaMin, kLogAlphaMax);
  return d;
}

void ProbUNet::project_parameters() {
  for (auto& v : parameter("dropout.log_alpha").value.data()) v = std::clamp(v, kLogAlphaMin, kLogAlphaMax);
}

void ProbUNet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

namespace {

constexpr char kMagic[8] = {'C', 'A', 'L', 'S', 'E', 'G', 'C', 'K'};

template <class T>
void write_raw(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T read_raw(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError("truncated checkpoint");
  return v;
}

}  // namespace

void ProbUNet::save(const fs::path& stem) const {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  fs::path bin = stem;
  bin += ".bin";
  fs::path sidecar = stem;
  sidecar += ".json";
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw IoError("cannot write " + bin.string());
  out.write(kMagic, sizeof kMagic);
  write_raw(out, static_cast<std::uint32_t>(params_.size()));
  json layout = json::array();
  for (const auto& p : params_) {
    write_raw(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_raw(out, static_cast<std::uint32_t>(p.value.rank()));
    for (int d : p.value.shape()) write_raw(out, static_cast<std::int32_t>(d));
    out.write(reinterpret_cast<const char*>(p.value.data().data()),
              static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    layout.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  if (!out) throw IoError("failed writing " + bin.string());
  json meta{{"format", "calseg-checkpoint"}, {"version", 1}, {"model", config_.to_json()}, {"parameters", layout}};
  std::ofstream side(sidecar);
  if (!side) throw IoError("cannot write " + sidecar.string());
  side << meta.dump(2) << '\n';
}

ProbUNet ProbUNet::load(const fs::path& stem) {
  fs::path bin = stem;
  bin += ".bin";
  fs::path sidecar = stem;
  sidecar += ".json";
  std::ifstream side(sidecar);
  if (!side) throw IoError("missing file: " + sidecar.string());
  json meta;
  try {
    meta = json::parse(side);
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint sidecar " + sidecar.string() + ": " + e.what());
  }
  ProbUNet model(ModelConfig::from_json(meta.at("model")));
  std::ifstream in(bin, std::ios::binary);
  if (!in) throw IoError("missing file: " + bin.string());
  char magic[sizeof kMagic];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError(bin.string() + " is not a calseg checkpoint");
  const auto count = read_raw<std::uint32_t>(in);
  if (count != model.params_.size()) throw ConfigError("checkpoint/architecture mismatch: parameter count");
  for (auto& p : model.params_) {
    const auto len = read_raw<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = read_raw<std::uint32_t>(in);
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(read_raw<std::int32_t>(in));
    if (name != p.name || shape != p.value.shape()) {
      throw ConfigError("checkpoint/architecture mismatch at " + name + " " + shape_string(shape) + ", expected " + p.name +
                        " " + shape_string(p.value.shape()));
    }
    in.read(reinterpret_cast<char*>(p.value.data().data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint " + bin.string());
  }
  return model;
}

ForwardPass::ForwardPass(Graph& graph, ProbUNet& model)
    : graph_(graph), model_(model), trainable_(&model), bound_(model.parameters().size()) {}

ForwardPass::ForwardPass(Graph& graph, const ProbUNet& model)
    : graph_(graph), model_(model), trainable_(nullptr), bound_(model.parameters().size()) {}

Var ForwardPass::param(std::string_view name) {
  const std::size_t i = model_.parameter_index(name);
  if (!bound_[i]) {
    const Parameter& p = model_.parameters()[i];
    if (trainable_ != nullptr && model_.is_trainable(p)) {
      bound_[i] = graph_.parameter(trainable_->parameters()[i]);
    } else {
      bound_[i] = graph_.constant(p.value);
    }
  }
  return *bound_[i];
}

Var ForwardPass::image(const ImagePatch& x) {
  const auto& c = model_.config();
  if (x.pixels.rank() != 2 || x.height() != c.height || x.width() != c.width) {
    throw ShapeError("image " + x.id + " is " + shape_string(x.pixels.shape()) + ", model expects {" +
                     std::to_string(c.height) + "," + std::to_string(c.width) + "}");
  }
  return graph_.constant(x.pixels.reshaped({1, c.height, c.width}));
}

Var ForwardPass::mask(const BinaryMask& y) {
  const auto& c = model_.config();
  if (y.height() != c.height || y.width() != c.width) throw ShapeError("mask does not match model input size");
  return graph_.constant(y.to_tensor().reshaped({1, c.height, c.width}));
}

Var ForwardPass::features(Var x) {
  Graph& g = graph_;
  std::vector<Var> skips;
  Var h = x;
  for (int l = 0; l < ModelConfig::scales; ++l) {
    if (l > 0) h = ops::avg_pool2(g, h);
    const std::string n = "backbone.enc" + std::to_string(l);
    h = ops::relu(g, ops::conv2d(g, h, param(n + ".weight"), param(n + ".bias")));
    skips.push_back(h);
  }
  for (int l = ModelConfig::scales - 2; l >= 0; --l) {
    const std::string n = "backbone.dec" + std::to_string(l);
    h = ops::concat_channels(g, ops::upsample2(g, h), skips[l]);
    h = ops::relu(g, ops::conv2d(g, h, param(n + ".weight"), param(n + ".bias")));
  }
  return h;
}

LatentVars ForwardPass::encode(std::string_view prefix, Var input) {
  Graph& g = graph_;
  const std::string p(prefix);
  Var h = input;
  for (int l = 0; l < ModelConfig::scales; ++l) {
    if (l > 0) h = ops::avg_pool2(g, h);
    const std::string n = p + ".enc" + std::to_string(l);
    h = ops::relu(g, ops::conv2d(g, h, param(n + ".weight"), param(n + ".bias")));
  }
  Var pooled = ops::global_mean(g, h);
  pooled = ops::reshape(g, pooled, {static_cast<int>(g.value(pooled).size()), 1, 1});
  Var out = ops::conv2d(g, pooled, param(p + ".latent.weight"), param(p + ".latent.bias"));
  const int latent = model_.config().latent_dim;
  Var mean = ops::slice(g, out, 0, latent);
  Var logvar = ops::clamp(g, ops::slice(g, out, latent, latent), kLogVarianceMin, kLogVarianceMax);
  return {mean, logvar};
}

LatentVars ForwardPass::prior(Var x) { return encode("prior", x); }

LatentVars ForwardPass::posterior(Var x, Var y) { return encode("posterior", ops::concat_channels(graph_, x, y)); }

Var ForwardPass::sample_latent(const LatentVars& g, const Tensor& noise) {
  return ops::reparameterize(graph_, g.mean, g.log_variance, noise);
}

Var ForwardPass::log_alpha() { return ops::clamp(graph_, param("dropout.log_alpha"), kLogAlphaMin, kLogAlphaMax); }

Var ForwardPass::sample_weights(const Tensor& noise) {
  Var means = param("dropout.weight_means");
  if (!model_.config().variational_dropout) return means;
  return ops::multiplicative_noise(graph_, means, log_alpha(), noise);
}

Var ForwardPass::decode(Var features, Var z, Var w) {
  Graph& g = graph_;
  const Tensor& f = g.value(features);
  Var zmap = ops::broadcast_spatial(g, z, f.dim(1), f.dim(2));
  Var h = ops::concat_channels(g, features, zmap);
  h = ops::relu(g, ops::conv2d(g, h, param("head.conv0.weight"), param("head.conv0.bias")));
  h = ops::relu(g, ops::conv2d(g, h, param("head.conv1.weight"), param("head.conv1.bias")));
  return ops::conv2d(g, h, w, param("head.out_bias"));
}

LatentGaussian prior_params(const ProbUNet& model, const ImagePatch& x) {
  Graph g;
  ForwardPass fp(g, model);
  LatentVars v = fp.prior(fp.image(x));
  return {g.value(v.mean), g.value(v.log_variance)};
}

LatentGaussian posterior_params(const ProbUNet& model, const ImagePatch& x, const BinaryMask& y) {
  Graph g;
  ForwardPass fp(g, model);
  LatentVars v = fp.posterior(fp.image(x), fp.mask(y));
  return {g.value(v.mean), g.value(v.log_variance)};
}

Tensor sample_latent(const LatentGaussian& g, const Tensor& noise) {
  require_same_shape(g.mean.shape(), g.log_variance.shape(), "sample_latent");
  if (noise.size() != g.mean.size()) throw ShapeError("sample_latent: noise length");
  Tensor z(g.mean.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = g.mean[i] + std::exp(0.5 * g.log_variance[i]) * noise[i];
  return z;
}

Tensor sample_weights(const DropoutPosterior& d, const Tensor& noise) {
  require_same_shape(d.weight_means.shape(), d.log_alpha.shape(), "sample_weights");
  if (noise.size() != d.weight_means.size()) throw ShapeError("sample_weights: noise shape");
  Tensor w(d.weight_means.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double la = std::clamp(d.log_alpha[i], kLogAlphaMin, kLogAlphaMax);
    w[i] = d.weight_means[i] * (1.0 + std::exp(0.5 * la) * noise[i]);
  }
  return w;
}

Tensor decode(const ProbUNet& model, const ImagePatch& x, const Tensor& z, const Tensor& w) {
  const auto& c = model.config();
  if (z.size() != static_cast<std::size_t>(c.latent_dim)) throw ShapeError("decode: latent length");
  if (w.size() != static_cast<std::size_t>(c.head_width())) throw ShapeError("decode: weight tensor size");
  Graph g;
  ForwardPass fp(g, model);
  Var feats = fp.features(fp.image(x));
  Var zv = g.constant(z.reshaped({c.latent_dim}));
  Var wv = g.constant(w.reshaped({1, c.head_width(), 1, 1}));
  return g.value(fp.decode(feats, zv, wv)).reshaped({c.height, c.width});
}

}  // namespace calseg
