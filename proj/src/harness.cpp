#include "calseg/harness.hpp"

#include <malloc.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "calseg/errors.hpp"

namespace calseg {

using nlohmann::json;
namespace fs = std::filesystem;

TrainConfig TrainConfig::for_profile(const std::string& profile) {
  TrainConfig c;
  c.profile = profile;
  c.output_dir = "runs/" + profile;
  if (profile == "lidc") {
    c.epochs = 800;
    c.batch_size = 32;
    c.beta = 1.0;
    c.gamma = 100.0;
    c.learning_rate = 1e-6;
  } else if (profile == "miccai") {
    c.epochs = 1000;
    c.batch_size = 12;
    c.beta = 100.0;
    c.gamma = 100.0;
    c.learning_rate = 1e-4;
  } else if (profile == "desk") {
    c.epochs = 50;
    c.batch_size = 16;
    c.beta = 1.0;
    c.gamma = 100.0;
    c.learning_rate = 1e-4;
  } else {
    throw ConfigError("unknown profile '" + profile + "' (expected lidc, miccai or desk)");
  }
  return c;
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  TrainConfig c = for_profile(j.value("profile", std::string("desk")));
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "profile") continue;
      else if (key == "epochs") c.epochs = value.get<int>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "learning_rate") c.learning_rate = value.get<double>();
      else if (key == "beta") c.beta = value.get<double>();
      else if (key == "gamma") c.gamma = value.get<double>();
      else if (key == "latent_dim") c.latent_dim = value.get<int>();
      else if (key == "k_train") c.k_train = value.get<int>();
      else if (key == "s_eval") c.s_eval = value.get<int>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "manifest") c.manifest = value.get<std::string>();
      else if (key == "output_dir") c.output_dir = value.get<std::string>();
      else if (key == "base_width") c.base_width = value.get<int>();
      else if (key == "variational_dropout") c.variational_dropout = value.get<bool>();
      else if (key == "threads") c.threads = value.get<int>();
      else throw ConfigError("unknown config field '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("config field '" + key + "': " + e.what());
    }
  }
  return c;
}

json TrainConfig::to_json() const {
  return {{"profile", profile},     {"epochs", epochs},       {"batch_size", batch_size},
          {"learning_rate", learning_rate}, {"beta", beta},   {"gamma", gamma},
          {"latent_dim", latent_dim}, {"k_train", k_train},   {"s_eval", s_eval},
          {"seed", seed},           {"manifest", manifest},   {"output_dir", output_dir},
          {"base_width", base_width}, {"variational_dropout", variational_dropout}, {"threads", threads}};
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (beta < 0 || gamma < 0) throw ConfigError("beta and gamma must be nonnegative");
  if (k_train < 1 || s_eval < 1) throw ConfigError("k_train and s_eval must be >= 1");
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (threads < 0) throw ConfigError("threads must be >= 0");
}

std::vector<Batch> make_batches(std::span<const DatasetItem* const> images, int batch_size, Rng& rng) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<const DatasetItem*> order(images.begin(), images.end());
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    Batch b;
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    for (std::size_t i = start; i < end; ++i) {
      for (int j = 0; j < order[i]->annotations.grader_count(); ++j) b.entries.push_back({order[i], j});
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

void write_log_csv(const fs::path& path, const std::vector<LogRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,reconstruction,latent_kl,weight_kl,calibration,total,split\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.epoch << ',' << r.loss.reconstruction << ',' << r.loss.latent_kl << ',' << r.loss.weight_kl << ','
        << r.loss.calibration << ',' << r.loss.total << ',' << r.split << '\n';
  }
}

namespace {

class Adam {
 public:
  Adam(const ProbUNet& model, double lr) : lr_(lr) {
    for (const auto& p : model.parameters()) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }

  void step(ProbUNet& model) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, t_);
    const double c2 = 1.0 - std::pow(kBeta2, t_);
    auto& params = model.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
      Parameter& p = params[k];
      if (!model.is_trainable(p)) continue;
      Tensor& m = m_[k];
      Tensor& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
        p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
      }
    }
    model.project_parameters();
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double lr_;
  int t_ = 0;
  std::vector<Tensor> m_, v_;
};

void require_finite(const LossBreakdown& l, int epoch, const std::string& where) {
  const std::pair<const char*, double> terms[] = {{"reconstruction", l.reconstruction},
                                                  {"latent_kl", l.latent_kl},
                                                  {"weight_kl", l.weight_kl},
                                                  {"calibration", l.calibration},
                                                  {"total", l.total}};
  for (const auto& [name, value] : terms) {
    if (!std::isfinite(value)) {
      throw NumericalError("non-finite " + std::string(name) + " loss (" + std::to_string(value) + ") at epoch " +
                           std::to_string(epoch) + " on " + where);
    }
  }
}

// Per-image graphs allocate and free many feature-map-sized buffers; keep
// them on the heap instead of round-tripping through mmap/munmap.
void tune_allocator() {
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& l, double weight) {
  acc.reconstruction += weight * l.reconstruction;
  acc.latent_kl += weight * l.latent_kl;
  acc.weight_kl += weight * l.weight_kl;
  acc.calibration += weight * l.calibration;
  acc.total += weight * l.total;
}

}  // namespace

TrainResult train(const TrainConfig& config) {
  if (config.manifest.empty()) throw ConfigError("config.manifest is required");
  return train(config, load_dataset(config.manifest));
}

TrainResult train(const TrainConfig& config, const Dataset& dataset) {
  config.validate();
  tune_allocator();
  if (config.threads > 0) omp_set_num_threads(config.threads);
  const auto train_items = dataset.select(Split::train);
  const auto val_items = dataset.select(Split::val);
  if (train_items.empty()) throw ConfigError("dataset has no training images");

  ModelConfig mc;
  mc.height = dataset.height;
  mc.width = dataset.width;
  mc.base_width = config.base_width;
  mc.latent_dim = config.latent_dim;
  mc.variational_dropout = config.variational_dropout;
  mc.seed = config.seed;
  ProbUNet model(mc);
  Adam adam(model, config.learning_rate);

  ObjectiveConfig objective;
  objective.beta = config.beta;
  objective.gamma = config.gamma;
  objective.k_samples = config.k_train;
  objective.dataset_size = static_cast<double>(train_items.size()) * dataset.graders;

  const fs::path out_dir = config.output_dir;
  fs::create_directories(out_dir);
  {
    std::ofstream cfg(out_dir / "config.json");
    cfg << config.to_json().dump(2) << '\n';
  }
  TrainResult result;
  result.log = out_dir / "train_log.csv";
  result.checkpoint = out_dir / "best";

  Rng batch_rng = make_rng(config.seed, 1);
  Rng noise_rng = make_rng(config.seed, 2);
  double best = std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    LossBreakdown train_loss;
    for (const Batch& batch : make_batches(train_items, config.batch_size, batch_rng)) {
      model.zero_grad();
      const LossBreakdown l = total_loss(batch, model, objective, noise_rng, true);
      require_finite(l, epoch, "train batch");
      adam.step(model);
      accumulate(train_loss, l, static_cast<double>(batch.images().size()) / static_cast<double>(train_items.size()));
    }
    result.rows.push_back({epoch, "train", train_loss});

    double selection = train_loss.total;
    if (!val_items.empty()) {
      // Same noise every epoch so validation totals are comparable.
      Rng val_rng = make_rng(config.seed, 3);
      Rng order_rng = make_rng(config.seed, 4);
      LossBreakdown val_loss;
      for (const Batch& batch : make_batches(val_items, config.batch_size, order_rng)) {
        const LossBreakdown l = total_loss(batch, model, objective, val_rng, false);
        require_finite(l, epoch, "validation batch");
        accumulate(val_loss, l, static_cast<double>(batch.images().size()) / static_cast<double>(val_items.size()));
      }
      result.rows.push_back({epoch, "val", val_loss});
      selection = val_loss.total;
    }
    if (selection < best) {
      best = selection;
      model.save(result.checkpoint);
    }
    write_log_csv(result.log, result.rows);
  }
  model.save(out_dir / "last");
  return result;
}

MetricsReport evaluate(const fs::path& checkpoint, const fs::path& manifest, Split split, std::span<const std::uint64_t> seeds,
                       int samples, const fs::path& out, const std::string& label) {
  tune_allocator();
  const ProbUNet model = ProbUNet::load(checkpoint);
  const Dataset dataset = load_dataset(manifest);
  if (dataset.height != model.config().height || dataset.width != model.config().width) {
    throw ConfigError("checkpoint/architecture mismatch: model input " + std::to_string(model.config().height) + "x" +
                      std::to_string(model.config().width) + ", dataset " + std::to_string(dataset.height) + "x" +
                      std::to_string(dataset.width));
  }
  const auto items = dataset.select(split);
  MetricsReport report = evaluate_model(model, items, samples, seeds, label, to_string(split));
  if (!out.empty()) {
    fs::path json_path = out;
    json_path += ".json";
    fs::path csv_path = out;
    csv_path += ".csv";
    report.write_json(json_path);
    report.write_csv(csv_path);
  }
  return report;
}

}  // namespace calseg
