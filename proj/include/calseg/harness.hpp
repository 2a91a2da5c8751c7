#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "calseg/datagen.hpp"
#include "calseg/metrics.hpp"
#include "calseg/model.hpp"
#include "calseg/objectives.hpp"

namespace calseg {

struct TrainConfig {
  std::string profile = "desk";
  int epochs = 50;
  int batch_size = 16;  // images; each contributes all of its annotations
  double learning_rate = 1e-4;
  double beta = 1.0;
  double gamma = 100.0;
  int latent_dim = 6;
  int k_train = 4;
  int s_eval = 50;
  std::uint64_t seed = 0;
  std::string manifest;
  std::string output_dir = "runs/desk";
  int base_width = 16;
  bool variational_dropout = true;
  int threads = 0;  // 0: OpenMP default

  /// Defaults of a named profile: "lidc", "miccai" or "desk".
  static TrainConfig for_profile(const std::string& profile);
  /// Applies `j` on top of the defaults of j["profile"] (or "desk").
  /// Unknown keys raise ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  void validate() const;
};

/// Images shuffled by rng; each batch holds every (image, annotation) pair
/// of up to batch_size images.
std::vector<Batch> make_batches(std::span<const DatasetItem* const> images, int batch_size, Rng& rng);

struct LogRow {
  int epoch = 0;
  std::string split;
  LossBreakdown loss;
};

struct TrainResult {
  std::filesystem::path checkpoint;  // stem of the best-validation checkpoint
  std::filesystem::path log;
  std::vector<LogRow> rows;
};

/// Adam on total_loss. Writes <output_dir>/{config.json, train_log.csv,
/// best.{bin,json}, last.{bin,json}}. Aborts with NumericalError naming the
/// first non-finite loss term.
TrainResult train(const TrainConfig& config);
TrainResult train(const TrainConfig& config, const Dataset& dataset);

/// Loads the checkpoint, evaluates `split` of the manifest's dataset with S
/// samples per image for each seed, and writes <out>.json and <out>.csv when
/// `out` is non-empty.
MetricsReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest, Split split,
                       std::span<const std::uint64_t> seeds, int samples, const std::filesystem::path& out,
                       const std::string& label);

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows);

}  // namespace calseg
