#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "calseg/datagen.hpp"
#include "calseg/model.hpp"

namespace calseg {

/// 1 - |a & b| / |a | b|; two empty masks are at distance 0.
double iou_distance(const BinaryMask& a, const BinaryMask& b);

/// 2 E[d(S, Y)] - E[d(S, S')] - E[d(Y, Y')] with every expectation taken as
/// the mean over all ordered pairs, diagonal included.
double ged_squared(std::span<const BinaryMask> samples, std::span<const BinaryMask> annotations);

struct NccResult {
  double value = 0.0;
  bool degenerate = false;  // one of the maps is constant; value is then 0
};

/// (1 / (n sa sb)) sum (a - mu_a)(b - mu_b) with population standard deviations.
NccResult ncc(const Tensor& a, const Tensor& b);

struct ImageMetrics {
  std::string id;
  std::uint64_t seed = 0;
  double ged_squared = 0.0;
  double ncc = 0.0;
  bool ncc_degenerate = false;
};

struct SeedSummary {
  std::uint64_t seed = 0;
  double ged_mean = 0.0;
  double ged_std = 0.0;
  double ncc_mean = 0.0;
  double ncc_std = 0.0;
  int ncc_degenerate = 0;
};

struct MetricSummary {
  double ged_mean = 0.0;
  double ged_std = 0.0;  // population std of the per-seed means
  double ncc_mean = 0.0;
  double ncc_std = 0.0;
};

struct MetricsReport {
  std::string label;
  std::string split;
  int samples = 0;
  std::vector<ImageMetrics> per_image;
  std::vector<SeedSummary> per_seed;
  MetricSummary aggregate;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
  /// Columns: id, ged_squared, ncc, seed.
  void write_csv(const std::filesystem::path& path) const;
  void write_json(const std::filesystem::path& path) const;
};

/// Fills per_seed and aggregate from per_image.
void summarize(MetricsReport& report, std::span<const std::uint64_t> seeds);

/// For every seed and image: draw `samples` prediction maps, binarize them for
/// GED^2 against the annotations, and correlate the aleatoric map with the
/// grader variance map. Images are evaluated in parallel with per-image rng
/// streams, so the report does not depend on the thread count.
MetricsReport evaluate_model(const ProbUNet& model, std::span<const DatasetItem* const> items, int samples,
                             std::span<const std::uint64_t> seeds, std::string label = "model",
                             std::string split = "test");

}  // namespace calseg
