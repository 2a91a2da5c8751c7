#pragma once

// Synthetic multi-grader segmentation data, grader statistics, and the
// on-disk dataset format (8-bit PNGs plus a JSON manifest).

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "calseg/tensor.hpp"

namespace calseg {

/// H x W mask holding only 0 and 1.
class BinaryMask {
 public:
  BinaryMask() = default;
  BinaryMask(int height, int width);
  /// Throws ValidationError unless every value is exactly 0 or 1.
  BinaryMask(int height, int width, std::vector<std::uint8_t> values);
  static BinaryMask from_tensor(const Tensor& map);

  int height() const { return height_; }
  int width() const { return width_; }
  std::size_t size() const { return values_.size(); }
  std::uint8_t operator[](std::size_t i) const { return values_[i]; }
  void set(std::size_t i, bool on) { values_[i] = on ? 1 : 0; }
  std::span<const std::uint8_t> values() const { return values_; }
  std::size_t count() const;
  /// {H, W} tensor of 0.0 / 1.0.
  Tensor to_tensor() const;

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> values_;
};

struct ImagePatch {
  std::string id;
  Tensor pixels;  // {H, W}, values in [0, 1]

  int height() const { return pixels.dim(0); }
  int width() const { return pixels.dim(1); }
  friend bool operator==(const ImagePatch&, const ImagePatch&) = default;
};

/// Throws ValidationError for H or W < 8 or intensities outside [0, 1].
void validate_image(const ImagePatch& image);

struct AnnotationSet {
  std::vector<BinaryMask> masks;

  int grader_count() const { return static_cast<int>(masks.size()); }
  friend bool operator==(const AnnotationSet&, const AnnotationSet&) = default;
};

struct GraderStats {
  Tensor mean_map;      // p_g, {H, W}
  Tensor variance_map;  // population variance over graders, {H, W}
  friend bool operator==(const GraderStats&, const GraderStats&) = default;
};

enum class Split { train, val, test };

const char* to_string(Split split);
Split parse_split(const std::string& text);

struct DatasetItem {
  ImagePatch image;
  AnnotationSet annotations;
  GraderStats stats;
  Split split = Split::train;
  friend bool operator==(const DatasetItem&, const DatasetItem&) = default;
};

struct Dataset {
  int height = 0;
  int width = 0;
  int graders = 0;
  std::vector<DatasetItem> items;

  std::vector<const DatasetItem*> select(Split split) const;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GeneratorConfig {
  int n_images = 100;
  int graders = 4;
  double disagreement = 0.5;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 0;
  double train_fraction = 0.70;
  double val_fraction = 0.15;
};

/// Each image holds 1-3 soft elliptical blobs on a noisy background. Grader j
/// thresholds the shared soft mask after shifting its boundary by an offset
/// drawn uniformly from [-r, r], r = disagreement * 0.1 * min(H, W) pixels.
/// Deterministic in the seed; images are quantized to multiples of 1/255 so
/// that the PNG round trip is exact.
Dataset generate_dataset(const GeneratorConfig& config);

/// mean_map = (1/D) sum_j y_j, variance_map = (1/D) sum_j (y_j - mean)^2.
GraderStats grader_stats(const AnnotationSet& annotations);

/// Writes <dir>/images/*.png, <dir>/masks/*.png and <dir>/manifest.json;
/// returns the manifest path.
std::filesystem::path save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace calseg
