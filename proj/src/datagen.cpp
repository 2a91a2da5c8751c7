#include "calseg/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "calseg/errors.hpp"
#include "calseg/png_io.hpp"

namespace calseg {

namespace fs = std::filesystem;
using nlohmann::json;

BinaryMask::BinaryMask(int height, int width)
    : height_(height), width_(width), values_(static_cast<std::size_t>(height) * width, 0) {}

BinaryMask::BinaryMask(int height, int width, std::vector<std::uint8_t> values)
    : height_(height), width_(width), values_(std::move(values)) {
  if (values_.size() != static_cast<std::size_t>(height) * width) throw ShapeError("mask size does not match H x W");
  for (auto v : values_) {
    if (v > 1) throw ValidationError("mask value " + std::to_string(v) + " is not binary");
  }
}

BinaryMask BinaryMask::from_tensor(const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("mask tensor must be {H, W}");
  std::vector<std::uint8_t> v(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (map[i] == 0.0) {
      v[i] = 0;
    } else if (map[i] == 1.0) {
      v[i] = 1;
    } else {
      throw ValidationError("mask value " + std::to_string(map[i]) + " is not binary");
    }
  }
  return BinaryMask(map.dim(0), map.dim(1), std::move(v));
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(values_.begin(), values_.end(), std::uint8_t{1}));
}

Tensor BinaryMask::to_tensor() const {
  Tensor t({height_, width_});
  for (std::size_t i = 0; i < values_.size(); ++i) t[i] = values_[i];
  return t;
}

void validate_image(const ImagePatch& image) {
  if (image.pixels.rank() != 2 || image.height() < 8 || image.width() < 8) {
    throw ValidationError("image " + image.id + " must be {H, W} with H, W >= 8");
  }
  for (double v : image.pixels.data()) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw ValidationError("image " + image.id + " intensity outside [0, 1]");
  }
}

const char* to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw ValidationError("unknown split '" + text + "'");
}

std::vector<const DatasetItem*> Dataset::select(Split split) const {
  std::vector<const DatasetItem*> out;
  for (const auto& item : items) {
    if (item.split == split) out.push_back(&item);
  }
  return out;
}

GraderStats grader_stats(const AnnotationSet& annotations) {
  const int d = annotations.grader_count();
  if (d < 1) throw ValidationError("annotation set needs at least one grader mask");
  const int h = annotations.masks[0].height(), w = annotations.masks[0].width();
  for (const auto& m : annotations.masks) {
    if (m.height() != h || m.width() != w) throw ShapeError("grader masks differ in size");
  }
  GraderStats stats{Tensor({h, w}), Tensor({h, w})};
  const std::size_t n = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < n; ++p) {
    double sum = 0.0;
    for (const auto& m : annotations.masks) sum += m[p];
    const double mean = sum / d;
    double var = 0.0;
    for (const auto& m : annotations.masks) var += (m[p] - mean) * (m[p] - mean);
    stats.mean_map[p] = mean;
    stats.variance_map[p] = var / d;
  }
  return stats;
}

namespace {

struct Blob {
  double cy, cx, a, b, cos_t, sin_t, contrast;

  // Positive inside; roughly the distance to the boundary in pixels.
  double signed_distance(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = cos_t * dx + sin_t * dy;
    const double v = -sin_t * dx + cos_t * dy;
    const double rho = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
    return (1.0 - rho) * std::sqrt(a * b);
  }
};

constexpr double kEdgeSoftness = 1.0;  // pixels
constexpr double kNoiseSigma = 0.05;

DatasetItem generate_item(const GeneratorConfig& cfg, int index) {
  Rng rng = make_rng(cfg.seed, static_cast<std::uint64_t>(index) + 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const int h = cfg.height, w = cfg.width;
  const double side = std::min(h, w);

  const int n_blobs = 1 + static_cast<int>(std::min(2.0, std::floor(3.0 * unit(rng))));
  std::vector<Blob> blobs;
  for (int b = 0; b < n_blobs; ++b) {
    const double theta = uniform(0.0, std::numbers::pi);
    blobs.push_back(Blob{uniform(0.25, 0.75) * h, uniform(0.25, 0.75) * w,
                         std::max(1.5, uniform(0.08, 0.2) * side), std::max(1.5, uniform(0.08, 0.2) * side),
                         std::cos(theta), std::sin(theta), uniform(0.35, 0.6)});
  }
  const double background = uniform(0.1, 0.3);
  const double radius = cfg.disagreement * 0.1 * side;
  std::vector<double> offsets(static_cast<std::size_t>(cfg.graders));
  for (auto& o : offsets) o = uniform(-radius, radius);

  std::normal_distribution<double> noise(0.0, kNoiseSigma);
  DatasetItem item;
  char id[32];
  std::snprintf(id, sizeof id, "img_%05d", index);
  item.image.id = id;
  item.image.pixels = Tensor({h, w});
  std::vector<std::vector<std::uint8_t>> masks(offsets.size(), std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double py = y + 0.5, px = x + 0.5;
      double sd = -std::numeric_limits<double>::infinity();
      double intensity = background;
      for (const auto& blob : blobs) {
        const double d = blob.signed_distance(py, px);
        sd = std::max(sd, d);
        intensity += blob.contrast / (1.0 + std::exp(-d / kEdgeSoftness));
      }
      intensity = std::clamp(intensity + noise(rng), 0.0, 1.0);
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      item.image.pixels[p] = std::round(intensity * 255.0) / 255.0;
      for (std::size_t j = 0; j < offsets.size(); ++j) masks[j][p] = sd + offsets[j] >= 0.0 ? 1 : 0;
    }
  }
  for (auto& m : masks) item.annotations.masks.emplace_back(h, w, std::move(m));
  item.stats = grader_stats(item.annotations);
  return item;
}

}  // namespace

Dataset generate_dataset(const GeneratorConfig& cfg) {
  if (cfg.n_images < 1) throw ConfigError("n_images must be >= 1");
  if (cfg.graders < 1) throw ConfigError("grader count must be >= 1");
  if (cfg.height < 8 || cfg.width < 8) throw ConfigError("image size must be at least 8 x 8");
  if (!(cfg.disagreement >= 0.0 && cfg.disagreement <= 1.0)) throw ConfigError("disagreement must lie in [0, 1]");
  if (cfg.train_fraction < 0 || cfg.val_fraction < 0 || cfg.train_fraction + cfg.val_fraction > 1.0) {
    throw ConfigError("split fractions must be nonnegative and sum to at most 1");
  }
  Dataset ds;
  ds.height = cfg.height;
  ds.width = cfg.width;
  ds.graders = cfg.graders;
  ds.items.resize(static_cast<std::size_t>(cfg.n_images));
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < cfg.n_images; ++i) ds.items[i] = generate_item(cfg, i);

  std::vector<int> order(static_cast<std::size_t>(cfg.n_images));
  std::iota(order.begin(), order.end(), 0);
  Rng split_rng = make_rng(cfg.seed, 0);
  std::shuffle(order.begin(), order.end(), split_rng);
  const int n_train = static_cast<int>(std::lround(cfg.train_fraction * cfg.n_images));
  const int n_val = std::min(cfg.n_images - n_train, static_cast<int>(std::lround(cfg.val_fraction * cfg.n_images)));
  for (int k = 0; k < cfg.n_images; ++k) {
    ds.items[order[k]].split = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
  }
  return ds;
}

namespace {

GrayImage to_gray(const Tensor& map, double scale) {
  GrayImage img{map.dim(0), map.dim(1), std::vector<std::uint8_t>(map.size())};
  for (std::size_t i = 0; i < map.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(map[i] * scale), 0L, 255L));
  }
  return img;
}

GrayImage read_checked(const fs::path& path, int height, int width) {
  if (!fs::exists(path)) throw IoError("missing file: " + path.string());
  GrayImage img = read_png(path);
  if (img.height != height || img.width != width) {
    throw ShapeError(path.string() + " is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     ", manifest says " + std::to_string(height) + "x" + std::to_string(width));
  }
  return img;
}

}  // namespace

fs::path save_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  json manifest;
  manifest["height"] = dataset.height;
  manifest["width"] = dataset.width;
  manifest["graders"] = dataset.graders;
  manifest["items"] = json::array();
  for (const auto& item : dataset.items) {
    const std::string image_rel = "images/" + item.image.id + ".png";
    write_png(dir / image_rel, to_gray(item.image.pixels, 255.0));
    json masks = json::array();
    for (int j = 0; j < item.annotations.grader_count(); ++j) {
      const std::string rel = "masks/" + item.image.id + "_g" + std::to_string(j) + ".png";
      write_png(dir / rel, to_gray(item.annotations.masks[j].to_tensor(), 255.0));
      masks.push_back(rel);
    }
    manifest["items"].push_back({{"id", item.image.id}, {"image", image_rel}, {"masks", masks}, {"split", to_string(item.split)}});
  }
  const fs::path path = dir / "manifest.json";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << manifest.dump(2) << '\n';
  return path;
}

Dataset load_dataset(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError("missing file: " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  const fs::path root = manifest_path.parent_path();
  Dataset ds;
  try {
    ds.height = manifest.at("height").get<int>();
    ds.width = manifest.at("width").get<int>();
    ds.graders = manifest.value("graders", 0);
    for (const auto& entry : manifest.at("items")) {
      DatasetItem item;
      item.image.id = entry.at("id").get<std::string>();
      item.split = parse_split(entry.at("split").get<std::string>());
      const GrayImage img = read_checked(root / entry.at("image").get<std::string>(), ds.height, ds.width);
      item.image.pixels = Tensor({ds.height, ds.width});
      for (std::size_t i = 0; i < img.pixels.size(); ++i) item.image.pixels[i] = img.pixels[i] / 255.0;
      const auto& masks = entry.at("masks");
      if (ds.graders == 0) ds.graders = static_cast<int>(masks.size());
      if (static_cast<int>(masks.size()) != ds.graders) {
        throw ValidationError("item " + item.image.id + " has " + std::to_string(masks.size()) + " masks, manifest expects " +
                              std::to_string(ds.graders));
      }
      for (const auto& rel : masks) {
        const fs::path path = root / rel.get<std::string>();
        const GrayImage m = read_checked(path, ds.height, ds.width);
        std::vector<std::uint8_t> bits(m.pixels.size());
        for (std::size_t i = 0; i < bits.size(); ++i) {
          const std::uint8_t v = m.pixels[i];
          if (v != 0 && v != 255) {
            throw ValidationError("non-binary mask pixel value " + std::to_string(v) + " in " + path.string());
          }
          bits[i] = v >= 128 ? 1 : 0;
        }
        item.annotations.masks.emplace_back(ds.height, ds.width, std::move(bits));
      }
      if (item.annotations.grader_count() < 1) throw ValidationError("item " + item.image.id + " has no masks");
      item.stats = grader_stats(item.annotations);
      ds.items.push_back(std::move(item));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace calseg
