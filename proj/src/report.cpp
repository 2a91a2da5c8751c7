#include "calseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "calseg/errors.hpp"

namespace calseg {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void blit_image(GrayImage& canvas, const Tensor& map, int row, int col, double scale) {
  const int h = map.dim(0), w = map.dim(1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = scale > 0.0 ? map.at(y, x) / scale : 0.0;
      canvas.pixels[static_cast<std::size_t>(row * h + y) * canvas.width + col * w + x] = to_byte(v);
    }
  }
}

void blit_mask(GrayImage& canvas, const BinaryMask& m, int row, int col) {
  const int h = m.height(), w = m.width();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      canvas.pixels[static_cast<std::size_t>(row * h + y) * canvas.width + col * w + x] =
          m[static_cast<std::size_t>(y) * w + x] ? 255 : 0;
    }
  }
}

}  // namespace

GrayImage render_sample_grid(const ImagePatch& x, std::span<const BinaryMask> annotations,
                             std::span<const BinaryMask> samples, const fs::path& path) {
  if (samples.empty()) throw ValidationError("render_sample_grid needs at least one sample");
  const int h = x.height(), w = x.width();
  auto check = [&](const BinaryMask& m) {
    if (m.height() != h || m.width() != w) throw ShapeError("render_sample_grid: mask does not match the input size");
  };
  std::for_each(annotations.begin(), annotations.end(), check);
  std::for_each(samples.begin(), samples.end(), check);

  const int cols = 1 + static_cast<int>(std::max(annotations.size(), samples.size()));
  GrayImage canvas{2 * h, cols * w, std::vector<std::uint8_t>(static_cast<std::size_t>(2 * h) * cols * w, 0)};
  blit_image(canvas, x.pixels, 0, 0, 1.0);
  blit_image(canvas, x.pixels, 1, 0, 1.0);
  for (std::size_t j = 0; j < annotations.size(); ++j) blit_mask(canvas, annotations[j], 0, 1 + static_cast<int>(j));
  for (std::size_t s = 0; s < samples.size(); ++s) blit_mask(canvas, samples[s], 1, 1 + static_cast<int>(s));
  write_png(path, canvas);
  return canvas;
}

double percentile(std::span<const Tensor* const> maps, double q) {
  std::vector<double> values;
  for (const Tensor* m : maps) values.insert(values.end(), m->data().begin(), m->data().end());
  if (values.empty()) return 0.0;
  const double rank = std::ceil(std::clamp(q, 0.0, 100.0) / 100.0 * static_cast<double>(values.size()));
  const std::size_t k = static_cast<std::size_t>(std::max(rank, 1.0)) - 1;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

GrayImage render_uncertainty_panel(const ImagePatch& x, const Tensor& gt_variance, const Tensor& aleatoric,
                                   const Tensor& epistemic, const fs::path& path) {
  const Shape hw{x.height(), x.width()};
  require_same_shape(gt_variance.shape(), hw, "render_uncertainty_panel (ground-truth variance)");
  require_same_shape(aleatoric.shape(), hw, "render_uncertainty_panel (aleatoric)");
  require_same_shape(epistemic.shape(), hw, "render_uncertainty_panel (epistemic)");

  const Tensor* shared[] = {&gt_variance, &aleatoric};
  const Tensor* own[] = {&epistemic};
  const double data_threshold = percentile(shared, 99.0);
  const double model_threshold = percentile(own, 99.0);

  const int h = x.height(), w = x.width();
  GrayImage canvas{h, 4 * w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * 4 * w, 0)};
  blit_image(canvas, x.pixels, 0, 0, 1.0);
  blit_image(canvas, gt_variance, 0, 1, data_threshold);
  blit_image(canvas, aleatoric, 0, 2, data_threshold);
  blit_image(canvas, epistemic, 0, 3, model_threshold);
  write_png(path, canvas);
  return canvas;
}

json emit_tables(std::span<const MetricsReport> reports, const fs::path& prefix) {
  if (reports.empty()) throw ValidationError("emit_tables needs at least one report");
  const MetricsReport& first = reports.front();
  json rows = json::array();
  for (const MetricsReport& r : reports) {
    if (r.split != first.split || r.samples != first.samples) {
      throw ValidationError("emit_tables: report '" + r.label + "' (split " + r.split + ", S=" +
                            std::to_string(r.samples) + ") is inconsistent with '" + first.label + "' (split " +
                            first.split + ", S=" + std::to_string(first.samples) + ")");
    }
    if (r.per_seed.empty()) throw ValidationError("emit_tables: report '" + r.label + "' has no seeds");
    rows.push_back({{"label", r.label},
                    {"split", r.split},
                    {"samples", r.samples},
                    {"seeds", r.per_seed.size()},
                    {"ged_squared_mean", r.aggregate.ged_mean},
                    {"ged_squared_std", r.aggregate.ged_std},
                    {"ncc_mean", r.aggregate.ncc_mean},
                    {"ncc_std", r.aggregate.ncc_std}});
  }
  json table = {{"rows", rows}};

  fs::path csv_path = prefix, json_path = prefix;
  csv_path += ".csv";
  json_path += ".json";
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot write " + csv_path.string());
  csv << "label,split,samples,seeds,ged_squared_mean,ged_squared_std,ncc_mean,ncc_std\n" << std::setprecision(17);
  for (const auto& row : rows) {
    csv << row["label"].get<std::string>() << ',' << row["split"].get<std::string>() << ',' << row["samples"].get<int>()
        << ',' << row["seeds"].get<int>() << ',' << row["ged_squared_mean"].get<double>() << ','
        << row["ged_squared_std"].get<double>() << ',' << row["ncc_mean"].get<double>() << ','
        << row["ncc_std"].get<double>() << '\n';
  }
  std::ofstream js(json_path);
  if (!js) throw IoError("cannot write " + json_path.string());
  js << std::setprecision(17) << table.dump(2) << '\n';
  return table;
}

}  // namespace calseg
