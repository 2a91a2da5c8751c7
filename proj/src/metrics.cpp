#include "calseg/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "calseg/errors.hpp"
#include "calseg/kernels.hpp"
#include "calseg/uncertainty.hpp"

namespace calseg {

using nlohmann::json;

double iou_distance(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) throw ShapeError("iou_distance: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] & b[i];
    uni += a[i] | b[i];
  }
  return uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

std::vector<std::uint8_t> flatten(std::span<const BinaryMask> masks, int height, int width) {
  std::vector<std::uint8_t> out;
  out.reserve(masks.size() * static_cast<std::size_t>(height) * width);
  for (const auto& m : masks) {
    if (m.height() != height || m.width() != width) throw ShapeError("ged_squared: mask sizes differ");
    out.insert(out.end(), m.values().begin(), m.values().end());
  }
  return out;
}

double mean_pairwise(const std::vector<std::uint8_t>& a, int na, const std::vector<std::uint8_t>& b, int nb, int pixels) {
  std::vector<double> d(static_cast<std::size_t>(na) * nb);
  kernels::parallel::pairwise_iou_distance(a, na, b, nb, pixels, d);
  double s = 0.0;
  for (double v : d) s += v;
  return s / (static_cast<double>(na) * nb);
}

double population_std(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

double ged_squared(std::span<const BinaryMask> samples, std::span<const BinaryMask> annotations) {
  if (samples.empty() || annotations.empty()) throw ValidationError("ged_squared needs at least one sample and one annotation");
  const int h = samples[0].height(), w = samples[0].width();
  const auto s = flatten(samples, h, w);
  const auto y = flatten(annotations, h, w);
  const int ns = static_cast<int>(samples.size()), ny = static_cast<int>(annotations.size()), px = h * w;
  return 2.0 * mean_pairwise(s, ns, y, ny, px) - mean_pairwise(s, ns, s, ns, px) - mean_pairwise(y, ny, y, ny, px);
}

NccResult ncc(const Tensor& a, const Tensor& b) {
  require_same_shape(a.shape(), b.shape(), "ncc");
  if (a.empty()) throw ShapeError("ncc of empty maps");
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  const double sa = std::sqrt(saa / n), sb = std::sqrt(sbb / n);
  // Constant up to rounding noise counts as constant.
  const double tiny = 1e-12;
  if (sa <= tiny * (std::abs(ma) + tiny) || sb <= tiny * (std::abs(mb) + tiny)) return {0.0, true};
  return {std::clamp(sab / (n * sa * sb), -1.0, 1.0), false};
}

json MetricsReport::to_json() const {
  json rows = json::array();
  for (const auto& r : per_image) {
    rows.push_back({{"id", r.id}, {"seed", r.seed}, {"ged_squared", r.ged_squared}, {"ncc", r.ncc}, {"ncc_degenerate", r.ncc_degenerate}});
  }
  json seeds = json::array();
  for (const auto& s : per_seed) {
    seeds.push_back({{"seed", s.seed},
                     {"ged_mean", s.ged_mean},
                     {"ged_std", s.ged_std},
                     {"ncc_mean", s.ncc_mean},
                     {"ncc_std", s.ncc_std},
                     {"ncc_degenerate", s.ncc_degenerate}});
  }
  return {{"label", label},
          {"split", split},
          {"samples", samples},
          {"per_image", rows},
          {"per_seed", seeds},
          {"aggregate",
           {{"ged_mean", aggregate.ged_mean},
            {"ged_std", aggregate.ged_std},
            {"ncc_mean", aggregate.ncc_mean},
            {"ncc_std", aggregate.ncc_std}}}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  try {
    r.label = j.at("label").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.samples = j.at("samples").get<int>();
    for (const auto& row : j.at("per_image")) {
      r.per_image.push_back({row.at("id").get<std::string>(), row.at("seed").get<std::uint64_t>(),
                             row.at("ged_squared").get<double>(), row.at("ncc").get<double>(),
                             row.at("ncc_degenerate").get<bool>()});
    }
    for (const auto& s : j.at("per_seed")) {
      r.per_seed.push_back({s.at("seed").get<std::uint64_t>(), s.at("ged_mean").get<double>(), s.at("ged_std").get<double>(),
                            s.at("ncc_mean").get<double>(), s.at("ncc_std").get<double>(), s.at("ncc_degenerate").get<int>()});
    }
    const auto& a = j.at("aggregate");
    r.aggregate = {a.at("ged_mean").get<double>(), a.at("ged_std").get<double>(), a.at("ncc_mean").get<double>(),
                   a.at("ncc_std").get<double>()};
  } catch (const json::exception& e) {
    throw ValidationError(std::string("metrics report does not match the expected schema: ") + e.what());
  }
  return r;
}

void MetricsReport::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id,ged_squared,ncc,seed\n" << std::setprecision(17);
  for (const auto& r : per_image) out << r.id << ',' << r.ged_squared << ',' << r.ncc << ',' << r.seed << '\n';
}

void MetricsReport::write_json(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
}

void summarize(MetricsReport& report, std::span<const std::uint64_t> seeds) {
  report.per_seed.clear();
  std::vector<double> ged_means, ncc_means;
  for (std::uint64_t seed : seeds) {
    std::vector<double> ged, nc;
    SeedSummary s;
    s.seed = seed;
    for (const auto& r : report.per_image) {
      if (r.seed != seed) continue;
      ged.push_back(r.ged_squared);
      nc.push_back(r.ncc);
      s.ncc_degenerate += r.ncc_degenerate ? 1 : 0;
    }
    s.ged_mean = mean_of(ged);
    s.ged_std = population_std(ged);
    s.ncc_mean = mean_of(nc);
    s.ncc_std = population_std(nc);
    report.per_seed.push_back(s);
    ged_means.push_back(s.ged_mean);
    ncc_means.push_back(s.ncc_mean);
  }
  report.aggregate = {mean_of(ged_means), population_std(ged_means), mean_of(ncc_means), population_std(ncc_means)};
}

MetricsReport evaluate_model(const ProbUNet& model, std::span<const DatasetItem* const> items, int samples,
                             std::span<const std::uint64_t> seeds, std::string label, std::string split) {
  if (samples < 1) throw ConfigError("evaluation needs at least one sample per image");
  if (seeds.empty()) throw ConfigError("evaluation needs at least one seed");
  const auto& c = model.config();
  for (const DatasetItem* item : items) {
    if (item->image.height() != c.height || item->image.width() != c.width) {
      throw ShapeError("dataset/model shape mismatch: image " + item->image.id + " vs model " + std::to_string(c.height) +
                       "x" + std::to_string(c.width));
    }
  }
  MetricsReport report;
  report.label = std::move(label);
  report.split = std::move(split);
  report.samples = samples;
  const int n = static_cast<int>(items.size());
  report.per_image.resize(seeds.size() * items.size());
  for (std::size_t si = 0; si < seeds.size(); ++si) {
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < n; ++i) {
      const DatasetItem& item = *items[i];
      Rng rng = make_rng(seeds[si], static_cast<std::uint64_t>(i) + 1);
      const ProbMapSampleSet set = draw_samples(model, item.image, samples, rng);
      const auto masks = binarize_samples(set);
      const UncertaintyMaps u = decompose(set);
      const NccResult corr = ncc(u.aleatoric, item.stats.variance_map);
      report.per_image[si * items.size() + i] = {item.image.id, seeds[si], ged_squared(masks, item.annotations.masks),
                                                 corr.value, corr.degenerate};
    }
  }
  summarize(report, seeds);
  return report;
}

}  // namespace calseg
