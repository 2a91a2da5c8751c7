#include <doctest.h>

#include <fstream>

#include "calseg/errors.hpp"
#include "calseg/report.hpp"
#include "helpers.hpp"

using namespace calseg;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

MetricsReport make_report(const std::string& label, std::vector<std::pair<double, double>> per_seed_means) {
  MetricsReport r;
  r.label = label;
  r.split = "test";
  r.samples = 50;
  std::vector<std::uint64_t> seeds;
  for (std::size_t s = 0; s < per_seed_means.size(); ++s) {
    seeds.push_back(s);
    r.per_image.push_back({"a", s, per_seed_means[s].first, per_seed_means[s].second, false});
  }
  summarize(r, seeds);
  return r;
}

}  // namespace

TEST_CASE("sample grid layout, mask values and determinism") {
  const auto dir = testing::scratch_dir("grid");
  std::mt19937_64 rng(1);
  const ImagePatch x{"x", testing::random_map(8, 8, rng)};
  std::vector<BinaryMask> ann, samples;
  for (int j = 0; j < 4; ++j) ann.push_back(testing::random_mask(8, 8, rng));
  for (int s = 0; s < 6; ++s) samples.push_back(testing::random_mask(8, 8, rng));

  const GrayImage g = render_sample_grid(x, ann, samples, dir / "grid.png");
  CHECK(g.height == 2 * 8);
  CHECK(g.width == (1 + 6) * 8);
  const GrayImage back = read_png(dir / "grid.png");
  CHECK(back.pixels == g.pixels);
  for (int y = 0; y < g.height; ++y) {
    for (int c = 8; c < g.width; ++c) {
      const auto v = g.pixels[static_cast<std::size_t>(y) * g.width + c];
      CHECK((v == 0 || v == 255));
    }
  }
  // Top row, column 1 holds the first annotation.
  CHECK(g.pixels[8] == (ann[0][0] ? 255 : 0));
  // Bottom-right cell holds the last sample; top-right (no 6th annotation) is black.
  CHECK(g.pixels[static_cast<std::size_t>(8) * g.width + 6 * 8] == (samples[5][0] ? 255 : 0));

  render_sample_grid(x, ann, samples, dir / "again.png");
  CHECK(read_file(dir / "grid.png") == read_file(dir / "again.png"));
  CHECK_THROWS_AS(render_sample_grid(x, ann, {}, dir / "none.png"), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("uncertainty panel: thresholds and degenerate maps") {
  const auto dir = testing::scratch_dir("panel");
  std::mt19937_64 rng(2);
  const ImagePatch x{"x", testing::random_map(16, 16, rng)};

  SUBCASE("all-zero maps render black") {
    const Tensor z({16, 16});
    const GrayImage g = render_uncertainty_panel(x, z, z, z, dir / "zero.png");
    CHECK(g.width == 64);
    for (int y = 0; y < 16; ++y)
      for (int c = 16; c < 64; ++c) CHECK(g.pixels[static_cast<std::size_t>(y) * 64 + c] == 0);
  }
  SUBCASE("identical ground truth and aleatoric maps give identical panels") {
    const Tensor m = testing::random_map(16, 16, rng, 0.0, 0.25);
    const GrayImage g = render_uncertainty_panel(x, m, m, testing::random_map(16, 16, rng), dir / "same.png");
    for (int y = 0; y < 16; ++y)
      for (int c = 0; c < 16; ++c)
        CHECK(g.pixels[static_cast<std::size_t>(y) * 64 + 16 + c] == g.pixels[static_cast<std::size_t>(y) * 64 + 32 + c]);
  }
  SUBCASE("a spike above the 99th percentile saturates, the rest scales by the threshold") {
    Tensor gt({16, 16}, 0.1);
    for (int i = 0; i < 16; ++i) gt[static_cast<std::size_t>(i)] = 0.01 * i;  // spread below 0.16
    gt.at(10, 10) = 5.0;
    const Tensor ale({16, 16}, 0.1);
    const Tensor* both[] = {&gt, &ale};
    const double thr = percentile(both, 99.0);
    CHECK(thr < 5.0);
    const GrayImage g = render_uncertainty_panel(x, gt, ale, Tensor({16, 16}, 0.05), dir / "spike.png");
    CHECK(g.pixels[static_cast<std::size_t>(10) * 64 + 16 + 10] == 255);
    CHECK(g.pixels[static_cast<std::size_t>(1) * 64 + 32 + 1] == static_cast<int>(std::lround(0.1 / thr * 255)));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(render_uncertainty_panel(x, Tensor({8, 8}), Tensor({16, 16}), Tensor({16, 16}), dir / "bad.png"),
                    ShapeError);
  }
  fs::remove_all(dir);
}

TEST_CASE("percentile uses the nearest rank") {
  const Tensor t({1, 10}, {9, 1, 2, 3, 4, 5, 6, 7, 8, 10});
  const Tensor* m[] = {&t};
  CHECK(percentile(m, 99.0) == 10.0);
  CHECK(percentile(m, 50.0) == 5.0);
  CHECK(percentile(m, 0.0) == 1.0);
}

TEST_CASE("emit_tables: std across seeds, CSV and JSON agree, inconsistent schemas rejected") {
  const auto dir = testing::scratch_dir("tables");
  const std::vector<MetricsReport> reports{make_report("single", {{0.4, 0.6}}),
                                           make_report("three", {{0.2, 0.5}, {0.3, 0.7}, {0.7, 0.9}})};
  const nlohmann::json t = emit_tables(reports, dir / "table");
  CHECK(t["rows"][0]["ged_squared_std"] == 0.0);
  CHECK(t["rows"][0]["ncc_std"] == 0.0);
  CHECK(t["rows"][1]["ged_squared_mean"].get<double>() == doctest::Approx(0.4));
  CHECK(t["rows"][1]["ged_squared_std"].get<double>() == doctest::Approx(std::sqrt((0.04 + 0.01 + 0.09) / 3)));
  CHECK(t["rows"][1]["ncc_mean"].get<double>() == doctest::Approx(0.7));

  nlohmann::json from_disk;
  std::ifstream(dir / "table.json") >> from_disk;
  std::ifstream csv(dir / "table.csv");
  std::string line;
  std::getline(csv, line);
  for (const auto& row : from_disk["rows"]) {
    std::getline(csv, line);
    std::stringstream ss(line);
    std::vector<std::string> cells;
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    REQUIRE(cells.size() == 8);
    CHECK(cells[0] == row["label"].get<std::string>());
    CHECK(std::stod(cells[4]) == row["ged_squared_mean"].get<double>());
    CHECK(std::stod(cells[5]) == row["ged_squared_std"].get<double>());
    CHECK(std::stod(cells[6]) == row["ncc_mean"].get<double>());
    CHECK(std::stod(cells[7]) == row["ncc_std"].get<double>());
  }

  std::vector<MetricsReport> mixed = reports;
  mixed[1].split = "val";
  CHECK_THROWS_AS(emit_tables(mixed, dir / "bad"), ValidationError);
  CHECK_THROWS_AS(emit_tables(std::vector<MetricsReport>{}, dir / "none"), ValidationError);
  fs::remove_all(dir);
}
