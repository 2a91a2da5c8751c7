#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "calseg/datagen.hpp"
#include "calseg/errors.hpp"
#include "calseg/png_io.hpp"
#include "helpers.hpp"

using namespace calseg;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small_config(std::uint64_t seed = 3) {
  GeneratorConfig c;
  c.n_images = 20;
  c.graders = 4;
  c.disagreement = 0.5;
  c.height = 32;
  c.width = 24;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("grader_stats: four graders split 1,1,0,0 give mean 0.5 and variance 0.25") {
  AnnotationSet a;
  for (int v : {1, 1, 0, 0}) a.masks.emplace_back(1, 1, std::vector<std::uint8_t>{static_cast<std::uint8_t>(v)});
  const GraderStats s = grader_stats(a);
  CHECK(s.mean_map[0] == 0.5);
  CHECK(s.variance_map[0] == 0.25);
}

TEST_CASE("grader_stats: identical masks have zero variance") {
  std::mt19937_64 rng(1);
  const BinaryMask m = testing::random_mask(8, 8, rng);
  const GraderStats s = grader_stats({{m, m, m}});
  for (double v : s.variance_map.data()) CHECK(v == 0.0);
  CHECK(s.mean_map == m.to_tensor());
}

TEST_CASE("grader_stats properties over random annotation sets") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 1 + static_cast<int>(rng() % 6);
    AnnotationSet a;
    for (int j = 0; j < d; ++j) a.masks.push_back(testing::random_mask(6, 5, rng, 0.3 + 0.1 * j));
    const GraderStats s = grader_stats(a);
    // Brute-force population variance, divisor D.
    for (std::size_t i = 0; i < s.mean_map.size(); ++i) {
      double mean = 0.0;
      for (const auto& m : a.masks) mean += m[i];
      mean /= d;
      double var = 0.0;
      for (const auto& m : a.masks) var += (m[i] - mean) * (m[i] - mean);
      var /= d;
      CHECK(s.mean_map[i] == doctest::Approx(mean).epsilon(1e-15));
      CHECK(s.variance_map[i] == doctest::Approx(var).epsilon(1e-15));
      CHECK(std::abs(s.variance_map[i] - s.mean_map[i] * (1.0 - s.mean_map[i])) <= 1e-12);
      CHECK(s.variance_map[i] >= 0.0);
      CHECK(s.variance_map[i] <= 0.25);
      if (s.variance_map[i] == 0.25) CHECK(s.mean_map[i] == 0.5);
    }
    // Permutation invariance over graders.
    AnnotationSet shuffled = a;
    std::shuffle(shuffled.masks.begin(), shuffled.masks.end(), rng);
    const GraderStats t = grader_stats(shuffled);
    for (std::size_t i = 0; i < s.mean_map.size(); ++i) {
      CHECK(t.mean_map[i] == doctest::Approx(s.mean_map[i]).epsilon(1e-15));
      CHECK(t.variance_map[i] == doctest::Approx(s.variance_map[i]).epsilon(1e-15));
    }
  }
}

TEST_CASE("binary masks reject non-binary values") {
  CHECK_THROWS_AS(BinaryMask(1, 2, {0, 2}), ValidationError);
  CHECK_THROWS_AS(BinaryMask::from_tensor(Tensor({1, 2}, {0.0, 0.5})), ValidationError);
  CHECK_THROWS_AS(grader_stats(AnnotationSet{}), ValidationError);
}

TEST_CASE("generate_dataset: shapes, splits, determinism") {
  const GeneratorConfig cfg = small_config();
  const Dataset a = generate_dataset(cfg);
  const Dataset b = generate_dataset(cfg);
  CHECK(a == b);
  CHECK(a.items.size() == 20);
  CHECK(a.graders == 4);
  std::set<std::string> ids;
  int counts[3] = {0, 0, 0};
  for (const auto& item : a.items) {
    CHECK(item.image.height() == 32);
    CHECK(item.image.width() == 24);
    CHECK_NOTHROW(validate_image(item.image));
    CHECK(item.annotations.grader_count() == 4);
    CHECK(item.stats == grader_stats(item.annotations));
    ids.insert(item.image.id);
    ++counts[static_cast<int>(item.split)];
  }
  CHECK(ids.size() == 20);  // splits are disjoint by id
  CHECK(counts[0] == 14);
  CHECK(counts[1] == 3);
  CHECK(counts[2] == 3);
  CHECK_FALSE(generate_dataset(small_config(4)) == a);
}

TEST_CASE("generate_dataset: no disagreement means identical graders") {
  GeneratorConfig cfg = small_config();
  cfg.disagreement = 0.0;
  for (const auto& item : generate_dataset(cfg).items) {
    for (const auto& m : item.annotations.masks) CHECK(m == item.annotations.masks[0]);
    for (double v : item.stats.variance_map.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("generate_dataset: moderate disagreement gives nondegenerate grader variance") {
  GeneratorConfig cfg = small_config();
  cfg.n_images = 100;
  cfg.height = cfg.width = 32;
  double mean_max = 0.0;
  for (const auto& item : generate_dataset(cfg).items) {
    mean_max += *std::max_element(item.stats.variance_map.data().begin(), item.stats.variance_map.data().end());
  }
  mean_max /= 100.0;
  CHECK(mean_max > 0.0);
  CHECK(mean_max > 0.1);
}

TEST_CASE("generate_dataset: invalid configurations") {
  GeneratorConfig cfg = small_config();
  cfg.disagreement = 1.5;
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
  cfg = small_config();
  cfg.height = 4;
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
  cfg = small_config();
  cfg.graders = 0;
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
  cfg = small_config();
  cfg.n_images = 0;
  CHECK_THROWS_AS(generate_dataset(cfg), ConfigError);
}

TEST_CASE("save/load round trip is lossless") {
  const fs::path dir = testing::scratch_dir("roundtrip");
  const Dataset d = generate_dataset(small_config());
  const fs::path manifest = save_dataset(d, dir);
  const Dataset back = load_dataset(manifest);
  CHECK(back == d);
  fs::remove_all(dir);
}

TEST_CASE("load_dataset error paths") {
  const fs::path dir = testing::scratch_dir("loaderr");
  GeneratorConfig cfg = small_config();
  cfg.n_images = 3;
  const fs::path manifest = save_dataset(generate_dataset(cfg), dir);
  nlohmann::json j;
  std::ifstream(manifest) >> j;

  SUBCASE("missing mask file is named") {
    const std::string rel = j["items"][0]["masks"][1];
    fs::remove(dir / rel);
    try {
      load_dataset(manifest);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find(rel) != std::string::npos);
    }
  }
  SUBCASE("grader count mismatch") {
    j["items"][1]["masks"].erase(0);
    std::ofstream(manifest) << j.dump();
    CHECK_THROWS_AS(load_dataset(manifest), ValidationError);
  }
  SUBCASE("8-bit {0,255} masks load as {0,1}; other values are rejected") {
    GrayImage m{32, 24, std::vector<std::uint8_t>(32 * 24, 0)};
    m.pixels[5] = 255;
    const std::string rel = j["items"][0]["masks"][0];
    write_png(dir / rel, m);
    const Dataset d = load_dataset(manifest);
    CHECK(d.items[0].annotations.masks[0].count() == 1);
    CHECK(d.items[0].annotations.masks[0][5] == 1);
    m.pixels[6] = 200;
    write_png(dir / rel, m);
    CHECK_THROWS_AS(load_dataset(manifest), ValidationError);
  }
  SUBCASE("missing manifest") { CHECK_THROWS_AS(load_dataset(dir / "nope.json"), IoError); }
  fs::remove_all(dir);
}
