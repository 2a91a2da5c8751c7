#include <doctest.h>

#include <algorithm>
#include <fstream>

#include "calseg/errors.hpp"
#include "calseg/metrics.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace calseg;

namespace {

std::vector<int> to_ints(const BinaryMask& m) { return {m.values().begin(), m.values().end()}; }

std::vector<std::vector<int>> to_ints(const std::vector<BinaryMask>& ms) {
  std::vector<std::vector<int>> out;
  for (const auto& m : ms) out.push_back(to_ints(m));
  return out;
}

std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("iou_distance: hand examples and conventions") {
  const BinaryMask full(2, 2, {1, 1, 1, 1});
  const BinaryMask left(2, 2, {1, 0, 1, 0});
  const BinaryMask empty(2, 2);
  CHECK(iou_distance(full, left) == 0.5);
  CHECK(iou_distance(full, full) == 0.0);
  CHECK(iou_distance(empty, empty) == 0.0);
  CHECK(iou_distance(empty, left) == 1.0);
  CHECK_THROWS_AS(iou_distance(full, BinaryMask(2, 3)), ShapeError);
}

TEST_CASE("iou_distance: symmetric, bounded, zero iff equal") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 300; ++t) {
    const BinaryMask a = testing::random_mask(3, 3, rng, 0.3), b = testing::random_mask(3, 3, rng, 0.3);
    const double d = iou_distance(a, b);
    CHECK(d == iou_distance(b, a));
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK((d == 0.0) == (a == b));
    CHECK(d == oracle::iou_distance(to_ints(a), to_ints(b)));
  }
}

TEST_CASE("ged_squared: conventions and singletons") {
  std::mt19937_64 rng(8);
  const BinaryMask s = testing::random_mask(4, 4, rng), y = testing::random_mask(4, 4, rng);
  CHECK(ged_squared(std::vector{s}, std::vector{y}) == 2.0 * iou_distance(s, y));
  const std::vector<BinaryMask> set{s, y, s};
  auto permuted = set;
  std::rotate(permuted.begin(), permuted.begin() + 1, permuted.end());
  CHECK(std::abs(ged_squared(set, permuted)) <= 1e-15);
  CHECK_THROWS_AS(ged_squared(std::vector<BinaryMask>{}, set), ValidationError);
}

TEST_CASE("ged_squared: brute-force oracle, symmetry and duplication invariance") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 200; ++t) {
    std::vector<BinaryMask> s, y;
    const int ns = 1 + static_cast<int>(rng() % 4), ny = 1 + static_cast<int>(rng() % 4);
    for (int k = 0; k < ns; ++k) s.push_back(testing::random_mask(4, 4, rng, 0.4));
    for (int k = 0; k < ny; ++k) y.push_back(testing::random_mask(4, 4, rng, 0.4));
    const double g = ged_squared(s, y);
    CHECK(g == oracle::ged_squared(to_ints(s), to_ints(y)));
    CHECK(g >= -2.0);
    CHECK(ged_squared(y, s) == doctest::Approx(g).scale(1e-12));
    auto s2 = s, y2 = y;
    s2.insert(s2.end(), s.begin(), s.end());
    y2.insert(y2.end(), y.begin(), y.end());
    CHECK(ged_squared(s2, y2) == doctest::Approx(g).scale(1e-12));
    std::reverse(s.begin(), s.end());
    CHECK(ged_squared(s, y) == doctest::Approx(g).scale(1e-12));
  }
}

TEST_CASE("ged_squared: a model replaying the grader masks converges to zero") {
  std::mt19937_64 rng(10);
  std::vector<BinaryMask> graders;
  for (int j = 0; j < 4; ++j) graders.push_back(testing::random_mask(8, 8, rng, 0.4));
  double previous = 1.0;
  for (int s : {8, 64, 512}) {
    double g = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<BinaryMask> samples;
      for (int k = 0; k < s; ++k) samples.push_back(graders[rng() % 4]);
      g += std::abs(ged_squared(samples, graders)) / 20;
    }
    CHECK(g < previous);
    previous = g;
  }
  CHECK(previous < 0.01);
}

TEST_CASE("ncc: identities, affine invariance, oracle") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 100; ++t) {
    const Tensor a = testing::random_map(5, 6, rng), b = testing::random_map(5, 6, rng);
    CHECK(ncc(a, a).value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ncc(a, b).value == doctest::Approx(ncc(b, a).value).epsilon(1e-12));
    CHECK(ncc(a, b).value == doctest::Approx(oracle::ncc(to_vec(a), to_vec(b))).epsilon(1e-12));
    for (double c : {0.1, 10.0, -0.1, -10.0}) {
      Tensor t2 = a;
      for (auto& v : t2.data()) v = c * v + 3.0;
      CHECK(std::abs(ncc(a, t2).value - (c > 0 ? 1.0 : -1.0)) < 1e-9);
      Tensor b2 = b;
      for (auto& v : b2.data()) v = std::abs(c) * v - 1.0;
      CHECK(ncc(t2, b2).value == doctest::Approx((c > 0 ? 1 : -1) * ncc(a, b).value).epsilon(1e-9));
    }
    CHECK(std::abs(ncc(a, b).value) <= 1.0);
  }
}

TEST_CASE("ncc: fixed 3x3 maps against a direct evaluation") {
  const Tensor a({3, 3}, {0.0, 0.1, 0.2, 0.25, 0.0, 0.05, 0.1, 0.2, 0.0});
  const Tensor b({3, 3}, {0.01, 0.12, 0.15, 0.2, 0.02, 0.0, 0.09, 0.25, 0.03});
  // Reference value from an independent numpy evaluation: 0.918040496878795.
  CHECK(ncc(a, b).value == doctest::Approx(oracle::ncc(to_vec(a), to_vec(b))).epsilon(1e-13));
  CHECK(ncc(a, b).value == doctest::Approx(0.918040496878795).epsilon(1e-12));
}

TEST_CASE("ncc: constant maps are degenerate") {
  const Tensor a({3, 3}, 0.2), z({3, 3}, 0.0);
  std::mt19937_64 rng(12);
  const Tensor b = testing::random_map(3, 3, rng);
  for (const auto& r : {ncc(a, b), ncc(b, z), ncc(z, z)}) {
    CHECK(r.degenerate);
    CHECK(r.value == 0.0);
  }
  CHECK_FALSE(ncc(b, b).degenerate);
  CHECK_THROWS_AS(ncc(a, Tensor({2, 2})), ShapeError);
}

TEST_CASE("summarize: aggregate std is the population std of per-seed means") {
  MetricsReport r;
  const double ged[3][2] = {{0.2, 0.4}, {0.5, 0.3}, {0.1, 0.1}};
  const double nc[3][2] = {{0.9, 0.7}, {0.6, 0.8}, {0.5, 0.3}};
  const std::uint64_t seeds[] = {0, 1, 2};
  for (int s = 0; s < 3; ++s)
    for (int i = 0; i < 2; ++i) r.per_image.push_back({"img" + std::to_string(i), seeds[s], ged[s][i], nc[s][i], false});
  summarize(r, seeds);
  // per-seed GED means 0.3, 0.4, 0.1 -> mean 0.8/3, population std sqrt(0.14/9)
  CHECK(r.per_seed[1].ged_mean == doctest::Approx(0.4));
  CHECK(r.aggregate.ged_mean == doctest::Approx(0.8 / 3));
  CHECK(r.aggregate.ged_std == doctest::Approx(std::sqrt(((0.3 - 0.8 / 3) * (0.3 - 0.8 / 3) + (0.4 - 0.8 / 3) * (0.4 - 0.8 / 3) +
                                                          (0.1 - 0.8 / 3) * (0.1 - 0.8 / 3)) / 3)));
  // per-seed NCC means 0.8, 0.7, 0.4
  CHECK(r.aggregate.ncc_mean == doctest::Approx(1.9 / 3));
  MetricsReport one = r;
  summarize(one, std::vector<std::uint64_t>{1});
  CHECK(one.aggregate.ged_std == 0.0);
}

TEST_CASE("MetricsReport JSON round trip and schema validation") {
  MetricsReport r;
  r.label = "m";
  r.split = "test";
  r.samples = 50;
  r.per_image = {{"a", 0, 0.1, 0.5, false}, {"b", 0, 0.3, 0.0, true}};
  const std::uint64_t seeds[] = {0};
  summarize(r, seeds);
  const MetricsReport back = MetricsReport::from_json(r.to_json());
  CHECK(back.to_json() == r.to_json());
  nlohmann::json broken = r.to_json();
  broken.erase("per_image");
  CHECK_THROWS_AS(MetricsReport::from_json(broken), ValidationError);

  const auto dir = testing::scratch_dir("report_csv");
  r.write_csv(dir / "r.csv");
  std::ifstream in(dir / "r.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "id,ged_squared,ncc,seed");
  std::filesystem::remove_all(dir);
}
