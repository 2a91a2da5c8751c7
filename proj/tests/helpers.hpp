#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "calseg/datagen.hpp"

namespace testing {

inline calseg::BinaryMask random_mask(int h, int w, std::mt19937_64& rng, double p = 0.5) {
  std::bernoulli_distribution coin(p);
  calseg::BinaryMask m(h, w);
  for (std::size_t i = 0; i < m.size(); ++i) m.set(i, coin(rng));
  return m;
}

inline calseg::Tensor random_map(int h, int w, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  calseg::Tensor t({h, w});
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Fresh, empty scratch directory unique to this process and tag.
inline std::filesystem::path scratch_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() / ("calseg_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
