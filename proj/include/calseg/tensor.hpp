#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace calseg {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Feature maps are {C, H, W}, single
/// maps {H, W}, convolution kernels {Cout, Cin, K, K}, vectors {L}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int y, int x) { return data_[static_cast<std::size_t>(y) * shape_.back() + x]; }
  double at(int y, int x) const { return data_[static_cast<std::size_t>(y) * shape_.back() + x]; }

  /// Same values under a new shape of equal element count.
  Tensor reshaped(Shape shape) const;
  void fill(double value);

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Throws ShapeError when the two shapes differ.
void require_same_shape(const Shape& a, const Shape& b, const char* what);

using Rng = std::mt19937_64;

/// Independent, reproducible stream derived from a base seed and a key.
Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0);

Tensor standard_normal(const Shape& shape, Rng& rng);

}  // namespace calseg
