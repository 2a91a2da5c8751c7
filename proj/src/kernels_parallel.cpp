// Production kernels: im2col + Eigen GEMM for convolutions, OpenMP across
// channels (or mask rows) elsewhere. Each thread owns a disjoint slice of the
// output, so no result depends on how iterations are scheduled.

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <vector>

#include "calseg/errors.hpp"
#include "calseg/kernels.hpp"

namespace calseg::kernels::parallel {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void check_conv(const ConvGeometry& g, std::size_t in, std::size_t w, std::size_t out) {
  if (g.kernel % 2 == 0) throw ConfigError("convolution kernel size must be odd");
  if (in != g.input_size() || w != g.weight_size() || out != g.output_size()) {
    throw ShapeError("convolution buffers do not match geometry");
  }
}

std::vector<double>& column_workspace() {
  thread_local std::vector<double> buffer;
  return buffer;
}

std::vector<double>& gradient_workspace() {
  thread_local std::vector<double> buffer;
  return buffer;
}

// Row r = (ci, ky, kx) of the column matrix holds input[ci] shifted by
// (ky - pad, kx - pad), zero outside the image.
void im2col(const ConvGeometry& g, std::span<const double> input, std::vector<double>& cols) {
  const int k = g.kernel, pad = k / 2, h = g.height, w = g.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const int rows = g.in_channels * k * k;
  cols.resize(static_cast<std::size_t>(rows) * plane);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int ci = r / (k * k);
    const int ky = (r / k) % k;
    const int kx = r % k;
    const int dy = ky - pad, dx = kx - pad;
    double* dst = cols.data() + static_cast<std::size_t>(r) * plane;
    const double* src = input.data() + static_cast<std::size_t>(ci) * plane;
    const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
    for (int y = 0; y < h; ++y) {
      double* drow = dst + static_cast<std::size_t>(y) * w;
      const int sy = y + dy;
      if (sy < 0 || sy >= h) {
        std::fill(drow, drow + w, 0.0);
        continue;
      }
      const double* srow = src + static_cast<std::size_t>(sy) * w + dx;
      std::fill(drow, drow + x_lo, 0.0);
      std::copy(srow + x_lo, srow + x_hi, drow + x_lo);
      std::fill(drow + x_hi, drow + w, 0.0);
    }
  }
}

void col2im_accumulate(const ConvGeometry& g, const std::vector<double>& cols, std::span<double> grad_input) {
  const int k = g.kernel, pad = k / 2, h = g.height, w = g.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < g.in_channels; ++ci) {
    double* dst = grad_input.data() + static_cast<std::size_t>(ci) * plane;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int dy = ky - pad, dx = kx - pad;
        const double* src = cols.data() + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * plane;
        const int x_lo = std::max(0, -dx), x_hi = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          double* drow = dst + static_cast<std::size_t>(sy) * w + dx;
          const double* srow = src + static_cast<std::size_t>(y) * w;
          for (int x = x_lo; x < x_hi; ++x) drow[x] += srow[x];
        }
      }
    }
  }
}

struct Taps {
  int i0, i1;
  double w0, w1;
};

std::vector<Taps> bilinear_taps(int n) {
  std::vector<Taps> taps(static_cast<std::size_t>(2 * n));
  for (int o = 0; o < 2 * n; ++o) {
    const double src = (o + 0.5) / 2.0 - 0.5;
    int i0 = static_cast<int>(src >= 0 ? src : src - 1.0);
    const double frac = src - i0;
    taps[o] = {std::clamp(i0, 0, n - 1), std::clamp(i0 + 1, 0, n - 1), 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  check_conv(g, input.size(), weight.size(), output.size());
  const Eigen::Index plane = static_cast<Eigen::Index>(g.height) * g.width;
  const Eigen::Index depth = static_cast<Eigen::Index>(g.in_channels) * g.kernel * g.kernel;
  ConstMap w(weight.data(), g.out_channels, depth);
  MutMap out(output.data(), g.out_channels, plane);
  if (g.kernel == 1) {
    out.noalias() = w * ConstMap(input.data(), depth, plane);
  } else {
    auto& cols = column_workspace();
    im2col(g, input, cols);
    out.noalias() = w * ConstMap(cols.data(), depth, plane);
  }
  if (!bias.empty()) {
#pragma omp parallel for schedule(static)
    for (int co = 0; co < g.out_channels; ++co) out.row(co).array() += bias[co];
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  check_conv(g, grad_input.size(), weight.size(), grad_output.size());
  const Eigen::Index plane = static_cast<Eigen::Index>(g.height) * g.width;
  const Eigen::Index depth = static_cast<Eigen::Index>(g.in_channels) * g.kernel * g.kernel;
  ConstMap w(weight.data(), g.out_channels, depth);
  ConstMap go(grad_output.data(), g.out_channels, plane);
  if (g.kernel == 1) {
    MutMap gi(grad_input.data(), depth, plane);
    gi.noalias() += w.transpose() * go;
    return;
  }
  auto& cols = gradient_workspace();
  cols.resize(static_cast<std::size_t>(depth * plane));
  MutMap gc(cols.data(), depth, plane);
  gc.noalias() = w.transpose() * go;
  col2im_accumulate(g, cols, grad_input);
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  check_conv(g, input.size(), grad_weight.size(), grad_output.size());
  const Eigen::Index plane = static_cast<Eigen::Index>(g.height) * g.width;
  const Eigen::Index depth = static_cast<Eigen::Index>(g.in_channels) * g.kernel * g.kernel;
  ConstMap go(grad_output.data(), g.out_channels, plane);
  MutMap gw(grad_weight.data(), g.out_channels, depth);
  if (g.kernel == 1) {
    gw.noalias() += go * ConstMap(input.data(), depth, plane).transpose();
  } else {
    auto& cols = column_workspace();
    im2col(g, input, cols);
    gw.noalias() += go * ConstMap(cols.data(), depth, plane).transpose();
  }
  if (!grad_bias.empty()) {
    // Fixed summation order: Eigen's vectorized reductions peel by address
    // alignment, which would make results depend on where buffers landed.
#pragma omp parallel for schedule(static)
    for (int co = 0; co < g.out_channels; ++co) {
      const double* row = grad_output.data() + static_cast<std::size_t>(co) * plane;
      double s = 0.0;
      for (Eigen::Index p = 0; p < plane; ++p) s += row[p];
      grad_bias[co] += s;
    }
  }
}

void avg_pool2_forward(int channels, int height, int width, std::span<const double> input,
                       std::span<double> output) {
  const int oh = height / 2, ow = width / 2;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const double* src = input.data() + static_cast<std::size_t>(c) * height * width;
    double* dst = output.data() + static_cast<std::size_t>(c) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      const double* r0 = src + static_cast<std::size_t>(2 * y) * width;
      const double* r1 = r0 + width;
      for (int x = 0; x < ow; ++x) {
        dst[y * ow + x] = 0.25 * (((r0[2 * x] + r0[2 * x + 1]) + r1[2 * x]) + r1[2 * x + 1]);
      }
    }
  }
}

void avg_pool2_backward(int channels, int height, int width, std::span<const double> grad_output,
                        std::span<double> grad_input) {
  const int oh = height / 2, ow = width / 2;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const double* src = grad_output.data() + static_cast<std::size_t>(c) * oh * ow;
    double* dst = grad_input.data() + static_cast<std::size_t>(c) * height * width;
    for (int y = 0; y < oh; ++y) {
      double* r0 = dst + static_cast<std::size_t>(2 * y) * width;
      double* r1 = r0 + width;
      for (int x = 0; x < ow; ++x) {
        const double go = 0.25 * src[y * ow + x];
        r0[2 * x] += go;
        r0[2 * x + 1] += go;
        r1[2 * x] += go;
        r1[2 * x + 1] += go;
      }
    }
  }
}

void upsample2_forward(int channels, int height, int width, std::span<const double> input,
                       std::span<double> output) {
  const int oh = 2 * height, ow = 2 * width;
  const auto ty = bilinear_taps(height);
  const auto tx = bilinear_taps(width);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const double* src = input.data() + static_cast<std::size_t>(c) * height * width;
    double* dst = output.data() + static_cast<std::size_t>(c) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      const Taps& vy = ty[y];
      const double* a = src + static_cast<std::size_t>(vy.i0) * width;
      const double* b = src + static_cast<std::size_t>(vy.i1) * width;
      for (int x = 0; x < ow; ++x) {
        const Taps& vx = tx[x];
        dst[y * ow + x] = vy.w0 * (vx.w0 * a[vx.i0] + vx.w1 * a[vx.i1]) + vy.w1 * (vx.w0 * b[vx.i0] + vx.w1 * b[vx.i1]);
      }
    }
  }
}

void upsample2_backward(int channels, int height, int width, std::span<const double> grad_output,
                        std::span<double> grad_input) {
  const int oh = 2 * height, ow = 2 * width;
  const auto ty = bilinear_taps(height);
  const auto tx = bilinear_taps(width);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c) {
    const double* src = grad_output.data() + static_cast<std::size_t>(c) * oh * ow;
    double* dst = grad_input.data() + static_cast<std::size_t>(c) * height * width;
    for (int y = 0; y < oh; ++y) {
      const Taps& vy = ty[y];
      double* a = dst + static_cast<std::size_t>(vy.i0) * width;
      double* b = dst + static_cast<std::size_t>(vy.i1) * width;
      for (int x = 0; x < ow; ++x) {
        const Taps& vx = tx[x];
        const double go = src[y * ow + x];
        a[vx.i0] += vy.w0 * vx.w0 * go;
        a[vx.i1] += vy.w0 * vx.w1 * go;
        b[vx.i0] += vy.w1 * vx.w0 * go;
        b[vx.i1] += vy.w1 * vx.w1 * go;
      }
    }
  }
}

void pairwise_iou_distance(std::span<const std::uint8_t> masks_a, int count_a,
                           std::span<const std::uint8_t> masks_b, int count_b, int pixels,
                           std::span<double> out) {
  const int words = (pixels + 63) / 64;
  auto pack = [&](std::span<const std::uint8_t> masks, int count) {
    std::vector<std::uint64_t> bits(static_cast<std::size_t>(count) * words, 0);
#pragma omp parallel for schedule(static)
    for (int m = 0; m < count; ++m) {
      const std::uint8_t* src = masks.data() + static_cast<std::size_t>(m) * pixels;
      std::uint64_t* dst = bits.data() + static_cast<std::size_t>(m) * words;
      for (int p = 0; p < pixels; ++p) {
        if (src[p]) dst[p / 64] |= std::uint64_t{1} << (p % 64);
      }
    }
    return bits;
  };
  const auto a = pack(masks_a, count_a);
  const auto b = pack(masks_b, count_b);
#pragma omp parallel for collapse(2) schedule(static)
  for (int i = 0; i < count_a; ++i) {
    for (int j = 0; j < count_b; ++j) {
      const std::uint64_t* wa = a.data() + static_cast<std::size_t>(i) * words;
      const std::uint64_t* wb = b.data() + static_cast<std::size_t>(j) * words;
      long inter = 0, uni = 0;
      for (int k = 0; k < words; ++k) {
        inter += std::popcount(wa[k] & wb[k]);
        uni += std::popcount(wa[k] | wb[k]);
      }
      out[static_cast<std::size_t>(i) * count_b + j] =
          uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
    }
  }
}

}  // namespace calseg::kernels::parallel
