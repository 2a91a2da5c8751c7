// Reference kernels: plain loops, no blocking, no threads.

#include <algorithm>

#include "calseg/errors.hpp"
#include "calseg/kernels.hpp"

namespace calseg::kernels::serial {

namespace {

void check_conv(const ConvGeometry& g, std::size_t in, std::size_t w, std::size_t out) {
  if (g.kernel % 2 == 0) throw ConfigError("convolution kernel size must be odd");
  if (in != g.input_size() || w != g.weight_size() || out != g.output_size()) {
    throw ShapeError("convolution buffers do not match geometry");
  }
}

// Source index and weight of the two taps for output coordinate o along an
// axis of input length n.
struct Taps {
  int i0, i1;
  double w0, w1;
};

Taps bilinear_taps(int o, int n) {
  const double src = (o + 0.5) / 2.0 - 0.5;
  int i0 = static_cast<int>(src >= 0 ? src : src - 1.0);  // floor
  const double frac = src - i0;
  int i1 = i0 + 1;
  i0 = std::clamp(i0, 0, n - 1);
  i1 = std::clamp(i1, 0, n - 1);
  return {i0, i1, 1.0 - frac, frac};
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
                    std::span<const double> bias, std::span<double> output) {
  check_conv(g, input.size(), weight.size(), output.size());
  const int pad = g.kernel / 2;
  for (int co = 0; co < g.out_channels; ++co) {
    for (int y = 0; y < g.height; ++y) {
      for (int x = 0; x < g.width; ++x) {
        double acc = bias.empty() ? 0.0 : bias[co];
        for (int ci = 0; ci < g.in_channels; ++ci) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int sy = y + ky - pad;
              const int sx = x + kx - pad;
              if (sy < 0 || sy >= g.height || sx < 0 || sx >= g.width) continue;
              acc += weight[((static_cast<std::size_t>(co) * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] *
                     input[(static_cast<std::size_t>(ci) * g.height + sy) * g.width + sx];
            }
          }
        }
        output[(static_cast<std::size_t>(co) * g.height + y) * g.width + x] = acc;
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
                           std::span<const double> weight, std::span<double> grad_input) {
  check_conv(g, grad_input.size(), weight.size(), grad_output.size());
  const int pad = g.kernel / 2;
  for (int co = 0; co < g.out_channels; ++co) {
    for (int y = 0; y < g.height; ++y) {
      for (int x = 0; x < g.width; ++x) {
        const double go = grad_output[(static_cast<std::size_t>(co) * g.height + y) * g.width + x];
        for (int ci = 0; ci < g.in_channels; ++ci) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int sy = y + ky - pad;
              const int sx = x + kx - pad;
              if (sy < 0 || sy >= g.height || sx < 0 || sx >= g.width) continue;
              grad_input[(static_cast<std::size_t>(ci) * g.height + sy) * g.width + sx] +=
                  weight[((static_cast<std::size_t>(co) * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] * go;
            }
          }
        }
      }
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> input,
                            std::span<const double> grad_output, std::span<double> grad_weight,
                            std::span<double> grad_bias) {
  check_conv(g, input.size(), grad_weight.size(), grad_output.size());
  const int pad = g.kernel / 2;
  for (int co = 0; co < g.out_channels; ++co) {
    for (int y = 0; y < g.height; ++y) {
      for (int x = 0; x < g.width; ++x) {
        const double go = grad_output[(static_cast<std::size_t>(co) * g.height + y) * g.width + x];
        if (!grad_bias.empty()) grad_bias[co] += go;
        for (int ci = 0; ci < g.in_channels; ++ci) {
          for (int ky = 0; ky < g.kernel; ++ky) {
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int sy = y + ky - pad;
              const int sx = x + kx - pad;
              if (sy < 0 || sy >= g.height || sx < 0 || sx >= g.width) continue;
              grad_weight[((static_cast<std::size_t>(co) * g.in_channels + ci) * g.kernel + ky) * g.kernel + kx] +=
                  input[(static_cast<std::size_t>(ci) * g.height + sy) * g.width + sx] * go;
            }
          }
        }
      }
    }
  }
}

void avg_pool2_forward(int channels, int height, int width, std::span<const double> input,
                       std::span<double> output) {
  const int oh = height / 2, ow = width / 2;
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        double s = 0.0;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            s += input[(static_cast<std::size_t>(c) * height + 2 * y + dy) * width + 2 * x + dx];
          }
        }
        output[(static_cast<std::size_t>(c) * oh + y) * ow + x] = 0.25 * s;
      }
    }
  }
}

void avg_pool2_backward(int channels, int height, int width, std::span<const double> grad_output,
                        std::span<double> grad_input) {
  const int oh = height / 2, ow = width / 2;
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        const double go = 0.25 * grad_output[(static_cast<std::size_t>(c) * oh + y) * ow + x];
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            grad_input[(static_cast<std::size_t>(c) * height + 2 * y + dy) * width + 2 * x + dx] += go;
          }
        }
      }
    }
  }
}

void upsample2_forward(int channels, int height, int width, std::span<const double> input,
                       std::span<double> output) {
  const int oh = 2 * height, ow = 2 * width;
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      const Taps ty = bilinear_taps(y, height);
      for (int x = 0; x < ow; ++x) {
        const Taps tx = bilinear_taps(x, width);
        auto in = [&](int yy, int xx) { return input[(static_cast<std::size_t>(c) * height + yy) * width + xx]; };
        output[(static_cast<std::size_t>(c) * oh + y) * ow + x] =
            ty.w0 * (tx.w0 * in(ty.i0, tx.i0) + tx.w1 * in(ty.i0, tx.i1)) +
            ty.w1 * (tx.w0 * in(ty.i1, tx.i0) + tx.w1 * in(ty.i1, tx.i1));
      }
    }
  }
}

void upsample2_backward(int channels, int height, int width, std::span<const double> grad_output,
                        std::span<double> grad_input) {
  const int oh = 2 * height, ow = 2 * width;
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < oh; ++y) {
      const Taps ty = bilinear_taps(y, height);
      for (int x = 0; x < ow; ++x) {
        const Taps tx = bilinear_taps(x, width);
        const double go = grad_output[(static_cast<std::size_t>(c) * oh + y) * ow + x];
        auto gi = [&](int yy, int xx) -> double& {
          return grad_input[(static_cast<std::size_t>(c) * height + yy) * width + xx];
        };
        gi(ty.i0, tx.i0) += ty.w0 * tx.w0 * go;
        gi(ty.i0, tx.i1) += ty.w0 * tx.w1 * go;
        gi(ty.i1, tx.i0) += ty.w1 * tx.w0 * go;
        gi(ty.i1, tx.i1) += ty.w1 * tx.w1 * go;
      }
    }
  }
}

void pairwise_iou_distance(std::span<const std::uint8_t> masks_a, int count_a,
                           std::span<const std::uint8_t> masks_b, int count_b, int pixels,
                           std::span<double> out) {
  for (int i = 0; i < count_a; ++i) {
    for (int j = 0; j < count_b; ++j) {
      long inter = 0, uni = 0;
      for (int p = 0; p < pixels; ++p) {
        const bool a = masks_a[static_cast<std::size_t>(i) * pixels + p] != 0;
        const bool b = masks_b[static_cast<std::size_t>(j) * pixels + p] != 0;
        inter += (a && b);
        uni += (a || b);
      }
      out[static_cast<std::size_t>(i) * count_b + j] =
          uni == 0 ? 0.0 : 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
    }
  }
}

}  // namespace calseg::kernels::serial
