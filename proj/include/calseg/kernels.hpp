#pragma once

// Numeric kernels behind the autodiff ops and the metrics.
//
// Every kernel exists twice: `serial::` is a direct loop transcription kept
// as the reference, `parallel::` is the im2col/GEMM + OpenMP path used in
// training and evaluation. Both write disjoint outputs per thread, so the
// parallel results do not depend on the thread count.

#include <cstdint>
#include <span>

namespace calseg::kernels {

/// Stride-1 convolution with "same" zero padding (kernel / 2 on each side).
struct ConvGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int height = 0;
  int width = 0;
  int kernel = 1;  // odd

  std::size_t input_size() const { return static_cast<std::size_t>(in_channels) * height * width; }
  std::size_t output_size() const { return static_cast<std::size_t>(out_channels) * height * width; }
  std::size_t weight_size() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
};

namespace serial {

// output = conv(input, weight) + bias; output is overwritten. bias may be empty.
void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
    std::span<const double> bias, std::span<double> output);
// grad_input += d(output)/d(input)^T grad_output
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
    std::span<const double> weight, std::span<double> grad_input);
// grad_weight += ..., grad_bias += ... (grad_bias may be empty)
void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> input,
    std::span<const double> grad_output, std::span<double> grad_weight,
    std::span<double> grad_bias);
// 2x2 mean pooling; height and width are the (even) input dims
void avg_pool2_forward(int channels, int height, int width, std::span<const double> input,
    std::span<double> output);
void avg_pool2_backward(int channels, int height, int width, std::span<const double> grad_output,
    std::span<double> grad_input);
// x2 bilinear upsampling, half-pixel centers, edge clamped; dims are the input dims
void upsample2_forward(int channels, int height, int width, std::span<const double> input,
    std::span<double> output);
void upsample2_backward(int channels, int height, int width, std::span<const double> grad_output,
    std::span<double> grad_input);
// out[i * count_b + j] = 1 - IoU(a_i, b_j) over {0,1} byte masks of `pixels` each; empty-empty -> 0
void pairwise_iou_distance(std::span<const std::uint8_t> masks_a, int count_a,
    std::span<const std::uint8_t> masks_b, int count_b, int pixels,
    std::span<double> out);

}  // namespace serial

namespace parallel {

// Same contracts as serial::.
void conv2d_forward(const ConvGeometry& g, std::span<const double> input, std::span<const double> weight,
    std::span<const double> bias, std::span<double> output);
void conv2d_backward_input(const ConvGeometry& g, std::span<const double> grad_output,
    std::span<const double> weight, std::span<double> grad_input);
void conv2d_backward_weight(const ConvGeometry& g, std::span<const double> input,
    std::span<const double> grad_output, std::span<double> grad_weight,
    std::span<double> grad_bias);
void avg_pool2_forward(int channels, int height, int width, std::span<const double> input,
    std::span<double> output);
void avg_pool2_backward(int channels, int height, int width, std::span<const double> grad_output,
    std::span<double> grad_input);
void upsample2_forward(int channels, int height, int width, std::span<const double> input,
    std::span<double> output);
void upsample2_backward(int channels, int height, int width, std::span<const double> grad_output,
    std::span<double> grad_input);
void pairwise_iou_distance(std::span<const std::uint8_t> masks_a, int count_a,
    std::span<const std::uint8_t> masks_b, int count_b, int pixels,
    std::span<double> out);

}  // namespace parallel

}  // namespace calseg::kernels
