#pragma once

// Compute kernels behind the network layers.
//
// Every kernel exists twice: an OpenMP-parallel version used by the model,
// and a plain serial version in `reference::` kept as a test oracle and as
// the benchmark baseline. Parallel loops partition outputs so that each
// value is accumulated by exactly one thread in a fixed order; results are
// therefore independent of the thread count.

#include <span>

#include "probgrowth/tensor.hpp"

namespace probgrowth::kernels {

/// Same-padded, stride-1 convolution geometry. `kernel` is 1 or 3 along every
/// active axis; 2-D inputs use a depth kernel of 1.
struct ConvGeometry {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  Extent extent;

  int kernel_depth() const noexcept { return extent.is_3d() ? kernel : 1; }
  int taps() const noexcept { return kernel_depth() * kernel * kernel; }
  std::size_t weight_count() const noexcept {
    return static_cast<std::size_t>(out_channels) * in_channels * taps();
  }
};

/// weights: [out][in][kd][kh][kw]; bias: [out].
void conv_forward(const ConvGeometry& g, const Tensor& input, std::span<const double> weights,
                  std::span<const double> bias, Tensor& output);

/// Accumulates into grad_weights/grad_bias; overwrites grad_input.
void conv_backward(const ConvGeometry& g, const Tensor& input, std::span<const double> weights,
                   const Tensor& grad_output, std::span<double> grad_weights,
                   std::span<double> grad_bias, Tensor& grad_input);

/// 2x average pooling along every active axis.
void avg_pool2_forward(const Tensor& input, Tensor& output);
void avg_pool2_backward(const Tensor& grad_output, Extent input_extent, Tensor& grad_input);

/// 2x nearest-neighbour upsampling along every active axis.
void upsample2_forward(const Tensor& input, Tensor& output);
void upsample2_backward(const Tensor& grad_output, Extent input_extent, Tensor& grad_input);

inline constexpr double kLeakySlope = 0.01;

void leaky_relu_forward(const Tensor& input, Tensor& output);
/// Uses the pre-activation input to select the slope.
void leaky_relu_backward(const Tensor& input, const Tensor& grad_output, Tensor& grad_input);

namespace reference {

void conv_forward(const ConvGeometry& g, const Tensor& input, std::span<const double> weights,
                  std::span<const double> bias, Tensor& output);
void conv_backward(const ConvGeometry& g, const Tensor& input, std::span<const double> weights,
                   const Tensor& grad_output, std::span<double> grad_weights,
                   std::span<double> grad_bias, Tensor& grad_input);
void avg_pool2_forward(const Tensor& input, Tensor& output);
void upsample2_forward(const Tensor& input, Tensor& output);

}  // namespace reference

}  // namespace probgrowth::kernels
