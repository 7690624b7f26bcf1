// Serial, direct-loop kernels. Slow on purpose: they mirror the arithmetic
// definition and serve as the oracle for the parallel kernels.

#include "probgrowth/kernels.hpp"

namespace probgrowth::kernels::reference {

namespace {

bool inside(const Extent& e, int z, int y, int x) {
  return z >= 0 && z < e.depth && y >= 0 && y < e.height && x >= 0 && x < e.width;
}

}  // namespace

void conv_forward(const ConvGeometry& g, const Tensor& input, std::span<const double> weights,
                  std::span<const double> bias, Tensor& output) {
  const Extent e = g.extent;
  const int kd = g.kernel_depth();
  const int k = g.kernel;
  output = Tensor(g.out_channels, e);
  for (int co = 0; co < g.out_channels; ++co) {
    for (int z = 0; z < e.depth; ++z) {
      for (int y = 0; y < e.height; ++y) {
        for (int x = 0; x < e.width; ++x) {
          double s = bias[co];
          for (int ci = 0; ci < g.in_channels; ++ci) {
            for (int tz = 0; tz < kd; ++tz) {
              for (int ty = 0; ty < k; ++ty) {
                for (int tx = 0; tx < k; ++tx) {
                  const int iz = z + tz - kd / 2;
                  const int iy = y + ty - k / 2;
                  const int ix = x + tx - k / 2;
                  if (!inside(e, iz, iy, ix)) continue;
                  const std::size_t w =
                      ((static_cast<std::size_t>(co) * g.in_channels + ci) * kd + tz) * k * k +
                      static_cast<std::size_t>(ty) * k + tx;
                  s += weights[w] * input.at(ci, iz, iy, ix);
                }
              }
            }
          }
          output.at(co, z, y, x) = s;
        }
      }
    }
  }
}

void conv_backward(const ConvGeometry& g, const Tensor& input, std::span<const double> weights,
                   const Tensor& grad_output, std::span<double> grad_weights,
                   std::span<double> grad_bias, Tensor& grad_input) {
  const Extent e = g.extent;
  const int kd = g.kernel_depth();
  const int k = g.kernel;
  grad_input = Tensor(g.in_channels, e);
  for (int co = 0; co < g.out_channels; ++co) {
    for (int z = 0; z < e.depth; ++z) {
      for (int y = 0; y < e.height; ++y) {
        for (int x = 0; x < e.width; ++x) {
          const double go = grad_output.at(co, z, y, x);
          grad_bias[co] += go;
          for (int ci = 0; ci < g.in_channels; ++ci) {
            for (int tz = 0; tz < kd; ++tz) {
              for (int ty = 0; ty < k; ++ty) {
                for (int tx = 0; tx < k; ++tx) {
                  const int iz = z + tz - kd / 2;
                  const int iy = y + ty - k / 2;
                  const int ix = x + tx - k / 2;
                  if (!inside(e, iz, iy, ix)) continue;
                  const std::size_t w =
                      ((static_cast<std::size_t>(co) * g.in_channels + ci) * kd + tz) * k * k +
                      static_cast<std::size_t>(ty) * k + tx;
                  grad_weights[w] += go * input.at(ci, iz, iy, ix);
                  grad_input.at(ci, iz, iy, ix) += go * weights[w];
                }
              }
            }
          }
        }
      }
    }
  }
}

void avg_pool2_forward(const Tensor& input, Tensor& output) {
  const Extent out = input.extent.halved();
  const int fz = input.extent.is_3d() ? 2 : 1;
  output = Tensor(input.channels, out);
  for (int c = 0; c < input.channels; ++c) {
    for (int z = 0; z < input.extent.depth; ++z) {
      for (int y = 0; y < input.extent.height; ++y) {
        for (int x = 0; x < input.extent.width; ++x) {
          output.at(c, z / fz, y / 2, x / 2) += input.at(c, z, y, x) / (fz * 4);
        }
      }
    }
  }
}

void upsample2_forward(const Tensor& input, Tensor& output) {
  const Extent out = input.extent.doubled();
  const int fz = out.is_3d() ? 2 : 1;
  output = Tensor(input.channels, out);
  for (int c = 0; c < input.channels; ++c) {
    for (int z = 0; z < out.depth; ++z) {
      for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
          output.at(c, z, y, x) = input.at(c, z / fz, y / 2, x / 2);
        }
      }
    }
  }
}

}  // namespace probgrowth::kernels::reference
