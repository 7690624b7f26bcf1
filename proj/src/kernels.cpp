#include "probgrowth/kernels.hpp"

#include <algorithm>
#include <vector>

#include "probgrowth/error.hpp"

namespace probgrowth::kernels {

namespace {

constexpr std::size_t kTile = 512;

void check_conv(const ConvGeometry& g, const Tensor& input, std::size_t weights,
                std::size_t bias) {
  if (input.channels != g.in_channels || input.extent != g.extent) {
    throw DimensionError("conv: expected input [" + std::to_string(g.in_channels) + " x " +
                         g.extent.str() + "], got " + input.shape_str());
  }
  if (weights != g.weight_count() || bias != static_cast<std::size_t>(g.out_channels)) {
    throw DimensionError("conv: parameter size mismatch");
  }
}

// Column buffer [in_channels * taps][voxels]; zero where the tap falls in padding.
void im2col(const ConvGeometry& g, const Tensor& input, std::vector<double>& col) {
  const Extent e = g.extent;
  const std::size_t plane = e.voxels();
  const int kd = g.kernel_depth();
  const int k = g.kernel;
  col.assign(static_cast<std::size_t>(g.in_channels) * g.taps() * plane, 0.0);

#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < g.in_channels; ++ci) {
    const double* src = input.channel(ci).data();
    for (int tz = 0; tz < kd; ++tz) {
      for (int ty = 0; ty < k; ++ty) {
        for (int tx = 0; tx < k; ++tx) {
          const std::size_t j = (static_cast<std::size_t>(ci * kd + tz) * k + ty) * k + tx;
          double* dst = col.data() + j * plane;
          const int dz = tz - kd / 2;
          const int dy = ty - k / 2;
          const int dx = tx - k / 2;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(e.width, e.width - dx);
          for (int z = 0; z < e.depth; ++z) {
            const int iz = z + dz;
            if (iz < 0 || iz >= e.depth) continue;
            for (int y = 0; y < e.height; ++y) {
              const int iy = y + dy;
              if (iy < 0 || iy >= e.height) continue;
              const double* srow = src + (static_cast<std::size_t>(iz) * e.height + iy) * e.width;
              double* drow = dst + (static_cast<std::size_t>(z) * e.height + y) * e.width;
              for (int x = x0; x < x1; ++x) drow[x] = srow[x + dx];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const std::vector<double>& col, Tensor& grad_input) {
  const Extent e = g.extent;
  const std::size_t plane = e.voxels();
  const int kd = g.kernel_depth();
  const int k = g.kernel;
  grad_input = Tensor(g.in_channels, e);

#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < g.in_channels; ++ci) {
    double* dst = grad_input.channel(ci).data();
    for (int tz = 0; tz < kd; ++tz) {
      for (int ty = 0; ty < k; ++ty) {
        for (int tx = 0; tx < k; ++tx) {
          const std::size_t j = (static_cast<std::size_t>(ci * kd + tz) * k + ty) * k + tx;
          const double* src = col.data() + j * plane;
          const int dz = tz - kd / 2;
          const int dy = ty - k / 2;
          const int dx = tx - k / 2;
          const int x0 = std::max(0, -dx);
          const int x1 = std::min(e.width, e.width - dx);
          for (int z = 0; z < e.depth; ++z) {
            const int iz = z + dz;
            if (iz < 0 || iz >= e.depth) continue;
            for (int y = 0; y < e.height; ++y) {
              const int iy = y + dy;
              if (iy < 0 || iy >= e.height) continue;
              double* drow = dst + (static_cast<std::size_t>(iz) * e.height + iy) * e.width;
              const double* srow = src + (static_cast<std::size_t>(z) * e.height + y) * e.width;
              for (int x = x0; x < x1; ++x) drow[x + dx] += srow[x];
            }
          }
        }
      }
    }
  }
}

// out[r][p] += sum_j w[r][j] * col[j][p] over one tile of p, four rows at a time.
void gemm_rows_tile(const double* w, std::size_t ldw, int rows, const double* col,
                    std::size_t ldc, std::size_t cols, std::size_t p0, std::size_t n,
                    double* out, std::size_t ldo) {
  int r = 0;
  for (; r + 4 <= rows; r += 4) {
    double* o0 = out + (r + 0) * ldo + p0;
    double* o1 = out + (r + 1) * ldo + p0;
    double* o2 = out + (r + 2) * ldo + p0;
    double* o3 = out + (r + 3) * ldo + p0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double* c = col + j * ldc + p0;
      const double w0 = w[(r + 0) * ldw + j];
      const double w1 = w[(r + 1) * ldw + j];
      const double w2 = w[(r + 2) * ldw + j];
      const double w3 = w[(r + 3) * ldw + j];
      for (std::size_t p = 0; p < n; ++p) {
        const double v = c[p];
        o0[p] += w0 * v;
        o1[p] += w1 * v;
        o2[p] += w2 * v;
        o3[p] += w3 * v;
      }
    }
  }
  for (; r < rows; ++r) {
    double* o = out + r * ldo + p0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double* c = col + j * ldc + p0;
      const double wr = w[r * ldw + j];
      for (std::size_t p = 0; p < n; ++p) o[p] += wr * c[p];
    }
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc[0] += a[i] * b[i];
    acc[1] += a[i + 1] * b[i + 1];
    acc[2] += a[i + 2] * b[i + 2];
    acc[3] += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) acc[0] += a[i] * b[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace

void conv_forward(const ConvGeometry& g, const Tensor& input, std::span<const double> weights,
                  std::span<const double> bias, Tensor& output) {
  check_conv(g, input, weights.size(), bias.size());
  const std::size_t plane = g.extent.voxels();
  const std::size_t cols = static_cast<std::size_t>(g.in_channels) * g.taps();

  thread_local std::vector<double> scratch;
  const double* col = input.data.data();
  if (g.taps() > 1) {
    im2col(g, input, scratch);
    col = scratch.data();
  }

  output = Tensor(g.out_channels, g.extent);
  for (int co = 0; co < g.out_channels; ++co) {
    std::fill_n(output.channel(co).data(), plane, bias[co]);
  }
  const auto tiles = static_cast<long>((plane + kTile - 1) / kTile);
#pragma omp parallel for schedule(static)
  for (long t = 0; t < tiles; ++t) {
    const std::size_t p0 = static_cast<std::size_t>(t) * kTile;
    const std::size_t n = std::min(kTile, plane - p0);
    gemm_rows_tile(weights.data(), cols, g.out_channels, col, plane, cols, p0, n,
                   output.data.data(), plane);
  }
}

void conv_backward(const ConvGeometry& g, const Tensor& input, std::span<const double> weights,
                   const Tensor& grad_output, std::span<double> grad_weights,
                   std::span<double> grad_bias, Tensor& grad_input) {
  check_conv(g, input, weights.size(), grad_bias.size());
  if (grad_output.channels != g.out_channels || grad_output.extent != g.extent) {
    throw DimensionError("conv backward: gradient shape " + grad_output.shape_str());
  }
  const std::size_t plane = g.extent.voxels();
  const std::size_t cols = static_cast<std::size_t>(g.in_channels) * g.taps();

  thread_local std::vector<double> scratch;
  const double* col = input.data.data();
  if (g.taps() > 1) {
    im2col(g, input, scratch);
    col = scratch.data();
  }

#pragma omp parallel for schedule(static)
  for (int co = 0; co < g.out_channels; ++co) {
    const double* go = grad_output.channel(co).data();
    double bsum = 0.0;
    for (std::size_t p = 0; p < plane; ++p) bsum += go[p];
    grad_bias[co] += bsum;
    for (std::size_t j = 0; j < cols; ++j) {
      grad_weights[co * cols + j] += dot(go, col + j * plane, plane);
    }
  }

  // Transposed weights so the column gradient reuses the row-tiled product.
  std::vector<double> wt(cols * g.out_channels);
  for (int co = 0; co < g.out_channels; ++co) {
    for (std::size_t j = 0; j < cols; ++j) wt[j * g.out_channels + co] = weights[co * cols + j];
  }
  std::vector<double> gcol(cols * plane, 0.0);
  const auto tiles = static_cast<long>((plane + kTile - 1) / kTile);
#pragma omp parallel for schedule(static)
  for (long t = 0; t < tiles; ++t) {
    const std::size_t p0 = static_cast<std::size_t>(t) * kTile;
    const std::size_t n = std::min(kTile, plane - p0);
    gemm_rows_tile(wt.data(), g.out_channels, static_cast<int>(cols), grad_output.data.data(),
                   plane, g.out_channels, p0, n, gcol.data(), plane);
  }

  if (g.taps() > 1) {
    col2im(g, gcol, grad_input);
  } else {
    grad_input = Tensor(g.in_channels, g.extent);
    grad_input.data = std::move(gcol);
  }
}

void avg_pool2_forward(const Tensor& input, Tensor& output) {
  const Extent in = input.extent;
  const Extent out = in.halved();
  const int fz = in.is_3d() ? 2 : 1;
  const double scale = 1.0 / (fz * 4);
  output = Tensor(input.channels, out);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < input.channels; ++c) {
    for (int z = 0; z < out.depth; ++z) {
      for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
          double s = 0.0;
          for (int a = 0; a < fz; ++a) {
            for (int b = 0; b < 2; ++b) {
              s += input.at(c, z * fz + a, y * 2 + b, x * 2) +
                   input.at(c, z * fz + a, y * 2 + b, x * 2 + 1);
            }
          }
          output.at(c, z, y, x) = s * scale;
        }
      }
    }
  }
}

void avg_pool2_backward(const Tensor& grad_output, Extent input_extent, Tensor& grad_input) {
  const int fz = input_extent.is_3d() ? 2 : 1;
  const double scale = 1.0 / (fz * 4);
  grad_input = Tensor(grad_output.channels, input_extent);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < grad_output.channels; ++c) {
    for (int z = 0; z < input_extent.depth; ++z) {
      for (int y = 0; y < input_extent.height; ++y) {
        for (int x = 0; x < input_extent.width; ++x) {
          grad_input.at(c, z, y, x) = grad_output.at(c, z / fz, y / 2, x / 2) * scale;
        }
      }
    }
  }
}

void upsample2_forward(const Tensor& input, Tensor& output) {
  const Extent out = input.extent.doubled();
  const int fz = out.is_3d() ? 2 : 1;
  output = Tensor(input.channels, out);
#pragma omp parallel for schedule(static)
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

void upsample2_backward(const Tensor& grad_output, Extent input_extent, Tensor& grad_input) {
  const Extent out = grad_output.extent;
  const int fz = out.is_3d() ? 2 : 1;
  grad_input = Tensor(grad_output.channels, input_extent);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < grad_output.channels; ++c) {
    for (int z = 0; z < out.depth; ++z) {
      for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
          grad_input.at(c, z / fz, y / 2, x / 2) += grad_output.at(c, z, y, x);
        }
      }
    }
  }
}

void leaky_relu_forward(const Tensor& input, Tensor& output) {
  output = Tensor(input.channels, input.extent);
  const std::size_t n = input.data.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    const double v = input.data[i];
    output.data[i] = v > 0.0 ? v : kLeakySlope * v;
  }
}

void leaky_relu_backward(const Tensor& input, const Tensor& grad_output, Tensor& grad_input) {
  grad_input = Tensor(input.channels, input.extent);
  const std::size_t n = input.data.size();
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    grad_input.data[i] = input.data[i] > 0.0 ? grad_output.data[i] : kLeakySlope * grad_output.data[i];
  }
}

}  // namespace probgrowth::kernels
