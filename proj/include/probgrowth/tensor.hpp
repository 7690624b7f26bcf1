#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace probgrowth {

/// Spatial extent of a volume. 2-D data uses depth == 1.
struct Extent {
  int depth = 1;
  int height = 1;
  int width = 1;

  std::size_t voxels() const noexcept {
    return static_cast<std::size_t>(depth) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  bool is_3d() const noexcept { return depth > 1; }
  int spatial_dims() const noexcept { return is_3d() ? 3 : 2; }
  bool operator==(const Extent&) const = default;

  std::string str() const;
  /// {size, size} for 2-D or {size, size, size} for 3-D.
  static Extent cube(int spatial_dims, int size);
  /// Halves every active axis (depth stays 1 for 2-D).
  Extent halved() const;
  Extent doubled() const;
};

/// Dense channel-major activation tensor [channels x depth x height x width].
struct Tensor {
  int channels = 0;
  Extent extent;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, Extent e, double fill = 0.0)
      : channels(c), extent(e), data(static_cast<std::size_t>(c) * e.voxels(), fill) {}

  std::size_t plane() const noexcept { return extent.voxels(); }
  std::span<double> channel(int c) {
    return {data.data() + static_cast<std::size_t>(c) * plane(), plane()};
  }
  std::span<const double> channel(int c) const {
    return {data.data() + static_cast<std::size_t>(c) * plane(), plane()};
  }
  double& at(int c, int z, int y, int x) {
    return data[((static_cast<std::size_t>(c) * extent.depth + z) * extent.height + y) *
                    extent.width + x];
  }
  double at(int c, int z, int y, int x) const {
    return data[((static_cast<std::size_t>(c) * extent.depth + z) * extent.height + y) *
                    extent.width + x];
  }
  std::string shape_str() const;
};

/// Concatenates along the channel axis. Extents must match.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Splits the gradient of a concatenation back into its two parts.
void split_channels(const Tensor& joined, int first_channels, Tensor& a, Tensor& b);

}  // namespace probgrowth
