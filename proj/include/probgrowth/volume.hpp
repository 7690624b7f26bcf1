#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "probgrowth/tensor.hpp"

namespace probgrowth {

enum class TumorClass : std::uint8_t { kBackground = 0, kEdema = 1, kEnhancing = 2, kNecrosis = 3 };

inline constexpr int kNumClasses = 4;
inline constexpr int kNumContrasts = 4;

inline constexpr std::array<std::string_view, kNumClasses> kClassNames{
    "background", "edema", "enhancing_tumor", "necrosis"};
inline constexpr std::array<std::string_view, kNumContrasts> kContrastNames{"T1n", "T1ce", "T2",
                                                                             "FLAIR"};
inline constexpr int kFlairIndex = 3;

/// Multi-contrast intensity volume, contrast-major then z, y, x.
struct ImageVolume {
  Extent extent;
  std::vector<std::string> contrast_names;
  std::vector<float> data;

  ImageVolume() = default;
  ImageVolume(Extent e, int contrasts);

  int contrasts() const noexcept { return static_cast<int>(contrast_names.size()); }
  std::span<float> channel(int c) {
    return {data.data() + static_cast<std::size_t>(c) * extent.voxels(), extent.voxels()};
  }
  std::span<const float> channel(int c) const {
    return {data.data() + static_cast<std::size_t>(c) * extent.voxels(), extent.voxels()};
  }
  /// Throws DataError on non-finite values or inconsistent sizes.
  void validate() const;
  bool operator==(const ImageVolume&) const = default;
};

/// Per-voxel class ids in {0,1,2,3}, z, y, x order.
struct LabelMap {
  Extent extent;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  explicit LabelMap(Extent e) : extent(e), data(e.voxels(), 0) {}

  std::size_t count(TumorClass c) const;
  /// Voxels of any tumor class.
  std::size_t tumor_volume() const;
  void validate() const;
  bool operator==(const LabelMap&) const = default;
};

/// Stacks volumes as channels of one tensor (timepoints outer, contrasts inner).
Tensor stack_inputs(std::span<const ImageVolume> volumes);

/// One-hot encoding [kNumClasses x extent].
Tensor one_hot(const LabelMap& labels);

}  // namespace probgrowth
