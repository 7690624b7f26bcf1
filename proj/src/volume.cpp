#include "probgrowth/volume.hpp"

#include <algorithm>
#include <cmath>

#include "probgrowth/error.hpp"

namespace probgrowth {

ImageVolume::ImageVolume(Extent e, int contrasts)
    : extent(e), data(static_cast<std::size_t>(contrasts) * e.voxels(), 0.0f) {
  for (int c = 0; c < contrasts; ++c) {
    contrast_names.emplace_back(c < kNumContrasts ? std::string(kContrastNames[c])
                                                  : "contrast" + std::to_string(c));
  }
}

void ImageVolume::validate() const {
  if (data.size() != static_cast<std::size_t>(contrasts()) * extent.voxels()) {
    throw DataError("image volume size " + std::to_string(data.size()) +
                    " does not match shape " + std::to_string(contrasts()) + " x " +
                    extent.str());
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw DataError("image volume contains a non-finite value at flat index " +
                      std::to_string(i));
    }
  }
}

std::size_t LabelMap::count(TumorClass c) const {
  return static_cast<std::size_t>(
      std::count(data.begin(), data.end(), static_cast<std::uint8_t>(c)));
}

std::size_t LabelMap::tumor_volume() const {
  return static_cast<std::size_t>(
      std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

void LabelMap::validate() const {
  if (data.size() != extent.voxels()) {
    throw DataError("label map size does not match shape " + extent.str());
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i] >= kNumClasses) {
      throw DataError("label value " + std::to_string(data[i]) + " outside {0..3} at index " +
                      std::to_string(i));
    }
  }
}

Tensor stack_inputs(std::span<const ImageVolume> volumes) {
  if (volumes.empty()) {
    throw DimensionError("stack_inputs: no volumes");
  }
  int channels = 0;
  for (const auto& v : volumes) {
    if (v.extent != volumes.front().extent) {
      throw DimensionError("stack_inputs: extent " + v.extent.str() + " vs " +
                           volumes.front().extent.str());
    }
    channels += v.contrasts();
  }
  Tensor out(channels, volumes.front().extent);
  std::size_t offset = 0;
  for (const auto& v : volumes) {
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(offset));
    offset += v.data.size();
  }
  return out;
}

Tensor one_hot(const LabelMap& labels) {
  Tensor out(kNumClasses, labels.extent);
  const std::size_t plane = labels.extent.voxels();
  for (std::size_t i = 0; i < plane; ++i) {
    const int c = labels.data[i];
    if (c >= kNumClasses) {
      throw DataError("label value " + std::to_string(c) + " outside {0..3}");
    }
    out.data[static_cast<std::size_t>(c) * plane + i] = 1.0;
  }
  return out;
}

}  // namespace probgrowth
