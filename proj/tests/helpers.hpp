#pragma once

#include <cmath>
#include <filesystem>
#include <string>

#include "probgrowth/datapipe.hpp"
#include "probgrowth/model.hpp"
#include "probgrowth/rng.hpp"

namespace testing {

using namespace probgrowth;

inline ImageVolume random_volume(Extent e, Rng& rng) {
  ImageVolume v(e, kNumContrasts);
  for (auto& x : v.data) x = static_cast<float>(rng.normal());
  return v;
}

inline LabelMap disc_labels(Extent e, double cy, double cx, double r) {
  LabelMap l(e);
  for (int y = 0; y < e.height; ++y) {
    for (int x = 0; x < e.width; ++x) {
      const double d = std::hypot(y - cy, x - cx);
      l.data[static_cast<std::size_t>(y) * e.width + x] =
          d <= 0.4 * r ? 3 : d <= 0.7 * r ? 2 : d <= r ? 1 : 0;
    }
  }
  return l;
}

inline NetworkConfig toy_config(int timepoints = 2) {
  NetworkConfig c;
  c.n_input_timepoints = timepoints;
  c.base_channels = 4;
  c.depth = 2;
  c.seed = 11;
  return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("probgrowth_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
