#pragma once

#include <cstdint>
#include <vector>

#include "probgrowth/model.hpp"

namespace probgrowth {

/// Adaptive-moment gradient descent; moments are kept per parameter array in
/// the order of ProbUNet::parameters().
struct AdamState {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void ensure_shapes(const std::vector<Param*>& params);
  /// One update from the accumulated gradients.
  void apply(const std::vector<Param*>& params);
  bool operator==(const AdamState&) const = default;
};

}  // namespace probgrowth
