#pragma once

#include <array>
#include <span>
#include <vector>

#include "probgrowth/rng.hpp"

namespace probgrowth {

/// Diagonal Gaussian over the latent space, parameterised by log-variance.
struct DiagonalGaussian {
  std::vector<double> mean;
  std::vector<double> log_variance;

  DiagonalGaussian() = default;
  DiagonalGaussian(std::vector<double> m, std::vector<double> lv);
  static DiagonalGaussian standard(int dims);

  int dims() const noexcept { return static_cast<int>(mean.size()); }
  double sigma(int i) const;
  /// Throws DataError if sizes differ or any entry is non-finite.
  void validate() const;
  bool operator==(const DiagonalGaussian&) const = default;
};

/// Reparameterised draw mean + exp(0.5 log_variance) * eps; `eps` receives the noise.
std::vector<double> sample_gaussian(const DiagonalGaussian& g, Rng& rng,
                                    std::vector<double>* eps = nullptr);

/// Draw with explicit standard-normal noise.
std::vector<double> reparameterize(const DiagonalGaussian& g, std::span<const double> eps);

inline constexpr int kGridHalfWidth = 3;
inline constexpr int kGridSteps = 2 * kGridHalfWidth + 1;

/// One grid point: integer sigma offsets k and the latent mean + sigma * k.
struct GridLatent {
  std::vector<int> k;
  std::vector<double> z;
};

/// All latents mean + sigma * k, k in {-3..3}^N, lexicographic in k.
std::vector<GridLatent> grid_latents(const DiagonalGaussian& g);

}  // namespace probgrowth
