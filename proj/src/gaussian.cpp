#include "probgrowth/gaussian.hpp"

#include <cmath>

#include "probgrowth/error.hpp"

namespace probgrowth {

DiagonalGaussian::DiagonalGaussian(std::vector<double> m, std::vector<double> lv)
    : mean(std::move(m)), log_variance(std::move(lv)) {
  validate();
}

DiagonalGaussian DiagonalGaussian::standard(int dims) {
  return DiagonalGaussian(std::vector<double>(dims, 0.0), std::vector<double>(dims, 0.0));
}

double DiagonalGaussian::sigma(int i) const { return std::exp(0.5 * log_variance[i]); }

void DiagonalGaussian::validate() const {
  if (mean.size() != log_variance.size()) {
    throw DataError("DiagonalGaussian: mean has " + std::to_string(mean.size()) +
                    " entries, log_variance " + std::to_string(log_variance.size()));
  }
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!std::isfinite(mean[i]) || !std::isfinite(log_variance[i])) {
      throw DataError("DiagonalGaussian: non-finite entry at " + std::to_string(i));
    }
  }
}

std::vector<double> reparameterize(const DiagonalGaussian& g, std::span<const double> eps) {
  if (static_cast<int>(eps.size()) != g.dims()) {
    throw DimensionError("reparameterize: noise length " + std::to_string(eps.size()) +
                         " vs latent dimension " + std::to_string(g.dims()));
  }
  std::vector<double> z(g.dims());
  for (int i = 0; i < g.dims(); ++i) z[i] = g.mean[i] + g.sigma(i) * eps[i];
  return z;
}

std::vector<double> sample_gaussian(const DiagonalGaussian& g, Rng& rng, std::vector<double>* eps) {
  std::vector<double> noise(g.dims());
  for (auto& e : noise) e = rng.normal();
  auto z = reparameterize(g, noise);
  if (eps) *eps = std::move(noise);
  return z;
}

std::vector<GridLatent> grid_latents(const DiagonalGaussian& g) {
  const int n = g.dims();
  std::size_t total = 1;
  for (int i = 0; i < n; ++i) total *= kGridSteps;

  std::vector<GridLatent> grid;
  grid.reserve(total);
  std::vector<int> k(n, -kGridHalfWidth);
  for (std::size_t idx = 0; idx < total; ++idx) {
    GridLatent point{k, std::vector<double>(n)};
    for (int i = 0; i < n; ++i) {
      point.z[i] = k[i] == 0 ? g.mean[i] : g.mean[i] + g.sigma(i) * k[i];
    }
    grid.push_back(std::move(point));
    // Odometer increment, last axis fastest.
    for (int i = n - 1; i >= 0; --i) {
      if (++k[i] <= kGridHalfWidth) break;
      k[i] = -kGridHalfWidth;
    }
  }
  return grid;
}

}  // namespace probgrowth
