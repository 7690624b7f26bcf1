#pragma once

// Synthetic longitudinal lesion generator.
//
// A lesion is star-shaped around a centre: its whole-tumour boundary is
// r(u) = exp(sum_j alpha_j B_j(u)) for unit directions u and a fixed low-order
// direction basis B (circular harmonics in 2-D, real spherical harmonics up to
// degree 2 in 3-D). Tumour core and necrosis are concentric fractions of that
// boundary, so class nesting holds by construction. One time step multiplies
// the boundary by g^(+-(1 + a f(u))), with g drawn from the growth-rate range
// around a per-subject tendency, the sign flipped with the shrink
// probability, and f a smooth directional field mixing a persistent subject
// direction with a per-step random one.
//
// Each time step is driven by its own seed, so any future of a timepoint can
// be re-drawn independently; `sample_futures` uses that to produce the
// ground-truth conditional distribution.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "probgrowth/volume.hpp"

namespace probgrowth {

struct GrowthParams {
  int spatial_dims = 2;
  int grid_size = 64;
  int n_subjects = 60;
  int timepoints_per_subject = 6;
  /// Per-step multiplicative boundary factor interval (>= 1; shrink steps invert it).
  double growth_rate_min = 1.05;
  double growth_rate_max = 1.5;
  double shrink_probability = 0.25;
  double anisotropy_strength = 0.6;
  double noise_sigma = 0.1;
  /// Max annotated-boundary offset (voxels) relative to the imaged boundary.
  double annotation_jitter = 1.0;
  std::uint64_t seed = 1234;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  Extent extent() const { return Extent::cube(spatial_dims, grid_size); }
};

nlohmann::json to_json(const GrowthParams& p);
/// Missing keys keep their defaults; the result is validated.
GrowthParams growth_params_from_json(const nlohmann::json& j);

/// Hidden generator state of one timepoint. Stored alongside the arrays so a
/// dataset read back from disk can still be continued by `sample_futures`.
struct GrowthState {
  std::array<double, 3> center{};        // z, y, x in voxels
  std::array<double, 3> brain_radius{};  // z, y, x semi-axes
  std::vector<double> log_radius;        // coefficients on the direction basis
  std::vector<double> subject_field;     // persistent direction (basis index >= 1)
  double tendency = 0.5;
  double core_ratio = 0.6;
  double necrosis_ratio = 0.4;
  double jitter = 0.0;

  bool operator==(const GrowthState&) const = default;
};

nlohmann::json to_json(const GrowthState& s);
GrowthState growth_state_from_json(const nlohmann::json& j);

struct Timepoint {
  ImageVolume image;
  LabelMap labels;
  int day_offset = 0;
  GrowthState state;
  bool operator==(const Timepoint&) const = default;
};

struct SubjectSeries {
  std::string subject_id;
  std::uint64_t subject_seed = 0;
  std::vector<Timepoint> timepoints;

  /// Throws DataError if day offsets are not strictly increasing or shapes differ.
  void validate() const;
  bool operator==(const SubjectSeries&) const = default;
};

/// Seed of the step that produces timepoint `index` (index 0 is the initial scan).
std::uint64_t step_seed(std::uint64_t subject_seed, int index);
std::uint64_t subject_seed_for(const GrowthParams& params, int subject_index);
std::string subject_id_for(int subject_index);

SubjectSeries generate_subject(const GrowthParams& params, std::uint64_t subject_seed,
                               const std::string& subject_id = "subject");

/// All `params.n_subjects` subjects; generated in parallel, seed-deterministic.
std::vector<SubjectSeries> generate_dataset(const GrowthParams& params);

/// Draws `n` futures of `present` (the step after it) using seeds seed, seed+1, ...
/// `past` is accepted to mirror the case structure; the process is Markov in the state.
std::vector<LabelMap> sample_futures(const Timepoint& past, const Timepoint& present,
                                     const GrowthParams& params, int n, std::uint64_t seed);

/// Advances one step with the given step seed (exposed for tests and the oracle).
Timepoint advance(const Timepoint& present, const GrowthParams& params, std::uint64_t seed);

/// Rasterizes the label map of a state (annotation jitter applied).
LabelMap render_labels(const GrowthState& state, const GrowthParams& params);

// ---- On-disk dataset -------------------------------------------------------

struct DatasetManifest {
  nlohmann::json json;
  std::size_t subject_count() const { return json.at("subjects").size(); }
};

/// Writes one directory per subject plus `manifest.json`. Throws IoError with the path.
DatasetManifest write_dataset(const std::vector<SubjectSeries>& subjects,
                              const GrowthParams& params, const std::filesystem::path& dir);

struct Dataset {
  GrowthParams params;
  std::vector<SubjectSeries> subjects;
  nlohmann::json manifest;

  const SubjectSeries& subject(const std::string& id) const;
};

Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace probgrowth
