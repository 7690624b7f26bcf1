#pragma once

#include <map>
#include <string>
#include <vector>

#include "probgrowth/rng.hpp"
#include "probgrowth/synthgrowth.hpp"
#include "probgrowth/volume.hpp"

namespace probgrowth {

/// Input/target pairing of a case: AB->C is the growth task, the others are
/// the single-timepoint baselines.
enum class CaseMode { kABtoC, kBtoB, kCtoC, kBtoC };

std::string to_string(CaseMode mode);
/// Accepts "AB->C", "ABtoC", "ab_c" style spellings case-insensitively.
CaseMode case_mode_from_string(const std::string& text);
int input_timepoint_count(CaseMode mode);

struct GrowthCase {
  std::string case_id;
  std::string subject_id;
  CaseMode mode = CaseMode::kABtoC;
  int fold = -1;
  std::vector<ImageVolume> inputs;
  LabelMap target;
  std::vector<int> input_timepoints;
  int target_timepoint = 0;

  Extent extent() const { return target.extent; }
  /// Checks input count for the mode and spatial congruence.
  void validate() const;
};

/// Records which timepoint arrays were materialised, so tests can prove a
/// mode never touches data it must not see.
struct AccessLog {
  enum class Kind { kImage, kLabel };
  struct Entry {
    std::string subject_id;
    int timepoint;
    Kind kind;
  };
  std::vector<Entry> entries;

  void record(const std::string& subject, int timepoint, Kind kind) {
    entries.push_back({subject, timepoint, kind});
  }
};

/// Per-contrast z-score over all voxels with the population (1/N) deviation.
/// Throws DataError naming a zero-variance contrast.
ImageVolume zscore_normalize(const ImageVolume& volume);

/// Sliding-window cases of one series. Too few timepoints yield an empty list.
std::vector<GrowthCase> build_cases(const SubjectSeries& series, CaseMode mode,
                                    AccessLog* log = nullptr);

/// Applies zscore_normalize to every input volume in place.
void normalize_inputs(GrowthCase& c);

struct FoldSplit {
  int n_folds = 0;
  std::map<std::string, int> assignment;

  std::vector<std::string> subjects_in(int fold) const;
  std::vector<std::string> subjects_not_in(int fold) const;
  int fold_of(const std::string& subject_id) const;
};

/// Subject-level random partition; sizes differ by at most one.
FoldSplit make_folds(std::vector<std::string> subject_ids, int n_folds, std::uint64_t seed);

/// Probability with which a patch is centred on a target tumour voxel.
inline constexpr double kTumorPatchProbability = 0.7;

/// Crops inputs and target with one shared offset, tumour-biased.
GrowthCase extract_patch(const GrowthCase& c, Extent patch, Rng& rng);
/// Crop at an explicit offset (z, y, x).
GrowthCase crop_case(const GrowthCase& c, Extent patch, std::array<int, 3> offset);

/// Spatial axis index: 0 = z, 1 = y, 2 = x.
GrowthCase mirror_case(const GrowthCase& c, int axis);
/// Rotates by quarter_turns * 90 degrees in the y-x plane (requires height == width
/// unless quarter_turns is even).
GrowthCase rotate_case(const GrowthCase& c, int quarter_turns);

/// Mirroring, in-plane rotation and per-contrast intensity scaling in [0.9, 1.1],
/// each applied with independent `probability`.
GrowthCase augment(const GrowthCase& c, Rng& rng, double probability = 0.5);

}  // namespace probgrowth
