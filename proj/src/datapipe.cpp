#include "probgrowth/datapipe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>

#include "probgrowth/error.hpp"

namespace probgrowth {

namespace {

using Coord = std::array<int, 3>;

// Rebuilds every array of a case on `out_extent`; `source` maps an output
// voxel to the input voxel it is copied from.
template <typename SourceFn>
GrowthCase remap(const GrowthCase& c, Extent out_extent, SourceFn source) {
  const Extent in = c.extent();
  std::vector<std::size_t> index(out_extent.voxels());
  std::size_t i = 0;
  for (int z = 0; z < out_extent.depth; ++z) {
    for (int y = 0; y < out_extent.height; ++y) {
      for (int x = 0; x < out_extent.width; ++x, ++i) {
        const Coord s = source(Coord{z, y, x});
        index[i] = (static_cast<std::size_t>(s[0]) * in.height + s[1]) * in.width + s[2];
      }
    }
  }

  GrowthCase out = c;
  out.target = LabelMap(out_extent);
  for (std::size_t k = 0; k < index.size(); ++k) out.target.data[k] = c.target.data[index[k]];
  for (std::size_t v = 0; v < c.inputs.size(); ++v) {
    const ImageVolume& src = c.inputs[v];
    ImageVolume dst(out_extent, src.contrasts());
    dst.contrast_names = src.contrast_names;
    for (int ch = 0; ch < src.contrasts(); ++ch) {
      auto from = src.channel(ch);
      auto to = dst.channel(ch);
      for (std::size_t k = 0; k < index.size(); ++k) to[k] = from[index[k]];
    }
    out.inputs[v] = std::move(dst);
  }
  return out;
}

std::string lower_alnum(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  return out;
}

}  // namespace

std::string to_string(CaseMode mode) {
  switch (mode) {
    case CaseMode::kABtoC: return "AB->C";
    case CaseMode::kBtoB: return "B->B";
    case CaseMode::kCtoC: return "C->C";
    case CaseMode::kBtoC: return "B->C";
  }
  return "?";
}

CaseMode case_mode_from_string(const std::string& text) {
  std::string key = lower_alnum(text);
  if (key == "abc" || key == "abtoc") return CaseMode::kABtoC;
  if (key == "bb" || key == "btob") return CaseMode::kBtoB;
  if (key == "cc" || key == "ctoc") return CaseMode::kCtoC;
  if (key == "bc" || key == "btoc") return CaseMode::kBtoC;
  throw ConfigError("unknown case mode '" + text + "'");
}

int input_timepoint_count(CaseMode mode) { return mode == CaseMode::kABtoC ? 2 : 1; }

void GrowthCase::validate() const {
  if (static_cast<int>(inputs.size()) != input_timepoint_count(mode)) {
    throw DimensionError("case " + case_id + ": mode " + to_string(mode) + " expects " +
                         std::to_string(input_timepoint_count(mode)) + " input volumes, got " +
                         std::to_string(inputs.size()));
  }
  for (const auto& v : inputs) {
    if (v.extent != target.extent) {
      throw DimensionError("case " + case_id + ": input extent " + v.extent.str() +
                           " vs target " + target.extent.str());
    }
  }
}

ImageVolume zscore_normalize(const ImageVolume& volume) {
  ImageVolume out = volume;
  const std::size_t n = volume.extent.voxels();
  for (int c = 0; c < volume.contrasts(); ++c) {
    auto src = volume.channel(c);
    double mean = 0.0;
    for (float v : src) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (float v : src) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    if (!(var > 0.0) || !std::isfinite(var)) {
      throw DataError("zscore_normalize: contrast " + std::to_string(c) + " (" +
                      volume.contrast_names[c] + ") has zero variance");
    }
    const double inv = 1.0 / std::sqrt(var);
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>((src[i] - mean) * inv);
  }
  return out;
}

std::vector<GrowthCase> build_cases(const SubjectSeries& series, CaseMode mode, AccessLog* log) {
  const int n = static_cast<int>(series.timepoints.size());
  const int needed = mode == CaseMode::kABtoC ? 3 : (mode == CaseMode::kBtoC ? 2 : 1);
  std::vector<GrowthCase> cases;
  if (n < needed) {
    std::clog << "build_cases: " << series.subject_id << " has " << n << " timepoints, mode "
              << to_string(mode) << " needs " << needed << "; no cases\n";
    return cases;
  }

  auto image = [&](int t) -> const ImageVolume& {
    if (log) log->record(series.subject_id, t, AccessLog::Kind::kImage);
    return series.timepoints[t].image;
  };
  auto label = [&](int t) -> const LabelMap& {
    if (log) log->record(series.subject_id, t, AccessLog::Kind::kLabel);
    return series.timepoints[t].labels;
  };

  auto make = [&](std::vector<int> in_tps, int target_tp) {
    GrowthCase c;
    c.subject_id = series.subject_id;
    c.mode = mode;
    c.case_id = series.subject_id;
    for (int t : in_tps) c.case_id += "_t" + std::to_string(t);
    if (mode == CaseMode::kABtoC || mode == CaseMode::kBtoC) {
      c.case_id += "_t" + std::to_string(target_tp);
    }
    for (int t : in_tps) c.inputs.push_back(image(t));
    c.target = label(target_tp);
    c.input_timepoints = std::move(in_tps);
    c.target_timepoint = target_tp;
    cases.push_back(std::move(c));
  };

  switch (mode) {
    case CaseMode::kABtoC:
      for (int t = 0; t + 2 < n; ++t) make({t, t + 1}, t + 2);
      break;
    case CaseMode::kBtoC:
      for (int t = 0; t + 1 < n; ++t) make({t}, t + 1);
      break;
    case CaseMode::kBtoB:
    case CaseMode::kCtoC:
      for (int t = 0; t < n; ++t) make({t}, t);
      break;
  }
  return cases;
}

void normalize_inputs(GrowthCase& c) {
  for (auto& v : c.inputs) v = zscore_normalize(v);
}

std::vector<std::string> FoldSplit::subjects_in(int fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignment) {
    if (f == fold) out.push_back(id);
  }
  return out;
}

std::vector<std::string> FoldSplit::subjects_not_in(int fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignment) {
    if (f != fold) out.push_back(id);
  }
  return out;
}

int FoldSplit::fold_of(const std::string& subject_id) const {
  auto it = assignment.find(subject_id);
  if (it == assignment.end()) throw LookupError("subject '" + subject_id + "' not in fold split");
  return it->second;
}

FoldSplit make_folds(std::vector<std::string> subject_ids, int n_folds, std::uint64_t seed) {
  std::sort(subject_ids.begin(), subject_ids.end());
  subject_ids.erase(std::unique(subject_ids.begin(), subject_ids.end()), subject_ids.end());
  if (n_folds < 1 || n_folds > static_cast<int>(subject_ids.size())) {
    throw ArgumentError("make_folds: n_folds = " + std::to_string(n_folds) + " with " +
                        std::to_string(subject_ids.size()) + " subjects");
  }
  Rng rng(seed);
  for (int i = static_cast<int>(subject_ids.size()) - 1; i > 0; --i) {
    std::swap(subject_ids[i], subject_ids[rng.uniform_int(0, i)]);
  }
  FoldSplit split;
  split.n_folds = n_folds;
  for (std::size_t i = 0; i < subject_ids.size(); ++i) {
    split.assignment[subject_ids[i]] = static_cast<int>(i % n_folds);
  }
  return split;
}

GrowthCase crop_case(const GrowthCase& c, Extent patch, std::array<int, 3> offset) {
  const Extent e = c.extent();
  if (patch.depth > e.depth || patch.height > e.height || patch.width > e.width) {
    throw ArgumentError("patch " + patch.str() + " larger than volume " + e.str());
  }
  return remap(c, patch, [&](Coord p) {
    return Coord{p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]};
  });
}

GrowthCase extract_patch(const GrowthCase& c, Extent patch, Rng& rng) {
  const Extent e = c.extent();
  if (patch.depth > e.depth || patch.height > e.height || patch.width > e.width) {
    throw ArgumentError("patch " + patch.str() + " larger than volume " + e.str());
  }
  const std::array<int, 3> limit{e.depth - patch.depth, e.height - patch.height,
                                 e.width - patch.width};
  const std::array<int, 3> size{patch.depth, patch.height, patch.width};

  const bool centre_on_tumor = rng.bernoulli(kTumorPatchProbability);
  std::array<int, 3> offset{};
  std::vector<std::size_t> tumor;
  if (centre_on_tumor) {
    for (std::size_t i = 0; i < c.target.data.size(); ++i) {
      if (c.target.data[i] != 0) tumor.push_back(i);
    }
  }
  if (!tumor.empty()) {
    const std::size_t v = tumor[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(tumor.size()) - 1))];
    const std::array<int, 3> voxel{static_cast<int>(v / (static_cast<std::size_t>(e.height) * e.width)),
                                   static_cast<int>((v / e.width) % e.height),
                                   static_cast<int>(v % e.width)};
    for (int a = 0; a < 3; ++a) {
      const int quarter = size[a] / 4;
      const int jitter = quarter > 0 ? rng.uniform_int(-quarter, quarter) : 0;
      offset[a] = std::clamp(voxel[a] - size[a] / 2 + jitter, 0, limit[a]);
    }
  } else {
    for (int a = 0; a < 3; ++a) offset[a] = rng.uniform_int(0, limit[a]);
  }
  return crop_case(c, patch, offset);
}

GrowthCase mirror_case(const GrowthCase& c, int axis) {
  const Extent e = c.extent();
  const std::array<int, 3> size{e.depth, e.height, e.width};
  if (axis < 0 || axis > 2) throw ArgumentError("mirror_case: axis must be 0, 1 or 2");
  return remap(c, e, [&](Coord p) {
    p[axis] = size[axis] - 1 - p[axis];
    return p;
  });
}

GrowthCase rotate_case(const GrowthCase& c, int quarter_turns) {
  const Extent e = c.extent();
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return c;
  if (k % 2 == 1 && e.height != e.width) {
    throw ArgumentError("rotate_case: odd quarter turns need a square in-plane extent");
  }
  return remap(c, e, [&](Coord p) {
    const int y = p[1];
    const int x = p[2];
    switch (k) {
      case 1: return Coord{p[0], x, e.width - 1 - y};
      case 2: return Coord{p[0], e.height - 1 - y, e.width - 1 - x};
      default: return Coord{p[0], e.height - 1 - x, y};
    }
  });
}

GrowthCase augment(const GrowthCase& c, Rng& rng, double probability) {
  const bool do_mirror = rng.bernoulli(probability);
  const bool do_rotate = rng.bernoulli(probability);
  const bool do_scale = rng.bernoulli(probability);
  const Extent e = c.extent();

  GrowthCase out = c;
  if (do_mirror) {
    const int axis = e.is_3d() ? rng.uniform_int(0, 2) : rng.uniform_int(1, 2);
    out = mirror_case(out, axis);
  }
  if (do_rotate) {
    const int turns = e.height == e.width ? rng.uniform_int(1, 3) : 2;
    out = rotate_case(out, turns);
  }
  if (do_scale) {
    for (auto& v : out.inputs) {
      for (int ch = 0; ch < v.contrasts(); ++ch) {
        const float s = static_cast<float>(rng.uniform(0.9, 1.1));
        for (float& x : v.channel(ch)) x *= s;
      }
    }
  }
  return out;
}

}  // namespace probgrowth
