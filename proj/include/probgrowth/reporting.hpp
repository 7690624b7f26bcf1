#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "probgrowth/datapipe.hpp"
#include "probgrowth/evaluation.hpp"
#include "probgrowth/model.hpp"

namespace probgrowth {

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  RgbImage() = default;
  RgbImage(int w, int h, Rgb fill = {0, 0, 0});
  Rgb get(int x, int y) const;
  void set(int x, int y, Rgb c);
  /// Copies `src` with its top-left corner at (x, y).
  void blit(const RgbImage& src, int x, int y);
  RgbImage crop(int x, int y, int w, int h) const;
  bool operator==(const RgbImage&) const = default;
};

/// 8-bit RGB PNG without time or text chunks, so output bytes depend only on
/// the pixels.
void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

/// Fixed for a run: contour and class colours.
struct Palette {
  Rgb ground_truth{230, 25, 25};
  Rgb mean_prediction{128, 0, 160};
  Rgb best_sample{128, 0, 160};
  Rgb mean_marker{255, 255, 255};
  std::array<Rgb, 4> classes{{{0, 0, 0}, {250, 210, 40}, {40, 200, 80}, {230, 60, 40}}};
};

struct OverlaySpec {
  int background_contrast = kFlairIndex;
  /// z index for 3-D volumes; -1 picks the middle slice.
  int slice = -1;
  /// Pixels per voxel side.
  int scale = 4;
  /// Dash period (pixels) of the best-sample contour.
  int dash = 6;
  Palette palette;
};

/// Inner boundary of a 2-D mask upscaled by `scale` (nearest): pixels inside
/// with a 4-neighbour outside or on the image edge. Returns a byte mask of
/// (width*scale) x (height*scale).
std::vector<std::uint8_t> contour_pixels(const std::vector<std::uint8_t>& mask, int width,
                                         int height, int scale);

/// Slice `z` of a 2-D/3-D label map as a height*width whole-tumour mask.
std::vector<std::uint8_t> whole_tumor_slice(const LabelMap& labels, int z);

/// Greyscale background slice, min-max scaled over the slice.
RgbImage background_slice(const ImageVolume& image, int contrast, int z, int scale);

/// FLAIR background with ground truth (red), prior-mean prediction (solid
/// purple) and best-volume-match sample (dashed purple) contours. Absent
/// sources are passed as nullptr.
RgbImage render_overlay(const ImageVolume& background, const LabelMap* ground_truth,
                        const LabelMap* mean_prediction, const LabelMap* best_sample,
                        const OverlaySpec& spec);

/// Class colours blended over the background.
RgbImage render_segmentation(const ImageVolume& background, const LabelMap& labels,
                             const OverlaySpec& spec);

/// Resolves the slice index of a spec; throws ArgumentError when out of range.
int resolve_slice(const OverlaySpec& spec, Extent extent);

struct OverlayResult {
  RgbImage image;
  QueryResult query;
  LabelMap mean_prediction;
  LabelMap best_sample;
};

/// Decodes the prior mean and the best-volume-match sample of the case and
/// draws them over its last input volume.
OverlayResult render_case_overlay(const ProbUNet& model, const GrowthCase& c,
                                  const OverlaySpec& spec);

struct LatentGridResult {
  RgbImage image;
  int cell_width = 0;
  int cell_height = 0;
  int gap = 2;
  /// volumes[row][col]: whole-tumour voxels of the cell; row follows axes[0],
  /// column follows axes[1], both from -3 sigma to +3 sigma.
  std::vector<std::vector<std::size_t>> volumes;
  /// Pixel origin of cell (row, col).
  std::pair<int, int> cell_origin(int row, int col) const;
};

/// steps x steps montage over two latent axes (others at the prior mean),
/// centre cell framed, ground-truth inset to the right.
LatentGridResult render_latent_grid(const ProbUNet& model, const GrowthCase& c,
                                    std::array<int, 2> axes, int steps, const OverlaySpec& spec);

/// True when volumes are monotone (non-strictly, not constant) along every
/// row or along every column.
bool monotone_along_an_axis(const std::vector<std::vector<std::size_t>>& volumes);

/// {case_id}_{artifact}_{variant}.{ext}
std::string artifact_name(const std::string& case_id, const std::string& artifact,
                          const std::string& variant, const std::string& ext);

// ---- Summary ------------------------------------------------------------------------

struct SummaryRow {
  std::string group;
  std::string variant;
  std::string metric;
  std::size_t n = 0;
  double median = 0.0;
};

struct PValueRow {
  std::string group;
  std::string metric;
  std::string comparison;  // "ours_vs_lower" | "ours_vs_upper"
  std::size_t n_ours = 0;
  std::size_t n_other = 0;
  double p_value = 1.0;
  bool available = false;  // false when a sample has fewer than 3 values
};

struct Summary {
  std::vector<SummaryRow> medians;
  std::vector<PValueRow> p_values;
  nlohmann::json groups;

  const SummaryRow* find(const std::string& group, const std::string& variant,
                         const std::string& metric) const;
  const PValueRow* find_p(const std::string& group, const std::string& metric,
                          const std::string& comparison) const;
};

/// Medians per (group, variant, metric) for the large and moderate groups,
/// ours-vs-bound rank-sum p values, and the stratification thresholds.
/// Throws ReportError on empty input.
Summary summarize(const std::vector<EvaluationRecord>& records, const ChangeGroups& groups);

nlohmann::json to_json(const Summary& s);
/// Writes summary.csv, pvalues.csv and summary.json into `dir`.
void write_summary(const std::filesystem::path& dir, const Summary& s);

inline constexpr std::array<const char*, 2> kReportedGroups{"large", "moderate"};

}  // namespace probgrowth
