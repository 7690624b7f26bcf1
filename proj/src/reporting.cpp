#include "probgrowth/reporting.hpp"

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

#include "probgrowth/error.hpp"

namespace probgrowth {

namespace fs = std::filesystem;
using nlohmann::json;

RgbImage::RgbImage(int w, int h, Rgb fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3) {
  for (std::size_t i = 0; i < pixels.size(); i += 3) {
    pixels[i] = fill[0];
    pixels[i + 1] = fill[1];
    pixels[i + 2] = fill[2];
  }
}

Rgb RgbImage::get(int x, int y) const {
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  return {pixels[i], pixels[i + 1], pixels[i + 2]};
}

void RgbImage::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  pixels[i] = c[0];
  pixels[i + 1] = c[1];
  pixels[i + 2] = c[2];
}

void RgbImage::blit(const RgbImage& src, int x, int y) {
  for (int yy = 0; yy < src.height; ++yy) {
    for (int xx = 0; xx < src.width; ++xx) set(x + xx, y + yy, src.get(xx, yy));
  }
}

RgbImage RgbImage::crop(int x, int y, int w, int h) const {
  if (x < 0 || y < 0 || x + w > width || y + h > height) {
    throw ArgumentError("crop outside the image");
  }
  RgbImage out(w, h);
  for (int yy = 0; yy < h; ++yy) {
    for (int xx = 0; xx < w; ++xx) out.set(xx, yy, get(x + xx, y + yy));
  }
  return out;
}

void write_png(const fs::path& path, const RgbImage& image) {
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() +
                                             static_cast<std::size_t>(y) * image.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

RgbImage read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  return out;
}

// ---- Overlays ---------------------------------------------------------------------

std::vector<std::uint8_t> contour_pixels(const std::vector<std::uint8_t>& mask, int width,
                                         int height, int scale) {
  const int w = width * scale, h = height * scale;
  auto inside = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= w || y >= h) return false;
    return mask[static_cast<std::size_t>(y / scale) * width + x / scale] != 0;
  };
  std::vector<std::uint8_t> out(static_cast<std::size_t>(w) * h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!inside(x, y)) continue;
      if (!inside(x - 1, y) || !inside(x + 1, y) || !inside(x, y - 1) || !inside(x, y + 1)) {
        out[static_cast<std::size_t>(y) * w + x] = 1;
      }
    }
  }
  return out;
}

int resolve_slice(const OverlaySpec& spec, Extent extent) {
  if (extent.depth == 1) {
    if (spec.slice > 0) {
      throw ArgumentError("slice " + std::to_string(spec.slice) + " requested on a 2-D volume");
    }
    return 0;
  }
  const int z = spec.slice < 0 ? extent.depth / 2 : spec.slice;
  if (z >= extent.depth) {
    throw ArgumentError("slice " + std::to_string(z) + " outside depth " +
                        std::to_string(extent.depth));
  }
  return z;
}

std::vector<std::uint8_t> whole_tumor_slice(const LabelMap& labels, int z) {
  const std::size_t plane = static_cast<std::size_t>(labels.extent.height) * labels.extent.width;
  std::vector<std::uint8_t> out(plane);
  for (std::size_t i = 0; i < plane; ++i) out[i] = labels.data[z * plane + i] != 0;
  return out;
}

RgbImage background_slice(const ImageVolume& image, int contrast, int z, int scale) {
  if (contrast < 0 || contrast >= image.contrasts()) {
    throw ArgumentError("background contrast " + std::to_string(contrast) + " not in volume");
  }
  const int w = image.extent.width, h = image.extent.height;
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  const auto ch = image.channel(contrast).subspan(z * plane, plane);
  const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
  const double range = *hi - *lo;
  RgbImage out(w * scale, h * scale);
  for (int y = 0; y < h * scale; ++y) {
    for (int x = 0; x < w * scale; ++x) {
      const double v = ch[static_cast<std::size_t>(y / scale) * w + x / scale];
      const auto g = static_cast<std::uint8_t>(range > 0 ? std::lround(255.0 * (v - *lo) / range) : 0);
      out.set(x, y, {g, g, g});
    }
  }
  return out;
}

namespace {

void draw_contour(RgbImage& img, const LabelMap& labels, int z, int scale, Rgb color, int dash) {
  const auto px = contour_pixels(whole_tumor_slice(labels, z), labels.extent.width,
                                 labels.extent.height, scale);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (!px[static_cast<std::size_t>(y) * img.width + x]) continue;
      if (dash > 0 && ((x + y) / (dash / 2 > 0 ? dash / 2 : 1)) % 2 == 1) continue;
      img.set(x, y, color);
    }
  }
}

void check_congruent(const ImageVolume& bg, const LabelMap* l, const char* what) {
  if (l && l->extent != bg.extent) {
    throw ArgumentError(std::string(what) + " " + l->extent.str() + " does not match background " +
                        bg.extent.str());
  }
}

}  // namespace

RgbImage render_overlay(const ImageVolume& background, const LabelMap* ground_truth,
                        const LabelMap* mean_prediction, const LabelMap* best_sample,
                        const OverlaySpec& spec) {
  check_congruent(background, ground_truth, "ground truth");
  check_congruent(background, mean_prediction, "mean prediction");
  check_congruent(background, best_sample, "best sample");
  const int z = resolve_slice(spec, background.extent);
  RgbImage img = background_slice(background, spec.background_contrast, z, spec.scale);
  if (ground_truth) draw_contour(img, *ground_truth, z, spec.scale, spec.palette.ground_truth, 0);
  if (mean_prediction) {
    draw_contour(img, *mean_prediction, z, spec.scale, spec.palette.mean_prediction, 0);
  }
  if (best_sample) {
    draw_contour(img, *best_sample, z, spec.scale, spec.palette.best_sample, spec.dash);
  }
  return img;
}

RgbImage render_segmentation(const ImageVolume& background, const LabelMap& labels,
                             const OverlaySpec& spec) {
  check_congruent(background, &labels, "labels");
  const int z = resolve_slice(spec, background.extent);
  RgbImage img = background_slice(background, spec.background_contrast, z, spec.scale);
  const int w = labels.extent.width;
  const std::size_t plane = static_cast<std::size_t>(w) * labels.extent.height;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const int c = labels.data[z * plane + static_cast<std::size_t>(y / spec.scale) * w + x / spec.scale];
      if (c == 0) continue;
      const Rgb bg = img.get(x, y);
      const Rgb fg = spec.palette.classes[c];
      Rgb mix;
      for (int k = 0; k < 3; ++k) mix[k] = static_cast<std::uint8_t>((bg[k] + 3 * fg[k]) / 4);
      img.set(x, y, mix);
    }
  }
  return img;
}

OverlayResult render_case_overlay(const ProbUNet& model, const GrowthCase& c,
                                  const OverlaySpec& spec) {
  OverlayResult r;
  r.query = query_volume_dice(model, c);
  const LatentDecoder decoder(model, stack_inputs(c.inputs));
  r.mean_prediction = decoder.decode_labels(model.prior_encode(stack_inputs(c.inputs)).mean);
  r.best_sample = decoder.decode_labels(r.query.latent);
  r.image = render_overlay(c.inputs.back(), &c.target, &r.mean_prediction, &r.best_sample, spec);
  return r;
}

std::pair<int, int> LatentGridResult::cell_origin(int row, int col) const {
  return {gap + col * (cell_width + gap), gap + row * (cell_height + gap)};
}

LatentGridResult render_latent_grid(const ProbUNet& model, const GrowthCase& c,
                                    std::array<int, 2> axes, int steps, const OverlaySpec& spec) {
  const int n = model.config().latent_dim;
  if (axes[0] == axes[1] || axes[0] < 0 || axes[1] < 0 || axes[0] >= n || axes[1] >= n) {
    throw ArgumentError("latent grid axes must be distinct and below " + std::to_string(n));
  }
  if (steps < 1 || steps % 2 == 0) throw ArgumentError("latent grid steps must be odd");
  const Tensor inputs = stack_inputs(c.inputs);
  model.check_inputs(inputs, model.config().input_channels());
  const DiagonalGaussian prior = model.prior_encode(inputs);
  const LatentDecoder decoder(model, inputs);
  const ImageVolume& bg = c.inputs.back();

  LatentGridResult r;
  r.cell_width = bg.extent.width * spec.scale;
  r.cell_height = bg.extent.height * spec.scale;
  const int montage_w = r.gap + steps * (r.cell_width + r.gap);
  const int montage_h = r.gap + steps * (r.cell_height + r.gap);
  const int inset_x = montage_w + 4 * r.gap;
  r.image = RgbImage(inset_x + r.cell_width + r.gap, montage_h);
  r.volumes.assign(steps, std::vector<std::size_t>(steps, 0));

  const int half = steps / 2;
  for (int row = 0; row < steps; ++row) {
    for (int col = 0; col < steps; ++col) {
      std::vector<double> z = prior.mean;
      z[axes[0]] += (row - half) * prior.sigma(axes[0]);
      z[axes[1]] += (col - half) * prior.sigma(axes[1]);
      const LabelMap labels = decoder.decode_labels(z);
      r.volumes[row][col] = labels.tumor_volume();
      const auto [x, y] = r.cell_origin(row, col);
      r.image.blit(render_segmentation(bg, labels, spec), x, y);
    }
  }
  // Frame around the mean cell, drawn in the gap so the cell itself is intact.
  const auto [cx, cy] = r.cell_origin(half, half);
  for (int t = 1; t <= r.gap; ++t) {
    for (int x = cx - t; x < cx + r.cell_width + t; ++x) {
      r.image.set(x, cy - t, spec.palette.mean_marker);
      r.image.set(x, cy + r.cell_height + t - 1, spec.palette.mean_marker);
    }
    for (int y = cy - t; y < cy + r.cell_height + t; ++y) {
      r.image.set(cx - t, y, spec.palette.mean_marker);
      r.image.set(cx + r.cell_width + t - 1, y, spec.palette.mean_marker);
    }
  }
  r.image.blit(render_segmentation(bg, c.target, spec), inset_x, cy);
  return r;
}

bool monotone_along_an_axis(const std::vector<std::vector<std::size_t>>& volumes) {
  const std::size_t rows = volumes.size();
  if (rows == 0) return false;
  const std::size_t cols = volumes.front().size();
  auto monotone = [](const std::vector<std::size_t>& v) {
    bool up = true, down = true;
    for (std::size_t i = 1; i < v.size(); ++i) {
      up &= v[i] >= v[i - 1];
      down &= v[i] <= v[i - 1];
    }
    return (up || down) && v.front() != v.back();
  };
  bool rows_ok = true, cols_ok = true;
  for (std::size_t r = 0; r < rows; ++r) rows_ok &= monotone(volumes[r]);
  for (std::size_t c = 0; c < cols; ++c) {
    std::vector<std::size_t> col(rows);
    for (std::size_t r = 0; r < rows; ++r) col[r] = volumes[r][c];
    cols_ok &= monotone(col);
  }
  return rows_ok || cols_ok;
}

std::string artifact_name(const std::string& case_id, const std::string& artifact,
                          const std::string& variant, const std::string& ext) {
  return case_id + "_" + artifact + "_" + variant + "." + ext;
}

// ---- Summary ------------------------------------------------------------------------

const SummaryRow* Summary::find(const std::string& group, const std::string& variant,
                                const std::string& metric) const {
  for (const auto& r : medians) {
    if (r.group == group && r.variant == variant && r.metric == metric) return &r;
  }
  return nullptr;
}

const PValueRow* Summary::find_p(const std::string& group, const std::string& metric,
                                 const std::string& comparison) const {
  for (const auto& r : p_values) {
    if (r.group == group && r.metric == metric && r.comparison == comparison) return &r;
  }
  return nullptr;
}

Summary summarize(const std::vector<EvaluationRecord>& records, const ChangeGroups& groups) {
  if (records.empty()) throw ReportError("summarize: no evaluation records");
  // group -> variant -> metric -> values
  std::map<std::string, std::map<std::string, std::map<std::string, std::vector<double>>>> table;
  for (const auto& r : records) {
    table[to_string(r.group)][to_string(r.variant)][r.metric].push_back(r.value);
  }

  Summary s;
  s.groups = to_json(groups);
  for (const char* g : kReportedGroups) {
    auto git = table.find(g);
    if (git == table.end()) continue;
    for (const auto& [variant, metrics] : git->second) {
      for (const auto& [metric, values] : metrics) {
        s.medians.push_back({g, variant, metric, values.size(), median(values)});
      }
    }
    auto& by_variant = git->second;
    for (const char* metric : {kMetricQueryVolumeDice, kMetricSurprise}) {
      for (const char* other : {"lower", "upper"}) {
        PValueRow p{g, metric, std::string("ours_vs_") + other};
        const auto& ours = by_variant["ours"][metric];
        const auto& theirs = by_variant[other][metric];
        p.n_ours = ours.size();
        p.n_other = theirs.size();
        if (ours.size() >= 3 && theirs.size() >= 3) {
          p.p_value = wilcoxon_rank_sum(ours, theirs);
          p.available = true;
        }
        s.p_values.push_back(p);
      }
    }
  }
  return s;
}

json to_json(const Summary& s) {
  json medians = json::array();
  for (const auto& r : s.medians) {
    medians.push_back(
        {{"group", r.group}, {"variant", r.variant}, {"metric", r.metric}, {"n", r.n}, {"median", r.median}});
  }
  json pvals = json::array();
  for (const auto& p : s.p_values) {
    json row = {{"group", p.group},   {"metric", p.metric}, {"comparison", p.comparison},
                {"n_ours", p.n_ours}, {"n_other", p.n_other}};
    row["p_value"] = p.available ? json(p.p_value) : json(nullptr);
    pvals.push_back(row);
  }
  return {{"groups", s.groups}, {"medians", medians}, {"p_values", pvals}};
}

void write_summary(const fs::path& dir, const Summary& s) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  char buf[64];
  {
    std::ofstream out(dir / "summary.csv", std::ios::trunc);
    out << "group,variant,metric,n,median\n";
    for (const auto& r : s.medians) {
      std::snprintf(buf, sizeof(buf), "%.17g", r.median);
      out << r.group << ',' << r.variant << ',' << r.metric << ',' << r.n << ',' << buf << '\n';
    }
    if (!out) throw IoError("write failed: " + (dir / "summary.csv").string());
  }
  {
    std::ofstream out(dir / "pvalues.csv", std::ios::trunc);
    out << "group,metric,comparison,n_ours,n_other,p_value\n";
    for (const auto& p : s.p_values) {
      std::snprintf(buf, sizeof(buf), "%.17g", p.p_value);
      out << p.group << ',' << p.metric << ',' << p.comparison << ',' << p.n_ours << ','
          << p.n_other << ',' << (p.available ? buf : "NA") << '\n';
    }
    if (!out) throw IoError("write failed: " + (dir / "pvalues.csv").string());
  }
  std::ofstream out(dir / "summary.json", std::ios::trunc);
  out << to_json(s).dump(2) << '\n';
  if (!out) throw IoError("write failed: " + (dir / "summary.json").string());
}

}  // namespace probgrowth
