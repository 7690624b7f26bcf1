#include <fstream>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "probgrowth/error.hpp"
#include "probgrowth/reporting.hpp"

using namespace probgrowth;

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ImageVolume ramp_background(Extent e) {
  ImageVolume v(e, kNumContrasts);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = static_cast<float>(i % 97);
  return v;
}

std::vector<std::uint8_t> pixels_of(const RgbImage& img, Rgb color) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) m[y * img.width + x] = img.get(x, y) == color;
  }
  return m;
}

EvaluationRecord rec(const std::string& id, Variant v, const char* metric, double value,
                     ChangeGroup g) {
  return {id, v, metric, value, 0, g};
}

}  // namespace

TEST_CASE("png round trip is lossless and reproducible") {
  RgbImage img(7, 5);
  for (int y = 0; y < 5; ++y) {
    for (int x = 0; x < 7; ++x) {
      img.set(x, y, {static_cast<std::uint8_t>(30 * x), static_cast<std::uint8_t>(40 * y), 9});
    }
  }
  const auto dir = testing::scratch_dir("png");
  write_png(dir / "a.png", img);
  write_png(dir / "b.png", img);
  CHECK(read_png(dir / "a.png") == img);
  CHECK(read_file(dir / "a.png") == read_file(dir / "b.png"));
  CHECK_THROWS_AS(read_png(dir / "missing.png"), IoError);
  CHECK_THROWS_AS(write_png(dir / "no" / "such" / "dir.png", img), IoError);
}

TEST_CASE("image helpers") {
  RgbImage a(4, 4, {1, 2, 3});
  RgbImage b(2, 2, {9, 9, 9});
  a.blit(b, 1, 1);
  CHECK(a.get(0, 0) == Rgb{1, 2, 3});
  CHECK(a.get(2, 2) == Rgb{9, 9, 9});
  CHECK(a.crop(1, 1, 2, 2) == b);
  CHECK(artifact_name("sub-001_t0_t1_t2", "overlay", "ours", "png") ==
        "sub-001_t0_t1_t2_overlay_ours.png");
}

TEST_CASE("contour pixels") {
  // 3x3 square inside a 5x5 mask, upscaled by 2
  std::vector<std::uint8_t> m(25, 0);
  for (int y = 1; y < 4; ++y) {
    for (int x = 1; x < 4; ++x) m[y * 5 + x] = 1;
  }
  const auto c = contour_pixels(m, 5, 5, 2);
  REQUIRE(c.size() == 100);
  int n = 0;
  for (auto v : c) n += v;
  CHECK(n == 6 * 4 - 4);  // boundary ring of the 6x6 square
  CHECK(c[2 * 10 + 2] == 1);
  CHECK(c[4 * 10 + 4] == 0);
  CHECK(c[0] == 0);
}

TEST_CASE("overlay contours") {
  const Extent e{1, 16, 16};
  const ImageVolume bg = ramp_background(e);
  const LabelMap gt = testing::disc_labels(e, 8, 8, 5);
  OverlaySpec spec;

  const RgbImage gt_only = render_overlay(bg, &gt, nullptr, nullptr, spec);
  CHECK(gt_only.width == 64);
  const auto gt_px = pixels_of(gt_only, spec.palette.ground_truth);
  int n = 0;
  for (auto v : gt_px) n += v;
  CHECK(n > 0);

  SUBCASE("prediction equal to the ground truth") {
    const RgbImage both = render_overlay(bg, &gt, &gt, nullptr, spec);
    CHECK(pixels_of(both, spec.palette.mean_prediction) == gt_px);
  }
  SUBCASE("empty prediction leaves only the ground truth") {
    const LabelMap empty(e);
    CHECK(render_overlay(bg, &gt, &empty, &empty, spec) == gt_only);
  }
  SUBCASE("best sample is dashed") {
    const RgbImage dashed = render_overlay(bg, nullptr, nullptr, &gt, spec);
    const auto px = pixels_of(dashed, spec.palette.best_sample);
    int drawn = 0;
    for (auto v : px) drawn += v;
    CHECK(drawn > 0);
    CHECK(drawn < n);
  }
  SUBCASE("deterministic bytes") {
    const auto dir = testing::scratch_dir("overlay");
    write_png(dir / "a.png", render_overlay(bg, &gt, &gt, &gt, spec));
    write_png(dir / "b.png", render_overlay(bg, &gt, &gt, &gt, spec));
    CHECK(read_file(dir / "a.png") == read_file(dir / "b.png"));
  }
  SUBCASE("shape checks") {
    const LabelMap other(Extent{1, 8, 8});
    CHECK_THROWS_AS(render_overlay(bg, &other, nullptr, nullptr, spec), ArgumentError);
    OverlaySpec bad = spec;
    bad.slice = 3;
    CHECK_THROWS_AS(render_overlay(bg, &gt, nullptr, nullptr, bad), ArgumentError);
  }
}

TEST_CASE("latent grid") {
  GrowthParams p;
  p.grid_size = 32;
  const SubjectSeries s = generate_subject(p, 3);
  GrowthCase c = variant_case(s, 0, Variant::kOurs);
  const ProbUNet net(testing::toy_config());
  OverlaySpec spec;
  spec.scale = 2;
  const LatentGridResult g = render_latent_grid(net, c, {0, 1}, 7, spec);
  REQUIRE(g.volumes.size() == 7);
  int cells = 0;
  for (const auto& row : g.volumes) cells += static_cast<int>(row.size());
  CHECK(cells == 49);

  const Tensor in = stack_inputs(c.inputs);
  const LabelMap mean = net.backbone_forward(in, net.prior_encode(in).mean).argmax();
  const RgbImage standalone = render_segmentation(c.inputs.back(), mean, spec);
  const auto [x, y] = g.cell_origin(3, 3);
  CHECK(g.image.crop(x, y, g.cell_width, g.cell_height) == standalone);
  CHECK(g.volumes[3][3] == mean.tumor_volume());
  // frame pixel just outside the centre cell
  CHECK(g.image.get(x - 1, y - 1) == spec.palette.mean_marker);

  CHECK(render_latent_grid(net, c, {0, 1}, 7, spec).image == g.image);
  CHECK_THROWS_AS(render_latent_grid(net, c, {1, 1}, 7, spec), ArgumentError);
  CHECK_THROWS_AS(render_latent_grid(net, c, {0, 3}, 7, spec), ArgumentError);
  CHECK_THROWS_AS(render_latent_grid(net, c, {0, 1}, 6, spec), ArgumentError);
}

TEST_CASE("monotone volumes") {
  CHECK(monotone_along_an_axis({{1, 2, 3}, {2, 2, 5}, {0, 1, 1}}));
  CHECK(monotone_along_an_axis({{1, 1, 1}, {2, 2, 2}, {5, 5, 5}}));
  CHECK_FALSE(monotone_along_an_axis({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}}));
  CHECK_FALSE(monotone_along_an_axis({{1, 3, 2}, {3, 1, 2}, {2, 2, 1}}));
}

TEST_CASE("summarize") {
  std::map<std::string, double> change;
  for (int i = 0; i < 10; ++i) change["c" + std::to_string(i)] = 0.1 * i;
  const ChangeGroups groups = stratify_values(change);

  SUBCASE("single record") {
    const Summary s = summarize({rec("c0", Variant::kOurs, kMetricSurprise, 2.5, ChangeGroup::kLarge)},
                                groups);
    const SummaryRow* row = s.find("large", "ours", kMetricSurprise);
    REQUIRE(row != nullptr);
    CHECK(row->median == 2.5);
    CHECK(row->n == 1);
    const PValueRow* p = s.find_p("large", kMetricSurprise, "ours_vs_lower");
    REQUIRE(p != nullptr);
    CHECK_FALSE(p->available);
  }
  SUBCASE("empty input") {
    CHECK_THROWS_AS(summarize({}, groups), ReportError);
  }
  SUBCASE("medians and p values recomputed from the CSV") {
    std::vector<EvaluationRecord> records;
    Rng rng(1);
    for (int i = 1; i < 10; ++i) {
      const std::string id = "c" + std::to_string(i);
      const ChangeGroup g = groups.group_of(id);
      for (Variant v : kVariants) {
        records.push_back(rec(id, v, kMetricQueryVolumeDice, rng.uniform(), g));
        records.push_back(rec(id, v, kMetricSurprise, 10 * rng.uniform(), g));
      }
    }
    const auto dir = testing::scratch_dir("summary");
    write_records_csv(dir / "records.csv", records);
    const Summary s = summarize(read_records_csv(dir / "records.csv"), groups);
    write_summary(dir, s);

    std::map<std::string, std::vector<double>> raw;
    std::ifstream in(dir / "records.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string id, variant, metric, value, fold, group;
      std::getline(ss, id, ',');
      std::getline(ss, variant, ',');
      std::getline(ss, metric, ',');
      std::getline(ss, value, ',');
      std::getline(ss, fold, ',');
      std::getline(ss, group, ',');
      raw[group + "/" + variant + "/" + metric].push_back(std::stod(value));
    }
    for (const auto& row : s.medians) {
      auto v = raw.at(row.group + "/" + row.variant + "/" + row.metric);
      std::sort(v.begin(), v.end());
      const double m = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
      CHECK(row.median == doctest::Approx(m).epsilon(1e-15));
      CHECK(row.n == v.size());
    }
    const PValueRow* p = s.find_p("moderate", kMetricQueryVolumeDice, "ours_vs_upper");
    REQUIRE(p != nullptr);
    CHECK(p->available);
    CHECK(p->p_value == wilcoxon_rank_sum(raw.at("moderate/ours/query_volume_dice"),
                                          raw.at("moderate/upper/query_volume_dice")));
    CHECK(std::filesystem::exists(dir / "pvalues.csv"));
    const auto j = nlohmann::json::parse(read_file(dir / "summary.json"));
    CHECK(j.at("groups").at("n_large").get<int>() == 1);
    CHECK(j.at("groups").contains("large_threshold"));
    CHECK(j.at("groups").contains("mean_change"));
  }
}
