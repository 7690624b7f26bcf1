#include <algorithm>
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "probgrowth/error.hpp"
#include "probgrowth/evaluation.hpp"
#include "probgrowth/synthgrowth.hpp"

using namespace probgrowth;

namespace {

GrowthParams small_params() {
  GrowthParams p;
  p.n_subjects = 4;
  p.timepoints_per_subject = 4;
  return p;
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / v.size();
}

}  // namespace

TEST_CASE("growth params validation names the field") {
  auto expect_field = [](GrowthParams p, const std::string& field) {
    try {
      p.validate();
      FAIL("expected ConfigError for " << field);
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(field) != std::string::npos);
    }
  };
  GrowthParams p;
  p.timepoints_per_subject = 2;
  expect_field(p, "timepoints_per_subject");
  p = {};
  p.grid_size = 16;
  expect_field(p, "grid_size");
  p = {};
  p.shrink_probability = 1.5;
  expect_field(p, "shrink_probability");
  p = {};
  p.spatial_dims = 4;
  expect_field(p, "spatial_dims");
  p = {};
  p.growth_rate_min = 1.4;
  p.growth_rate_max = 1.2;
  expect_field(p, "growth_rate");
  CHECK_THROWS_AS(growth_params_from_json({{"growth_rate_range", {1.2}}}), ConfigError);
}

TEST_CASE("growth-only configuration has nondecreasing volume") {
  GrowthParams p;
  p.noise_sigma = 0.0;
  p.shrink_probability = 0.0;
  p.growth_rate_min = p.growth_rate_max = 1.1;
  p.timepoints_per_subject = 3;
  p.annotation_jitter = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SubjectSeries s = generate_subject(p, seed);
    for (int t = 1; t < 3; ++t) {
      CHECK(s.timepoints[t].labels.tumor_volume() >= s.timepoints[t - 1].labels.tumor_volume());
    }
  }
}

TEST_CASE("generate_subject is deterministic") {
  const GrowthParams p;
  const SubjectSeries a = generate_subject(p, 7, "x");
  const SubjectSeries b = generate_subject(p, 7, "x");
  CHECK(a == b);
  const auto d1 = generate_dataset(small_params());
  const auto d2 = generate_dataset(small_params());
  CHECK(d1 == d2);
  CHECK(generate_subject(p, 8, "x") != a);
}

TEST_CASE("series invariants: day offsets, shapes, nesting") {
  GrowthParams p = small_params();
  p.annotation_jitter = 0.0;
  for (const auto& s : generate_dataset(p)) {
    CHECK_NOTHROW(s.validate());
    for (const auto& tp : s.timepoints) {
      CHECK(tp.image.contrasts() == kNumContrasts);
      CHECK_NOTHROW(tp.labels.validate());
      const Extent e = tp.labels.extent;
      // Necrosis is never adjacent to edema-free background, and the classes
      // sit at increasing mean distance from the lesion centre.
      std::array<double, 4> dist_sum{}, count{};
      for (int y = 0; y < e.height; ++y) {
        for (int x = 0; x < e.width; ++x) {
          const int cls = tp.labels.data[y * e.width + x];
          dist_sum[cls] += std::hypot(y - tp.state.center[1], x - tp.state.center[2]);
          count[cls] += 1;
          if (cls != 3) continue;
          for (auto [dy, dx] : {std::pair{0, 1}, {0, -1}, {1, 0}, {-1, 0}}) {
            CHECK(tp.labels.data[(y + dy) * e.width + x + dx] != 0);
          }
        }
      }
      for (int c = 1; c < 3; ++c) {
        if (count[c] > 0 && count[c + 1] > 0) {
          CHECK(dist_sum[c + 1] / count[c + 1] < dist_sum[c] / count[c]);
        }
      }
    }
  }
}

TEST_CASE("default generator yields varied per-step change") {
  GrowthParams p;
  p.n_subjects = 100;
  std::vector<double> d;
  for (const auto& s : generate_dataset(p)) {
    for (std::size_t t = 1; t < s.timepoints.size(); ++t) {
      d.push_back(dice(whole_tumor(s.timepoints[t - 1].labels), whole_tumor(s.timepoints[t].labels)));
    }
  }
  const double m = mean_of(d);
  double var = 0.0;
  for (double x : d) var += (x - m) * (x - m);
  var /= d.size();
  CHECK(var > 0.0);
  CHECK(*std::min_element(d.begin(), d.end()) < 0.9);
}

TEST_CASE("sample_futures") {
  const GrowthParams p;
  const std::uint64_t seed = 99;
  const SubjectSeries s = generate_subject(p, seed);
  const auto& a = s.timepoints[0];
  const auto& b = s.timepoints[1];

  SUBCASE("the producing seed reproduces C") {
    const auto f = sample_futures(a, b, p, 1, step_seed(seed, 2));
    REQUIRE(f.size() == 1);
    CHECK(f[0] == s.timepoints[2].labels);
  }
  SUBCASE("different seeds differ") {
    const auto f = sample_futures(a, b, p, 2, 5);
    CHECK(f[0] != f[1]);
  }
  SUBCASE("volumes vary") {
    const auto f = sample_futures(a, b, p, 100, 1);
    std::vector<double> v;
    for (const auto& l : f) v.push_back(static_cast<double>(l.tumor_volume()));
    const double m = mean_of(v);
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    CHECK(std::sqrt(var / v.size()) / m > 0.0);
  }
  SUBCASE("n < 1 is rejected") {
    CHECK_THROWS_AS(sample_futures(a, b, p, 0, 1), ArgumentError);
  }
}

TEST_CASE("shrink fraction of futures follows shrink_probability") {
  // Without annotation jitter the label volume is a function of the imaged
  // boundary, so shrink steps are exactly the futures smaller than B.
  GrowthParams p;
  p.shrink_probability = 0.3;
  p.annotation_jitter = 0.0;
  for (std::uint64_t seed : {3u, 17u, 40u}) {
    const SubjectSeries s = generate_subject(p, seed);
    const auto f = sample_futures(s.timepoints[0], s.timepoints[1], p, 500, 1000);
    const std::size_t vb = s.timepoints[1].labels.tumor_volume();
    const double below =
        std::count_if(f.begin(), f.end(), [&](const LabelMap& l) { return l.tumor_volume() < vb; }) /
        500.0;
    CHECK(std::abs(below - 0.3) <= 0.08);
  }
}

TEST_CASE("contrasts separate enhancing tumour from edema") {
  const GrowthParams p;
  const SubjectSeries s = generate_subject(p, 21);
  const Timepoint& tp = s.timepoints.back();
  bool separated = false;
  for (int c = 0; c < kNumContrasts; ++c) {
    double sum[2] = {0, 0};
    int n[2] = {0, 0};
    const auto ch = tp.image.channel(c);
    for (std::size_t i = 0; i < ch.size(); ++i) {
      const int cls = tp.labels.data[i];
      if (cls == 1 || cls == 2) {
        sum[cls - 1] += ch[i];
        n[cls - 1] += 1;
      }
    }
    REQUIRE(n[0] > 0);
    REQUIRE(n[1] > 0);
    if (std::abs(sum[1] / n[1] - sum[0] / n[0]) >= 2 * p.noise_sigma) separated = true;
  }
  CHECK(separated);
}

TEST_CASE("dataset round trip and manifest") {
  const GrowthParams p = small_params();
  const auto subjects = generate_dataset(p);
  const auto dir = testing::scratch_dir("dataset");
  const DatasetManifest m = write_dataset(subjects, p, dir);
  CHECK(m.subject_count() == subjects.size());
  CHECK(m.json.at("params").at("seed").get<std::uint64_t>() == p.seed);

  const Dataset back = read_dataset(dir);
  CHECK(back.subjects == subjects);
  CHECK(back.manifest == m.json);
  CHECK(back.subjects.size() == static_cast<std::size_t>(p.n_subjects));
  CHECK_THROWS_AS(back.subject("sub-999"), LookupError);

  // Regenerating from the recorded parameters reproduces the files.
  const GrowthParams recorded = growth_params_from_json(back.manifest.at("params"));
  CHECK(generate_dataset(recorded) == back.subjects);
}

TEST_CASE("truncated array file is reported") {
  const GrowthParams p = small_params();
  const auto dir = testing::scratch_dir("dataset_truncated");
  write_dataset(generate_dataset(p), p, dir);
  std::filesystem::path victim;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
    if (entry.path().extension() == ".f32") victim = entry.path();
  }
  REQUIRE(!victim.empty());
  std::filesystem::resize_file(victim, 10);
  CHECK_THROWS_AS(read_dataset(dir), IoError);
}

TEST_CASE("write_dataset reports the path on failure") {
  const GrowthParams p = small_params();
  const auto dir = testing::scratch_dir("dataset_blocked");
  std::ofstream(dir / "file") << "x";
  try {
    write_dataset(generate_dataset(p), p, dir / "file" / "sub");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("file") != std::string::npos);
  }
}
