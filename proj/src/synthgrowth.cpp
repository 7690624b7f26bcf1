#include "probgrowth/synthgrowth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>

#include "probgrowth/error.hpp"
#include "probgrowth/rng.hpp"

namespace probgrowth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Class mean intensity per contrast (T1n, T1ce, T2, FLAIR). Enhancing tumour
// is bright only in T1ce, oedema bright in T2/FLAIR, necrosis dark in T1ce.
constexpr double kTissueMean[kNumClasses][kNumContrasts] = {
    {1.00, 1.00, 1.00, 1.00},  // brain tissue
    {0.85, 1.00, 1.70, 1.80},  // edema
    {0.90, 2.10, 1.40, 1.50},  // enhancing
    {0.60, 0.45, 2.00, 1.30},  // necrosis
};

constexpr double kSubjectFieldWeight = 0.65;
constexpr double kTendencySpread = 0.3;
constexpr double kRatioStep = 0.05;
constexpr double kBiasAmplitude = 0.05;

int basis_size(int spatial_dims) { return spatial_dims == 3 ? 9 : 5; }

// Direction basis evaluated at unit vector (uz, uy, ux); every |B_j| <= 1.
void eval_basis(int spatial_dims, double uz, double uy, double ux, double* out) {
  out[0] = 1.0;
  if (spatial_dims == 3) {
    out[1] = ux;
    out[2] = uy;
    out[3] = uz;
    out[4] = 2.0 * ux * uy;
    out[5] = 2.0 * uy * uz;
    out[6] = 2.0 * ux * uz;
    out[7] = ux * ux - uy * uy;
    out[8] = 0.5 * (3.0 * uz * uz - 1.0);
  } else {
    out[1] = ux;
    out[2] = uy;
    out[3] = ux * ux - uy * uy;
    out[4] = 2.0 * ux * uy;
  }
}

// Random field coefficients over basis indices >= 1, L1-normalised so |f| <= 1.
std::vector<double> random_field(int spatial_dims, Rng& rng) {
  std::vector<double> c(basis_size(spatial_dims) - 1);
  for (auto& v : c) v = rng.normal();
  double l1 = 0.0;
  for (double v : c) l1 += std::abs(v);
  for (auto& v : c) v /= l1;
  return c;
}

double cap_radius(const GrowthParams& p) { return 0.34 * p.grid_size; }

struct Geometry {
  double dist;
  double radius;  // un-jittered, capped boundary radius along the voxel's direction
};

Geometry voxel_geometry(const GrowthState& s, const GrowthParams& p, int z, int y, int x) {
  const double dz = p.spatial_dims == 3 ? z - s.center[0] : 0.0;
  const double dy = y - s.center[1];
  const double dx = x - s.center[2];
  const double dist = std::sqrt(dz * dz + dy * dy + dx * dx);
  double b[9];
  if (dist > 1e-12) {
    eval_basis(p.spatial_dims, dz / dist, dy / dist, dx / dist, b);
  } else {
    eval_basis(p.spatial_dims, 0.0, 0.0, 1.0, b);
  }
  double log_r = 0.0;
  for (std::size_t j = 0; j < s.log_radius.size(); ++j) log_r += s.log_radius[j] * b[j];
  return {dist, std::min(std::exp(log_r), cap_radius(p))};
}

TumorClass classify(double dist, double radius, double jitter, const GrowthState& s) {
  const double core = radius * s.core_ratio;
  if (dist <= core * s.necrosis_ratio) return TumorClass::kNecrosis;
  if (dist <= core) return TumorClass::kEnhancing;
  if (dist <= radius + jitter) return TumorClass::kEdema;
  return TumorClass::kBackground;
}

bool inside_brain(const GrowthState& s, const GrowthParams& p, int z, int y, int x) {
  const double c = 0.5 * (p.grid_size - 1);
  const double dz = p.spatial_dims == 3 ? (z - c) / s.brain_radius[0] : 0.0;
  const double dy = (y - c) / s.brain_radius[1];
  const double dx = (x - c) / s.brain_radius[2];
  return dz * dz + dy * dy + dx * dx <= 1.0;
}

ImageVolume render_image(const GrowthState& s, const GrowthParams& p, Rng& rng) {
  const Extent e = p.extent();
  ImageVolume img(e, kNumContrasts);

  // Smooth multiplicative bias: two low-frequency plane waves per contrast.
  struct Wave {
    double kz, ky, kx, phase, amp;
  };
  std::vector<Wave> waves;
  for (int c = 0; c < kNumContrasts; ++c) {
    for (int w = 0; w < 2; ++w) {
      const double scale = 2.0 * std::numbers::pi / p.grid_size;
      waves.push_back({p.spatial_dims == 3 ? rng.uniform(-1.0, 1.0) * scale : 0.0,
                       rng.uniform(-1.0, 1.0) * scale, rng.uniform(-1.0, 1.0) * scale,
                       rng.uniform(0.0, 2.0 * std::numbers::pi), kBiasAmplitude * rng.uniform()});
    }
  }

  std::size_t i = 0;
  for (int z = 0; z < e.depth; ++z) {
    for (int y = 0; y < e.height; ++y) {
      for (int x = 0; x < e.width; ++x, ++i) {
        int cls = -1;
        if (inside_brain(s, p, z, y, x)) {
          const Geometry g = voxel_geometry(s, p, z, y, x);
          cls = static_cast<int>(classify(g.dist, g.radius, 0.0, s));
        }
        for (int c = 0; c < kNumContrasts; ++c) {
          double v = 0.0;
          if (cls >= 0) {
            double bias = 1.0;
            for (int w = 0; w < 2; ++w) {
              const Wave& wv = waves[c * 2 + w];
              bias += wv.amp * std::sin(wv.kz * z + wv.ky * y + wv.kx * x + wv.phase);
            }
            v = kTissueMean[cls][c] * bias;
          }
          v += p.noise_sigma * rng.normal();
          img.data[static_cast<std::size_t>(c) * e.voxels() + i] = static_cast<float>(v);
        }
      }
    }
  }
  return img;
}

GrowthState initial_state(const GrowthParams& p, Rng& rng) {
  GrowthState s;
  const double mid = 0.5 * (p.grid_size - 1);
  const double offset = 0.06 * p.grid_size;
  s.center = {p.spatial_dims == 3 ? mid + rng.uniform(-offset, offset) : 0.0,
              mid + rng.uniform(-offset, offset), mid + rng.uniform(-offset, offset)};
  s.brain_radius = {p.spatial_dims == 3 ? rng.uniform(0.42, 0.47) * p.grid_size : 1.0,
                    rng.uniform(0.42, 0.47) * p.grid_size, rng.uniform(0.42, 0.47) * p.grid_size};
  s.log_radius.assign(basis_size(p.spatial_dims), 0.0);
  s.log_radius[0] = std::log(rng.uniform(0.07, 0.14) * p.grid_size);
  for (std::size_t j = 1; j < s.log_radius.size(); ++j) s.log_radius[j] = 0.12 * rng.normal();
  s.subject_field = random_field(p.spatial_dims, rng);
  s.tendency = rng.uniform();
  s.core_ratio = rng.uniform(0.45, 0.7);
  s.necrosis_ratio = rng.uniform(0.3, 0.6);
  s.jitter = rng.uniform(-p.annotation_jitter, p.annotation_jitter);
  return s;
}

GrowthState step_state(const GrowthState& prev, const GrowthParams& p, Rng& rng) {
  GrowthState s = prev;
  const bool shrink = rng.bernoulli(p.shrink_probability);
  const double u = std::clamp(prev.tendency + kTendencySpread * rng.normal(), 0.0, 1.0);
  const double rate = p.growth_rate_min + (p.growth_rate_max - p.growth_rate_min) * u;
  const double step = (shrink ? -1.0 : 1.0) * std::log(rate);

  const std::vector<double> fresh = random_field(p.spatial_dims, rng);
  std::vector<double> field(fresh.size());
  double l1 = 0.0;
  for (std::size_t j = 0; j < field.size(); ++j) {
    field[j] = kSubjectFieldWeight * prev.subject_field[j] + (1.0 - kSubjectFieldWeight) * fresh[j];
    l1 += std::abs(field[j]);
  }
  s.log_radius[0] += step;
  for (std::size_t j = 0; j < field.size(); ++j) {
    s.log_radius[j + 1] += step * p.anisotropy_strength * field[j] / l1;
  }
  s.core_ratio = std::clamp(prev.core_ratio + kRatioStep * rng.normal(), 0.3, 0.8);
  s.necrosis_ratio = std::clamp(prev.necrosis_ratio + kRatioStep * rng.normal(), 0.2, 0.7);
  s.jitter = rng.uniform(-p.annotation_jitter, p.annotation_jitter);
  return s;
}

json vec_json(const std::array<double, 3>& a) { return json::array({a[0], a[1], a[2]}); }

std::array<double, 3> json_vec3(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
  } else {
    for (T v : values) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      out.write(bytes.data(), sizeof(T));
    }
  }
  if (!out) throw IoError("write failed: " + path.string());
}

template <typename T>
std::vector<T> read_raw(const fs::path& path, std::size_t count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<T> values(count);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (in.gcount() != static_cast<std::streamsize>(count * sizeof(T))) {
    throw IoError("short read: " + path.string());
  }
  if constexpr (std::endian::native != std::endian::little && sizeof(T) > 1) {
    for (T& v : values) {
      auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
      std::reverse(bytes.begin(), bytes.end());
      v = std::bit_cast<T>(bytes);
    }
  }
  return values;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

json spatial_shape(const Extent& e) {
  return e.is_3d() ? json::array({e.depth, e.height, e.width}) : json::array({e.height, e.width});
}

json spatial_axes(const Extent& e) {
  return e.is_3d() ? json::array({"z", "y", "x"}) : json::array({"y", "x"});
}

}  // namespace

void GrowthParams::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("GrowthParams." + field + ": " + why);
  };
  if (spatial_dims != 2 && spatial_dims != 3) fail("spatial_dims", "must be 2 or 3");
  if (grid_size < 32) fail("grid_size", "must be >= 32");
  if (n_subjects < 1) fail("n_subjects", "must be >= 1");
  if (timepoints_per_subject < 3) fail("timepoints_per_subject", "must be >= 3");
  if (!(growth_rate_min >= 1.0)) fail("growth_rate_range", "lower bound must be >= 1");
  if (!(growth_rate_max >= growth_rate_min)) fail("growth_rate_range", "empty interval");
  if (!(shrink_probability >= 0.0 && shrink_probability <= 1.0)) {
    fail("shrink_probability", "must lie in [0, 1]");
  }
  if (!(anisotropy_strength >= 0.0)) fail("anisotropy_strength", "must be >= 0");
  if (!(noise_sigma >= 0.0)) fail("noise_sigma", "must be >= 0");
  if (!(annotation_jitter >= 0.0)) fail("annotation_jitter", "must be >= 0");
}

json to_json(const GrowthParams& p) {
  return {{"spatial_dims", p.spatial_dims},
          {"grid_size", p.grid_size},
          {"n_subjects", p.n_subjects},
          {"timepoints_per_subject", p.timepoints_per_subject},
          {"growth_rate_range", {p.growth_rate_min, p.growth_rate_max}},
          {"shrink_probability", p.shrink_probability},
          {"anisotropy_strength", p.anisotropy_strength},
          {"noise_sigma", p.noise_sigma},
          {"annotation_jitter", p.annotation_jitter},
          {"seed", p.seed}};
}

GrowthParams growth_params_from_json(const json& j) {
  GrowthParams p;
  try {
    p.spatial_dims = j.value("spatial_dims", p.spatial_dims);
    p.grid_size = j.value("grid_size", p.grid_size);
    p.n_subjects = j.value("n_subjects", p.n_subjects);
    p.timepoints_per_subject = j.value("timepoints_per_subject", p.timepoints_per_subject);
    if (j.contains("growth_rate_range")) {
      const auto& r = j.at("growth_rate_range");
      if (!r.is_array() || r.size() != 2) {
        throw ConfigError("GrowthParams.growth_rate_range: expected [min, max]");
      }
      p.growth_rate_min = r.at(0).get<double>();
      p.growth_rate_max = r.at(1).get<double>();
    }
    p.shrink_probability = j.value("shrink_probability", p.shrink_probability);
    p.anisotropy_strength = j.value("anisotropy_strength", p.anisotropy_strength);
    p.noise_sigma = j.value("noise_sigma", p.noise_sigma);
    p.annotation_jitter = j.value("annotation_jitter", p.annotation_jitter);
    p.seed = j.value("seed", p.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("GrowthParams: ") + e.what());
  }
  p.validate();
  return p;
}

json to_json(const GrowthState& s) {
  return {{"center", vec_json(s.center)},
          {"brain_radius", vec_json(s.brain_radius)},
          {"log_radius", s.log_radius},
          {"subject_field", s.subject_field},
          {"tendency", s.tendency},
          {"core_ratio", s.core_ratio},
          {"necrosis_ratio", s.necrosis_ratio},
          {"jitter", s.jitter}};
}

GrowthState growth_state_from_json(const json& j) {
  GrowthState s;
  s.center = json_vec3(j.at("center"));
  s.brain_radius = json_vec3(j.at("brain_radius"));
  s.log_radius = j.at("log_radius").get<std::vector<double>>();
  s.subject_field = j.at("subject_field").get<std::vector<double>>();
  s.tendency = j.at("tendency").get<double>();
  s.core_ratio = j.at("core_ratio").get<double>();
  s.necrosis_ratio = j.at("necrosis_ratio").get<double>();
  s.jitter = j.at("jitter").get<double>();
  return s;
}

void SubjectSeries::validate() const {
  for (std::size_t t = 0; t < timepoints.size(); ++t) {
    const auto& tp = timepoints[t];
    if (t > 0 && tp.day_offset <= timepoints[t - 1].day_offset) {
      throw DataError(subject_id + ": day offsets not strictly increasing at timepoint " +
                      std::to_string(t));
    }
    if (tp.image.extent != timepoints.front().image.extent ||
        tp.labels.extent != tp.image.extent ||
        tp.image.contrasts() != timepoints.front().image.contrasts()) {
      throw DataError(subject_id + ": timepoint " + std::to_string(t) + " shape differs");
    }
  }
}

std::uint64_t step_seed(std::uint64_t subject_seed, int index) {
  return mix_seed(subject_seed, static_cast<std::uint64_t>(index) + 1000);
}

std::uint64_t subject_seed_for(const GrowthParams& params, int subject_index) {
  return mix_seed(params.seed, static_cast<std::uint64_t>(subject_index));
}

std::string subject_id_for(int subject_index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "sub-%03d", subject_index);
  return buf;
}

LabelMap render_labels(const GrowthState& state, const GrowthParams& params) {
  const Extent e = params.extent();
  LabelMap labels(e);
  std::size_t i = 0;
  for (int z = 0; z < e.depth; ++z) {
    for (int y = 0; y < e.height; ++y) {
      for (int x = 0; x < e.width; ++x, ++i) {
        if (!inside_brain(state, params, z, y, x)) continue;
        const Geometry g = voxel_geometry(state, params, z, y, x);
        labels.data[i] = static_cast<std::uint8_t>(classify(g.dist, g.radius, state.jitter, state));
      }
    }
  }
  return labels;
}

Timepoint advance(const Timepoint& present, const GrowthParams& params, std::uint64_t seed) {
  Rng rng(seed);
  Timepoint next;
  next.state = step_state(present.state, params, rng);
  next.day_offset = present.day_offset + rng.uniform_int(30, 180);
  next.labels = render_labels(next.state, params);
  next.image = render_image(next.state, params, rng);
  return next;
}

SubjectSeries generate_subject(const GrowthParams& params, std::uint64_t subject_seed,
                               const std::string& subject_id) {
  params.validate();
  SubjectSeries series;
  series.subject_id = subject_id;
  series.subject_seed = subject_seed;

  Rng rng(step_seed(subject_seed, 0));
  Timepoint first;
  first.state = initial_state(params, rng);
  first.day_offset = 0;
  first.labels = render_labels(first.state, params);
  first.image = render_image(first.state, params, rng);
  series.timepoints.push_back(std::move(first));

  for (int t = 1; t < params.timepoints_per_subject; ++t) {
    series.timepoints.push_back(advance(series.timepoints.back(), params, step_seed(subject_seed, t)));
  }
  return series;
}

std::vector<SubjectSeries> generate_dataset(const GrowthParams& params) {
  params.validate();
  std::vector<SubjectSeries> subjects(params.n_subjects);
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < params.n_subjects; ++i) {
    subjects[i] = generate_subject(params, subject_seed_for(params, i), subject_id_for(i));
  }
  return subjects;
}

std::vector<LabelMap> sample_futures(const Timepoint& /*past*/, const Timepoint& present,
                                     const GrowthParams& params, int n, std::uint64_t seed) {
  if (n < 1) {
    throw ArgumentError("sample_futures: n must be >= 1, got " + std::to_string(n));
  }
  params.validate();
  std::vector<LabelMap> futures(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    Rng rng(seed + static_cast<std::uint64_t>(i));
    const GrowthState next = step_state(present.state, params, rng);
    futures[i] = render_labels(next, params);
  }
  return futures;
}

DatasetManifest write_dataset(const std::vector<SubjectSeries>& subjects,
                              const GrowthParams& params, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  json subject_list = json::array();
  for (const auto& s : subjects) {
    const fs::path sub_dir = dir / s.subject_id;
    fs::create_directories(sub_dir, ec);
    if (ec) throw IoError("cannot create " + sub_dir.string() + ": " + ec.message());
    json tps = json::array();
    for (std::size_t t = 0; t < s.timepoints.size(); ++t) {
      const Timepoint& tp = s.timepoints[t];
      const std::string stem = "t" + std::to_string(t);
      write_raw(sub_dir / (stem + "_image.f32"), tp.image.data);
      write_raw(sub_dir / (stem + "_label.u8"), tp.labels.data);

      json img_shape = spatial_shape(tp.image.extent);
      img_shape.insert(img_shape.begin(), tp.image.contrasts());
      json img_axes = spatial_axes(tp.image.extent);
      img_axes.insert(img_axes.begin(), "contrast");
      write_json(sub_dir / (stem + "_image.json"),
                 {{"shape", img_shape},
                  {"axis_order", img_axes},
                  {"dtype", "float32"},
                  {"endianness", "little"},
                  {"contrast_names", tp.image.contrast_names},
                  {"day_offset", tp.day_offset},
                  {"generator_state", to_json(tp.state)}});
      write_json(sub_dir / (stem + "_label.json"),
                 {{"shape", spatial_shape(tp.labels.extent)},
                  {"axis_order", spatial_axes(tp.labels.extent)},
                  {"dtype", "uint8"},
                  {"class_names", kClassNames},
                  {"day_offset", tp.day_offset}});
      tps.push_back({{"index", t},
                     {"day_offset", tp.day_offset},
                     {"image", s.subject_id + "/" + stem + "_image.f32"},
                     {"label", s.subject_id + "/" + stem + "_label.u8"},
                     {"shape", img_shape}});
    }
    subject_list.push_back(
        {{"id", s.subject_id}, {"subject_seed", s.subject_seed}, {"timepoints", tps}});
  }

  DatasetManifest manifest;
  manifest.json = {{"format", "probgrowth-dataset"},
                   {"version", 1},
                   {"seed", params.seed},
                   {"params", to_json(params)},
                   {"axis_order", "contrast-major, then spatial axes slowest to fastest (z, y, x)"},
                   {"contrast_names", kContrastNames},
                   {"class_names", kClassNames},
                   {"subjects", subject_list}};
  write_json(dir / "manifest.json", manifest.json);
  return manifest;
}

const SubjectSeries& Dataset::subject(const std::string& id) const {
  for (const auto& s : subjects) {
    if (s.subject_id == id) return s;
  }
  throw LookupError("unknown subject '" + id + "'");
}

Dataset read_dataset(const fs::path& dir) {
  Dataset ds;
  ds.manifest = read_json(dir / "manifest.json");
  try {
    ds.params = growth_params_from_json(ds.manifest.at("params"));
    const Extent e = ds.params.extent();
    for (const auto& sj : ds.manifest.at("subjects")) {
      SubjectSeries s;
      s.subject_id = sj.at("id").get<std::string>();
      s.subject_seed = sj.at("subject_seed").get<std::uint64_t>();
      for (const auto& tj : sj.at("timepoints")) {
        Timepoint tp;
        const fs::path img_path = dir / tj.at("image").get<std::string>();
        fs::path img_meta = img_path;
        img_meta.replace_extension(".json");
        const json meta = read_json(img_meta);
        const auto names = meta.at("contrast_names").get<std::vector<std::string>>();
        tp.image = ImageVolume(e, static_cast<int>(names.size()));
        tp.image.contrast_names = names;
        tp.image.data = read_raw<float>(img_path, tp.image.data.size());
        tp.labels = LabelMap(e);
        tp.labels.data = read_raw<std::uint8_t>(dir / tj.at("label").get<std::string>(), e.voxels());
        tp.day_offset = tj.at("day_offset").get<int>();
        tp.state = growth_state_from_json(meta.at("generator_state"));
        tp.labels.validate();
        s.timepoints.push_back(std::move(tp));
      }
      s.validate();
      ds.subjects.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed dataset manifest in " + dir.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace probgrowth
