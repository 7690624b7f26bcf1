#include "probgrowth/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <ostream>
#include <set>
#include <sstream>

#include "probgrowth/checkpoint.hpp"
#include "probgrowth/error.hpp"
#include "probgrowth/reporting.hpp"

namespace probgrowth {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + "." + key + ": unknown key");
  }
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

}  // namespace

// ---- Config -----------------------------------------------------------------------

void ExperimentConfig::validate() const {
  data.validate();
  network.validate();
  if (network.spatial_dims != data.spatial_dims) {
    throw ConfigError("network.spatial_dims (" + std::to_string(network.spatial_dims) +
                      ") differs from data.spatial_dims (" + std::to_string(data.spatial_dims) + ")");
  }
  const int div = 1 << (network.depth - 1);
  if (data.grid_size % div != 0) {
    throw ConfigError("data.grid_size " + std::to_string(data.grid_size) +
                      " is not divisible by 2^(depth-1) = " + std::to_string(div));
  }
  for (Variant v : kVariants) {
    auto it = training.find(v);
    if (it == training.end()) throw ConfigError("training: variant " + to_string(v) + " missing");
    const TrainConfig& t = it->second;
    t.validate();
    if (t.mode != training_mode(v)) {
      throw ConfigError("variants." + to_string(v) + ".mode must be " +
                        to_string(training_mode(v)));
    }
    if (t.patch_size < data.grid_size && t.patch_size % div != 0) {
      throw ConfigError("variants." + to_string(v) + ".patch_size " +
                        std::to_string(t.patch_size) + " is not divisible by " +
                        std::to_string(div));
    }
  }
  if (evaluation.n_folds < 2) throw ConfigError("evaluation.n_folds: must be >= 2");
  if (evaluation.n_folds > data.n_subjects) {
    throw ConfigError("evaluation.n_folds: more folds than subjects");
  }
  if (evaluation.figure_cases < 0) throw ConfigError("evaluation.figure_cases: must be >= 0");
  const auto& ax = evaluation.grid_axes;
  if (ax[0] == ax[1] || std::min(ax[0], ax[1]) < 0 ||
      std::max(ax[0], ax[1]) >= network.latent_dim) {
    throw ConfigError("evaluation.grid_axes: need two distinct axes below latent_dim");
  }
  if (evaluation.grid_steps < 1 || evaluation.grid_steps % 2 == 0) {
    throw ConfigError("evaluation.grid_steps: must be odd and positive");
  }
}

ExperimentConfig parse_experiment_config(const std::string& text,
                                         std::optional<std::uint64_t> seed_override,
                                         const std::optional<fs::path>& output_root) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, {"seed", "output_dir", "data", "network", "training", "variants", "evaluation"},
             "config");
  ExperimentConfig cfg;
  cfg.source_text = text;
  try {
    cfg.seed = j.value("seed", std::uint64_t{0});
    if (seed_override) cfg.seed = *seed_override;
    const fs::path out = j.value("output_dir", cfg.output_dir.string());
    cfg.output_dir = out.is_absolute() ? out : (output_root ? *output_root : fs::current_path()) / out;

    const json data = j.value("data", json::object());
    check_keys(data,
               {"spatial_dims", "grid_size", "n_subjects", "timepoints_per_subject",
                "growth_rate_range", "shrink_probability", "anisotropy_strength",
                "noise_sigma", "annotation_jitter"},
               "data");
    cfg.data = growth_params_from_json(data);
    cfg.data.seed = cfg.seed;

    json net = j.value("network", json::object());
    check_keys(net, {"spatial_dims", "n_contrasts", "n_classes", "base_channels", "depth", "latent_dim"},
               "network");
    if (!net.contains("spatial_dims")) net["spatial_dims"] = cfg.data.spatial_dims;
    cfg.network = network_config_from_json(net);

    const std::set<std::string> train_keys = {"beta", "learning_rate", "steps", "batch_size",
                                              "patch_size", "checkpoint_interval", "kl_warmup",
                                              "augment_probability"};
    const json shared = j.value("training", json::object());
    check_keys(shared, train_keys, "training");
    const json variants = j.value("variants", json::object());
    check_keys(variants, {"ours", "upper", "lower"}, "variants");
    for (Variant v : kVariants) {
      json merged = shared;
      if (variants.contains(to_string(v))) {
        std::set<std::string> keys = train_keys;
        keys.insert("mode");
        const json& ov = variants.at(to_string(v));
        check_keys(ov, keys, "variants." + to_string(v));
        merged.update(ov);
      }
      TrainConfig defaults;
      defaults.mode = training_mode(v);
      cfg.training[v] = train_config_from_json(merged, defaults);
    }

    const json ev = j.value("evaluation", json::object());
    check_keys(ev, {"n_folds", "figure_cases", "grid_axes", "grid_steps", "min_large_cases"},
               "evaluation");
    cfg.evaluation.n_folds = ev.value("n_folds", cfg.evaluation.n_folds);
    cfg.evaluation.figure_cases = ev.value("figure_cases", cfg.evaluation.figure_cases);
    cfg.evaluation.grid_axes = ev.value("grid_axes", cfg.evaluation.grid_axes);
    cfg.evaluation.grid_steps = ev.value("grid_steps", cfg.evaluation.grid_steps);
    cfg.evaluation.min_large_cases = ev.value("min_large_cases", cfg.evaluation.min_large_cases);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const fs::path& path,
                                        std::optional<std::uint64_t> seed_override,
                                        const std::optional<fs::path>& output_root) {
  if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
  return parse_experiment_config(read_text(path), seed_override, output_root);
}

std::uint64_t fold_seed(const ExperimentConfig& cfg) { return mix_seed(cfg.seed, 2); }

std::uint64_t train_seed(const ExperimentConfig& cfg, int fold, Variant v) {
  return mix_seed(cfg.seed, 100 + 3 * static_cast<std::uint64_t>(fold) + static_cast<int>(v));
}

std::uint64_t init_seed(const ExperimentConfig& cfg, int fold, Variant v) {
  return mix_seed(cfg.seed, 200 + 3 * static_cast<std::uint64_t>(fold) + static_cast<int>(v));
}

NetworkConfig network_for(const ExperimentConfig& cfg, int fold, Variant v) {
  NetworkConfig n = cfg.network;
  n.n_input_timepoints = input_timepoint_count(evaluation_mode(v));
  n.seed = init_seed(cfg, fold, v);
  return n;
}

TrainConfig train_config_for(const ExperimentConfig& cfg, int fold, Variant v) {
  TrainConfig t = cfg.training.at(v);
  t.seed = train_seed(cfg, fold, v);
  return t;
}

fs::path Paths::model_dir(int fold, Variant v) const {
  return root / "models" / ("fold" + std::to_string(fold)) / to_string(v);
}

// ---- Lifecycle ------------------------------------------------------------------------

void capture_config(const ExperimentConfig& cfg, bool force) {
  const Paths paths{cfg.output_dir};
  make_dirs(paths.root);
  const fs::path seed_file = paths.root / "seed.txt";
  const std::string seed_text = std::to_string(cfg.seed) + "\n";
  if (!force && fs::exists(paths.config())) {
    if (read_text(paths.config()) != cfg.source_text) {
      throw ConfigError(paths.config().string() +
                        " holds a different config; use --force or another output_dir");
    }
    if (fs::exists(seed_file) && read_text(seed_file) != seed_text) {
      throw ConfigError(seed_file.string() +
                        " records a different seed; use --force or another output_dir");
    }
  }
  write_text(paths.config(), cfg.source_text);
  write_text(seed_file, seed_text);
}

DatasetManifest cmd_generate(const ExperimentConfig& cfg, bool force, std::ostream& log) {
  const Paths paths{cfg.output_dir};
  const fs::path dir = paths.data();
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) {
      throw ArgumentError(dir.string() + " exists and is not empty; pass --force to overwrite");
    }
    fs::remove_all(dir);
  }
  log << "generate: " << cfg.data.n_subjects << " subjects x " << cfg.data.timepoints_per_subject
      << " timepoints, grid " << cfg.data.extent().str() << ", seed " << cfg.data.seed << "\n";
  const auto subjects = generate_dataset(cfg.data);
  DatasetManifest m = write_dataset(subjects, cfg.data, dir);
  log << "generate: wrote " << dir.string() << "\n";
  return m;
}

Dataset load_experiment_dataset(const ExperimentConfig& cfg) {
  const Paths paths{cfg.output_dir};
  if (!fs::exists(paths.data() / "manifest.json")) {
    throw DataError("no dataset at " + paths.data().string() + "; run `generate` first");
  }
  Dataset d = read_dataset(paths.data());
  if (to_json(d.params) != to_json(cfg.data)) {
    throw ConfigError("dataset at " + paths.data().string() +
                      " was generated with different parameters; regenerate with --force");
  }
  return d;
}

FoldSplit experiment_folds(const ExperimentConfig& cfg, const Dataset& data) {
  std::vector<std::string> ids;
  for (const auto& s : data.subjects) ids.push_back(s.subject_id);
  FoldSplit f = make_folds(ids, cfg.evaluation.n_folds, fold_seed(cfg));
  json j = {{"n_folds", f.n_folds}, {"seed", fold_seed(cfg)}, {"assignment", f.assignment}};
  write_text(Paths{cfg.output_dir}.folds(), j.dump(2) + "\n");
  return f;
}

bool checkpoint_complete(const fs::path& path, int total_steps) {
  if (!fs::exists(path)) return false;
  return load_checkpoint(path).global_step >= total_steps;
}

TrainingSummary train_all(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& folds,
                          const JobSelection& sel, std::ostream& log,
                          std::optional<std::int64_t> max_steps) {
  const Paths paths{cfg.output_dir};
  if (sel.fold && (*sel.fold < 0 || *sel.fold >= folds.n_folds)) {
    throw ArgumentError("--fold " + std::to_string(*sel.fold) + " outside [0, " +
                        std::to_string(folds.n_folds) + ")");
  }
  TrainingSummary summary;
  for (int fold = 0; fold < folds.n_folds; ++fold) {
    if (sel.fold && *sel.fold != fold) continue;
    for (Variant v : kVariants) {
      if (sel.variant && *sel.variant != v) continue;
      TrainJob job{network_for(cfg, fold, v), train_config_for(cfg, fold, v), fold, to_string(v),
                   paths.model_dir(fold, v)};
      const fs::path ckpt = job.out_dir / kCheckpointFile;
      if (checkpoint_complete(ckpt, job.train.steps)) {
        log << "train fold " << fold << " " << to_string(v) << ": complete, skipped\n";
        ++summary.skipped;
        continue;
      }
      log << "train fold " << fold << " " << to_string(v) << " (" << to_string(job.train.mode)
          << ", " << job.train.steps << " steps)" << std::endl;
      const TrainResult r = train(job, data.subjects, folds, nullptr, max_steps);
      summary.steps += r.steps_run;
      ++summary.trained;
      if (!r.losses.empty()) {
        const LossBreakdown& l = r.losses.back();
        log << "train fold " << fold << " " << to_string(v) << ": ran " << r.steps_run
            << " steps, last ce " << fmt(l.cross_entropy) << " kl " << fmt(l.kl) << std::endl;
      }
    }
  }
  return summary;
}

bool EvaluationOutcome::all_passed() const {
  for (const auto& c : invariants) {
    if (c.asserted && !c.passed) return false;
  }
  return true;
}

namespace {

std::vector<SubjectSeries> series_of(const Dataset& data, const std::vector<std::string>& ids) {
  std::vector<SubjectSeries> out;
  for (const auto& id : ids) out.push_back(data.subject(id));
  return out;
}

std::unique_ptr<ProbUNet> load_model(const ExperimentConfig& cfg, int fold, Variant v) {
  const fs::path path = Paths{cfg.output_dir}.model_dir(fold, v) / kCheckpointFile;
  const int steps = cfg.training.at(v).steps;
  if (!fs::exists(path)) {
    throw ConfigError("no checkpoint for fold " + std::to_string(fold) + " variant " +
                      to_string(v) + " at " + path.string() + "; run `run` first");
  }
  Checkpoint ck = load_checkpoint(path);
  if (ck.global_step < steps) {
    throw ConfigError("checkpoint " + path.string() + " is partial (" +
                      std::to_string(ck.global_step) + "/" + std::to_string(steps) +
                      " steps); finish it with `run`");
  }
  if (!(ck.model.config() == network_for(cfg, fold, v))) {
    throw ConfigError("checkpoint " + path.string() + " does not match the configured network");
  }
  return std::make_unique<ProbUNet>(std::move(ck.model));
}

// Every image read by a single-input variant must be its allowed offset from
// the target label read right after it.
bool log_respects(const AccessLog& log, int image_offset) {
  for (std::size_t i = 0; i < log.entries.size(); ++i) {
    const auto& e = log.entries[i];
    if (e.kind != AccessLog::Kind::kImage) continue;
    std::size_t j = i + 1;
    while (j < log.entries.size() && log.entries[j].kind == AccessLog::Kind::kImage) ++j;
    if (j == log.entries.size()) return false;
    if (log.entries[j].subject_id != e.subject_id ||
        log.entries[j].timepoint - e.timepoint != image_offset) {
      return false;
    }
  }
  return !log.entries.empty();
}

void write_diagnostics(const fs::path& path, const std::vector<CaseDiagnostics>& diags,
                       const ChangeGroups& groups) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "case_id,variant,fold,group,change_dice,k,volume,target_volume,mean_volume,"
         "query_volume_dice,mean_dice,surprise\n";
  for (const auto& d : diags) {
    std::string k;
    for (std::size_t i = 0; i < d.query.k.size(); ++i) k += (i ? ":" : "") + std::to_string(d.query.k[i]);
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%.6f,%s,%zu,%zu,%zu,%.6f,%.6f,%.6f",
                  groups.change.at(d.case_id), k.c_str(), d.query.volume, d.query.target_volume,
                  d.query.mean_volume, d.query.dice, d.query.mean_dice, d.surprise);
    out << d.case_id << ',' << to_string(d.variant) << ',' << d.fold << ','
        << to_string(groups.group_of(d.case_id)) << ',' << buf << '\n';
  }
}

std::vector<double> values_of(const std::vector<EvaluationRecord>& records, Variant v,
                              const std::string& metric, std::optional<ChangeGroup> group) {
  std::vector<double> out;
  for (const auto& r : records) {
    if (r.variant == v && r.metric == metric && (!group || r.group == *group)) out.push_back(r.value);
  }
  return out;
}

json invariants_json(const std::vector<InvariantCheck>& checks) {
  json arr = json::array();
  bool ok = true;
  for (const auto& c : checks) {
    arr.push_back({{"name", c.name}, {"passed", c.passed}, {"asserted", c.asserted}, {"detail", c.detail}});
    if (c.asserted && !c.passed) ok = false;
  }
  return {{"all_asserted_passed", ok}, {"checks", arr}};
}

}  // namespace

EvaluationOutcome cmd_evaluate(const ExperimentConfig& cfg, const Dataset& data,
                               const FoldSplit& folds, std::optional<int> fold_sel,
                               std::ostream& log) {
  const Paths paths{cfg.output_dir};
  make_dirs(paths.evaluation());
  if (fold_sel && (*fold_sel < 0 || *fold_sel >= folds.n_folds)) {
    throw ArgumentError("--fold " + std::to_string(*fold_sel) + " outside [0, " +
                        std::to_string(folds.n_folds) + ")");
  }

  EvaluationOutcome out;
  out.groups = stratify(data.subjects);
  out.groups.source = paths.data().string();
  write_text(paths.evaluation() / "groups.json", to_json(out.groups).dump(2) + "\n");
  log << "stratify: " << out.groups.membership.size() << " cases, large threshold "
      << fmt(out.groups.large_threshold) << " (" << out.groups.n_large << " cases), mean "
      << fmt(out.groups.mean_change) << " (" << out.groups.n_moderate << " moderate)\n";

  std::size_t n_cases = 0;
  bool upper_ok = true, lower_ok = true;
  for (int fold = 0; fold < folds.n_folds; ++fold) {
    if (fold_sel && *fold_sel != fold) continue;
    std::map<Variant, std::unique_ptr<ProbUNet>> owned;
    VariantModels models;
    for (Variant v : kVariants) {
      owned[v] = load_model(cfg, fold, v);
      models[v] = owned[v].get();
    }
    const auto test = series_of(data, folds.subjects_in(fold));
    for (const auto& s : test) n_cases += s.timepoints.size() >= 3 ? s.timepoints.size() - 2 : 0;
    std::array<AccessLog, 3> logs;
    auto recs = evaluate_fold(models, test, fold, out.groups, &logs, &out.diagnostics);
    upper_ok &= log_respects(logs[static_cast<int>(Variant::kUpper)], 0);
    lower_ok &= log_respects(logs[static_cast<int>(Variant::kLower)], 1);
    log << "evaluate fold " << fold << ": " << recs.size() << " records" << std::endl;
    out.records.insert(out.records.end(), recs.begin(), recs.end());
  }
  std::stable_sort(out.records.begin(), out.records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.case_id, a.variant, a.metric) < std::tie(b.case_id, b.variant, b.metric);
  });

  const fs::path records_path =
      paths.evaluation() / (fold_sel ? "records_fold" + std::to_string(*fold_sel) + ".csv"
                                     : std::string("records.csv"));
  write_records_csv(records_path, out.records);
  write_diagnostics(paths.evaluation() /
                        (fold_sel ? "diagnostics_fold" + std::to_string(*fold_sel) + ".csv"
                                  : std::string("diagnostics.csv")),
                    out.diagnostics, out.groups);

  auto& inv = out.invariants;
  inv.push_back({"record_count", out.records.size() == n_cases * 3 * 2, true,
                 std::to_string(out.records.size()) + " records for " + std::to_string(n_cases) +
                     " cases"});
  bool ranges = true;
  for (const auto& r : out.records) {
    if (r.metric == kMetricSurprise) ranges &= r.value >= 0.0;
    else ranges &= r.value >= 0.0 && r.value <= 1.0;
  }
  inv.push_back({"value_ranges", ranges, true, "surprise >= 0, dice in [0, 1]"});
  inv.push_back({"upper_reads_only_future", upper_ok, true, "upper inputs are C images only"});
  inv.push_back({"lower_reads_only_present", lower_ok, true, "lower inputs are B images only"});

  const double up = median(values_of(out.records, Variant::kUpper, kMetricQueryVolumeDice, {}));
  const double ours = median(values_of(out.records, Variant::kOurs, kMetricQueryVolumeDice, {}));
  inv.push_back({"upper_qvd_at_least_ours", up >= ours, true,
                 "median qvd upper " + fmt(up) + " vs ours " + fmt(ours)});

  const auto large = ChangeGroup::kLarge;
  const auto qo = values_of(out.records, Variant::kOurs, kMetricQueryVolumeDice, large);
  const auto ql = values_of(out.records, Variant::kLower, kMetricQueryVolumeDice, large);
  const auto so = values_of(out.records, Variant::kOurs, kMetricSurprise, large);
  const auto sl = values_of(out.records, Variant::kLower, kMetricSurprise, large);
  const bool enough = static_cast<int>(qo.size()) >= cfg.evaluation.min_large_cases;
  if (qo.size() >= 3 && ql.size() >= 3) {
    const double mqo = median(qo), mql = median(ql), mso = median(so), msl = median(sl);
    inv.push_back({"large_qvd_ours_above_lower", mqo > mql, enough,
                   "median " + fmt(mqo) + " vs " + fmt(mql) + " over " + std::to_string(qo.size()) +
                       " large-change cases"});
    inv.push_back({"large_surprise_ours_below_lower", mso < msl, enough,
                   "median " + fmt(mso) + " vs " + fmt(msl)});
    const double p_q = wilcoxon_rank_sum(qo, ql), p_s = wilcoxon_rank_sum(so, sl);
    inv.push_back({"large_ours_vs_lower_significant", std::min(p_q, p_s) < 0.05, false,
                   "p(qvd) " + fmt(p_q) + ", p(surprise) " + fmt(p_s)});
  } else {
    inv.push_back({"large_group_size", false, false,
                   std::to_string(qo.size()) + " large-change cases; ordering not tested"});
  }

  std::size_t above = 0, n_large_ours = 0;
  for (const auto& d : out.diagnostics) {
    if (d.variant != Variant::kOurs || out.groups.group_of(d.case_id) != large) continue;
    ++n_large_ours;
    above += d.query.dice > d.query.mean_dice;
  }
  if (n_large_ours > 0) {
    const double frac = static_cast<double>(above) / static_cast<double>(n_large_ours);
    inv.push_back({"large_qvd_above_mean_prediction", frac >= 0.8, false,
                   std::to_string(above) + "/" + std::to_string(n_large_ours) +
                       " large-change cases improve on the mean latent"});
  }
  inv.push_back({"stratification_nondegenerate", !out.groups.degenerate, false,
                 std::to_string(out.groups.n_moderate) + " moderate cases"});

  if (!fold_sel) write_text(paths.invariants(), invariants_json(inv).dump(2) + "\n");
  for (const auto& c : inv) {
    log << "invariant " << c.name << ": " << (c.passed ? "pass" : "FAIL")
        << (c.asserted ? "" : " (informational)") << " - " << c.detail << "\n";
  }
  return out;
}

Summary cmd_report(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& folds,
                   std::ostream& log) {
  const Paths paths{cfg.output_dir};
  const fs::path records_path = paths.evaluation() / "records.csv";
  if (!fs::exists(records_path)) {
    throw DataError("no records at " + records_path.string() + "; run `evaluate` first");
  }
  const auto records = read_records_csv(records_path);
  ChangeGroups groups = stratify(data.subjects);
  groups.source = paths.data().string();
  Summary s = summarize(records, groups);
  write_summary(paths.report(), s);
  log << "report: wrote " << paths.report().string() << "\n";

  // Figures for the cases with the largest change.
  std::vector<std::pair<double, std::string>> ranked;
  for (const auto& [id, d] : groups.change) ranked.emplace_back(d, id);
  std::sort(ranked.begin(), ranked.end());
  const int n_fig = std::min<int>(cfg.evaluation.figure_cases, static_cast<int>(ranked.size()));
  if (n_fig == 0) return s;
  make_dirs(paths.figures());

  std::map<std::pair<int, Variant>, std::unique_ptr<ProbUNet>> cache;
  auto model = [&](int fold, Variant v) -> const ProbUNet& {
    auto& slot = cache[{fold, v}];
    if (!slot) slot = load_model(cfg, fold, v);
    return *slot;
  };
  OverlaySpec spec;
  json grid_info = json::array();
  int monotone = 0;
  for (int i = 0; i < n_fig; ++i) {
    const std::string& case_id = ranked[i].second;
    const std::string subject = case_id.substr(0, case_id.find("_t"));
    const int first = std::stoi(case_id.substr(case_id.find("_t") + 2));
    const SubjectSeries& series = data.subject(subject);
    const int fold = folds.fold_of(subject);
    for (Variant v : kVariants) {
      const GrowthCase c = variant_case(series, first, v);
      const ProbUNet& m = model(fold, v);
      const OverlayResult o = render_case_overlay(m, c, spec);
      write_png(paths.figures() / artifact_name(case_id, "overlay", to_string(v), "png"), o.image);
      const LatentGridResult g =
          render_latent_grid(m, c, cfg.evaluation.grid_axes, cfg.evaluation.grid_steps, spec);
      write_png(paths.figures() / artifact_name(case_id, "grid", to_string(v), "png"), g.image);
      const bool mono = monotone_along_an_axis(g.volumes);
      if (v == Variant::kOurs) monotone += mono;
      grid_info.push_back({{"case_id", case_id},
                           {"variant", to_string(v)},
                           {"volumes", g.volumes},
                           {"monotone_along_an_axis", mono}});
    }
  }
  write_text(paths.figures() / "grid_volumes.json", grid_info.dump(2) + "\n");
  log << "report: " << 2 * 3 * n_fig << " figures, latent grid monotone along an axis in "
      << monotone << "/" << n_fig << " cases (ours)\n";
  return s;
}

RunOutcome cmd_run(const ExperimentConfig& cfg, const JobSelection& sel, bool force,
                   std::ostream& log) {
  const Paths paths{cfg.output_dir};
  if (force) {
    for (const fs::path& p : {paths.data(), paths.root / "models", paths.evaluation(),
                              paths.report(), paths.invariants()}) {
      fs::remove_all(p);
    }
  }
  capture_config(cfg, force);
  if (!fs::exists(paths.data() / "manifest.json")) cmd_generate(cfg, false, log);
  const Dataset data = load_experiment_dataset(cfg);
  const FoldSplit folds = experiment_folds(cfg, data);

  RunOutcome out;
  out.training = train_all(cfg, data, folds, sel, log);
  log << "train: " << out.training.trained << " trained, " << out.training.skipped
      << " skipped, " << out.training.steps << " steps\n";

  int incomplete = 0;
  for (int fold = 0; fold < folds.n_folds; ++fold) {
    for (Variant v : kVariants) {
      incomplete += !checkpoint_complete(paths.model_dir(fold, v) / kCheckpointFile,
                                         cfg.training.at(v).steps);
    }
  }
  if (incomplete > 0) {
    log << "evaluation deferred: " << incomplete << " fold/variant jobs incomplete\n";
    return out;
  }
  out.evaluation = cmd_evaluate(cfg, data, folds, std::nullopt, log);
  out.summary = cmd_report(cfg, data, folds, log);
  out.evaluated = true;
  return out;
}

// ---- Sampling ----------------------------------------------------------------------------

json SampleOutcome::to_json() const {
  json j = {{"case_id", case_id},
            {"variant", probgrowth::to_string(variant)},
            {"fold", fold},
            {"current_volume", current_volume},
            {"achieved_volume", achieved_volume},
            {"latent", latent},
            {"label_file", label_file.string()},
            {"overlay_file", overlay_file.string()}};
  j["requested_volume"] = requested_volume ? json(*requested_volume) : json(nullptr);
  if (!k.empty()) j["k"] = k;
  return j;
}

SampleOutcome cmd_sample(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& folds,
                         const SampleQuery& query) {
  if (query.volume_factor.has_value() == query.latent.has_value()) {
    throw ArgumentError("sample needs exactly one of --factor or --latent");
  }
  const SubjectSeries* series = nullptr;
  int first = -1;
  for (const auto& s : data.subjects) {
    for (int t = 0; t + 2 < static_cast<int>(s.timepoints.size()); ++t) {
      if (triple_case_id(s.subject_id, t) == query.case_id) {
        series = &s;
        first = t;
      }
    }
  }
  if (!series) throw LookupError("unknown case_id '" + query.case_id + "'");

  SampleOutcome out;
  out.case_id = query.case_id;
  out.variant = query.variant;
  out.fold = folds.fold_of(series->subject_id);
  const auto model = load_model(cfg, out.fold, query.variant);
  const GrowthCase c = variant_case(*series, first, query.variant);
  const Tensor inputs = stack_inputs(c.inputs);
  const LatentDecoder decoder(*model, inputs);
  out.current_volume = series->timepoints[first + 1].labels.tumor_volume();

  if (query.volume_factor) {
    if (!(*query.volume_factor > 0.0)) throw ArgumentError("--factor must be > 0");
    out.requested_volume = static_cast<std::size_t>(
        std::llround(static_cast<double>(out.current_volume) * *query.volume_factor));
    const QueryResult q = query_volume(*model, inputs, *out.requested_volume);
    out.latent = q.latent;
    out.k = q.k;
  } else {
    if (static_cast<int>(query.latent->size()) != model->config().latent_dim) {
      throw ArgumentError("--latent needs " + std::to_string(model->config().latent_dim) +
                          " values, got " + std::to_string(query.latent->size()));
    }
    out.latent = *query.latent;
  }
  out.segmentation = decoder.decode_labels(out.latent);
  out.achieved_volume = out.segmentation.tumor_volume();

  const Paths paths{cfg.output_dir};
  make_dirs(paths.samples());
  const std::string v = to_string(query.variant);
  out.label_file = paths.samples() / artifact_name(query.case_id, "sample", v, "u8");
  out.overlay_file = paths.samples() / artifact_name(query.case_id, "sample", v, "png");
  {
    std::ofstream f(out.label_file, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + out.label_file.string());
    f.write(reinterpret_cast<const char*>(out.segmentation.data.data()),
            static_cast<std::streamsize>(out.segmentation.data.size()));
  }
  const LabelMap mean = decoder.decode_labels(model->prior_encode(inputs).mean);
  write_png(out.overlay_file,
            render_overlay(c.inputs.back(), &c.target, &mean, &out.segmentation, OverlaySpec{}));
  write_text(paths.samples() / artifact_name(query.case_id, "sample", v, "json"),
             out.to_json().dump(2) + "\n");
  return out;
}

}  // namespace probgrowth
