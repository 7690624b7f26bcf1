#pragma once

// Config-driven experiment lifecycle: generate, train every fold x variant,
// evaluate, report. Output layout under ExperimentConfig::output_dir:
//
//   config.json                   verbatim copy of the config file
//   data/                         synthgrowth dataset (manifest.json, sub-XXX/)
//   folds.json                    subject -> fold
//   models/fold{k}/{variant}/     checkpoint.bin, metrics.csv
//   evaluation/                   records.csv, groups.json, diagnostics.csv
//   report/                       summary.{csv,json}, pvalues.csv, figures/
//   invariants.json               outcome of the run's property checks
//   samples/                      outputs of `sample`

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "probgrowth/evaluation.hpp"
#include "probgrowth/model.hpp"
#include "probgrowth/reporting.hpp"
#include "probgrowth/synthgrowth.hpp"
#include "probgrowth/training.hpp"

namespace probgrowth {

struct EvaluationOptions {
  int n_folds = 5;
  /// Large-change cases that get overlay and latent-grid figures.
  int figure_cases = 4;
  std::array<int, 2> grid_axes{0, 1};
  int grid_steps = kGridSteps;
  /// Minimum large-group size for the ordering invariants to be asserted.
  int min_large_cases = 20;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "runs/experiment";
  GrowthParams data;
  NetworkConfig network;  // n_input_timepoints and seed are set per job
  std::map<Variant, TrainConfig> training;
  EvaluationOptions evaluation;
  /// Text of the config file as read, copied verbatim into the output.
  std::string source_text;

  void validate() const;
};

/// Parses the JSON config. The top-level seed drives every random stream;
/// `data.seed` is not accepted. `output_root`, when given, replaces the
/// directory a relative output_dir is resolved against.
ExperimentConfig parse_experiment_config(const std::string& text,
                                         std::optional<std::uint64_t> seed_override = {},
                                         const std::optional<std::filesystem::path>& output_root = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        std::optional<std::uint64_t> seed_override = {},
                                        const std::optional<std::filesystem::path>& output_root = {});

inline constexpr const char* kOutputRootEnv = "PROBGROWTH_OUTPUT_ROOT";

/// Derived seeds, one per purpose.
std::uint64_t fold_seed(const ExperimentConfig& cfg);
std::uint64_t train_seed(const ExperimentConfig& cfg, int fold, Variant v);
std::uint64_t init_seed(const ExperimentConfig& cfg, int fold, Variant v);

NetworkConfig network_for(const ExperimentConfig& cfg, int fold, Variant v);
TrainConfig train_config_for(const ExperimentConfig& cfg, int fold, Variant v);

struct Paths {
  std::filesystem::path root;
  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path folds() const { return root / "folds.json"; }
  std::filesystem::path model_dir(int fold, Variant v) const;
  std::filesystem::path evaluation() const { return root / "evaluation"; }
  std::filesystem::path report() const { return root / "report"; }
  std::filesystem::path figures() const { return report() / "figures"; }
  std::filesystem::path invariants() const { return root / "invariants.json"; }
  std::filesystem::path samples() const { return root / "samples"; }
};

/// Copies the config text into the output directory. Refuses (ConfigError)
/// to replace a different config unless `force`.
void capture_config(const ExperimentConfig& cfg, bool force);

/// Generates and writes the dataset. Refuses (ArgumentError) when data/ is
/// non-empty unless `force`, which deletes it first.
DatasetManifest cmd_generate(const ExperimentConfig& cfg, bool force, std::ostream& log);

/// Reads data/ and checks it was generated with the configured parameters.
Dataset load_experiment_dataset(const ExperimentConfig& cfg);

FoldSplit experiment_folds(const ExperimentConfig& cfg, const Dataset& data);

struct JobSelection {
  std::optional<int> fold;
  std::optional<Variant> variant;
};

struct TrainingSummary {
  int trained = 0;
  int skipped = 0;
  std::int64_t steps = 0;
};

/// Trains the selected fold x variant jobs; completed checkpoints are skipped,
/// partial ones resumed.
TrainingSummary train_all(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& folds,
                          const JobSelection& sel, std::ostream& log,
                          std::optional<std::int64_t> max_steps = {});

bool checkpoint_complete(const std::filesystem::path& path, int total_steps);

struct InvariantCheck {
  std::string name;
  bool passed = false;
  bool asserted = true;  // false: recorded for information only
  std::string detail;
};

struct EvaluationOutcome {
  std::vector<EvaluationRecord> records;
  std::vector<CaseDiagnostics> diagnostics;
  ChangeGroups groups;
  std::vector<InvariantCheck> invariants;
  bool all_passed() const;
};

/// Evaluates the selected folds (all by default) with their three checkpoints,
/// writes evaluation/ and invariants.json.
EvaluationOutcome cmd_evaluate(const ExperimentConfig& cfg, const Dataset& data,
                               const FoldSplit& folds, std::optional<int> fold, std::ostream& log);

/// Summary tables plus overlay and latent-grid figures for the largest-change
/// cases. Reads evaluation/records.csv.
Summary cmd_report(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& folds,
                   std::ostream& log);

struct RunOutcome {
  TrainingSummary training;
  EvaluationOutcome evaluation;
  Summary summary;
  bool evaluated = false;
};

/// generate (if data/ is absent), train, evaluate, report.
RunOutcome cmd_run(const ExperimentConfig& cfg, const JobSelection& sel, bool force,
                   std::ostream& log);

struct SampleQuery {
  std::string case_id;
  Variant variant = Variant::kOurs;
  std::optional<double> volume_factor;
  std::optional<std::vector<double>> latent;
};

struct SampleOutcome {
  std::string case_id;
  Variant variant = Variant::kOurs;
  int fold = 0;
  std::size_t current_volume = 0;
  std::optional<std::size_t> requested_volume;
  std::size_t achieved_volume = 0;
  std::vector<double> latent;
  std::vector<int> k;  // grid offsets for volume queries
  LabelMap segmentation;
  std::filesystem::path label_file;
  std::filesystem::path overlay_file;
  nlohmann::json to_json() const;
};

/// Volume query: best grid match for current volume x factor. Latent query:
/// decode directly. The checkpoint is the one whose fold holds the case out.
SampleOutcome cmd_sample(const ExperimentConfig& cfg, const Dataset& data, const FoldSplit& folds,
                         const SampleQuery& query);

}  // namespace probgrowth
