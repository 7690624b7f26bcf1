// probgrowth command line: generate | run | evaluate | sample | report.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
// failure or failed evaluation invariant.

#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "probgrowth/error.hpp"
#include "probgrowth/experiment.hpp"

namespace pg = probgrowth;

namespace {

std::vector<double> parse_latent(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::logic_error&) {
      throw pg::ArgumentError("--latent: '" + cell + "' is not a number");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic lesion growth: synthetic data, training, evaluation"};
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;
  std::optional<int> fold;
  std::string variant_name;
  std::optional<std::uint64_t> seed;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "Override the global seed");
  };

  auto* gen = app.add_subcommand("generate", "Write the synthetic dataset");
  common(gen);
  gen->add_flag("--force", force, "Overwrite an existing dataset");

  auto* run = app.add_subcommand("run", "Generate, train all folds and variants, evaluate, report");
  common(run);
  run->add_flag("--force", force, "Discard previous outputs and start over");
  run->add_option("--fold", fold, "Train only this fold");
  run->add_option("--variant", variant_name, "Train only this variant (ours, upper, lower)");

  auto* eval = app.add_subcommand("evaluate", "Evaluate trained checkpoints");
  common(eval);
  eval->add_option("--fold", fold, "Evaluate only this fold");

  auto* rep = app.add_subcommand("report", "Summary tables and figures from evaluation records");
  common(rep);

  std::string case_id;
  std::optional<double> factor;
  std::string latent_text;
  auto* sample = app.add_subcommand("sample", "Query one case by target volume or latent");
  common(sample);
  sample->add_option("--case", case_id, "AB->C case id, e.g. sub-003_t1_t2_t3")->required();
  sample->add_option("--variant", variant_name, "ours (default), upper or lower");
  sample->add_option("--factor", factor, "Target volume as a multiple of the present volume");
  sample->add_option("--latent", latent_text, "Comma-separated latent vector");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    std::optional<std::filesystem::path> root;
    if (const char* env = std::getenv(pg::kOutputRootEnv); env && *env) root = env;
    const pg::ExperimentConfig cfg = pg::load_experiment_config(config_path, seed, root);
    std::optional<pg::Variant> variant;
    if (!variant_name.empty()) variant = pg::variant_from_string(variant_name);

    if (gen->parsed()) {
      pg::capture_config(cfg, force);
      const auto m = pg::cmd_generate(cfg, force, std::clog);
      std::cout << "subjects: " << m.subject_count() << "\n";
      return 0;
    }
    if (run->parsed()) {
      const auto out = pg::cmd_run(cfg, {fold, variant}, force, std::clog);
      if (out.evaluated && !out.evaluation.all_passed()) {
        std::cerr << "run: evaluation invariants failed, see invariants.json\n";
        return 3;
      }
      return 0;
    }
    pg::capture_config(cfg, false);
    const pg::Dataset data = pg::load_experiment_dataset(cfg);
    const pg::FoldSplit folds = pg::experiment_folds(cfg, data);
    if (eval->parsed()) {
      const auto out = pg::cmd_evaluate(cfg, data, folds, fold, std::clog);
      return out.all_passed() ? 0 : 3;
    }
    if (rep->parsed()) {
      pg::cmd_report(cfg, data, folds, std::clog);
      return 0;
    }
    pg::SampleQuery q;
    q.case_id = case_id;
    q.variant = variant.value_or(pg::Variant::kOurs);
    q.volume_factor = factor;
    if (!latent_text.empty()) q.latent = parse_latent(latent_text);
    std::cout << pg::cmd_sample(cfg, data, folds, q).to_json().dump(2) << "\n";
    return 0;
  } catch (const pg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
