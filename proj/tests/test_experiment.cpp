#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "doctest.h"
#include "helpers.hpp"
#include "probgrowth/error.hpp"
#include "probgrowth/experiment.hpp"

using namespace probgrowth;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tiny_config_text(const std::string& out, int steps = 4) {
  return R"({
  "seed": 11,
  "output_dir": ")" + out + R"(",
  "data": {"grid_size": 32, "n_subjects": 5, "timepoints_per_subject": 4},
  "network": {"base_channels": 4, "depth": 2},
  "training": {"steps": )" + std::to_string(steps) + R"(, "batch_size": 2, "patch_size": 16,
               "learning_rate": 0.001, "checkpoint_interval": 2},
  "evaluation": {"n_folds": 2, "figure_cases": 1, "min_large_cases": 20}
})";
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(PROBGROWTH_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << text;
  return p;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto dir = testing::scratch_dir("cfg");
  const ExperimentConfig cfg = parse_experiment_config(tiny_config_text("out"), {}, dir);
  CHECK(cfg.output_dir == dir / "out");
  CHECK(cfg.seed == 11);
  CHECK(cfg.data.seed == 11);
  CHECK(cfg.training.at(Variant::kLower).mode == CaseMode::kBtoB);
  CHECK(cfg.training.at(Variant::kUpper).mode == CaseMode::kCtoC);
  CHECK(cfg.training.at(Variant::kOurs).steps == 4);
  CHECK(network_for(cfg, 0, Variant::kOurs).n_input_timepoints == 2);
  CHECK(network_for(cfg, 0, Variant::kLower).n_input_timepoints == 1);
  CHECK(network_for(cfg, 0, Variant::kOurs).seed != network_for(cfg, 1, Variant::kOurs).seed);
  CHECK(train_config_for(cfg, 0, Variant::kOurs).seed != train_config_for(cfg, 0, Variant::kUpper).seed);
  CHECK(parse_experiment_config(tiny_config_text("out"), 99, dir).data.seed == 99);

  auto expect_error = [&](const std::string& text, const std::string& field) {
    try {
      parse_experiment_config(text, {}, dir);
      FAIL("expected ConfigError mentioning " << field);
    } catch (const ConfigError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(field) != std::string::npos, e.what());
    }
  };
  expect_error("{not json", "JSON");
  expect_error(R"({"bogus": 1})", "bogus");
  expect_error(R"({"data": {"seed": 3}})", "seed");
  expect_error(R"({"data": {"grid_size": 8}})", "grid_size");
  expect_error(R"({"variants": {"lower": {"mode": "AB->C"}}})", "lower");
  expect_error(R"({"evaluation": {"n_folds": 1}})", "n_folds");
  expect_error(R"({"network": {"spatial_dims": 3}})", "spatial_dims");
  CHECK_THROWS_AS(load_experiment_config(dir / "absent.json"), ConfigError);

  const auto over = parse_experiment_config(
      R"({"training": {"steps": 10}, "variants": {"upper": {"steps": 3}}})", {}, dir);
  CHECK(over.training.at(Variant::kUpper).steps == 3);
  CHECK(over.training.at(Variant::kOurs).steps == 10);
}

TEST_CASE("generate refuses to overwrite and is reproducible") {
  const auto dir = testing::scratch_dir("gen");
  const ExperimentConfig a = parse_experiment_config(tiny_config_text("a"), {}, dir);
  const ExperimentConfig b = parse_experiment_config(tiny_config_text("b"), {}, dir);
  std::ostringstream log;
  const DatasetManifest ma = cmd_generate(a, false, log);
  const DatasetManifest mb = cmd_generate(b, false, log);
  CHECK(ma.json == mb.json);
  CHECK(ma.subject_count() == 5);
  CHECK(read_file(dir / "a" / "data" / "manifest.json") == read_file(dir / "b" / "data" / "manifest.json"));
  CHECK_THROWS_AS(cmd_generate(a, false, log), ArgumentError);
  CHECK_NOTHROW(cmd_generate(a, true, log));
  CHECK(load_experiment_dataset(a).subjects.size() == 5);

  const ExperimentConfig other = parse_experiment_config(tiny_config_text("a"), 12, dir);
  CHECK_THROWS_AS(load_experiment_dataset(other), ConfigError);
  capture_config(a, false);
  CHECK_NOTHROW(capture_config(a, false));
  CHECK_THROWS_AS(capture_config(other, false), ConfigError);
}

TEST_CASE("full run, rerun, sample") {
  const auto dir = testing::scratch_dir("run");
  const ExperimentConfig cfg = parse_experiment_config(tiny_config_text("exp"), {}, dir);
  std::ostringstream log;
  const RunOutcome r = cmd_run(cfg, {}, false, log);
  CHECK(r.evaluated);
  CHECK(r.training.trained == 6);
  CHECK(r.training.steps == 24);
  const Paths paths{cfg.output_dir};
  for (int fold = 0; fold < 2; ++fold) {
    for (Variant v : kVariants) {
      CHECK(checkpoint_complete(paths.model_dir(fold, v) / kCheckpointFile, 4));
    }
  }
  CHECK(r.evaluation.records.size() == 10 * 3 * 2);
  CHECK(fs::exists(paths.evaluation() / "records.csv"));
  CHECK(fs::exists(paths.report() / "summary.csv"));
  CHECK(fs::exists(paths.invariants()));
  CHECK(fs::exists(paths.config()));
  const auto inv = nlohmann::json::parse(read_file(paths.invariants()));
  CHECK(inv.is_object());
  for (const auto& check : r.evaluation.invariants) {
    if (check.name == "record_count" || check.name == "upper_reads_only_future" ||
        check.name == "lower_reads_only_present" || check.name == "value_ranges") {
      CHECK_MESSAGE(check.passed, check.name << ": " << check.detail);
    }
  }
  bool figures = false;
  for (const auto& e : fs::directory_iterator(paths.figures())) {
    figures |= e.path().extension() == ".png";
  }
  CHECK(figures);

  std::ostringstream again;
  const RunOutcome r2 = cmd_run(cfg, {}, false, again);
  CHECK(r2.training.trained == 0);
  CHECK(r2.training.skipped == 6);
  CHECK(r2.training.steps == 0);
  CHECK(r2.evaluation.records == r.evaluation.records);

  const Dataset data = load_experiment_dataset(cfg);
  const FoldSplit folds = experiment_folds(cfg, data);
  const std::string case_id = triple_case_id("sub-001", 0);

  SampleQuery mean_query{case_id, Variant::kOurs, std::nullopt, std::vector<double>{}};
  const SampleOutcome z = [&] {
    const int fold = folds.fold_of("sub-001");
    const ProbUNet model = load_checkpoint(paths.model_dir(fold, Variant::kOurs) / kCheckpointFile).model;
    const GrowthCase c = variant_case(data.subject("sub-001"), 0, Variant::kOurs);
    const Tensor in = stack_inputs(c.inputs);
    SampleQuery q = mean_query;
    q.latent = model.prior_encode(in).mean;
    const SampleOutcome out = cmd_sample(cfg, data, folds, q);
    CHECK(out.segmentation == model.backbone_forward(in, *q.latent).argmax());
    return out;
  }();
  CHECK(fs::exists(z.label_file));
  CHECK(fs::exists(z.overlay_file));

  SampleQuery factor{case_id, Variant::kOurs, 1.2, std::nullopt};
  const SampleOutcome f = cmd_sample(cfg, data, folds, factor);
  REQUIRE(f.requested_volume.has_value());
  CHECK(f.current_volume == data.subject("sub-001").timepoints[1].labels.tumor_volume());
  CHECK(*f.requested_volume ==
        static_cast<std::size_t>(std::llround(1.2 * static_cast<double>(f.current_volume))));
  CHECK(f.k.size() == 3);
  CHECK(f.to_json().contains("achieved_volume"));
  CHECK(f.to_json().contains("requested_volume"));

  SampleQuery both{case_id, Variant::kOurs, 1.0, std::vector<double>{0, 0, 0}};
  CHECK_THROWS_AS(cmd_sample(cfg, data, folds, both), ArgumentError);
  SampleQuery unknown{"sub-042_t0_t1_t2", Variant::kOurs, 1.0, std::nullopt};
  CHECK_THROWS_AS(cmd_sample(cfg, data, folds, unknown), LookupError);
  SampleQuery short_latent{case_id, Variant::kOurs, std::nullopt, std::vector<double>{0}};
  CHECK_THROWS_AS(cmd_sample(cfg, data, folds, short_latent), ArgumentError);
}

TEST_CASE("command line exit codes") {
  const auto dir = testing::scratch_dir("cli");
  const fs::path config = write_config(dir, tiny_config_text("exp"));
  const fs::path log = dir / "log.txt";
  const std::string root = "PROBGROWTH_OUTPUT_ROOT=" + dir.string() + " ";
  const std::string cli = std::string(PROBGROWTH_CLI);

  CHECK(run_cli("--help", log) == 0);
  CHECK(run_cli("frobnicate", log) != 0);
  CHECK(run_cli("generate --config " + (dir / "missing.json").string(), log) == 1);

  auto with_root = [&](const std::string& args) {
    const std::string cmd = root + cli + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  CHECK(with_root("generate --config " + config.string()) == 0);
  CHECK(fs::exists(dir / "exp" / "data" / "manifest.json"));
  const std::string manifest = read_file(dir / "exp" / "data" / "manifest.json");
  CHECK(with_root("generate --config " + config.string()) != 0);
  CHECK(with_root("generate --force --config " + config.string()) == 0);
  CHECK(read_file(dir / "exp" / "data" / "manifest.json") == manifest);

  write_config(dir, R"({"data": {"shrink_probability": 2}})");
  CHECK(with_root("generate --config " + config.string()) == 1);
  CHECK(read_file(log).find("shrink_probability") != std::string::npos);
}
