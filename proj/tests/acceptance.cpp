// Acceptance suite: one PASS/FAIL line per criterion, exit status 0 only if
// all pass. Criteria can be selected by number: `acceptance 1 2 8`.
//
// The desk-scale pipeline (criteria 4 and 5) writes under
// $PROBGROWTH_OUTPUT_ROOT, or the working directory, in runs/desk; completed
// checkpoints there are reused on later invocations.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "probgrowth/checkpoint.hpp"
#include "probgrowth/error.hpp"
#include "probgrowth/evaluation.hpp"
#include "probgrowth/experiment.hpp"
#include "probgrowth/training.hpp"

using namespace probgrowth;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, a);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path output_root() {
  if (const char* env = std::getenv(kOutputRootEnv)) return env;
  return fs::current_path();
}

ExperimentConfig desk_config() {
  return load_experiment_config(fs::path(PROBGROWTH_SOURCE_DIR) / "configs" / "desk.json", {},
                                output_root());
}

// 1 ---------------------------------------------------------------------------

Outcome kl_vs_monte_carlo() {
  Rng rng(101);
  double worst = 0.0;
  for (int pair = 0; pair < 20; ++pair) {
    std::vector<double> mq(3), lq(3), mp(3), lp(3);
    for (int i = 0; i < 3; ++i) {
      mq[i] = rng.uniform(-1, 1);
      mp[i] = rng.uniform(-1, 1);
      lq[i] = rng.uniform(-1, 1);
      lp[i] = rng.uniform(-1, 1);
    }
    const DiagonalGaussian q(mq, lq), p(mp, lp);
    double sum = 0.0;
    const int n = 1'000'000;
    for (int s = 0; s < n; ++s) {
      double lr = 0.0;
      for (int i = 0; i < 3; ++i) {
        const double sq = std::exp(0.5 * lq[i]), sp = std::exp(0.5 * lp[i]);
        const double x = mq[i] + sq * rng.normal();
        const double uq = (x - mq[i]) / sq, up = (x - mp[i]) / sp;
        lr += -0.5 * uq * uq - std::log(sq) + 0.5 * up * up + std::log(sp);
      }
      sum += lr;
    }
    worst = std::max(worst, std::abs(sum / n - kl_diag_gaussians(q, p)));
  }
  return {worst <= 0.01, "max |closed - MC| over 20 pairs = " + fmt("%.4f", worst) + " (tol 0.01)"};
}

// 2 ---------------------------------------------------------------------------

Outcome gradient_check() {
  NetworkConfig cfg;
  cfg.base_channels = 4;
  cfg.depth = 2;
  cfg.seed = 5;
  ProbUNet model(cfg);
  Rng rng(6);
  const Extent e{1, 8, 8};
  Tensor inputs(cfg.input_channels(), e);
  for (auto& x : inputs.data) x = rng.normal();
  LabelMap target(e);
  for (auto& v : target.data) v = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
  const std::vector<double> noise{0.3, -0.8, 1.2};
  DiagonalGaussian post({0.1, -0.4, 0.6}, {-0.3, 0.2, 0.4});
  ElboOptions opt;
  opt.kl_coefficient = 1.0 / 64;
  opt.posterior_override = &post;
  auto total = [&] {
    ElboOptions o = opt;
    o.backward = false;
    return elbo_case(model, inputs, target, noise, o).loss.total;
  };
  model.zero_grad();
  const ElboResult r = elbo_case(model, inputs, target, noise, opt);
  const double h = 1e-5;
  auto rel = [](double a, double b) {
    return std::abs(a - b) / std::max(std::abs(a) + std::abs(b), 1e-12);
  };
  double worst = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (auto* v : {&post.mean, &post.log_variance}) {
      const double keep = (*v)[i];
      (*v)[i] = keep + h;
      const double up = total();
      (*v)[i] = keep - h;
      const double down = total();
      (*v)[i] = keep;
      const double a = v == &post.mean ? r.grad_posterior_mean[i] : r.grad_posterior_log_variance[i];
      worst = std::max(worst, rel(a, (up - down) / (2 * h)));
    }
  }
  std::vector<Param*> params;
  model.backbone().collect(params);
  int checked = 0;
  while (checked < 10) {
    Param* p = params[rng.uniform_int(0, static_cast<int>(params.size()) - 1)];
    const auto i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(p->size()) - 1));
    const double keep = p->value[i];
    p->value[i] = keep + h;
    const double up = total();
    p->value[i] = keep - h;
    const double down = total();
    p->value[i] = keep;
    worst = std::max(worst, rel(p->grad[i], (up - down) / (2 * h)));
    ++checked;
  }
  return {worst < 1e-3, "max relative error over 6 posterior and 10 backbone entries = " +
                            fmt("%.2e", worst) + " (tol 1e-3)"};
}

// 3 ---------------------------------------------------------------------------

Outcome overfit_single_subject() {
  GrowthParams p;
  p.n_subjects = 1;
  p.timepoints_per_subject = 3;
  const auto subjects = generate_dataset(p);
  const auto cases = training_cases(subjects, {subjects.front().subject_id}, CaseMode::kABtoC);
  const GrowthCase& c = cases.front();
  NetworkConfig net;
  net.base_channels = 8;
  net.depth = 3;
  net.seed = 3;
  TrainConfig tc;
  tc.learning_rate = 2e-3;
  TrainState state{ProbUNet(net), {}, Rng(4), 0};
  const std::vector<GrowthCase> batch{c};
  const Tensor in = stack_inputs(c.inputs);
  const Mask truth = whole_tumor(c.target);
  double d = 0.0;
  int step = 0;
  while (step < 2000) {
    train_step(state, batch, tc);
    ++step;
    if (step % 100 == 0) {
      const auto prior = state.model.prior_encode(in);
      d = dice(whole_tumor(state.model.backbone_forward(in, prior.mean)), truth);
      if (d > 0.9) break;
    }
  }
  return {d > 0.9, "whole-tumour Dice with the prior mean = " + fmt("%.4f", d) + " after " +
                       std::to_string(step) + " steps (need > 0.9 within 2000)"};
}

// 4 and 5 share the desk run ------------------------------------------------------

struct DeskRun {
  ExperimentConfig cfg;
  RunOutcome outcome;
  bool ready = false;
  std::string error;
};

DeskRun& desk_run() {
  static DeskRun run = [] {
    DeskRun r;
    try {
      r.cfg = desk_config();
      std::ofstream log(output_root() / "acceptance_desk.log", std::ios::app);
      r.outcome = cmd_run(r.cfg, {}, false, log);
      r.ready = r.outcome.evaluated;
      if (!r.ready) r.error = "pipeline did not reach evaluation";
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    return r;
  }();
  return run;
}

Outcome figure_ordering() {
  DeskRun& run = desk_run();
  if (!run.ready) return {false, "desk run failed: " + run.error};
  const Summary& s = run.outcome.summary;
  const auto* qo = s.find("large", "ours", kMetricQueryVolumeDice);
  const auto* ql = s.find("large", "lower", kMetricQueryVolumeDice);
  const auto* qu = s.find("large", "upper", kMetricQueryVolumeDice);
  const auto* so = s.find("large", "ours", kMetricSurprise);
  const auto* sl = s.find("large", "lower", kMetricSurprise);
  const auto* pq = s.find_p("large", kMetricQueryVolumeDice, "ours_vs_lower");
  const auto* ps = s.find_p("large", kMetricSurprise, "ours_vs_lower");
  if (!qo || !ql || !qu || !so || !sl || !pq || !ps) return {false, "large-group rows missing"};
  const bool qvd_order = qo->median > ql->median && qo->median <= qu->median;
  const bool surprise_order = so->median < sl->median;
  const bool significant = (pq->available && pq->p_value < 0.05) || (ps->available && ps->p_value < 0.05);
  std::ostringstream d;
  d << run.cfg.data.n_subjects << " subjects, " << qo->n << " large-change cases; QVD median lower "
    << fmt("%.3f", ql->median) << " < ours " << fmt("%.3f", qo->median) << " <= upper "
    << fmt("%.3f", qu->median) << (qvd_order ? " ok" : " VIOLATED") << "; surprise median ours "
    << fmt("%.2f", so->median) << " < lower " << fmt("%.2f", sl->median)
    << (surprise_order ? " ok" : " VIOLATED") << "; p(QVD) " << fmt("%.2g", pq->p_value)
    << ", p(surprise) " << fmt("%.2g", ps->p_value) << (significant ? " ok" : " (none < 0.05)");
  return {qvd_order && surprise_order && significant, d.str()};
}

Outcome distribution_sanity() {
  DeskRun& run = desk_run();
  if (!run.ready) return {false, "desk run failed: " + run.error};
  const Paths paths{run.cfg.output_dir};
  const Dataset data = load_experiment_dataset(run.cfg);
  const FoldSplit folds = experiment_folds(run.cfg, data);
  std::map<int, ProbUNet> models;
  Rng rng(55);
  int covered = 0, pairs = 0;
  std::ostringstream d;
  for (const auto& series : data.subjects) {
    if (pairs == 10) break;
    const int fold = folds.fold_of(series.subject_id);
    if (!models.count(fold)) {
      models[fold] = load_checkpoint(paths.model_dir(fold, Variant::kOurs) / kCheckpointFile).model;
    }
    const ProbUNet& model = models.at(fold);
    const GrowthCase c = variant_case(series, 0, Variant::kOurs);
    const Tensor in = stack_inputs(c.inputs);
    const DiagonalGaussian prior = model.prior_encode(in);
    const LatentDecoder dec(model, in);
    std::size_t lo = SIZE_MAX, hi = 0;
    for (int s = 0; s < 100; ++s) {
      const std::size_t v = dec.decode_labels(sample_gaussian(prior, rng)).tumor_volume();
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const auto futures = sample_futures(series.timepoints[0], series.timepoints[1], data.params, 500,
                                        mix_seed(run.cfg.seed, 9000 + pairs));
    std::vector<std::size_t> vols;
    for (const auto& f : futures) vols.push_back(f.tumor_volume());
    std::sort(vols.begin(), vols.end());
    const std::size_t q1 = vols[vols.size() / 4], q3 = vols[(3 * vols.size()) / 4];
    const bool ok = lo <= q1 && hi >= q3;
    covered += ok;
    ++pairs;
    d << (pairs > 1 ? "; " : "") << series.subject_id << " model [" << lo << "," << hi
      << "] oracle IQR [" << q1 << "," << q3 << "]" << (ok ? "" : " x");
  }
  return {pairs == 10 && covered >= 7,
          std::to_string(covered) + "/" + std::to_string(pairs) + " pairs covered (need 7): " + d.str()};
}

// 6 ---------------------------------------------------------------------------

Outcome grid_contract() {
  const ExperimentConfig cfg = desk_config();
  NetworkConfig net = network_for(cfg, 0, Variant::kOurs);
  const ProbUNet model(net);
  const DiagonalGaussian prior({0.3, -0.2, 1.1}, {0.2, -0.5, 0.0});
  const auto grid = grid_latents(prior);
  bool centre_ok = false;
  for (const auto& g : grid) {
    if (g.k == std::vector<int>{0, 0, 0}) centre_ok = g.z == prior.mean;
  }
  GrowthParams p = cfg.data;
  const SubjectSeries s = generate_subject(p, 17, "sub-x");
  GrowthCase c = variant_case(s, 0, Variant::kOurs);
  const Tensor in = stack_inputs(c.inputs);
  c.target = model.backbone_forward(in, model.prior_encode(in).mean).argmax();
  const QueryResult q = query_volume_dice(model, c);
  const bool dice_ok = q.dice >= q.mean_dice;
  return {grid.size() == 343 && centre_ok && dice_ok,
          std::to_string(grid.size()) + " grid latents, centre " +
              (centre_ok ? "equals" : "DIFFERS from") + " the prior mean, query Dice " +
              fmt("%.4f", q.dice) + " vs mean-prediction Dice " + fmt("%.4f", q.mean_dice)};
}

// 7 ---------------------------------------------------------------------------

Outcome determinism() {
  const fs::path base = output_root() / "acceptance_determinism";
  std::array<std::string, 2> manifests, losses;
  for (int i = 0; i < 2; ++i) {
    const fs::path dir = base / ("run" + std::to_string(i));
    fs::remove_all(dir);
    ExperimentConfig cfg = desk_config();
    cfg.output_dir = dir;
    std::ostringstream log;
    cmd_generate(cfg, false, log);
    const Dataset data = load_experiment_dataset(cfg);
    const FoldSplit folds = experiment_folds(cfg, data);
    train_all(cfg, data, folds, {0, Variant::kOurs}, log, 200);
    const Paths paths{dir};
    manifests[i] = read_file(paths.data() / "manifest.json");
    losses[i] = read_file(paths.model_dir(0, Variant::kOurs) / kMetricsFile);
  }
  const long rows = std::count(losses[0].begin(), losses[0].end(), '\n') - 1;
  const bool ok = !manifests[0].empty() && manifests[0] == manifests[1] && rows == 200 &&
                  losses[0] == losses[1];
  return {ok, std::string("manifests ") + (manifests[0] == manifests[1] ? "identical" : "DIFFER") +
                  ", " + std::to_string(rows) + "-step loss logs " +
                  (losses[0] == losses[1] ? "identical" : "DIFFER")};
}

// 8 ---------------------------------------------------------------------------

double u_enumeration_p(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> pooled = x;
  pooled.insert(pooled.end(), y.begin(), y.end());
  const int n = static_cast<int>(pooled.size()), m = static_cast<int>(x.size());
  auto u = [&](const std::vector<int>& in_x) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (in_x[i] && !in_x[j]) s += pooled[i] > pooled[j] ? 1.0 : pooled[i] == pooled[j] ? 0.5 : 0.0;
      }
    }
    return s;
  };
  const double centre = 0.5 * m * (n - m);
  std::vector<int> obs(n, 0);
  std::fill(obs.begin(), obs.begin() + m, 1);
  const double dev = std::abs(u(obs) - centre);
  std::vector<int> sel(n, 0);
  std::fill(sel.end() - m, sel.end(), 1);
  int total = 0, extreme = 0;
  do {
    ++total;
    extreme += std::abs(u(sel) - centre) >= dev - 1e-9;
  } while (std::next_permutation(sel.begin(), sel.end()));
  return static_cast<double>(extreme) / total;
}

Outcome statistics_oracle() {
  const double p_example = wilcoxon_rank_sum({1, 2, 3}, {4, 5, 6});
  double worst_exact = 0.0;
  int splits = 0;
  // every 3-vs-3 assignment of the distinct integers 1..6
  std::vector<int> sel{0, 0, 0, 1, 1, 1};
  do {
    std::vector<double> x, y;
    for (int i = 0; i < 6; ++i) (sel[i] ? x : y).push_back(i + 1);
    worst_exact = std::max(worst_exact, std::abs(wilcoxon_rank_sum(x, y) - u_enumeration_p(x, y)));
    ++splits;
  } while (std::next_permutation(sel.begin(), sel.end()));
  Rng rng(8);
  double worst_approx = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> x(6), y(6);
    const double shift = rng.uniform(0.0, 2.5);
    for (double& v : x) v = rng.normal();
    for (double& v : y) v = rng.normal() + shift;
    worst_approx = std::max(worst_approx, std::abs(wilcoxon_rank_sum_normal(x, y) -
                                                   wilcoxon_rank_sum_exact(x, y)));
  }
  const bool ok = std::abs(p_example - 0.1) < 1e-12 && worst_exact < 1e-12 && worst_approx <= 0.02;
  return {ok, "p({1,2,3},{4,5,6}) = " + fmt("%.4f", p_example) + ", max |exact - enumeration| over " +
                  std::to_string(splits) + " splits = " + fmt("%.1e", worst_exact) +
                  ", max |normal - exact| over 1000 6-vs-6 samples = " + fmt("%.4f", worst_approx) +
                  " (tol 0.02)"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"KL closed form vs Monte-Carlo", kl_vs_monte_carlo},
      {"gradient correctness", gradient_check},
      {"overfit smoke test", overfit_single_subject},
      {"large-change ordering at desk scale", figure_ordering},
      {"prior samples vs oracle futures", distribution_sanity},
      {"grid sampling contract", grid_contract},
      {"determinism", determinism},
      {"rank-sum statistics oracle", statistics_oracle},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    all &= o.passed;
    std::cout << (o.passed ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << " ("
              << fmt("%.1f", secs) << " s): " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
