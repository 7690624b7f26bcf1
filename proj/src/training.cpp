#include "probgrowth/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "probgrowth/error.hpp"

namespace probgrowth {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("TrainConfig." + field + ": " + why);
  };
  if (!(beta >= 0.0)) fail("beta", "must be >= 0");
  if (!(learning_rate > 0.0)) fail("learning_rate", "must be > 0");
  if (steps < 1) fail("steps", "must be >= 1");
  if (batch_size < 1) fail("batch_size", "must be >= 1");
  if (patch_size < 1) fail("patch_size", "must be >= 1");
  if (checkpoint_interval < 1) fail("checkpoint_interval", "must be >= 1");
  if (!(augment_probability >= 0.0 && augment_probability <= 1.0)) {
    fail("augment_probability", "must lie in [0, 1]");
  }
}

json to_json(const TrainConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"beta", c.beta},
          {"learning_rate", c.learning_rate},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"patch_size", c.patch_size},
          {"seed", c.seed},
          {"checkpoint_interval", c.checkpoint_interval},
          {"kl_warmup", c.kl_warmup},
          {"augment_probability", c.augment_probability}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  try {
    if (j.contains("mode")) c.mode = case_mode_from_string(j.at("mode").get<std::string>());
    c.beta = j.value("beta", c.beta);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.kl_warmup = j.value("kl_warmup", c.kl_warmup);
    c.augment_probability = j.value("augment_probability", c.augment_probability);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("TrainConfig: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- Losses -----------------------------------------------------------------

namespace {

void check_same_dims(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  if (q.dims() != p.dims() || q.log_variance.size() != q.mean.size() ||
      p.log_variance.size() != p.mean.size()) {
    throw ArgumentError("kl_diag_gaussians: dimension mismatch (" + std::to_string(q.dims()) +
                        " vs " + std::to_string(p.dims()) + ")");
  }
}

}  // namespace

double kl_diag_gaussians(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  check_same_dims(q, p);
  double kl = 0.0;
  for (int i = 0; i < q.dims(); ++i) {
    const double diff = p.mean[i] - q.mean[i];
    kl += std::exp(q.log_variance[i] - p.log_variance[i]) +
          diff * diff * std::exp(-p.log_variance[i]) - 1.0 + p.log_variance[i] -
          q.log_variance[i];
  }
  return 0.5 * kl;
}

KlGradient kl_diag_gaussians_grad(const DiagonalGaussian& q, const DiagonalGaussian& p) {
  check_same_dims(q, p);
  const int n = q.dims();
  KlGradient g{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n),
               std::vector<double>(n)};
  for (int i = 0; i < n; ++i) {
    const double inv_vp = std::exp(-p.log_variance[i]);
    const double ratio = std::exp(q.log_variance[i] - p.log_variance[i]);
    const double diff = q.mean[i] - p.mean[i];
    g.q_mean[i] = diff * inv_vp;
    g.p_mean[i] = -diff * inv_vp;
    g.q_log_variance[i] = 0.5 * (ratio - 1.0);
    g.p_log_variance[i] = 0.5 * (1.0 - ratio - diff * diff * inv_vp);
  }
  return g;
}

double multiclass_cross_entropy(const SegmentationOutput& output, const LabelMap& target) {
  const Tensor& p = output.class_probabilities;
  if (p.extent != target.extent) {
    throw DimensionError("cross entropy: output " + p.shape_str() + " vs target " +
                         target.extent.str());
  }
  const std::size_t plane = p.plane();
  double sum = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    const int c = target.data[i];
    if (c >= p.channels) {
      throw DataError("cross entropy: target class " + std::to_string(c) + " outside {0.." +
                      std::to_string(p.channels - 1) + "}");
    }
    sum -= std::log(std::max(p.data[c * plane + i], std::numeric_limits<double>::min()));
  }
  return sum / static_cast<double>(plane);
}

double cross_entropy_from_logits(const Tensor& logits, const LabelMap& target, Tensor* grad) {
  if (logits.extent != target.extent) {
    throw DimensionError("cross entropy: logits " + logits.shape_str() + " vs target " +
                         target.extent.str());
  }
  const std::size_t plane = logits.plane();
  const int k = logits.channels;
  const double inv = 1.0 / static_cast<double>(plane);
  if (grad) *grad = Tensor(k, logits.extent);
  double sum = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    const int t = target.data[i];
    if (t >= k) {
      throw DataError("cross entropy: target class " + std::to_string(t) + " outside {0.." +
                      std::to_string(k - 1) + "}");
    }
    double mx = logits.data[i];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits.data[c * plane + i]);
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(logits.data[c * plane + i] - mx);
    const double lse = mx + std::log(z);
    sum += lse - logits.data[t * plane + i];
    if (grad) {
      for (int c = 0; c < k; ++c) {
        const double prob = std::exp(logits.data[c * plane + i] - lse);
        grad->data[c * plane + i] = (prob - (c == t ? 1.0 : 0.0)) * inv;
      }
    }
  }
  return sum * inv;
}

// ---- ELBO --------------------------------------------------------------------

ElboResult elbo_case(ProbUNet& model, const Tensor& inputs, const LabelMap& target,
                     std::span<const double> noise, const ElboOptions& options) {
  const NetworkConfig& cfg = model.config();
  model.check_inputs(inputs, cfg.input_channels());
  const bool bw = options.backward;

  DistributionEncoder::Trace prior_trace;
  DistributionEncoder::Trace post_trace;
  UNetBackbone::Trace backbone_trace;
  LatentHead::Trace head_trace;

  ElboResult r;
  r.prior = model.prior().forward(inputs, bw ? &prior_trace : nullptr);
  if (options.posterior_override) {
    r.posterior = *options.posterior_override;
  } else {
    r.posterior = model.posterior().forward(model.posterior_inputs(inputs, target),
                                            bw ? &post_trace : nullptr);
  }
  const std::vector<double> z = reparameterize(r.posterior, noise);
  const Tensor features = model.backbone().forward(inputs, bw ? &backbone_trace : nullptr);
  const Tensor logits = model.head().forward(features, z, bw ? &head_trace : nullptr);

  Tensor grad_logits;
  r.loss.cross_entropy = cross_entropy_from_logits(logits, target, bw ? &grad_logits : nullptr);
  r.loss.kl = kl_diag_gaussians(r.posterior, r.prior);
  r.loss.beta = options.kl_coefficient;
  r.loss.total = r.loss.cross_entropy + r.loss.beta * r.loss.kl;
  if (!bw) return r;

  const double w = options.weight;
  const int n = cfg.latent_dim;
  for (double& g : grad_logits.data) g *= w;
  std::vector<double> grad_z(n, 0.0);
  const Tensor grad_features = model.head().backward(head_trace, grad_logits, grad_z);
  model.backbone().backward(backbone_trace, grad_features);

  const KlGradient kg = kl_diag_gaussians_grad(r.posterior, r.prior);
  const double c = options.kl_coefficient;
  r.grad_posterior_mean.resize(n);
  r.grad_posterior_log_variance.resize(n);
  std::vector<double> gq_mean(n), gq_lv(n), gp_mean(n), gp_lv(n);
  for (int i = 0; i < n; ++i) {
    // z = mean + exp(lv / 2) * eps  =>  dz/dlv = z_noise_part / 2
    const double dz_dlv = 0.5 * r.posterior.sigma(i) * noise[i];
    gq_mean[i] = grad_z[i] + w * c * kg.q_mean[i];
    gq_lv[i] = grad_z[i] * dz_dlv + w * c * kg.q_log_variance[i];
    gp_mean[i] = w * c * kg.p_mean[i];
    gp_lv[i] = w * c * kg.p_log_variance[i];
    r.grad_posterior_mean[i] = w != 0.0 ? gq_mean[i] / w : 0.0;
    r.grad_posterior_log_variance[i] = w != 0.0 ? gq_lv[i] / w : 0.0;
  }
  if (!options.posterior_override) model.posterior().backward(post_trace, gq_mean, gq_lv);
  model.prior().backward(prior_trace, gp_mean, gp_lv);
  return r;
}

// ---- Training ------------------------------------------------------------------

double scheduled_beta(const TrainConfig& config, std::int64_t step) {
  if (!config.kl_warmup) return config.beta;
  const double ramp = std::max(1.0, 0.1 * config.steps);
  return config.beta * std::min(1.0, static_cast<double>(step + 1) / ramp);
}

LossBreakdown train_step(TrainState& state, std::span<const GrowthCase> batch,
                         const TrainConfig& config) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  for (const auto& c : batch) {
    if (c.mode != config.mode) {
      throw ArgumentError("train_step: case " + c.case_id + " has mode " + to_string(c.mode) +
                          ", config expects " + to_string(config.mode));
    }
  }
  ProbUNet& model = state.model;
  model.zero_grad();
  const double weight = 1.0 / static_cast<double>(batch.size());
  const double beta = scheduled_beta(config, state.global_step);

  LossBreakdown mean;
  for (const auto& c : batch) {
    const Tensor inputs = stack_inputs(c.inputs);
    std::vector<double> noise(model.config().latent_dim);
    for (double& e : noise) e = state.rng.normal();
    ElboOptions opt;
    opt.kl_coefficient = beta;
    opt.weight = weight;
    ElboResult r;
    try {
      r = elbo_case(model, inputs, c.target, noise, opt);
    } catch (const DataError& e) {
      throw NumericalError("non-finite encoder output at step " +
                           std::to_string(state.global_step) + " (case " + c.case_id +
                           "): " + e.what());
    }
    if (!std::isfinite(r.loss.cross_entropy)) {
      throw NumericalError("non-finite cross entropy at step " +
                           std::to_string(state.global_step) + " (case " + c.case_id + ")");
    }
    if (!std::isfinite(r.loss.kl)) {
      throw NumericalError("non-finite KL at step " + std::to_string(state.global_step) +
                           " (case " + c.case_id + ")");
    }
    if (r.loss.kl < -1e-9) {
      throw NumericalError("negative KL " + std::to_string(r.loss.kl) + " at step " +
                           std::to_string(state.global_step));
    }
    mean.cross_entropy += weight * r.loss.cross_entropy;
    mean.kl += weight * r.loss.kl;
    mean.beta = opt.kl_coefficient;
  }
  mean.total = mean.cross_entropy + mean.beta * mean.kl;

  state.optimizer.learning_rate = config.learning_rate;
  state.optimizer.apply(model.parameters());
  ++state.global_step;
  return mean;
}

std::vector<GrowthCase> sample_batch(std::span<const GrowthCase> cases, const TrainConfig& config,
                                     Extent volume_extent, Rng& rng) {
  if (cases.empty()) throw ConfigError("sample_batch: no training cases");
  Extent patch = Extent::cube(volume_extent.spatial_dims(), config.patch_size);
  if (config.patch_size >= volume_extent.height) patch = volume_extent;
  std::vector<GrowthCase> batch;
  batch.reserve(config.batch_size);
  for (int b = 0; b < config.batch_size; ++b) {
    const auto& c = cases[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(cases.size()) - 1))];
    GrowthCase p = patch == volume_extent ? c : extract_patch(c, patch, rng);
    batch.push_back(augment(p, rng, config.augment_probability));
  }
  return batch;
}

std::vector<GrowthCase> training_cases(const std::vector<SubjectSeries>& subjects,
                                       const std::vector<std::string>& subject_ids, CaseMode mode,
                                       AccessLog* log) {
  std::map<std::string, const SubjectSeries*> by_id;
  for (const auto& s : subjects) by_id[s.subject_id] = &s;
  std::vector<GrowthCase> cases;
  for (const auto& id : subject_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw LookupError("training subject '" + id + "' not in dataset");
    for (auto& c : build_cases(*it->second, mode, log)) {
      normalize_inputs(c);
      cases.push_back(std::move(c));
    }
  }
  return cases;
}

namespace {

std::string csv_row(std::int64_t step, const LossBreakdown& l) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g\n", static_cast<long long>(step),
                l.cross_entropy, l.kl, l.total);
  return buf;
}

// Keeps the header and rows up to `step` so a resumed run appends seamlessly.
void truncate_metrics(const fs::path& path, std::int64_t step) {
  std::vector<std::string> keep;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (keep.empty() || line.rfind("step", 0) == 0) {
        keep.push_back(line);
        continue;
      }
      if (std::stoll(line.substr(0, line.find(','))) <= step) keep.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << "\n";
}

}  // namespace

TrainResult train(const TrainJob& job, const std::vector<SubjectSeries>& subjects,
                  const FoldSplit& folds, AccessLog* log, std::optional<std::int64_t> max_steps) {
  job.network.validate();
  job.train.validate();
  if (input_timepoint_count(job.train.mode) != job.network.n_input_timepoints) {
    throw ConfigError("TrainConfig.mode " + to_string(job.train.mode) + " needs " +
                      std::to_string(input_timepoint_count(job.train.mode)) +
                      " input timepoints, network has " +
                      std::to_string(job.network.n_input_timepoints));
  }
  if (job.fold < 0 || job.fold >= folds.n_folds) {
    throw ConfigError("fold " + std::to_string(job.fold) + " outside [0, " +
                      std::to_string(folds.n_folds) + ")");
  }
  const std::vector<std::string> ids = folds.subjects_not_in(job.fold);
  if (ids.empty()) throw ConfigError("fold " + std::to_string(job.fold) + ": empty training set");
  const std::vector<GrowthCase> cases = training_cases(subjects, ids, job.train.mode, log);
  if (cases.empty()) {
    throw ConfigError("fold " + std::to_string(job.fold) + ": no training cases for mode " +
                      to_string(job.train.mode));
  }
  const Extent extent = cases.front().extent();

  std::error_code ec;
  fs::create_directories(job.out_dir, ec);
  if (ec) throw IoError("cannot create " + job.out_dir.string() + ": " + ec.message());
  const fs::path ckpt_path = job.out_dir / kCheckpointFile;
  const fs::path metrics_path = job.out_dir / kMetricsFile;

  TrainState state;
  if (fs::exists(ckpt_path)) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    if (ck.meta.value("fold", -1) != job.fold ||
        ck.meta.value("mode", std::string()) != to_string(job.train.mode) ||
        !(ck.model.config() == job.network)) {
      throw DataError("checkpoint " + ckpt_path.string() +
                      " belongs to a different job; delete it to retrain");
    }
    state.model = std::move(ck.model);
    state.optimizer = std::move(ck.optimizer);
    state.rng = ck.rng;
    state.global_step = ck.global_step;
    truncate_metrics(metrics_path, state.global_step);
  } else {
    state.model = ProbUNet(job.network);
    state.optimizer.learning_rate = job.train.learning_rate;
    state.rng = Rng(job.train.seed);
    std::ofstream(metrics_path, std::ios::trunc) << "step,cross_entropy,kl,total\n";
  }

  auto save = [&] {
    Checkpoint ck;
    ck.model = state.model;
    ck.optimizer = state.optimizer;
    ck.rng = state.rng;
    ck.global_step = state.global_step;
    ck.meta = {{"fold", job.fold},
               {"variant", job.variant},
               {"mode", to_string(job.train.mode)},
               {"train", to_json(job.train)},
               {"training_subjects", ids},
               {"completed", state.global_step >= job.train.steps}};
    save_checkpoint(ckpt_path, ck);
  };

  TrainResult result;
  result.checkpoint = ckpt_path;
  std::ofstream metrics(metrics_path, std::ios::app);
  if (!metrics) throw IoError("cannot open " + metrics_path.string());
  bool saved_at_end = true;
  while (state.global_step < job.train.steps &&
         (!max_steps || result.steps_run < *max_steps)) {
    const auto batch = sample_batch(cases, job.train, extent, state.rng);
    const LossBreakdown loss = train_step(state, batch, job.train);
    metrics << csv_row(state.global_step, loss);
    result.losses.push_back(loss);
    ++result.steps_run;
    saved_at_end = false;
    if (state.global_step % job.train.checkpoint_interval == 0 ||
        state.global_step == job.train.steps) {
      metrics.flush();
      save();
      saved_at_end = true;
    }
  }
  metrics.flush();
  if (!saved_at_end || !fs::exists(ckpt_path)) save();
  return result;
}

}  // namespace probgrowth
