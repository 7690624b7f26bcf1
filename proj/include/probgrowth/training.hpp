#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "probgrowth/checkpoint.hpp"
#include "probgrowth/datapipe.hpp"
#include "probgrowth/gaussian.hpp"
#include "probgrowth/model.hpp"
#include "probgrowth/optimizer.hpp"

namespace probgrowth {

/// Per-step objective: total == cross_entropy + beta * kl.
struct LossBreakdown {
  double cross_entropy = 0.0;  // nats per voxel
  double kl = 0.0;             // nats
  double total = 0.0;
  double beta = 0.0;
};

struct TrainConfig {
  CaseMode mode = CaseMode::kABtoC;
  /// Weight of the KL term (nats) against the mean cross entropy (nats per voxel).
  double beta = 1.0;
  double learning_rate = 1e-4;
  int steps = 5000;
  int batch_size = 4;
  int patch_size = 48;
  std::uint64_t seed = 0;
  int checkpoint_interval = 500;
  /// Linear ramp of beta over the first 10% of steps.
  bool kl_warmup = false;
  double augment_probability = 0.5;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig defaults = {});

/// Closed-form KL(q || p) between diagonal Gaussians, in nats.
double kl_diag_gaussians(const DiagonalGaussian& q, const DiagonalGaussian& p);

struct KlGradient {
  std::vector<double> q_mean, q_log_variance, p_mean, p_log_variance;
};
KlGradient kl_diag_gaussians_grad(const DiagonalGaussian& q, const DiagonalGaussian& p);

/// Mean over voxels of -log p(target class). Probabilities are floored at the
/// smallest positive double, so the result stays finite.
double multiclass_cross_entropy(const SegmentationOutput& output, const LabelMap& target);

/// Same quantity from logits via log-sum-exp. When `grad` is non-null it
/// receives d(mean CE)/d(logits).
double cross_entropy_from_logits(const Tensor& logits, const LabelMap& target, Tensor* grad);

/// Forward/backward of the ELBO for one case.
struct ElboResult {
  LossBreakdown loss;
  DiagonalGaussian prior;
  DiagonalGaussian posterior;
  /// d(total)/d(posterior mean) and d(total)/d(posterior log-variance).
  std::vector<double> grad_posterior_mean;
  std::vector<double> grad_posterior_log_variance;
};

struct ElboOptions {
  /// Weight of the KL term against the mean per-voxel cross entropy.
  double kl_coefficient = 0.0;
  /// Gradients are accumulated into the parameters scaled by this weight.
  double weight = 1.0;
  bool backward = true;
  /// Replaces the posterior encoder output (gradient checks).
  const DiagonalGaussian* posterior_override = nullptr;
};

ElboResult elbo_case(ProbUNet& model, const Tensor& inputs, const LabelMap& target,
                     std::span<const double> noise, const ElboOptions& options);

/// Mutable training state: weights, optimiser, position in the random stream.
struct TrainState {
  ProbUNet model;
  AdamState optimizer;
  Rng rng;
  std::int64_t global_step = 0;
};

/// Effective beta at a given step (warm-up aware).
double scheduled_beta(const TrainConfig& config, std::int64_t step);

/// One gradient step on an assembled batch; throws NumericalError naming a
/// non-finite term or a negative KL.
LossBreakdown train_step(TrainState& state, std::span<const GrowthCase> batch,
                         const TrainConfig& config);

/// Draws a patched, augmented batch from `cases` with the state's rng.
std::vector<GrowthCase> sample_batch(std::span<const GrowthCase> cases, const TrainConfig& config,
                                     Extent volume_extent, Rng& rng);

struct TrainJob {
  NetworkConfig network;
  TrainConfig train;
  int fold = 0;
  std::string variant;
  std::filesystem::path out_dir;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::int64_t steps_run = 0;
  std::vector<LossBreakdown> losses;  // losses of the steps run in this call
};

/// Builds normalised training cases of `mode` for the given subjects.
std::vector<GrowthCase> training_cases(const std::vector<SubjectSeries>& subjects,
                                       const std::vector<std::string>& subject_ids, CaseMode mode,
                                       AccessLog* log = nullptr);

/// Trains on the subjects outside `fold`, resuming from `out_dir/checkpoint.bin`
/// when present. Writes metrics.csv (step,cross_entropy,kl,total) and periodic
/// checkpoints. `max_steps` bounds the steps run in this call.
TrainResult train(const TrainJob& job, const std::vector<SubjectSeries>& subjects,
                  const FoldSplit& folds, AccessLog* log = nullptr,
                  std::optional<std::int64_t> max_steps = std::nullopt);

inline constexpr const char* kCheckpointFile = "checkpoint.bin";
inline constexpr const char* kMetricsFile = "metrics.csv";

}  // namespace probgrowth
