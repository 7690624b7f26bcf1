#pragma once

// Conditional probabilistic segmentation network.
//
// Three independent towers: a U-shaped backbone mapping the stacked input
// scans to last-decoder-block features, a prior encoder (inputs only) and a
// posterior encoder (inputs plus one-hot target). Both encoders end in global
// average pooling and a dense map to (mean, log-variance). A latent vector is
// broadcast as constant channels, concatenated to the backbone features and
// passed through two 1x1 convolutions to class logits.
//
// Each component offers a traced forward pass and a backward pass that
// accumulates parameter gradients; the training module composes them.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "probgrowth/gaussian.hpp"
#include "probgrowth/kernels.hpp"
#include "probgrowth/tensor.hpp"
#include "probgrowth/volume.hpp"

namespace probgrowth {

struct NetworkConfig {
  int spatial_dims = 2;
  int n_input_timepoints = 2;
  int n_contrasts = kNumContrasts;
  int n_classes = kNumClasses;
  int base_channels = 16;
  int depth = 4;
  int latent_dim = 3;
  std::uint64_t seed = 0;

  int input_channels() const { return n_input_timepoints * n_contrasts; }
  int posterior_input_channels() const { return input_channels() + n_classes; }
  /// Channel count at resolution level l.
  int channels_at(int level) const { return base_channels << level; }
  void validate() const;
  bool operator==(const NetworkConfig&) const = default;
};

nlohmann::json to_json(const NetworkConfig& c);
NetworkConfig network_config_from_json(const nlohmann::json& j);

/// Named learnable array with its gradient accumulator.
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;

  std::size_t size() const noexcept { return value.size(); }
};

class Conv {
 public:
  Conv() = default;
  Conv(std::string name, int in_channels, int out_channels, int kernel);

  void init(Rng& rng, double gain);
  Tensor forward(const Tensor& input) const;
  /// Accumulates parameter gradients and returns the input gradient.
  Tensor backward(const Tensor& input, const Tensor& grad_output);
  kernels::ConvGeometry geometry(Extent e) const;

  int in_channels() const noexcept { return in_; }
  int out_channels() const noexcept { return out_; }
  Param weight;
  Param bias;

 private:
  int in_ = 0;
  int out_ = 0;
  int kernel_ = 3;
};

class Dense {
 public:
  Dense() = default;
  Dense(std::string name, int in, int out);

  void init(Rng& rng, double stddev);
  std::vector<double> forward(std::span<const double> x) const;
  std::vector<double> backward(std::span<const double> x, std::span<const double> grad_out);

  Param weight;  // [out][in]
  Param bias;

 private:
  int in_ = 0;
  int out_ = 0;
};

/// Two 3x3 convolutions, each followed by a leaky ReLU.
class ConvBlock {
 public:
  struct Trace {
    Tensor input, pre_a, act_a, pre_b;
  };

  ConvBlock() = default;
  ConvBlock(const std::string& name, int in_channels, int out_channels, int spatial_dims);
  void init(Rng& rng);
  Tensor forward(const Tensor& input, Trace* trace) const;
  Tensor backward(const Trace& trace, const Tensor& grad_output);
  void collect(std::vector<Param*>& out);

  Conv a;
  Conv b;
};

/// Downsampling tower + global average pool + dense head to (mean, log-variance).
class DistributionEncoder {
 public:
  struct Trace {
    std::vector<ConvBlock::Trace> blocks;
    std::vector<Extent> block_extents;
    std::vector<double> pooled;
    std::vector<double> raw;  // dense output before the log-variance clamp
    Extent last_extent;
  };

  DistributionEncoder() = default;
  DistributionEncoder(const std::string& name, const NetworkConfig& cfg, int in_channels);
  void init(Rng& rng);
  DiagonalGaussian forward(const Tensor& input, Trace* trace) const;
  /// Input gradients are not propagated (encoder inputs are data).
  void backward(const Trace& trace, std::span<const double> grad_mean,
                std::span<const double> grad_log_variance);
  void collect(std::vector<Param*>& out);
  int in_channels() const noexcept { return in_channels_; }

 private:
  int latent_ = 0;
  int in_channels_ = 0;
  std::vector<ConvBlock> blocks_;
  Dense out_;
};

inline constexpr double kLogVarianceMin = -10.0;
inline constexpr double kLogVarianceMax = 10.0;

class UNetBackbone {
 public:
  struct Trace {
    std::vector<ConvBlock::Trace> enc;
    std::vector<ConvBlock::Trace> dec;
    std::vector<Tensor> skips;  // encoder outputs per level
    std::vector<Tensor> ups;    // upsampled decoder inputs per level
  };

  UNetBackbone() = default;
  explicit UNetBackbone(const NetworkConfig& cfg);
  void init(Rng& rng);
  /// Last decoder block activations [base_channels x extent].
  Tensor forward(const Tensor& input, Trace* trace) const;
  void backward(const Trace& trace, const Tensor& grad_features);
  void collect(std::vector<Param*>& out);

 private:
  int depth_ = 0;
  std::vector<ConvBlock> enc_;
  std::vector<ConvBlock> dec_;  // dec_[l] produces level l, l < depth - 1
};

/// Latent injection: concat N constant channels, 1x1 conv, leaky ReLU, 1x1 conv.
class LatentHead {
 public:
  struct Trace {
    Tensor joined, pre, act;
  };

  LatentHead() = default;
  explicit LatentHead(const NetworkConfig& cfg);
  void init(Rng& rng);
  Tensor forward(const Tensor& features, std::span<const double> latent, Trace* trace) const;
  /// Returns the feature gradient; adds the latent gradient into grad_latent.
  Tensor backward(const Trace& trace, const Tensor& grad_logits, std::span<double> grad_latent);
  void collect(std::vector<Param*>& out);

  const Conv& hidden() const { return hidden_; }
  const Conv& output() const { return output_; }

 private:
  int features_ = 0;
  int latent_ = 0;
  Conv hidden_;
  Conv output_;
};

/// Per-voxel class probabilities [n_classes x extent].
struct SegmentationOutput {
  Tensor class_probabilities;

  /// Argmax per voxel; ties go to the lowest class index.
  LabelMap argmax() const;
};

/// Stable per-voxel softmax over channels.
SegmentationOutput softmax(const Tensor& logits);

class ProbUNet {
 public:
  ProbUNet() = default;
  explicit ProbUNet(const NetworkConfig& cfg);

  const NetworkConfig& config() const noexcept { return cfg_; }

  /// Inputs: stacked timepoint volumes [input_channels x extent].
  DiagonalGaussian prior_encode(const Tensor& inputs) const;
  DiagonalGaussian posterior_encode(const Tensor& inputs, const LabelMap& target) const;
  SegmentationOutput backbone_forward(const Tensor& inputs, std::span<const double> latent) const;

  /// Throws DimensionError unless channels/extent fit the configuration.
  void check_inputs(const Tensor& inputs, int expected_channels) const;
  Tensor posterior_inputs(const Tensor& inputs, const LabelMap& target) const;

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  void zero_grad();
  std::size_t parameter_count() const;

  DistributionEncoder& prior() { return prior_; }
  DistributionEncoder& posterior() { return posterior_; }
  UNetBackbone& backbone() { return backbone_; }
  LatentHead& head() { return head_; }
  const DistributionEncoder& prior() const { return prior_; }
  const DistributionEncoder& posterior() const { return posterior_; }
  const UNetBackbone& backbone() const { return backbone_; }
  const LatentHead& head() const { return head_; }

 private:
  NetworkConfig cfg_;
  UNetBackbone backbone_;
  DistributionEncoder prior_;
  DistributionEncoder posterior_;
  LatentHead head_;
};

/// Decodes many latents against one set of backbone features. The feature
/// part of the first head convolution is computed once; each latent then
/// only adds a per-channel offset.
class LatentDecoder {
 public:
  LatentDecoder(const ProbUNet& model, const Tensor& inputs);

  LabelMap decode_labels(std::span<const double> latent) const;
  SegmentationOutput decode(std::span<const double> latent) const;
  Extent extent() const noexcept { return extent_; }

 private:
  Tensor logits(std::span<const double> latent) const;

  const ProbUNet* model_;
  Extent extent_;
  Tensor base_;  // hidden pre-activation without the latent contribution
};

}  // namespace probgrowth
