#include "probgrowth/model.hpp"

#include <algorithm>
#include <cmath>

#include "probgrowth/error.hpp"

namespace probgrowth {

using nlohmann::json;

namespace {

Tensor leaky(const Tensor& x) {
  Tensor y;
  kernels::leaky_relu_forward(x, y);
  return y;
}

Tensor leaky_grad(const Tensor& pre, const Tensor& g) {
  Tensor out;
  kernels::leaky_relu_backward(pre, g, out);
  return out;
}

Tensor pool(const Tensor& x) {
  Tensor y;
  kernels::avg_pool2_forward(x, y);
  return y;
}

Tensor pool_grad(const Tensor& g, Extent input_extent) {
  Tensor out;
  kernels::avg_pool2_backward(g, input_extent, out);
  return out;
}

Tensor upsample(const Tensor& x) {
  Tensor y;
  kernels::upsample2_forward(x, y);
  return y;
}

Tensor upsample_grad(const Tensor& g, Extent input_extent) {
  Tensor out;
  kernels::upsample2_backward(g, input_extent, out);
  return out;
}

void init_normal(std::vector<double>& v, Rng& rng, double stddev) {
  for (auto& x : v) x = stddev * rng.normal();
}

}  // namespace

// ---- NetworkConfig ----------------------------------------------------------

void NetworkConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("NetworkConfig." + field + ": " + why);
  };
  if (spatial_dims != 2 && spatial_dims != 3) fail("spatial_dims", "must be 2 or 3");
  if (n_input_timepoints < 1) fail("n_input_timepoints", "must be >= 1");
  if (n_contrasts < 1) fail("n_contrasts", "must be >= 1");
  if (n_classes < 2) fail("n_classes", "must be >= 2");
  if (base_channels < 1) fail("base_channels", "must be >= 1");
  if (depth < 2) fail("depth", "must be >= 2");
  if (latent_dim < 1) fail("latent_dim", "must be >= 1");
}

json to_json(const NetworkConfig& c) {
  return {{"spatial_dims", c.spatial_dims},   {"n_input_timepoints", c.n_input_timepoints},
          {"n_contrasts", c.n_contrasts},     {"n_classes", c.n_classes},
          {"base_channels", c.base_channels}, {"depth", c.depth},
          {"latent_dim", c.latent_dim},       {"seed", c.seed}};
}

NetworkConfig network_config_from_json(const json& j) {
  NetworkConfig c;
  try {
    c.spatial_dims = j.value("spatial_dims", c.spatial_dims);
    c.n_input_timepoints = j.value("n_input_timepoints", c.n_input_timepoints);
    c.n_contrasts = j.value("n_contrasts", c.n_contrasts);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.depth = j.value("depth", c.depth);
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("NetworkConfig: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- Conv / Dense -------------------------------------------------------------

Conv::Conv(std::string name, int in_channels, int out_channels, int kernel)
    : in_(in_channels), out_(out_channels), kernel_(kernel) {
  weight.name = name + ".weight";
  bias.name = name + ".bias";
}

kernels::ConvGeometry Conv::geometry(Extent e) const { return {in_, out_, kernel_, e}; }

void Conv::init(Rng& rng, double gain) {
  const std::size_t fan_in = weight.value.size() / static_cast<std::size_t>(out_);
  init_normal(weight.value, rng, gain / std::sqrt(static_cast<double>(fan_in)));
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

Tensor Conv::forward(const Tensor& input) const {
  Tensor out;
  kernels::conv_forward(geometry(input.extent), input, weight.value, bias.value, out);
  return out;
}

Tensor Conv::backward(const Tensor& input, const Tensor& grad_output) {
  Tensor grad_input;
  kernels::conv_backward(geometry(input.extent), input, weight.value, grad_output, weight.grad,
                         bias.grad, grad_input);
  return grad_input;
}

Dense::Dense(std::string name, int in, int out) : in_(in), out_(out) {
  weight = {name + ".weight", {out, in}, std::vector<double>(static_cast<std::size_t>(in) * out),
            std::vector<double>(static_cast<std::size_t>(in) * out)};
  bias = {name + ".bias", {out}, std::vector<double>(out), std::vector<double>(out)};
}

void Dense::init(Rng& rng, double stddev) {
  init_normal(weight.value, rng, stddev);
  std::fill(bias.value.begin(), bias.value.end(), 0.0);
}

std::vector<double> Dense::forward(std::span<const double> x) const {
  std::vector<double> y(bias.value);
  for (int o = 0; o < out_; ++o) {
    for (int i = 0; i < in_; ++i) y[o] += weight.value[static_cast<std::size_t>(o) * in_ + i] * x[i];
  }
  return y;
}

std::vector<double> Dense::backward(std::span<const double> x, std::span<const double> grad_out) {
  std::vector<double> gx(in_, 0.0);
  for (int o = 0; o < out_; ++o) {
    bias.grad[o] += grad_out[o];
    for (int i = 0; i < in_; ++i) {
      const std::size_t w = static_cast<std::size_t>(o) * in_ + i;
      weight.grad[w] += grad_out[o] * x[i];
      gx[i] += grad_out[o] * weight.value[w];
    }
  }
  return gx;
}

namespace {

// Allocates conv parameter storage for the network's dimensionality.
Conv make_conv(const std::string& name, int in, int out, int kernel, int spatial_dims) {
  Conv c(name, in, out, kernel);
  const int kd = spatial_dims == 3 ? kernel : 1;
  const std::size_t taps = static_cast<std::size_t>(kd) * kernel * kernel;
  c.weight.shape = {out, in, kd, kernel, kernel};
  c.weight.value.assign(static_cast<std::size_t>(out) * in * taps, 0.0);
  c.weight.grad.assign(c.weight.value.size(), 0.0);
  c.bias.shape = {out};
  c.bias.value.assign(out, 0.0);
  c.bias.grad.assign(out, 0.0);
  return c;
}

}  // namespace

// ---- ConvBlock ------------------------------------------------------------------

ConvBlock::ConvBlock(const std::string& name, int in_channels, int out_channels,
                     int spatial_dims)
    : a(make_conv(name + ".conv_a", in_channels, out_channels, 3, spatial_dims)),
      b(make_conv(name + ".conv_b", out_channels, out_channels, 3, spatial_dims)) {}

void ConvBlock::init(Rng& rng) {
  const double he = std::sqrt(2.0);
  a.init(rng, he);
  b.init(rng, he);
}

Tensor ConvBlock::forward(const Tensor& input, Trace* trace) const {
  Tensor pre_a = a.forward(input);
  Tensor act_a = leaky(pre_a);
  Tensor pre_b = b.forward(act_a);
  Tensor out = leaky(pre_b);
  if (trace) {
    trace->input = input;
    trace->pre_a = std::move(pre_a);
    trace->act_a = std::move(act_a);
    trace->pre_b = std::move(pre_b);
  }
  return out;
}

Tensor ConvBlock::backward(const Trace& trace, const Tensor& grad_output) {
  Tensor g = leaky_grad(trace.pre_b, grad_output);
  g = b.backward(trace.act_a, g);
  g = leaky_grad(trace.pre_a, g);
  return a.backward(trace.input, g);
}

void ConvBlock::collect(std::vector<Param*>& out) {
  out.push_back(&a.weight);
  out.push_back(&a.bias);
  out.push_back(&b.weight);
  out.push_back(&b.bias);
}

// ---- DistributionEncoder -------------------------------------------------------

DistributionEncoder::DistributionEncoder(const std::string& name, const NetworkConfig& cfg,
                                         int in_channels)
    : latent_(cfg.latent_dim), in_channels_(in_channels) {
  int in = in_channels;
  for (int l = 0; l < cfg.depth; ++l) {
    blocks_.emplace_back(name + ".block" + std::to_string(l), in, cfg.channels_at(l),
                         cfg.spatial_dims);
    in = cfg.channels_at(l);
  }
  out_ = Dense(name + ".dense", in, 2 * cfg.latent_dim);
}

void DistributionEncoder::init(Rng& rng) {
  for (auto& b : blocks_) b.init(rng);
  const double fan_in = static_cast<double>(out_.weight.shape[1]);
  out_.init(rng, 0.3 / std::sqrt(fan_in));
}

DiagonalGaussian DistributionEncoder::forward(const Tensor& input, Trace* trace) const {
  Tensor x = input;
  if (trace) {
    trace->blocks.assign(blocks_.size(), {});
    trace->block_extents.clear();
  }
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    if (l > 0) x = pool(x);
    if (trace) trace->block_extents.push_back(x.extent);
    x = blocks_[l].forward(x, trace ? &trace->blocks[l] : nullptr);
  }
  std::vector<double> pooled(x.channels, 0.0);
  const double inv = 1.0 / static_cast<double>(x.plane());
  for (int c = 0; c < x.channels; ++c) {
    double s = 0.0;
    for (double v : x.channel(c)) s += v;
    pooled[c] = s * inv;
  }
  std::vector<double> raw = out_.forward(pooled);
  std::vector<double> mean(raw.begin(), raw.begin() + latent_);
  std::vector<double> lv(raw.begin() + latent_, raw.end());
  for (auto& v : lv) v = std::clamp(v, kLogVarianceMin, kLogVarianceMax);
  if (trace) {
    trace->pooled = pooled;
    trace->raw = raw;
    trace->last_extent = x.extent;
  }
  return DiagonalGaussian(std::move(mean), std::move(lv));
}

void DistributionEncoder::backward(const Trace& trace, std::span<const double> grad_mean,
                                   std::span<const double> grad_log_variance) {
  std::vector<double> g_raw(2 * latent_, 0.0);
  for (int i = 0; i < latent_; ++i) {
    g_raw[i] = grad_mean[i];
    const double r = trace.raw[latent_ + i];
    g_raw[latent_ + i] = (r > kLogVarianceMin && r < kLogVarianceMax) ? grad_log_variance[i] : 0.0;
  }
  const std::vector<double> g_pooled = out_.backward(trace.pooled, g_raw);
  Tensor g(static_cast<int>(g_pooled.size()), trace.last_extent);
  const double inv = 1.0 / static_cast<double>(g.plane());
  for (int c = 0; c < g.channels; ++c) {
    std::fill(g.channel(c).begin(), g.channel(c).end(), g_pooled[c] * inv);
  }
  for (int l = static_cast<int>(blocks_.size()) - 1; l >= 0; --l) {
    g = blocks_[l].backward(trace.blocks[l], g);
    if (l > 0) g = pool_grad(g, trace.block_extents[l - 1]);
  }
}

void DistributionEncoder::collect(std::vector<Param*>& out) {
  for (auto& b : blocks_) b.collect(out);
  out.push_back(&out_.weight);
  out.push_back(&out_.bias);
}

// ---- UNetBackbone -----------------------------------------------------------------

UNetBackbone::UNetBackbone(const NetworkConfig& cfg) : depth_(cfg.depth) {
  int in = cfg.input_channels();
  for (int l = 0; l < depth_; ++l) {
    enc_.emplace_back("backbone.enc" + std::to_string(l), in, cfg.channels_at(l),
                      cfg.spatial_dims);
    in = cfg.channels_at(l);
  }
  for (int l = 0; l + 1 < depth_; ++l) {
    dec_.emplace_back("backbone.dec" + std::to_string(l),
                      cfg.channels_at(l + 1) + cfg.channels_at(l), cfg.channels_at(l),
                      cfg.spatial_dims);
  }
}

void UNetBackbone::init(Rng& rng) {
  for (auto& b : enc_) b.init(rng);
  for (auto& b : dec_) b.init(rng);
}

Tensor UNetBackbone::forward(const Tensor& input, Trace* trace) const {
  std::vector<Tensor> skips(depth_);
  if (trace) {
    trace->enc.assign(depth_, {});
    trace->dec.assign(depth_ - 1, {});
    trace->ups.assign(depth_ - 1, {});
  }
  for (int l = 0; l < depth_; ++l) {
    Tensor x = l == 0 ? input : pool(skips[l - 1]);
    skips[l] = enc_[l].forward(x, trace ? &trace->enc[l] : nullptr);
  }
  Tensor h = skips[depth_ - 1];
  for (int l = depth_ - 2; l >= 0; --l) {
    Tensor up = upsample(h);
    h = dec_[l].forward(concat_channels(up, skips[l]), trace ? &trace->dec[l] : nullptr);
    if (trace) trace->ups[l] = std::move(up);
  }
  if (trace) trace->skips = std::move(skips);
  return h;
}

void UNetBackbone::backward(const Trace& trace, const Tensor& grad_features) {
  std::vector<Tensor> skip_grad(depth_);
  Tensor g = grad_features;
  for (int l = 0; l + 1 < depth_; ++l) {
    Tensor g_joined = dec_[l].backward(trace.dec[l], g);
    Tensor g_up;
    Tensor g_skip;
    split_channels(g_joined, trace.ups[l].channels, g_up, g_skip);
    skip_grad[l] = std::move(g_skip);
    g = upsample_grad(g_up, trace.skips[l + 1].extent);
  }
  skip_grad[depth_ - 1] = std::move(g);
  for (int l = depth_ - 1; l >= 0; --l) {
    Tensor gx = enc_[l].backward(trace.enc[l], skip_grad[l]);
    if (l > 0) {
      Tensor gp = pool_grad(gx, trace.skips[l - 1].extent);
      for (std::size_t i = 0; i < gp.data.size(); ++i) skip_grad[l - 1].data[i] += gp.data[i];
    }
  }
}

void UNetBackbone::collect(std::vector<Param*>& out) {
  for (auto& b : enc_) b.collect(out);
  for (auto& b : dec_) b.collect(out);
}

// ---- LatentHead -------------------------------------------------------------------

LatentHead::LatentHead(const NetworkConfig& cfg)
    : features_(cfg.base_channels),
      latent_(cfg.latent_dim),
      hidden_(make_conv("head.hidden", cfg.base_channels + cfg.latent_dim, cfg.base_channels, 1,
                        cfg.spatial_dims)),
      output_(make_conv("head.output", cfg.base_channels, cfg.n_classes, 1, cfg.spatial_dims)) {}

void LatentHead::init(Rng& rng) {
  hidden_.init(rng, std::sqrt(2.0));
  output_.init(rng, 1.0);
}

Tensor LatentHead::forward(const Tensor& features, std::span<const double> latent,
                           Trace* trace) const {
  if (static_cast<int>(latent.size()) != latent_) {
    throw DimensionError("latent sample has length " + std::to_string(latent.size()) +
                         ", expected " + std::to_string(latent_));
  }
  Tensor z(latent_, features.extent);
  for (int i = 0; i < latent_; ++i) std::fill(z.channel(i).begin(), z.channel(i).end(), latent[i]);
  Tensor joined = concat_channels(features, z);
  Tensor pre = hidden_.forward(joined);
  Tensor act = leaky(pre);
  Tensor logits = output_.forward(act);
  if (trace) {
    trace->joined = std::move(joined);
    trace->pre = std::move(pre);
    trace->act = std::move(act);
  }
  return logits;
}

Tensor LatentHead::backward(const Trace& trace, const Tensor& grad_logits,
                            std::span<double> grad_latent) {
  Tensor g = output_.backward(trace.act, grad_logits);
  g = leaky_grad(trace.pre, g);
  Tensor g_joined = hidden_.backward(trace.joined, g);
  Tensor g_features;
  Tensor g_z;
  split_channels(g_joined, features_, g_features, g_z);
  for (int i = 0; i < latent_; ++i) {
    double s = 0.0;
    for (double v : g_z.channel(i)) s += v;
    grad_latent[i] += s;
  }
  return g_features;
}

void LatentHead::collect(std::vector<Param*>& out) {
  out.push_back(&hidden_.weight);
  out.push_back(&hidden_.bias);
  out.push_back(&output_.weight);
  out.push_back(&output_.bias);
}

// ---- Softmax ------------------------------------------------------------------------

SegmentationOutput softmax(const Tensor& logits) {
  SegmentationOutput out{Tensor(logits.channels, logits.extent)};
  const std::size_t plane = logits.plane();
  const int k = logits.channels;
  for (std::size_t i = 0; i < plane; ++i) {
    double mx = logits.data[i];
    for (int c = 1; c < k; ++c) mx = std::max(mx, logits.data[c * plane + i]);
    double sum = 0.0;
    for (int c = 0; c < k; ++c) {
      const double e = std::exp(logits.data[c * plane + i] - mx);
      out.class_probabilities.data[c * plane + i] = e;
      sum += e;
    }
    for (int c = 0; c < k; ++c) out.class_probabilities.data[c * plane + i] /= sum;
  }
  return out;
}

LabelMap SegmentationOutput::argmax() const {
  const Tensor& p = class_probabilities;
  LabelMap labels(p.extent);
  const std::size_t plane = p.plane();
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    for (int c = 1; c < p.channels; ++c) {
      if (p.data[c * plane + i] > p.data[best * plane + i]) best = c;
    }
    labels.data[i] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

// ---- ProbUNet ------------------------------------------------------------------------

ProbUNet::ProbUNet(const NetworkConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  backbone_ = UNetBackbone(cfg_);
  prior_ = DistributionEncoder("prior", cfg_, cfg_.input_channels());
  posterior_ = DistributionEncoder("posterior", cfg_, cfg_.posterior_input_channels());
  head_ = LatentHead(cfg_);
  Rng rng(cfg_.seed);
  backbone_.init(rng);
  prior_.init(rng);
  posterior_.init(rng);
  head_.init(rng);
}

void ProbUNet::check_inputs(const Tensor& inputs, int expected_channels) const {
  if (inputs.channels != expected_channels) {
    throw DimensionError("expected " + std::to_string(expected_channels) +
                         " input channels, got tensor " + inputs.shape_str());
  }
  if (inputs.extent.spatial_dims() != cfg_.spatial_dims) {
    throw DimensionError("expected " + std::to_string(cfg_.spatial_dims) +
                         "-D input, got tensor " + inputs.shape_str());
  }
  const int factor = 1 << (cfg_.depth - 1);
  const Extent e = inputs.extent;
  if (e.height % factor != 0 || e.width % factor != 0 || (e.is_3d() && e.depth % factor != 0)) {
    throw DimensionError("spatial extent " + e.str() + " must be divisible by " +
                         std::to_string(factor) + " for depth " + std::to_string(cfg_.depth));
  }
}

Tensor ProbUNet::posterior_inputs(const Tensor& inputs, const LabelMap& target) const {
  if (target.extent != inputs.extent) {
    throw DimensionError("target extent " + target.extent.str() + " vs inputs " +
                         inputs.shape_str());
  }
  return concat_channels(inputs, one_hot(target));
}

DiagonalGaussian ProbUNet::prior_encode(const Tensor& inputs) const {
  check_inputs(inputs, cfg_.input_channels());
  return prior_.forward(inputs, nullptr);
}

DiagonalGaussian ProbUNet::posterior_encode(const Tensor& inputs, const LabelMap& target) const {
  check_inputs(inputs, cfg_.input_channels());
  return posterior_.forward(posterior_inputs(inputs, target), nullptr);
}

SegmentationOutput ProbUNet::backbone_forward(const Tensor& inputs,
                                              std::span<const double> latent) const {
  check_inputs(inputs, cfg_.input_channels());
  const Tensor features = backbone_.forward(inputs, nullptr);
  return softmax(head_.forward(features, latent, nullptr));
}

std::vector<Param*> ProbUNet::parameters() {
  std::vector<Param*> out;
  backbone_.collect(out);
  prior_.collect(out);
  posterior_.collect(out);
  head_.collect(out);
  return out;
}

std::vector<const Param*> ProbUNet::parameters() const {
  auto mut = const_cast<ProbUNet*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

void ProbUNet::zero_grad() {
  for (Param* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
}

std::size_t ProbUNet::parameter_count() const {
  std::size_t n = 0;
  for (const Param* p : parameters()) n += p->size();
  return n;
}

// ---- LatentDecoder -----------------------------------------------------------------

LatentDecoder::LatentDecoder(const ProbUNet& model, const Tensor& inputs) : model_(&model) {
  model.check_inputs(inputs, model.config().input_channels());
  const Tensor features = model.backbone().forward(inputs, nullptr);
  extent_ = features.extent;
  const int n = model.config().latent_dim;
  Tensor joined = concat_channels(features, Tensor(n, extent_));
  base_ = model.head().hidden().forward(joined);
}

Tensor LatentDecoder::logits(std::span<const double> latent) const {
  const NetworkConfig& cfg = model_->config();
  if (static_cast<int>(latent.size()) != cfg.latent_dim) {
    throw DimensionError("latent has length " + std::to_string(latent.size()) + ", expected " +
                         std::to_string(cfg.latent_dim));
  }
  const Conv& hidden = model_->head().hidden();
  const int in = hidden.in_channels();
  Tensor pre = base_;
  for (int co = 0; co < pre.channels; ++co) {
    double offset = 0.0;
    for (int i = 0; i < cfg.latent_dim; ++i) {
      offset += hidden.weight.value[static_cast<std::size_t>(co) * in + cfg.base_channels + i] *
                latent[i];
    }
    for (double& v : pre.channel(co)) v += offset;
  }
  return model_->head().output().forward(leaky(pre));
}

LabelMap LatentDecoder::decode_labels(std::span<const double> latent) const {
  const Tensor l = logits(latent);
  LabelMap labels(l.extent);
  const std::size_t plane = l.plane();
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    for (int c = 1; c < l.channels; ++c) {
      if (l.data[c * plane + i] > l.data[best * plane + i]) best = c;
    }
    labels.data[i] = static_cast<std::uint8_t>(best);
  }
  return labels;
}

SegmentationOutput LatentDecoder::decode(std::span<const double> latent) const {
  return softmax(logits(latent));
}

}  // namespace probgrowth
