#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "probgrowth/error.hpp"
#include "probgrowth/gaussian.hpp"
#include "probgrowth/model.hpp"

using namespace probgrowth;

namespace {

Tensor random_inputs(int channels, Extent e, Rng& rng) {
  Tensor t(channels, e);
  for (auto& x : t.data) x = rng.normal();
  return t;
}

double mean_distance(const DiagonalGaussian& a, const DiagonalGaussian& b) {
  double s = 0.0;
  for (int i = 0; i < a.dims(); ++i) s += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  return std::sqrt(s);
}

std::size_t param_count(DistributionEncoder& enc) {
  std::vector<Param*> ps;
  enc.collect(ps);
  std::size_t n = 0;
  for (const Param* p : ps) n += p->size();
  return n;
}

}  // namespace

TEST_CASE("grid latents") {
  const DiagonalGaussian g({0.5, -1.0, 2.0}, {0.0, std::log(4.0), -1.0});
  const auto grid = grid_latents(g);
  CHECK(grid.size() == 343);
  CHECK(grid.front().k == std::vector<int>{-3, -3, -3});
  CHECK(grid.back().k == std::vector<int>{3, 3, 3});
  CHECK(std::is_sorted(grid.begin(), grid.end(),
                       [](const GridLatent& a, const GridLatent& b) { return a.k < b.k; }));
  const auto centre = std::find_if(grid.begin(), grid.end(), [](const GridLatent& l) {
    return l.k == std::vector<int>{0, 0, 0};
  });
  REQUIRE(centre != grid.end());
  CHECK(centre->z == g.mean);

  const auto one = grid_latents(DiagonalGaussian({0.0}, {std::log(4.0)}));
  std::vector<double> z;
  for (const auto& l : one) z.push_back(l.z[0]);
  const std::vector<double> expected{-6, -4, -2, 0, 2, 4, 6};
  for (int i = 0; i < 7; ++i) CHECK(z[i] == doctest::Approx(expected[i]).epsilon(1e-12));
}

TEST_CASE("gaussian sampling") {
  Rng rng(4);
  const DiagonalGaussian sharp({1.5, -2.0}, {-40.0, -40.0});
  const auto s = sample_gaussian(sharp, rng);
  CHECK(std::abs(s[0] - 1.5) < 1e-8);
  CHECK(std::abs(s[1] + 2.0) < 1e-8);

  Rng a(9), b(9);
  const auto g = DiagonalGaussian::standard(3);
  CHECK(sample_gaussian(g, a) == sample_gaussian(g, b));

  const int n = 10000;
  std::array<double, 3> sum{}, sq{};
  for (int i = 0; i < n; ++i) {
    const auto x = sample_gaussian(g, rng);
    for (int d = 0; d < 3; ++d) {
      sum[d] += x[d];
      sq[d] += x[d] * x[d];
    }
  }
  for (int d = 0; d < 3; ++d) {
    const double m = sum[d] / n;
    CHECK(std::abs(m) < 0.05);
    CHECK(std::abs(sq[d] / n - m * m - 1.0) < 0.1);
  }

  std::vector<double> eps;
  Rng c(10);
  const DiagonalGaussian h({1.0}, {std::log(9.0)});
  const auto x = sample_gaussian(h, c, &eps);
  CHECK(x[0] == doctest::Approx(1.0 + 3.0 * eps[0]));
  CHECK_THROWS_AS(DiagonalGaussian({1.0, 2.0}, {0.0}).validate(), DataError);
}

TEST_CASE("network shapes and softmax") {
  const NetworkConfig cfg = testing::toy_config();
  const ProbUNet net(cfg);
  Rng rng(1);
  const Extent e{1, 16, 16};
  const Tensor in = random_inputs(cfg.input_channels(), e, rng);

  const auto prior = net.prior_encode(in);
  CHECK(prior.mean.size() == 3);
  CHECK(prior.log_variance.size() == 3);
  CHECK(net.prior_encode(in) == prior);

  const auto out = net.backbone_forward(in, prior.mean);
  CHECK(out.class_probabilities.channels == kNumClasses);
  CHECK(out.class_probabilities.extent == e);
  for (std::size_t v = 0; v < e.voxels(); ++v) {
    double s = 0.0;
    for (int c = 0; c < kNumClasses; ++c) s += out.class_probabilities.channel(c)[v];
    CHECK(std::abs(s - 1.0) < 1e-5);
  }

  CHECK_THROWS_AS(net.prior_encode(random_inputs(3, e, rng)), DimensionError);
  CHECK_THROWS_AS(net.backbone_forward(in, std::vector<double>{0.0, 1.0}), DimensionError);
  CHECK_THROWS_AS(net.prior_encode(random_inputs(cfg.input_channels(), Extent{1, 15, 16}, rng)),
                  DimensionError);
  try {
    net.prior_encode(random_inputs(5, e, rng));
  } catch (const DimensionError& err) {
    const std::string msg = err.what();
    CHECK(msg.find('8') != std::string::npos);
    CHECK(msg.find('5') != std::string::npos);
  }
}

TEST_CASE("latent changes the output") {
  const NetworkConfig cfg = testing::toy_config();
  const ProbUNet net(cfg);
  Rng rng(2);
  const Tensor in = random_inputs(cfg.input_channels(), Extent{1, 16, 16}, rng);
  const auto a = net.backbone_forward(in, std::vector<double>{0.0, 0.0, 0.0});
  const auto b = net.backbone_forward(in, std::vector<double>{1.0, -2.0, 0.5});
  CHECK(a.class_probabilities.data != b.class_probabilities.data);

  // the cached decoder agrees with the full forward pass
  const LatentDecoder dec(net, in);
  const auto c = dec.decode(std::vector<double>{1.0, -2.0, 0.5});
  for (std::size_t i = 0; i < c.class_probabilities.data.size(); ++i) {
    CHECK(c.class_probabilities.data[i] ==
          doctest::Approx(b.class_probabilities.data[i]).epsilon(1e-10));
  }
  CHECK(dec.decode_labels(std::vector<double>{1.0, -2.0, 0.5}) == b.argmax());
}

TEST_CASE("posterior sees the target") {
  const NetworkConfig cfg = testing::toy_config();
  const ProbUNet net(cfg);
  Rng rng(3);
  const Extent e{1, 16, 16};
  const Tensor in = random_inputs(cfg.input_channels(), e, rng);
  const LabelMap t1 = testing::disc_labels(e, 8, 8, 3);
  const LabelMap t2 = testing::disc_labels(e, 8, 8, 6);
  const auto q1 = net.posterior_encode(in, t1);
  CHECK(q1.dims() == 3);
  CHECK(net.posterior_encode(in, t1) == q1);
  CHECK(net.posterior_encode(in, t2).mean != q1.mean);
  CHECK_THROWS_AS(net.posterior_encode(in, LabelMap(Extent{1, 8, 8})), DimensionError);
}

TEST_CASE("prior encoder tolerates translation") {
  const NetworkConfig cfg = testing::toy_config();
  const ProbUNet net(cfg);
  Rng rng(5);
  const Extent e{1, 32, 32};
  const Tensor in = random_inputs(cfg.input_channels(), e, rng);
  Tensor shifted(in.channels, e);
  for (int c = 0; c < in.channels; ++c) {
    for (int y = 0; y < e.height; ++y) {
      for (int x = 0; x < e.width; ++x) {
        shifted.at(c, 0, y, x) = in.at(c, 0, y, (x + 1) % e.width);
      }
    }
  }
  // a different input with the same marginal statistics
  const Tensor other = random_inputs(cfg.input_channels(), e, rng);
  const auto p = net.prior_encode(in);
  const double d_shift = mean_distance(p, net.prior_encode(shifted));
  const double d_other = mean_distance(p, net.prior_encode(other));
  MESSAGE("translation delta " << d_shift << ", different-input delta " << d_other);
  CHECK(d_shift < 10 * d_other);
}

TEST_CASE("encoders differ only in the first layer") {
  NetworkConfig cfg = testing::toy_config();
  ProbUNet net(cfg);
  const std::size_t prior = param_count(net.prior());
  const std::size_t posterior = param_count(net.posterior());
  CHECK(posterior - prior ==
        static_cast<std::size_t>(cfg.n_classes * cfg.base_channels * 3 * 3));
  cfg.spatial_dims = 3;
  ProbUNet net3(cfg);
  CHECK(param_count(net3.posterior()) - param_count(net3.prior()) ==
        static_cast<std::size_t>(cfg.n_classes * cfg.base_channels * 27));
}

TEST_CASE("argmax ties go to the lowest class") {
  SegmentationOutput out;
  out.class_probabilities = Tensor(4, Extent{1, 1, 3});
  auto set = [&](int v, std::array<double, 4> p) {
    for (int c = 0; c < 4; ++c) out.class_probabilities.channel(c)[v] = p[c];
  };
  set(0, {0.25, 0.25, 0.25, 0.25});
  set(1, {0.1, 0.4, 0.1, 0.4});
  set(2, {0.1, 0.2, 0.3, 0.4});
  const LabelMap l = out.argmax();
  CHECK(l.data == std::vector<std::uint8_t>{0, 1, 3});
}

TEST_CASE("initialisation depends only on the seed") {
  NetworkConfig cfg = testing::toy_config();
  const ProbUNet a(cfg), b(cfg);
  const auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  cfg.seed += 1;
  const ProbUNet c(cfg);
  CHECK(c.parameters().front()->value != pa.front()->value);
  CHECK(a.parameter_count() > 0);
}
