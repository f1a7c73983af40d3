#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "poisonguard/models/checkpoint.hpp"
#include "poisonguard/models/network.hpp"
#include "support/gradcheck.hpp"
#include "support/synthetic.hpp"

using namespace poisonguard;
namespace pt = poisonguard::testing;

namespace {

Tensor<double> random_input(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return pt::random_tensor(shape, rng, 0.0, 1.0);
}

template <typename T>
void set_sigma(Network<T>& net, double sigma) {
  for (auto& nv : net.variational_params()) {
    for (auto& r : nv.params->rho->data) r = static_cast<T>(inverse_softplus(sigma));
  }
}

template <typename T>
Tensor<T> sampled_logits(const Network<T>& net, const Tensor<T>& x, std::uint64_t seed,
                         std::map<std::string, Var<T>>* taps = nullptr) {
  std::mt19937_64 noise(seed), signs(seed + 1);
  Graph<T> g(false);
  ForwardContext<T> ctx{g};
  ctx.weights = WeightMode::sample;
  ctx.noise_rng = &noise;
  ctx.sign_rng = &signs;
  ctx.taps = taps;
  return *net.forward(make_var(x), ctx);
}

// Independent KL oracle in long double.
long double kl_oracle(const std::vector<double>& mu, const std::vector<double>& sigma,
                      const std::vector<double>& pmu, const std::vector<double>& psigma) {
  long double kl = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const long double s = sigma[i], p = psigma[i], d = mu[i] - pmu[i];
    kl += std::log(p / s) + (s * s + d * d) / (2 * p * p) - 0.5L;
  }
  return kl;
}

}  // namespace

TEST(Scnn, ShapesAndParameterCount) {
  auto net = build_scnn<double>(10, false, 1);
  EXPECT_EQ(net.parameter_count(), 184586u);  // 832 + 51264 + 131200 + 1290
  std::map<std::string, Var<double>> taps;
  Graph<double> g(false);
  ForwardContext<double> ctx{g};
  ctx.taps = &taps;
  auto out = net.forward(make_var(random_input({3, 1, 28, 28}, 2)), ctx);
  EXPECT_EQ(out->shape, (Shape{3, 10}));
  ASSERT_TRUE(taps.count(kPenultimateTap));
  EXPECT_EQ(taps[kPenultimateTap]->shape, (Shape{3, 128}));
  EXPECT_EQ(build_scnn<double>(10, true, 1).parameter_count(), 2 * 184586u);
}

TEST(Scnn, RejectsWrongInputShape) {
  auto net = build_scnn<float>(10, false);
  Tensor<float> x({2, 3, 32, 32});
  try {
    net.predict_logits(x);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3,32,32]"), std::string::npos);
  }
}

TEST(ResNet20, ShapesAndParameterCount) {
  auto net = build_resnet20<float>(10, false, 1);
  EXPECT_EQ(net.parameter_count(), 269722u);
  std::map<std::string, Var<float>> taps;
  Graph<float> g(false);
  ForwardContext<float> ctx{g};
  ctx.taps = &taps;
  auto x = random_input({2, 3, 32, 32}, 4).cast<float>();
  auto out = net.forward(make_var(x), ctx);
  EXPECT_EQ(out->shape, (Shape{2, 10}));
  EXPECT_EQ(taps.at(kPenultimateTap)->shape, (Shape{2, 64}));
  std::size_t blocks = 0;
  for (const auto& s : net.describe()) blocks += s.kind == LayerKind::residual_block;
  EXPECT_EQ(blocks, 9u);
}

TEST(ResNet20, ZeroedBranchPassesShortcut) {
  // Block with gamma = beta = 0 in its last batch norm reduces to relu(x).
  Network<double> net(Architecture::resnet20, 2, {4, 5, 5}, false);
  net.add<ResidualBlock<double>>(std::nullopt, "b", 4, 4, 1, false);
  net.initialize(3);
  for (auto& nt : net.tensors()) {
    if (nt.name == "b.bn_b.gamma") std::fill(nt.value->data.begin(), nt.value->data.end(), 0.0);
  }
  std::mt19937_64 rng(1);
  auto x = pt::random_tensor({2, 4, 5, 5}, rng, -1.0, 1.0);
  auto y = net.predict_logits(x);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data[i], std::max(0.0, x.data[i]));
}

TEST(ResNet20, DownsampleShortcutShape) {
  Network<double> net(Architecture::resnet20, 2, {4, 6, 6}, false);
  net.add<ResidualBlock<double>>(std::nullopt, "b", 4, 8, 2, false);
  net.initialize(3);
  auto y = net.predict_logits(random_input({1, 4, 6, 6}, 2));
  EXPECT_EQ(y.shape, (Shape{1, 8, 3, 3}));
}

TEST(Network, TapsDoNotChangeOutput) {
  auto net = build_scnn<double>(10, false, 5);
  auto x = random_input({2, 1, 28, 28}, 6);
  auto plain = net.predict_logits(x);
  std::map<std::string, Var<double>> taps;
  Graph<double> g(false);
  ForwardContext<double> ctx{g};
  ctx.taps = &taps;
  EXPECT_EQ(net.forward(make_var(x), ctx)->data, plain.data);
}

TEST(Network, DuplicateTapRejected) {
  Network<double> net(Architecture::scnn, 2, {4}, false);
  net.add<DenseLayer<double>>(std::string("t"), "a", 4, 4, false);
  EXPECT_THROW(net.add<DenseLayer<double>>(std::string("t"), "b", 4, 2, false), std::invalid_argument);
}

TEST(Network, SamplingNeedsGenerators) {
  auto net = build_scnn<double>(10, true, 1);
  Graph<double> g(false);
  ForwardContext<double> ctx{g};
  ctx.weights = WeightMode::sample;
  EXPECT_THROW(net.forward(make_var(random_input({1, 1, 28, 28}, 1)), ctx), std::logic_error);
}

TEST(Flipout, VanishingSigmaMatchesMean) {
  auto det = build_scnn<double>(10, false, 7);
  auto bnn = build_scnn<double>(10, true, 7);
  set_sigma(bnn, 1e-12);
  auto x = random_input({4, 1, 28, 28}, 8);
  auto a = det.predict_logits(x);
  auto b = sampled_logits(bnn, x, 3);
  auto c = bnn.predict_logits(x);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_NEAR(a.data[i], b.data[i], 1e-6);
    EXPECT_DOUBLE_EQ(a.data[i], c.data[i]);
  }
}

TEST(Flipout, VanishingSigmaResNetFloat) {
  auto det = build_resnet20<float>(10, false, 7);
  auto bnn = build_resnet20<float>(10, true, 7);
  set_sigma(bnn, 1e-9);
  auto x = random_input({2, 3, 32, 32}, 8).cast<float>();
  auto a = det.predict_logits(x);
  auto b = sampled_logits(bnn, x, 3);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-5);
}

TEST(Flipout, DenseMomentsMatchPosterior) {
  // y = x w + b with w ~ N(0.5, 0.3^2), b ~ N(0.2, 0.1^2), x = 2:
  // E y = 1.2, Var y = 4 * 0.09 + 0.01 = 0.37.
  Network<double> net(Architecture::scnn, 1, {1}, true);
  net.add<DenseLayer<double>>(std::nullopt, "d", 1, 1, true);
  auto groups = net.variational_params();
  groups[0].params->mu->data[0] = 0.5;
  groups[0].params->rho->data[0] = inverse_softplus(0.3);
  groups[1].params->mu->data[0] = 0.2;
  groups[1].params->rho->data[0] = inverse_softplus(0.1);
  Tensor<double> x({1, 1}, 2.0);
  const int n = 10000;
  double sum = 0, sq = 0;
  std::mt19937_64 noise(1), signs(2);
  for (int i = 0; i < n; ++i) {
    Graph<double> g(false);
    ForwardContext<double> ctx{g};
    ctx.weights = WeightMode::sample;
    ctx.noise_rng = &noise;
    ctx.sign_rng = &signs;
    const double y = net.forward(make_var(x), ctx)->data[0];
    sum += y;
    sq += y * y;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  EXPECT_NEAR(mean, 1.2, 3 * std::sqrt(0.37 / n));
  EXPECT_NEAR(var, 0.37, 0.03);
}

TEST(Flipout, SamplesInBatchGetDifferentPerturbations) {
  auto bnn = build_scnn<double>(10, true, 2);
  set_sigma(bnn, 0.05);
  Tensor<double> one = random_input({1, 1, 28, 28}, 3);
  Tensor<double> x({2, 1, 28, 28});
  std::copy(one.data.begin(), one.data.end(), x.data.begin());
  std::copy(one.data.begin(), one.data.end(), x.data.begin() + 784);
  auto y = sampled_logits(bnn, x, 4);
  double diff = 0;
  for (std::size_t k = 0; k < 10; ++k) diff += std::abs(y.data[k] - y.data[10 + k]);
  EXPECT_GT(diff, 1e-6);
  auto again = sampled_logits(bnn, x, 4);
  EXPECT_EQ(again.data, y.data);
}

TEST(Flipout, GradientsOfVariationalLayers) {
  for (bool conv : {false, true}) {
    Network<double> net(Architecture::scnn, 2, conv ? Shape{2, 4, 4} : Shape{3}, true);
    if (conv) {
      net.add<Conv2dLayer<double>>(std::nullopt, "c", 2, 3, 3, 1, 1, true, true);
    } else {
      net.add<DenseLayer<double>>(std::nullopt, "d", 3, 2, true);
    }
    net.initialize(1);
    set_sigma(net, 0.2);
    std::mt19937_64 rng(5);
    auto x = make_var(pt::random_tensor(conv ? Shape{2, 2, 4, 4} : Shape{4, 3}, rng, -1, 1), true);
    std::vector<Var<double>> inputs{x};
    for (auto& p : net.trainable()) inputs.push_back(p);
    auto err = pt::gradcheck(
        [&](Graph<double>& g, const auto&) {
          std::mt19937_64 noise(9), signs(10);
          ForwardContext<double> ctx{g};
          ctx.weights = WeightMode::sample;
          ctx.noise_rng = &noise;
          ctx.sign_rng = &signs;
          return net.forward(x, ctx);
        },
        inputs, 3);
    EXPECT_TRUE(err.ok(1e-5)) << (conv ? "conv " : "dense ") << err.worst;
  }
}

TEST(Kl, AnalyticCases) {
  VariationalParams<double> p({1}, 0.0);
  p.mu->data[0] = 0.0;
  p.rho->data[0] = inverse_softplus(1.0);
  EXPECT_NEAR(kl_to_prior(p), 0.0, 1e-12);
  p.mu->data[0] = 1.0;
  EXPECT_NEAR(kl_to_prior(p), 0.5, 1e-12);
  p.prior_sigma->data[0] = 0.0;
  EXPECT_THROW(kl_to_prior(p), std::domain_error);
}

TEST(Kl, MatchesOracleAndNonNegative) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-2, 2), pos(0.01, 3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + trial % 17;
    VariationalParams<double> p({n}, 0.0);
    std::vector<double> mu(n), sigma(n), pmu(n), psigma(n);
    for (std::size_t i = 0; i < n; ++i) {
      mu[i] = p.mu->data[i] = u(rng);
      sigma[i] = pos(rng);
      p.rho->data[i] = inverse_softplus(sigma[i]);
      sigma[i] = softplus_value(p.rho->data[i]);
      pmu[i] = p.prior_mu->data[i] = u(rng);
      psigma[i] = p.prior_sigma->data[i] = pos(rng);
    }
    const double kl = kl_to_prior(p);
    const long double ref = kl_oracle(mu, sigma, pmu, psigma);
    EXPECT_NEAR(kl, static_cast<double>(ref), 1e-9 * std::max(1.0L, std::abs(ref)));
    EXPECT_GE(kl, 0.0);
  }
}

TEST(Kl, GraphOpGradient) {
  VariationalParams<double> p({5}, 0.0);
  std::mt19937_64 rng(2);
  *p.mu = pt::random_tensor({5}, rng, -1, 1);
  p.mu->requires_grad = true;
  *p.rho = pt::random_tensor({5}, rng, -2, 1);
  p.rho->requires_grad = true;
  *p.prior_mu = pt::random_tensor({5}, rng, -1, 1);
  *p.prior_sigma = pt::random_tensor({5}, rng, 0.5, 2);
  auto err = pt::gradcheck([&](Graph<double>& g, const auto&) { return kl_to_prior(g, p); },
                           {p.mu, p.rho}, 1);
  EXPECT_TRUE(err.ok(1e-6)) << err.worst;
}

TEST(Checkpoint, RoundTripRandomNetworks) {
  auto dir = pt::scratch_dir("ckpt");
  for (auto arch : {Architecture::scnn, Architecture::resnet20}) {
    for (bool variational : {false, true}) {
      auto net = build_network<float>(arch, 10, variational, 17);
      auto ck = make_checkpoint(net);
      EXPECT_EQ(ck.scalar_bytes, 4u);
      const auto path = dir / (std::string(to_string(arch)) + (variational ? "-bnn" : "-dnn") + ".psnt");
      save_checkpoint(ck, path);
      auto back = read_checkpoint(path);
      EXPECT_TRUE(back == ck);
      auto other = build_network<float>(arch, 10, variational, 99);
      load_checkpoint(other, back);
      EXPECT_TRUE(make_checkpoint(other) == ck);
    }
  }
}

TEST(Checkpoint, RejectsCorruptAndMismatched) {
  auto net = build_scnn<double>(10, false, 1);
  auto bytes = encode_checkpoint(make_checkpoint(net));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PSNT");
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  EXPECT_THROW(decode_checkpoint(cut), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(decode_checkpoint(extra), FormatError);
  auto bnn = build_scnn<double>(10, true, 1);
  EXPECT_ANY_THROW(load_checkpoint(bnn, decode_checkpoint(bytes)));
  auto resnet = build_resnet20<double>(10, false, 1);
  EXPECT_ANY_THROW(load_checkpoint(resnet, decode_checkpoint(bytes)));
}

TEST(Architecture, ParseNames) {
  EXPECT_EQ(parse_architecture("scnn"), Architecture::scnn);
  EXPECT_EQ(parse_architecture("resnet20"), Architecture::resnet20);
  EXPECT_THROW(parse_architecture("vgg"), std::invalid_argument);
}
