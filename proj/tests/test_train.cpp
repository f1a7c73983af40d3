#include <gtest/gtest.h>

#include <cmath>

#include "poisonguard/train/train.hpp"
#include "support/synthetic.hpp"

using namespace poisonguard;
namespace pt = poisonguard::testing;

namespace {

// Small conv net on 1x8x8 inputs with the same layer vocabulary as SCNN.
template <typename T>
Network<T> toy_net(bool variational, std::uint64_t seed) {
  Network<T> net(Architecture::scnn, 4, {1, 8, 8}, variational);
  net.template add<Conv2dLayer<T>>(std::nullopt, "conv1", 1, 4, 3, 1, 1, true, variational);
  net.template add<ReluLayer<T>>(std::nullopt);
  net.template add<MaxPoolLayer<T>>(std::nullopt, 2);
  net.template add<FlattenLayer<T>>(std::nullopt);
  net.template add<DenseLayer<T>>(std::string(kPenultimateTap), "fc1", 64, 16, variational);
  net.template add<ReluLayer<T>>(std::nullopt);
  net.template add<DenseLayer<T>>(std::nullopt, "fc2", 16, 4, variational);
  net.initialize(seed);
  return net;
}

TrainConfig quick_config(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr.initial = 0.05;
  return cfg;
}

template <typename T>
double accuracy_of(const Network<T>& net, const LabeledDataset& ds) {
  Tensor<T> x(ds.images.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] = static_cast<T>(ds.images.data[i]);
  auto logits = net.predict_logits(x);
  const std::size_t K = net.num_classes();
  std::size_t ok = 0;
  for (std::size_t n = 0; n < ds.size(); ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits.data[n * K + k] > logits.data[n * K + best]) best = k;
    ok += static_cast<int>(best) == ds.labels[n];
  }
  return 100.0 * ok / ds.size();
}

}  // namespace

TEST(Schedule, MilestonesDecay) {
  LrSchedule s{0.1, {2, 4}, 0.1};
  EXPECT_DOUBLE_EQ(s.at(0), 0.1);
  EXPECT_DOUBLE_EQ(s.at(2), 0.1 * 0.1);
  EXPECT_NEAR(s.at(5), 0.001, 1e-15);
}

TEST(Sgd, MomentumUpdateByHand) {
  auto p = make_param<double>({1}, 1.0);
  Sgd<double> opt({p}, 0.9, 0.1);
  p->ensure_grad();
  p->grad[0] = 0.5;
  opt.step(0.1);  // v = 0.5 + 0.1 = 0.6, p = 1 - 0.06
  EXPECT_DOUBLE_EQ(p->data[0], 0.94);
  opt.step(0.1);  // v = 0.54 + 0.5 + 0.094 = 1.134
  EXPECT_NEAR(p->data[0], 0.94 - 0.1134, 1e-15);
}

TEST(Sgd, PerTensorStepScale) {
  auto a = make_param<double>({1}, 1.0), b = make_param<double>({1}, 1.0);
  Sgd<double> opt({a, b}, 0.0, 0.0, {1.0, 100.0});
  a->ensure_grad();
  b->ensure_grad();
  a->grad[0] = b->grad[0] = 0.5;
  opt.step(0.01);
  EXPECT_DOUBLE_EQ(a->data[0], 1.0 - 0.005);
  EXPECT_DOUBLE_EQ(b->data[0], 1.0 - 0.5);
  EXPECT_THROW(Sgd<double>({a, b}, 0.9, 0.0, {1.0}), std::invalid_argument);
}

TEST(Deterministic, OverfitsSixteenSamples) {
  auto ds = pt::striped_dataset(16, {1, 8, 8}, 4, 3);
  auto net = toy_net<double>(false, 1);
  auto cfg = quick_config(60);
  auto res = train_deterministic(net, ds, cfg);
  EXPECT_EQ(res.log.size(), 60u);
  EXPECT_LT(res.log.back().loss, res.log.front().loss);
  EXPECT_DOUBLE_EQ(accuracy_of(net, ds), 100.0);
  EXPECT_DOUBLE_EQ(res.log.back().kl, 0.0);
}

TEST(Deterministic, ZeroEpochsKeepsInitialization) {
  auto ds = pt::striped_dataset(16, {1, 8, 8}, 4, 3);
  auto net = toy_net<float>(false, 1);
  auto before = make_checkpoint(net);
  auto res = train_deterministic(net, ds, quick_config(0));
  EXPECT_TRUE(res.checkpoint == before);
  EXPECT_TRUE(res.log.empty());
}

TEST(Deterministic, ReproducibleAndSeedSensitive) {
  auto ds = pt::striped_dataset(64, {1, 8, 8}, 4, 3);
  auto run = [&](std::uint64_t seed) {
    auto net = toy_net<float>(false, 1);
    auto cfg = quick_config(2);
    cfg.seed = seed;
    return train_deterministic(net, ds, cfg).checkpoint;
  };
  EXPECT_TRUE(run(5) == run(5));
  EXPECT_FALSE(run(5) == run(6));
}

TEST(Deterministic, DivergenceIsReported) {
  auto ds = pt::striped_dataset(16, {1, 8, 8}, 4, 3);
  auto net = toy_net<float>(false, 1);
  auto cfg = quick_config(50);
  cfg.lr.initial = 1e6;
  EXPECT_THROW(train_deterministic(net, ds, cfg), TrainingDiverged);
}

TEST(Deterministic, AugmentationKeepsLabelsLearnable) {
  auto ds = pt::synthetic_dataset(8, {3, 32, 32}, 10, 1);
  std::mt19937_64 rng(0);
  std::vector<int> labels;
  std::vector<std::size_t> idx{0, 1, 2};
  auto plain = detail::gather_batch<double>(ds, idx, false, rng, labels);
  auto aug = detail::gather_batch<double>(ds, idx, true, rng, labels);
  EXPECT_EQ(aug->shape, plain->shape);
  EXPECT_EQ(labels, (std::vector<int>{ds.labels[0], ds.labels[1], ds.labels[2]}));
  for (double v : aug->data) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
}

TEST(Moped, UnitWeightGivesKnownRho) {
  Tensor<double> w({2}, std::vector<double>{1.0, 0.0});
  auto p = moped_params<double>(w, 0.1);
  EXPECT_NEAR(p.rho->data[0], std::log(std::expm1(0.1)), 1e-12);
  EXPECT_NEAR(p.rho->data[0], -2.2522, 1e-4);
  EXPECT_NEAR(softplus_value(p.rho->data[1]), 1e-4, 1e-12);
  EXPECT_DOUBLE_EQ(p.mu->data[0], 1.0);
  EXPECT_DOUBLE_EQ(p.prior_mu->data[0], 1.0);
  EXPECT_DOUBLE_EQ(p.prior_sigma->data[1], 1.0);
  EXPECT_THROW(moped_params<double>(w, 0.0), std::invalid_argument);
}

TEST(Moped, InitialKlMatchesClosedForm) {
  // With prior N(w, 1) and sigma = 0.1|w| the KL per element is
  // -ln(sigma) + sigma^2 / 2 - 1/2.
  auto det = toy_net<double>(false, 3);
  auto bnn = toy_net<double>(true, 9);
  const auto mle = make_checkpoint(det);
  apply_moped(bnn, mle, 0.1);
  long double expected = 0;
  for (const auto& [name, t] : mle.tensors) {
    for (double w : t.data) {
      const long double s = std::max(0.1L * std::abs(static_cast<long double>(w)), 1e-4L);
      expected += -std::log(s) + s * s / 2 - 0.5L;
    }
  }
  EXPECT_NEAR(total_kl(bnn), static_cast<double>(expected), 1e-6 * static_cast<double>(expected));
  auto x = pt::synthetic_dataset(3, {1, 8, 8}, 4, 1);
  Tensor<double> xt(x.images.shape);
  for (std::size_t i = 0; i < xt.numel(); ++i) xt.data[i] = x.images.data[i];
  EXPECT_EQ(bnn.predict_logits(xt).data, det.predict_logits(xt).data);
}

TEST(Moped, CopiesBatchNormAndRejectsMismatch) {
  auto det = build_resnet20<float>(10, false, 1);
  for (auto& nt : det.tensors())
    if (nt.name == "bn1.running_mean") nt.value->data[0] = 0.25f;
  auto bnn = build_resnet20<float>(10, true, 2);
  apply_moped(bnn, make_checkpoint(det), 0.1);
  for (auto& nt : bnn.tensors())
    if (nt.name == "bn1.running_mean") EXPECT_FLOAT_EQ(nt.value->data[0], 0.25f);
  auto scnn_bnn = build_scnn<float>(10, true, 2);
  EXPECT_THROW(apply_moped(scnn_bnn, make_checkpoint(det), 0.1), std::invalid_argument);
  EXPECT_THROW(apply_moped(bnn, make_checkpoint(bnn), 0.1), std::invalid_argument);
}

TEST(Bayesian, ElboDecreasesAfterFirstEpoch) {
  auto ds = pt::striped_dataset(256, {1, 8, 8}, 4, 7);
  for (std::uint64_t seed : {0, 1, 2}) {
    auto det = toy_net<double>(false, seed);
    auto cfg = quick_config(1);
    cfg.seed = seed;
    train_deterministic(det, ds, cfg);
    auto bnn = toy_net<double>(true, seed);
    apply_moped(bnn, make_checkpoint(det), 0.1);
    const auto before = evaluate_elbo(bnn, ds, cfg, 100);
    auto log = train_bayesian(bnn, ds, cfg).log;
    const auto after = evaluate_elbo(bnn, ds, cfg, 100);
    EXPECT_LT(after.total(), before.total()) << "seed " << seed;
    ASSERT_EQ(log.size(), 1u);
    EXPECT_NEAR(log[0].kl, after.kl_term, 1e-12);
    EXPECT_GT(after.kl_term, 0.0);
  }
}

TEST(Bayesian, NoKlTinySigmaTracksDeterministicTrainer) {
  auto ds = pt::striped_dataset(64, {1, 8, 8}, 4, 7);
  auto cfg = quick_config(2);
  cfg.kl_scale = 0.0;
  cfg.train_sigma = false;
  cfg.sigma_floor = 1e-9;
  auto det = toy_net<double>(false, 4);
  auto bnn = toy_net<double>(true, 4);
  for (auto& nv : bnn.variational_params())
    for (auto& r : nv.params->rho->data) r = inverse_softplus(1e-9);
  train_deterministic(det, ds, cfg);
  train_bayesian(bnn, ds, cfg);
  auto a = make_checkpoint(det), b = make_checkpoint(bnn);
  for (const auto& [name, t] : a.tensors) {
    const auto& mu = b.at(name + ".mu");
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_NEAR(t.data[i], mu.data[i], 1e-5) << name;
  }
}

TEST(Bayesian, SigmaFloorHoldsAndRunsReproduce) {
  auto ds = pt::striped_dataset(64, {1, 8, 8}, 4, 7);
  auto cfg = quick_config(2);
  cfg.mc_train_samples = 2;
  cfg.lr.initial = 0.5;
  auto run = [&] {
    auto bnn = toy_net<float>(true, 4);
    auto r = train_bayesian(bnn, ds, cfg);
    for (auto& nv : bnn.variational_params())
      for (float rho : nv.params->rho->data) EXPECT_GE(softplus_value(static_cast<double>(rho)), 0.99e-4);
    return r.checkpoint;
  };
  EXPECT_TRUE(run() == run());
  auto det = toy_net<float>(false, 1);
  EXPECT_THROW(train_bayesian(det, ds, cfg), std::invalid_argument);
}

TEST(Bayesian, RhoStepScaleMovesOnlySigmaFaster) {
  auto ds = pt::striped_dataset(64, {1, 8, 8}, 4, 7);
  auto cfg = quick_config(1);
  auto det = toy_net<double>(false, 4);
  train_deterministic(det, ds, cfg);
  auto sigma_shift = [&](double scale) {
    auto bnn = toy_net<double>(true, 4);
    apply_moped(bnn, make_checkpoint(det), 0.1);
    auto before = make_checkpoint(bnn);
    cfg.rho_lr_scale = scale;
    train_bayesian(bnn, ds, cfg);
    auto after = make_checkpoint(bnn);
    double shift = 0;
    for (const auto& [name, t] : after.tensors)
      if (name.ends_with(".rho"))
        for (std::size_t i = 0; i < t.numel(); ++i) shift += std::abs(t.data[i] - before.at(name).data[i]);
    return shift;
  };
  const double plain = sigma_shift(1.0), scaled = sigma_shift(20.0);
  EXPECT_GT(plain, 0.0);
  EXPECT_GT(scaled, 5.0 * plain);
}

TEST(TrainingLog, CsvColumns) {
  std::vector<EpochLog> log{{1, "train", 0.5, 90.0, 0.01}};
  EXPECT_EQ(format_training_log(log), "epoch,split,loss,accuracy,kl\n1,train,0.5,90,0.01\n");
}
