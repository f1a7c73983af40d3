#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poisonguard/data/dataset.hpp"
#include "poisonguard/models/checkpoint.hpp"
#include "poisonguard/models/network.hpp"

namespace poisonguard {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LrSchedule {
  double initial = 0.01;
  std::vector<std::size_t> milestones;  // epochs at which lr is multiplied by `decay`
  double decay = 0.1;

  double at(std::size_t epoch) const {
    double lr = initial;
    for (auto m : milestones) {
      if (epoch >= m) lr *= decay;
    }
    return lr;
  }
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  LrSchedule lr;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  bool augment = false;  // random crop (pad 4) + horizontal flip

  // Bayesian training only.
  std::size_t mc_train_samples = 1;
  std::optional<double> kl_scale;  // unset: 1 / N_train
  double moped_delta = 0.1;
  double sigma_floor = 1e-4;
  bool train_sigma = true;
  // Step-size multiplier for the rho tensors. The KL gradient on rho is
  // O(kl_scale), so with kl_scale = 1/N plain SGD leaves sigma at its
  // initial value; this preconditions rho without changing the objective.
  double rho_lr_scale = 1.0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(lr.initial > 0.0)) throw std::invalid_argument("train config: learning rate must be > 0");
    if (mc_train_samples < 1) throw std::invalid_argument("train config: mc_train_samples must be >= 1");
    if (kl_scale && *kl_scale < 0.0) throw std::invalid_argument("train config: kl_scale must be >= 0");
    if (!(moped_delta > 0.0)) throw std::invalid_argument("train config: moped_delta must be > 0");
    if (!(sigma_floor > 0.0)) throw std::invalid_argument("train config: sigma_floor must be > 0");
    if (!(rho_lr_scale > 0.0)) throw std::invalid_argument("train config: rho_lr_scale must be > 0");
  }
};

/// One row of the training log. For Bayesian training `loss` is the data
/// term (mean cross-entropy) and `kl` the weighted KL term, so the minimized
/// objective is loss + kl; deterministic runs log kl = 0.
struct EpochLog {
  std::size_t epoch;
  std::string split;
  double loss;
  double accuracy;
  double kl;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

using EpochCallback = std::function<void(const EpochLog&)>;

inline std::string format_training_log(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,split,loss,accuracy,kl\n";
  os << std::setprecision(10);
  for (const auto& e : log) {
    os << e.epoch << ',' << e.split << ',' << e.loss << ',' << e.accuracy << ',' << e.kl << '\n';
  }
  return os.str();
}

/// SGD with classical momentum and L2 weight decay:
/// v <- m v + (g + wd p);  p <- p - lr v.
template <typename T>
class Sgd {
 public:
  /// `lr_scale`, when given, multiplies the step size per parameter tensor.
  Sgd(std::vector<Var<T>> params, double momentum, double weight_decay, std::vector<double> lr_scale = {})
      : params_(std::move(params)), lr_scale_(std::move(lr_scale)), momentum_(momentum), weight_decay_(weight_decay) {
    if (lr_scale_.empty()) lr_scale_.assign(params_.size(), 1.0);
    if (lr_scale_.size() != params_.size()) throw std::invalid_argument("Sgd: one lr scale per parameter");
    for (const auto& p : params_) velocity_.emplace_back(p->numel(), T{0});
  }

  void step(double lr) {
    const T m = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      if (!p.has_grad()) continue;
      const T a = static_cast<T>(lr * lr_scale_[k]);
      auto& v = velocity_[k];
      for (std::size_t i = 0; i < p.numel(); ++i) {
        v[i] = m * v[i] + p.grad[i] + wd * p.data[i];
        p.data[i] -= a * v[i];
      }
    }
  }

  void zero_grad() { zero_grads(params_); }

 private:
  std::vector<Var<T>> params_;
  std::vector<double> lr_scale_;
  std::vector<std::vector<T>> velocity_;
  double momentum_, weight_decay_;
};

namespace detail {

/// Copies samples `idx` into a batch tensor, optionally with random
/// crop (zero pad 4) and horizontal flip.
template <typename T>
Var<T> gather_batch(const LabeledDataset& data, std::span<const std::size_t> idx, bool augment,
                    std::mt19937_64& rng, std::vector<int>& labels) {
  const Shape chw = data.image_shape();
  const std::size_t C = chw[0], H = chw[1], W = chw[2], stride = C * H * W;
  Shape shape{idx.size(), C, H, W};
  auto x = make_var(Tensor<T>(shape));
  labels.resize(idx.size());
  std::uniform_int_distribution<int> shift(-4, 4);
  std::bernoulli_distribution flip(0.5);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const float* src = data.images.data.data() + idx[b] * stride;
    T* dst = x->data.data() + b * stride;
    labels[b] = data.labels[idx[b]];
    if (!augment) {
      for (std::size_t k = 0; k < stride; ++k) dst[k] = static_cast<T>(src[k]);
      continue;
    }
    const int dy = shift(rng), dx = shift(rng);
    const bool mirror = flip(rng);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          const long si = static_cast<long>(i) + dy;
          const long jj = mirror ? static_cast<long>(W - 1 - j) : static_cast<long>(j);
          const long sj = jj + dx;
          T v{0};
          if (si >= 0 && sj >= 0 && si < static_cast<long>(H) && sj < static_cast<long>(W)) {
            v = static_cast<T>(src[(c * H + si) * W + sj]);
          }
          dst[(c * H + i) * W + j] = v;
        }
  }
  return x;
}

inline std::size_t count_correct(std::span<const int> labels, const auto& probs, std::size_t K) {
  std::size_t correct = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (probs.data[n * K + k] > probs.data[n * K + best]) best = k;
    }
    if (static_cast<int>(best) == labels[n]) ++correct;
  }
  return correct;
}

template <typename T>
void check_finite(T loss, std::size_t epoch, std::size_t step, const char* what) {
  if (!std::isfinite(static_cast<double>(loss))) {
    throw TrainingDiverged(std::string(what) + " became non-finite at epoch " +
                           std::to_string(epoch) + ", step " + std::to_string(step));
  }
}

}  // namespace detail

/// Mean cross-entropy minimization with SGD + momentum. Trains `net` in
/// place and returns the final parameters with a per-epoch log.
template <typename T>
TrainResult train_deterministic(Network<T>& net, const LabeledDataset& data, const TrainConfig& cfg,
                                const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (net.variational()) throw std::invalid_argument("train_deterministic: network is variational");
  if (data.size() == 0) throw std::invalid_argument("train_deterministic: empty dataset");
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::mt19937_64 augment_rng(cfg.seed ^ 0xa5a5a5a5ULL);
  Sgd<T> opt(net.trainable(), cfg.momentum, cfg.weight_decay);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> labels;
  TrainResult result;
  const std::size_t K = net.num_classes();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = cfg.lr.at(epoch);
    double loss_sum = 0.0;
    std::size_t correct = 0, step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      auto x = detail::gather_batch<T>(data, idx, cfg.augment, augment_rng, labels);
      Graph<T> g;
      ForwardContext<T> ctx{g};
      ctx.training = true;
      auto ce = softmax_cross_entropy(g, net.forward(x, ctx), labels);
      detail::check_finite(ce.loss->data[0], epoch, step, "cross-entropy loss");
      opt.zero_grad();
      g.backward(ce.loss);
      opt.step(lr);
      loss_sum += static_cast<double>(ce.loss->data[0]) * idx.size();
      correct += detail::count_correct(labels, *ce.probs, K);
    }
    EpochLog e{epoch + 1, "train", loss_sum / data.size(), 100.0 * correct / data.size(), 0.0};
    result.log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  opt.zero_grad();
  result.checkpoint = make_checkpoint(net);
  return result;
}

// ---------------------------------------------------------------------------
// MOPED-style initialization of a mean-field posterior from MLE weights.

/// Posterior mean = w, posterior sigma = max(delta * |w|, sigma_floor),
/// prior = N(w, 1).
template <typename T>
VariationalParams<T> moped_params(const Tensor<double>& w, double delta, double sigma_floor = 1e-4) {
  if (!(delta > 0.0)) throw std::invalid_argument("moped: delta must be > 0");
  VariationalParams<T> p(w.shape, T{0});
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double sigma = std::max(delta * std::abs(w.data[i]), sigma_floor);
    p.mu->data[i] = static_cast<T>(w.data[i]);
    p.rho->data[i] = static_cast<T>(inverse_softplus(sigma));
    p.prior_mu->data[i] = static_cast<T>(w.data[i]);
    p.prior_sigma->data[i] = T{1};
  }
  return p;
}

/// Initializes every variational parameter group of `bayes` from the
/// matching weight in the deterministic checkpoint `mle`; deterministic
/// tensors (batch norm) are copied by name.
template <typename T>
std::vector<std::pair<std::string, VariationalParams<T>>> moped_init(const Checkpoint& mle,
                                                                      double delta,
                                                                      double sigma_floor = 1e-4) {
  if (mle.variational) throw std::invalid_argument("moped_init: source checkpoint is variational");
  std::vector<std::pair<std::string, VariationalParams<T>>> out;
  for (const auto& [name, t] : mle.tensors) {
    const bool weight_like = name.ends_with(".weight") || name.ends_with(".bias");
    if (weight_like) out.emplace_back(name, moped_params<T>(t, delta, sigma_floor));
  }
  return out;
}

template <typename T>
void apply_moped(Network<T>& bayes, const Checkpoint& mle, double delta, double sigma_floor = 1e-4) {
  if (!bayes.variational()) throw std::invalid_argument("apply_moped: target network is not variational");
  if (mle.arch != bayes.architecture() || mle.num_classes != bayes.num_classes()) {
    throw std::invalid_argument("apply_moped: architecture mismatch");
  }
  auto groups = moped_init<T>(mle, delta, sigma_floor);
  for (auto& nv : bayes.variational_params()) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == nv.name; });
    if (it == groups.end()) throw std::invalid_argument("apply_moped: no MLE tensor for " + nv.name);
    if (it->second.shape() != nv.params->shape()) {
      throw ShapeError("apply_moped: shape mismatch for " + nv.name);
    }
    nv.params->mu->data = it->second.mu->data;
    nv.params->rho->data = it->second.rho->data;
    nv.params->prior_mu->data = it->second.prior_mu->data;
    nv.params->prior_sigma->data = it->second.prior_sigma->data;
  }
  for (auto& nt : bayes.tensors()) {
    const bool variational_part = nt.name.ends_with(".mu") || nt.name.ends_with(".rho") ||
                                  nt.name.ends_with(".prior_mu") || nt.name.ends_with(".prior_sigma");
    if (variational_part) continue;
    const auto& src = mle.at(nt.name);
    for (std::size_t i = 0; i < src.numel(); ++i) nt.value->data[i] = static_cast<T>(src.data[i]);
  }
}

// ---------------------------------------------------------------------------
// Mean-field variational training (ELBO with Flipout draws).

template <typename T>
double total_kl(const Network<T>& net) {
  double kl = 0.0;
  for (const auto& nv : net.variational_params()) kl += kl_to_prior(*nv.params);
  return kl;
}

inline double resolve_kl_scale(const TrainConfig& cfg, std::size_t n_train) {
  return cfg.kl_scale ? *cfg.kl_scale : 1.0 / static_cast<double>(n_train);
}

template <typename T>
void clamp_sigma(Network<T>& net, double sigma_floor) {
  const T rho_floor = static_cast<T>(inverse_softplus(sigma_floor));
  for (auto& nv : net.variational_params()) {
    for (auto& r : nv.params->rho->data) {
      if (!std::isfinite(static_cast<double>(r))) throw TrainingDiverged("posterior rho became non-finite");
      r = std::max(r, rho_floor);
    }
  }
}

struct ElboValue {
  double data_term;  // mean cross-entropy
  double kl_term;    // kl_scale * KL
  double total() const { return data_term + kl_term; }
};

/// Objective over a whole dataset with one Flipout draw per batch,
/// batch norm in inference mode.
template <typename T>
ElboValue evaluate_elbo(const Network<T>& net, const LabeledDataset& data, const TrainConfig& cfg,
                        std::uint64_t seed) {
  std::mt19937_64 noise(seed), signs(seed ^ 0x5151ULL), unused(0);
  std::vector<int> labels;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  double ce_sum = 0.0;
  for (std::size_t start = 0; start < idx.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(idx.size(), start + cfg.batch_size);
    auto x = detail::gather_batch<T>(data, std::span(idx).subspan(start, end - start), false, unused, labels);
    Graph<T> g(false);
    ForwardContext<T> ctx{g};
    ctx.weights = WeightMode::sample;
    ctx.noise_rng = &noise;
    ctx.sign_rng = &signs;
    auto ce = softmax_cross_entropy(g, net.forward(x, ctx), labels);
    ce_sum += static_cast<double>(ce.loss->data[0]) * (end - start);
  }
  return {ce_sum / data.size(), resolve_kl_scale(cfg, data.size()) * total_kl(net)};
}

/// Minimizes mean_draws(CE) + kl_scale * sum_layers KL(q || p). The
/// network must already hold a MOPED initialization.
template <typename T>
TrainResult train_bayesian(Network<T>& net, const LabeledDataset& data, const TrainConfig& cfg,
                           const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (!net.variational()) throw std::invalid_argument("train_bayesian: network is not variational");
  if (data.size() == 0) throw std::invalid_argument("train_bayesian: empty dataset");
  std::mt19937_64 shuffle_rng(cfg.seed);
  std::mt19937_64 augment_rng(cfg.seed ^ 0xa5a5a5a5ULL);
  std::mt19937_64 noise_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 sign_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4fULL);

  auto groups = net.variational_params();
  std::vector<Var<T>> params;
  std::vector<double> lr_scale;
  for (const auto& nt : net.tensors()) {
    if (!nt.trainable) continue;
    const bool rho = nt.name.ends_with(".rho");
    if (!cfg.train_sigma && rho) continue;
    params.push_back(nt.value);
    lr_scale.push_back(rho ? cfg.rho_lr_scale : 1.0);
  }
  Sgd<T> opt(params, cfg.momentum, cfg.weight_decay, lr_scale);
  const double kl_scale = resolve_kl_scale(cfg, data.size());
  clamp_sigma(net, cfg.sigma_floor);

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<int> labels;
  TrainResult result;
  const std::size_t K = net.num_classes();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lr = cfg.lr.at(epoch);
    double ce_sum = 0.0;
    std::size_t correct = 0, step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, end - start);
      auto x = detail::gather_batch<T>(data, idx, cfg.augment, augment_rng, labels);
      Graph<T> g;
      ForwardContext<T> ctx{g};
      ctx.training = true;
      ctx.weights = WeightMode::sample;
      ctx.noise_rng = &noise_rng;
      ctx.sign_rng = &sign_rng;

      Var<T> data_term;
      double ce_value = 0.0;
      for (std::size_t m = 0; m < cfg.mc_train_samples; ++m) {
        auto ce = softmax_cross_entropy(g, net.forward(x, ctx), labels);
        ce_value += static_cast<double>(ce.loss->data[0]);
        if (m == 0) correct += detail::count_correct(labels, *ce.probs, K);
        data_term = data_term ? add(g, data_term, ce.loss) : ce.loss;
      }
      ce_value /= static_cast<double>(cfg.mc_train_samples);
      data_term = scale(g, data_term, static_cast<T>(1.0 / cfg.mc_train_samples));
      Var<T> loss = data_term;
      if (kl_scale > 0.0) {
        Var<T> kl;
        for (const auto& nv : groups) {
          auto term = kl_to_prior(g, *nv.params);
          kl = kl ? add(g, kl, term) : term;
        }
        if (kl) loss = add(g, data_term, scale(g, kl, static_cast<T>(kl_scale)));
      }
      detail::check_finite(loss->data[0], epoch, step, "ELBO loss");
      opt.zero_grad();
      g.backward(loss);
      opt.step(lr);
      clamp_sigma(net, cfg.sigma_floor);
      ce_sum += ce_value * idx.size();
    }
    EpochLog e{epoch + 1, "train", ce_sum / data.size(), 100.0 * correct / data.size(),
               kl_scale * total_kl(net)};
    result.log.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  opt.zero_grad();
  result.checkpoint = make_checkpoint(net);
  return result;
}

}  // namespace poisonguard
