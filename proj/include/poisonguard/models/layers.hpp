#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "poisonguard/models/variational.hpp"
#include "poisonguard/tensor/ops.hpp"

namespace poisonguard {

enum class LayerKind { conv, dense, relu, maxpool, batchnorm, avgpool, residual_block, flatten };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::residual_block: return "residual-block";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind;
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  bool variational = false;
  std::optional<std::string> tap_name;
};

/// `mean` uses posterior means (or plain weights); `sample` draws weights
/// with Flipout.
enum class WeightMode { mean, sample };

template <typename T>
struct ForwardContext {
  Graph<T>& graph;
  bool training = false;
  WeightMode weights = WeightMode::mean;
  std::mt19937_64* noise_rng = nullptr;
  std::mt19937_64* sign_rng = nullptr;
  std::map<std::string, Var<T>>* taps = nullptr;

  bool sampling() const { return weights == WeightMode::sample; }
};

template <typename T>
struct NamedTensor {
  std::string name;
  Var<T> value;
  bool trainable;
};

template <typename T>
struct NamedVariational {
  std::string name;
  VariationalParams<T>* params;
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) = 0;
  virtual LayerSpec spec() const = 0;
  virtual void collect(std::vector<NamedTensor<T>>&) {}
  virtual void collect_variational(std::vector<NamedVariational<T>>&) {}
  virtual void initialize(std::mt19937_64&) {}

  void set_tap(std::string name) { tap_ = std::move(name); }
  const std::optional<std::string>& tap() const { return tap_; }

 protected:
  std::optional<std::string> tap_;
};

namespace detail {

template <typename T>
void he_normal(Tensor<T>& w, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : w.data) v = static_cast<T>(normal(rng));
}

template <typename T>
void fill(Tensor<T>& t, T value) {
  std::fill(t.data.begin(), t.data.end(), value);
}

template <typename T>
void collect_variational_tensors(const std::string& prefix, VariationalParams<T>& p,
                                 std::vector<NamedTensor<T>>& out) {
  out.push_back({prefix + ".mu", p.mu, true});
  out.push_back({prefix + ".rho", p.rho, true});
  out.push_back({prefix + ".prior_mu", p.prior_mu, false});
  out.push_back({prefix + ".prior_sigma", p.prior_sigma, false});
}

// Initial spread for freshly built variational layers; MOPED initialization
// overwrites it.
inline constexpr double kDefaultInitRho = -6.0;

}  // namespace detail

/// Weight (and optional bias) of a conv or dense layer, either plain or as a
/// mean-field posterior.
template <typename T>
class WeightedLayer : public Layer<T> {
 public:
  WeightedLayer(std::string name, Shape weight_shape, std::size_t bias_size, bool variational,
                std::size_t fan_in)
      : name_(std::move(name)), variational_(variational), fan_in_(fan_in) {
    if (variational_) {
      vweight_ = VariationalParams<T>(weight_shape, static_cast<T>(detail::kDefaultInitRho));
      if (bias_size) {
        vbias_ = VariationalParams<T>({bias_size}, static_cast<T>(detail::kDefaultInitRho));
      }
    } else {
      weight_ = make_param<T>(weight_shape);
      if (bias_size) bias_ = make_param<T>({bias_size});
    }
  }

  bool variational() const { return variational_; }
  bool has_bias() const { return variational_ ? static_cast<bool>(vbias_) : static_cast<bool>(bias_); }

  void collect(std::vector<NamedTensor<T>>& out) override {
    if (variational_) {
      detail::collect_variational_tensors(name_ + ".weight", *vweight_, out);
      if (vbias_) detail::collect_variational_tensors(name_ + ".bias", *vbias_, out);
    } else {
      out.push_back({name_ + ".weight", weight_, true});
      if (bias_) out.push_back({name_ + ".bias", bias_, true});
    }
  }

  void collect_variational(std::vector<NamedVariational<T>>& out) override {
    if (!variational_) return;
    out.push_back({name_ + ".weight", &*vweight_});
    if (vbias_) out.push_back({name_ + ".bias", &*vbias_});
  }

  void initialize(std::mt19937_64& rng) override {
    if (variational_) {
      detail::he_normal(*vweight_->mu, fan_in_, rng);
      if (vbias_) detail::fill(*vbias_->mu, T{0});
    } else {
      detail::he_normal(*weight_, fan_in_, rng);
      if (bias_) detail::fill(*bias_, T{0});
    }
  }

 protected:
  // Mean weights for a deterministic pass.
  Var<T> mean_weight() const { return variational_ ? vweight_->mu : weight_; }
  Var<T> mean_bias() const {
    if (variational_) return vbias_ ? vbias_->mu : Var<T>{};
    return bias_;
  }

  Var<T> sampled_bias(ForwardContext<T>& ctx) const {
    if (!vbias_) return {};
    auto eps = standard_normal<T>(vbias_->shape(), *ctx.noise_rng);
    return sample_param(ctx.graph, *vbias_, eps);
  }

  std::string name_;
  bool variational_;
  std::size_t fan_in_;
  Var<T> weight_, bias_;
  std::optional<VariationalParams<T>> vweight_, vbias_;
};

template <typename T>
class Conv2dLayer final : public WeightedLayer<T> {
 public:
  Conv2dLayer(std::string name, std::size_t in, std::size_t out, std::size_t kernel,
              std::size_t stride, std::size_t pad, bool bias, bool variational)
      : WeightedLayer<T>(std::move(name), {out, in, kernel, kernel}, bias ? out : 0,
                         variational, in * kernel * kernel),
        in_(in), out_(out), kernel_(kernel), stride_(stride), pad_(pad) {}

  /// Flipout: f(x; mu) + f(x * s_in; sigma * eps) * s_out with one shared
  /// eps per pass and independent sign vectors per sample.
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override {
    auto& g = ctx.graph;
    if (!this->variational_ || !ctx.sampling()) {
      return conv2d(g, x, this->mean_weight(), this->mean_bias(), stride_, pad_);
    }
    auto eps = standard_normal<T>(this->vweight_->shape(), *ctx.noise_rng);
    auto bias = this->sampled_bias(ctx);
    auto mean_out = conv2d(g, x, this->vweight_->mu, bias, stride_, pad_);
    const std::size_t N = x->dim(0);
    auto s_in = random_signs<T>(N, in_, *ctx.sign_rng);
    auto s_out = random_signs<T>(N, out_, *ctx.sign_rng);
    auto delta = param_perturbation(g, *this->vweight_, eps);
    auto pert = conv2d(g, channel_sign<T>(g, x, s_in), delta, Var<T>{}, stride_, pad_);
    return add(g, mean_out, channel_sign<T>(g, pert, s_out));
  }

  LayerSpec spec() const override {
    return {LayerKind::conv, this->name_, in_, out_, kernel_, stride_, this->variational_, this->tap_};
  }

 private:
  std::size_t in_, out_, kernel_, stride_, pad_;
};

template <typename T>
class DenseLayer final : public WeightedLayer<T> {
 public:
  DenseLayer(std::string name, std::size_t in, std::size_t out, bool variational)
      : WeightedLayer<T>(std::move(name), {in, out}, out, variational, in), in_(in), out_(out) {}

  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override {
    auto& g = ctx.graph;
    if (!this->variational_ || !ctx.sampling()) {
      return dense(g, x, this->mean_weight(), this->mean_bias());
    }
    auto eps = standard_normal<T>(this->vweight_->shape(), *ctx.noise_rng);
    auto bias = this->sampled_bias(ctx);
    auto mean_out = dense(g, x, this->vweight_->mu, bias);
    const std::size_t N = x->dim(0);
    auto s_in = random_signs<T>(N, in_, *ctx.sign_rng);
    auto s_out = random_signs<T>(N, out_, *ctx.sign_rng);
    auto delta = param_perturbation(g, *this->vweight_, eps);
    auto pert = dense(g, channel_sign<T>(g, x, s_in), delta, Var<T>{});
    return add(g, mean_out, channel_sign<T>(g, pert, s_out));
  }

  LayerSpec spec() const override {
    return {LayerKind::dense, this->name_, in_, out_, 0, 1, this->variational_, this->tap_};
  }

 private:
  std::size_t in_, out_;
};

template <typename T>
class ReluLayer final : public Layer<T> {
 public:
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override { return relu(ctx.graph, x); }
  LayerSpec spec() const override { return {LayerKind::relu, "relu", 0, 0, 0, 1, false, this->tap_}; }
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
 public:
  explicit MaxPoolLayer(std::size_t size) : size_(size) {}
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override {
    return maxpool2d(ctx.graph, x, size_);
  }
  LayerSpec spec() const override {
    return {LayerKind::maxpool, "maxpool", 0, 0, size_, size_, false, this->tap_};
  }

 private:
  std::size_t size_;
};

template <typename T>
class FlattenLayer final : public Layer<T> {
 public:
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override { return flatten(ctx.graph, x); }
  LayerSpec spec() const override { return {LayerKind::flatten, "flatten", 0, 0, 0, 1, false, this->tap_}; }
};

template <typename T>
class GlobalAvgPoolLayer final : public Layer<T> {
 public:
  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override {
    return global_avgpool(ctx.graph, x);
  }
  LayerSpec spec() const override { return {LayerKind::avgpool, "avgpool", 0, 0, 0, 1, false, this->tap_}; }
};

/// Deterministic affine batch norm, also inside Bayesian networks.
template <typename T>
class BatchNormLayer final : public Layer<T> {
 public:
  BatchNormLayer(std::string name, std::size_t channels)
      : name_(std::move(name)),
        channels_(channels),
        gamma_(make_param<T>({channels}, T{1})),
        beta_(make_param<T>({channels}, T{0})),
        running_mean_(make_var(Tensor<T>({channels}, T{0}))),
        running_var_(make_var(Tensor<T>({channels}, T{1}))) {}

  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override {
    return batchnorm2d(ctx.graph, x, gamma_, beta_, *running_mean_, *running_var_,
                       BatchNormOptions{.training = ctx.training});
  }

  LayerSpec spec() const override {
    return {LayerKind::batchnorm, name_, channels_, channels_, 0, 1, false, this->tap_};
  }

  void collect(std::vector<NamedTensor<T>>& out) override {
    out.push_back({name_ + ".gamma", gamma_, true});
    out.push_back({name_ + ".beta", beta_, true});
    out.push_back({name_ + ".running_mean", running_mean_, false});
    out.push_back({name_ + ".running_var", running_var_, false});
  }

  void initialize(std::mt19937_64&) override {
    detail::fill(*gamma_, T{1});
    detail::fill(*beta_, T{0});
    detail::fill(*running_mean_, T{0});
    detail::fill(*running_var_, T{1});
  }

 private:
  std::string name_;
  std::size_t channels_;
  Var<T> gamma_, beta_, running_mean_, running_var_;
};

/// Basic two-conv residual block with a parameter-free shortcut
/// (subsample + channel zero-pad when the shape changes).
template <typename T>
class ResidualBlock final : public Layer<T> {
 public:
  ResidualBlock(std::string name, std::size_t in, std::size_t out, std::size_t stride,
                bool variational)
      : name_(std::move(name)),
        in_(in),
        out_(out),
        stride_(stride),
        variational_(variational),
        conv_a_(name_ + ".conv_a", in, out, 3, stride, 1, false, variational),
        bn_a_(name_ + ".bn_a", out),
        conv_b_(name_ + ".conv_b", out, out, 3, 1, 1, false, variational),
        bn_b_(name_ + ".bn_b", out) {}

  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) override {
    auto& g = ctx.graph;
    auto h = relu(g, bn_a_.forward(conv_a_.forward(x, ctx), ctx));
    h = bn_b_.forward(conv_b_.forward(h, ctx), ctx);
    auto skip = (in_ == out_ && stride_ == 1) ? x : pad_shortcut(g, x, out_, stride_);
    return relu(g, add(g, h, skip));
  }

  LayerSpec spec() const override {
    return {LayerKind::residual_block, name_, in_, out_, 3, stride_, variational_, this->tap_};
  }

  void collect(std::vector<NamedTensor<T>>& out) override {
    conv_a_.collect(out);
    bn_a_.collect(out);
    conv_b_.collect(out);
    bn_b_.collect(out);
  }
  void collect_variational(std::vector<NamedVariational<T>>& out) override {
    conv_a_.collect_variational(out);
    conv_b_.collect_variational(out);
  }
  void initialize(std::mt19937_64& rng) override {
    conv_a_.initialize(rng);
    bn_a_.initialize(rng);
    conv_b_.initialize(rng);
    bn_b_.initialize(rng);
  }

 private:
  std::string name_;
  std::size_t in_, out_, stride_;
  bool variational_;
  Conv2dLayer<T> conv_a_;
  BatchNormLayer<T> bn_a_;
  Conv2dLayer<T> conv_b_;
  BatchNormLayer<T> bn_b_;
};

}  // namespace poisonguard
