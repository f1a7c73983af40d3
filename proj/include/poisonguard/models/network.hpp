#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "poisonguard/models/layers.hpp"

namespace poisonguard {

enum class Architecture : std::uint32_t { scnn = 1, resnet20 = 2 };

inline const char* to_string(Architecture a) {
  return a == Architecture::scnn ? "scnn" : "resnet20";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "scnn") return Architecture::scnn;
  if (s == "resnet20") return Architecture::resnet20;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

class UnknownTap : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Sequential stack of layers with named feature taps.
template <typename T>
class Network {
 public:
  Network(Architecture arch, std::size_t num_classes, Shape input_shape, bool variational)
      : arch_(arch), num_classes_(num_classes), input_shape_(std::move(input_shape)),
        variational_(variational) {}

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(std::optional<std::string> tap, Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    if (tap) {
      if (!tap_names_.insert(*tap).second) {
        throw std::invalid_argument("duplicate tap name '" + *tap + "'");
      }
      layer->set_tap(*tap);
    }
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Var<T> forward(const Var<T>& x, ForwardContext<T>& ctx) const {
    if (x->rank() != input_shape_.size() + 1 ||
        !std::equal(input_shape_.begin(), input_shape_.end(), x->shape.begin() + 1)) {
      throw ShapeError("network expects input [N," + shape_str(input_shape_).substr(1) +
                       ", got " + shape_str(x->shape));
    }
    if (ctx.sampling() && (!ctx.noise_rng || !ctx.sign_rng)) {
      throw std::logic_error("sampled forward pass needs noise and sign generators");
    }
    Var<T> h = x;
    for (const auto& layer : layers_) {
      h = layer->forward(h, ctx);
      if (ctx.taps && layer->tap()) (*ctx.taps)[*layer->tap()] = h;
    }
    return h;
  }

  /// Deterministic forward pass (posterior means, inference batch norm).
  Tensor<T> predict_logits(const Tensor<T>& x) const {
    Graph<T> g(false);
    ForwardContext<T> ctx{g};
    return *forward(make_var(x), ctx);
  }

  std::vector<NamedTensor<T>> tensors() const {
    std::vector<NamedTensor<T>> out;
    for (const auto& l : layers_) l->collect(out);
    return out;
  }

  std::vector<Var<T>> trainable() const {
    std::vector<Var<T>> out;
    for (auto& nt : tensors()) {
      if (nt.trainable) out.push_back(nt.value);
    }
    return out;
  }

  std::vector<NamedVariational<T>> variational_params() const {
    std::vector<NamedVariational<T>> out;
    for (const auto& l : layers_) l->collect_variational(out);
    return out;
  }

  /// Number of trainable scalars (posterior mean and rho both count).
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : trainable()) n += p->numel();
    return n;
  }

  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& l : layers_) l->initialize(rng);
  }

  std::vector<LayerSpec> describe() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l->spec());
    return out;
  }

  bool has_tap(const std::string& name) const { return tap_names_.count(name) > 0; }

  Architecture architecture() const { return arch_; }
  std::size_t num_classes() const { return num_classes_; }
  const Shape& input_shape() const { return input_shape_; }
  bool variational() const { return variational_; }

 private:
  Architecture arch_;
  std::size_t num_classes_;
  Shape input_shape_;
  bool variational_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::set<std::string> tap_names_;
};

inline constexpr const char* kPenultimateTap = "penultimate";

/// conv 32@5x5 -> relu -> pool2 -> conv 64@5x5 -> relu -> pool2 -> flatten
/// -> dense 128 [penultimate] -> relu -> dense K. Input [1, 28, 28].
template <typename T>
Network<T> build_scnn(std::size_t num_classes, bool variational, std::uint64_t seed = 0) {
  if (num_classes < 2) throw std::invalid_argument("build_scnn: need at least 2 classes");
  Network<T> net(Architecture::scnn, num_classes, {1, 28, 28}, variational);
  net.template add<Conv2dLayer<T>>(std::nullopt, "conv1", 1, 32, 5, 1, 0, true, variational);
  net.template add<ReluLayer<T>>(std::nullopt);
  net.template add<MaxPoolLayer<T>>(std::nullopt, 2);
  net.template add<Conv2dLayer<T>>(std::nullopt, "conv2", 32, 64, 5, 1, 0, true, variational);
  net.template add<ReluLayer<T>>(std::nullopt);
  net.template add<MaxPoolLayer<T>>(std::nullopt, 2);
  net.template add<FlattenLayer<T>>(std::nullopt);
  net.template add<DenseLayer<T>>(std::string(kPenultimateTap), "fc1", 64 * 4 * 4, 128, variational);
  net.template add<ReluLayer<T>>(std::nullopt);
  net.template add<DenseLayer<T>>(std::nullopt, "fc2", 128, num_classes, variational);
  net.initialize(seed);
  return net;
}

/// CIFAR ResNet-20: 3 stages x 3 basic blocks, widths 16/32/64, global
/// average pool [penultimate], dense K. Input [3, 32, 32].
template <typename T>
Network<T> build_resnet20(std::size_t num_classes, bool variational, std::uint64_t seed = 0) {
  if (num_classes < 2) throw std::invalid_argument("build_resnet20: need at least 2 classes");
  Network<T> net(Architecture::resnet20, num_classes, {3, 32, 32}, variational);
  net.template add<Conv2dLayer<T>>(std::nullopt, "conv1", 3, 16, 3, 1, 1, false, variational);
  net.template add<BatchNormLayer<T>>(std::nullopt, "bn1", 16);
  net.template add<ReluLayer<T>>(std::nullopt);
  const std::size_t widths[] = {16, 32, 64};
  std::size_t in = 16;
  for (std::size_t stage = 0; stage < 3; ++stage) {
    for (std::size_t b = 0; b < 3; ++b) {
      const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
      net.template add<ResidualBlock<T>>(
          std::nullopt, "stage" + std::to_string(stage + 1) + ".block" + std::to_string(b), in,
          widths[stage], stride, variational);
      in = widths[stage];
    }
  }
  net.template add<GlobalAvgPoolLayer<T>>(std::string(kPenultimateTap));
  net.template add<DenseLayer<T>>(std::nullopt, "fc", 64, num_classes, variational);
  net.initialize(seed);
  return net;
}

template <typename T>
Network<T> build_network(Architecture arch, std::size_t num_classes, bool variational,
                         std::uint64_t seed = 0) {
  return arch == Architecture::scnn ? build_scnn<T>(num_classes, variational, seed)
                                    : build_resnet20<T>(num_classes, variational, seed);
}

}  // namespace poisonguard
