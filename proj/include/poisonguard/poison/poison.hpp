#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poisonguard/data/dataset.hpp"

namespace poisonguard {

enum class TriggerKind { four_pixel, square };

struct PixelCoord {
  std::size_t row;
  std::size_t col;
  bool operator==(const PixelCoord&) const = default;
};

/// Backdoor pattern: a list of pixels or a rectangular region set to
/// `intensity` in every channel.
struct TriggerSpec {
  TriggerKind kind = TriggerKind::four_pixel;
  std::vector<PixelCoord> pixels;
  std::size_t row0 = 0, col0 = 0, height = 0, width = 0;
  float intensity = 1.0f;

  /// Every spatial position the trigger writes.
  std::vector<PixelCoord> positions() const {
    if (kind == TriggerKind::four_pixel) return pixels;
    std::vector<PixelCoord> out;
    for (std::size_t r = row0; r < row0 + height; ++r)
      for (std::size_t c = col0; c < col0 + width; ++c) out.push_back({r, c});
    return out;
  }

  void validate(std::size_t image_h, std::size_t image_w) const {
    if (!(intensity >= 0.0f && intensity <= 1.0f)) {
      throw std::invalid_argument("trigger intensity must lie in [0,1]");
    }
    if (kind == TriggerKind::square && (height == 0 || width == 0)) {
      throw std::invalid_argument("square trigger needs a non-empty region");
    }
    for (const auto& p : positions()) {
      if (p.row >= image_h || p.col >= image_w) {
        throw std::out_of_range("trigger coordinate (" + std::to_string(p.row) + "," +
                                std::to_string(p.col) + ") outside " + std::to_string(image_h) +
                                "x" + std::to_string(image_w) + " image");
      }
    }
  }

  bool operator==(const TriggerSpec&) const = default;
};

/// Four bottom-right pixels for 28x28 digits.
inline TriggerSpec mnist_trigger() {
  TriggerSpec t;
  t.kind = TriggerKind::four_pixel;
  t.pixels = {{24, 24}, {24, 26}, {26, 24}, {26, 26}};
  return t;
}

/// 4x4 square at rows/cols 27-30 for 32x32 colour images.
inline TriggerSpec cifar_trigger() {
  TriggerSpec t;
  t.kind = TriggerKind::square;
  t.row0 = 27;
  t.col0 = 27;
  t.height = 4;
  t.width = 4;
  return t;
}

struct PoisonConfig {
  TriggerSpec trigger;
  double fraction = 0.0;  // percent of the clean set, added as extra samples
  std::uint64_t seed = 0;

  void validate() const {
    if (!(fraction >= 0.0 && fraction <= 100.0)) {
      throw std::invalid_argument("poison fraction must lie in [0,100]");
    }
  }
};

/// Writes the trigger into `image` ([C,H,W] span) in place.
inline void stamp_trigger(std::span<float> image, const Shape& chw, const TriggerSpec& spec) {
  const std::size_t C = chw.at(0), H = chw.at(1), W = chw.at(2);
  for (const auto& p : spec.positions()) {
    for (std::size_t c = 0; c < C; ++c) image[(c * H + p.row) * W + p.col] = spec.intensity;
  }
}

inline Tensor<float> apply_trigger(const Tensor<float>& image, const TriggerSpec& spec) {
  expect_rank(image.shape, 3, "apply_trigger image");
  spec.validate(image.dim(1), image.dim(2));
  Tensor<float> out = image;
  out.grad.clear();
  stamp_trigger(out.data, out.shape, spec);
  return out;
}

/// Next class in circular order.
inline int remap_label(int y, std::size_t num_classes) {
  if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
    throw std::out_of_range("remap_label: label " + std::to_string(y) + " outside [0," +
                            std::to_string(num_classes) + ")");
  }
  return static_cast<int>((static_cast<std::size_t>(y) + 1) % num_classes);
}

/// Triggers every sample, remaps every label and flags everything as
/// poisoned. Order and size are preserved.
inline LabeledDataset poison_entire(const LabeledDataset& ds, const TriggerSpec& spec) {
  const Shape chw = ds.image_shape();
  spec.validate(chw.at(1), chw.at(2));
  LabeledDataset out = ds;
  out.name = ds.name + "-poisoned";
  for (std::size_t i = 0; i < out.size(); ++i) {
    stamp_trigger(out.image(i), chw, spec);
    out.labels[i] = remap_label(out.labels[i], out.num_classes);
    out.poisoned[i] = true;
  }
  return out;
}

/// Number of backdoor samples added for a clean set of size n.
inline std::size_t poison_count(std::size_t n, double fraction) {
  return static_cast<std::size_t>(std::llround(fraction / 100.0 * static_cast<double>(n)));
}

/// All clean samples plus round(fraction% * N) triggered, relabelled copies
/// of distinct clean samples, shuffled together by the seed.
inline LabeledDataset compose_poisoned_trainset(const LabeledDataset& clean, const PoisonConfig& cfg) {
  cfg.validate();
  const Shape chw = clean.image_shape();
  cfg.trigger.validate(chw.at(1), chw.at(2));
  std::mt19937_64 rng(cfg.seed);

  const std::size_t n = clean.size();
  const std::size_t n_bd = poison_count(n, cfg.fraction);
  std::vector<std::size_t> sources(n);
  std::iota(sources.begin(), sources.end(), std::size_t{0});
  std::shuffle(sources.begin(), sources.end(), rng);
  sources.resize(n_bd);

  // Entries < n index clean samples; n + k indexes the k-th backdoor copy.
  std::vector<std::size_t> order(n + n_bd);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  Shape shape = clean.images.shape;
  shape[0] = n + n_bd;
  LabeledDataset out{Tensor<float>(shape), std::vector<int>(n + n_bd),
                     std::vector<bool>(n + n_bd, false), clean.num_classes,
                     clean.name + "-bd" + std::to_string(static_cast<int>(cfg.fraction))};
  const std::size_t stride = clean.image_numel();
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const std::size_t id = order[pos];
    const bool backdoor = id >= n;
    const std::size_t src = backdoor ? sources[id - n] : id;
    auto dst = out.image(pos);
    std::copy_n(clean.images.data.begin() + src * stride, stride, dst.begin());
    if (backdoor) {
      stamp_trigger(dst, chw, cfg.trigger);
      out.labels[pos] = remap_label(clean.labels[src], clean.num_classes);
      out.poisoned[pos] = true;
    } else {
      out.labels[pos] = clean.labels[src];
    }
  }
  return out;
}

}  // namespace poisonguard
