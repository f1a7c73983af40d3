#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "poisonguard/data/dataset.hpp"
#include "poisonguard/models/network.hpp"

namespace poisonguard {

inline constexpr std::size_t kDefaultMcSamples = 40;

/// Per-draw class probabilities [T, N, K] and their average [N, K].
struct PredictiveSummary {
  Tensor<double> mc_probs;
  Tensor<double> mean_probs;
  std::size_t draws = 0;
  std::size_t num_classes = 0;

  std::size_t size() const { return mean_probs.dim(0); }
};

/// Builds a summary from stacked draws, checking that every row is a
/// probability vector.
inline PredictiveSummary summarize_draws(Tensor<double> mc_probs) {
  expect_rank(mc_probs.shape, 3, "summarize_draws");
  const std::size_t T = mc_probs.dim(0), N = mc_probs.dim(1), K = mc_probs.dim(2);
  Tensor<double> mean({N, K});
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      const double* row = mc_probs.data.data() + (t * N + n) * K;
      double total = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        if (!(row[k] >= 0.0)) throw std::domain_error("summarize_draws: negative or NaN probability");
        total += row[k];
        mean.data[n * K + k] += row[k];
      }
      if (std::abs(total - 1.0) > 1e-6) {
        throw std::domain_error("summarize_draws: draw " + std::to_string(t) + " row " +
                                std::to_string(n) + " sums to " + std::to_string(total));
      }
    }
  }
  for (auto& v : mean.data) v /= static_cast<double>(T);
  return {std::move(mc_probs), std::move(mean), T, K};
}

namespace detail {

inline void softmax_into(std::span<const double> logits, std::span<double> out) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) z += out[k] = std::exp(logits[k] - m);
  for (auto& v : out) v /= z;
}

inline std::uint64_t draw_seed(std::uint64_t seed, std::uint64_t draw, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(draw), static_cast<std::uint32_t>(stream)};
  std::array<std::uint32_t, 2> out;
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace detail

/// Entropy in nats of one probability row, with 0 ln 0 = 0.
inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

/// Draws T posterior samples per input. Draw t uses its own noise and sign
/// streams derived from (seed, t), so the result does not depend on the
/// order in which draws are computed. Within a draw the batches are
/// processed in order, each with a fresh Flipout noise tensor.
template <typename T>
PredictiveSummary predictive_distribution(const Network<T>& net, const LabeledDataset& data,
                                          std::size_t draws, std::uint64_t seed,
                                          std::size_t batch = 500) {
  if (draws < 1) throw std::invalid_argument("predictive_distribution: need at least one draw");
  if (!net.variational() && draws > 1) {
    throw std::invalid_argument("predictive_distribution: network is not variational; use baseline_score");
  }
  const std::size_t N = data.size(), K = net.num_classes();
  Tensor<double> mc({draws, N, K});
  for (std::size_t t = 0; t < draws; ++t) {
    std::mt19937_64 noise(detail::draw_seed(seed, t, 1)), signs(detail::draw_seed(seed, t, 2));
    for (std::size_t start = 0; start < N; start += batch) {
      const std::size_t end = std::min(N, start + batch);
      Graph<T> g(false);
      ForwardContext<T> ctx{g};
      if (net.variational()) {
        ctx.weights = WeightMode::sample;
        ctx.noise_rng = &noise;
        ctx.sign_rng = &signs;
      }
      auto logits = net.forward(make_var(image_batch<T>(data, start, end)), ctx);
      std::vector<double> row(K);
      for (std::size_t n = start; n < end; ++n) {
        for (std::size_t k = 0; k < K; ++k) row[k] = static_cast<double>(logits->data[(n - start) * K + k]);
        detail::softmax_into(row, std::span(mc.data.data() + (t * N + n) * K, K));
      }
    }
  }
  return summarize_draws(std::move(mc));
}

/// Entropy of the draw-averaged distribution, per sample.
inline std::vector<double> predictive_entropy(const PredictiveSummary& s) {
  const std::size_t K = s.num_classes;
  std::vector<double> h(s.size());
  for (std::size_t n = 0; n < h.size(); ++n) h[n] = entropy({s.mean_probs.data.data() + n * K, K});
  return h;
}

/// Mutual information between prediction and weights: entropy of the mean
/// minus the mean per-draw entropy, clamped at zero.
inline std::vector<double> bald(const PredictiveSummary& s) {
  const std::size_t N = s.size(), K = s.num_classes, T = s.draws;
  auto h = predictive_entropy(s);
  for (std::size_t n = 0; n < N; ++n) {
    double expected = 0.0;
    for (std::size_t t = 0; t < T; ++t) expected += entropy({s.mc_probs.data.data() + (t * N + n) * K, K});
    h[n] = std::max(0.0, h[n] - expected / static_cast<double>(T));
  }
  return h;
}

inline std::vector<int> predicted_classes(const PredictiveSummary& s) {
  const std::size_t K = s.num_classes;
  std::vector<int> out(s.size());
  for (std::size_t n = 0; n < out.size(); ++n) {
    const double* row = s.mean_probs.data.data() + n * K;
    out[n] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

/// One deterministic pass (posterior means for variational networks).
template <typename T>
PredictiveSummary deterministic_summary(const Network<T>& net, const LabeledDataset& data,
                                        std::size_t batch = 500) {
  const std::size_t N = data.size(), K = net.num_classes();
  Tensor<double> mc({1, N, K});
  std::vector<double> row(K);
  for (std::size_t start = 0; start < N; start += batch) {
    const std::size_t end = std::min(N, start + batch);
    auto logits = net.predict_logits(image_batch<T>(data, start, end));
    for (std::size_t n = start; n < end; ++n) {
      for (std::size_t k = 0; k < K; ++k) row[k] = static_cast<double>(logits.data[(n - start) * K + k]);
      detail::softmax_into(row, std::span(mc.data.data() + n * K, K));
    }
  }
  return summarize_draws(std::move(mc));
}

/// Softmax entropy of the single deterministic pass.
template <typename T>
std::vector<double> baseline_score(const Network<T>& net, const LabeledDataset& data,
                                   std::size_t batch = 500) {
  return predictive_entropy(deterministic_summary(net, data, batch));
}

/// CSV with columns index,label,poison,pred,entropy,bald.
inline std::string format_score_csv(const LabeledDataset& ds, std::span<const int> preds,
                                    std::span<const double> ent, std::span<const double> mi) {
  if (preds.size() != ds.size() || ent.size() != ds.size() || mi.size() != ds.size()) {
    throw std::invalid_argument("format_score_csv: column lengths differ");
  }
  std::ostringstream os;
  os << "index,label,poison,pred,entropy,bald\n" << std::setprecision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << i << ',' << ds.labels[i] << ',' << (ds.poisoned[i] ? 1 : 0) << ',' << preds[i] << ','
       << ent[i] << ',' << mi[i] << '\n';
  }
  return os.str();
}

}  // namespace poisonguard
