#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "poisonguard/data/dataset.hpp"
#include "poisonguard/io/binary.hpp"
#include "poisonguard/models/network.hpp"

namespace poisonguard {

/// Activations of one tap, one row per sample.
struct FeatureMatrix {
  Tensor<double> vectors;  // [N, D]
  std::vector<int> labels;
  std::string layer_name;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return vectors.dim(1); }
  std::span<const double> row(std::size_t i) const { return {vectors.data.data() + i * dim(), dim()}; }
};

/// Deterministic forward pass recording `layer_name`, flattened per sample.
template <typename T>
FeatureMatrix extract_features(const Network<T>& net, const std::string& layer_name,
                               const LabeledDataset& data, std::size_t batch = 500) {
  if (!net.has_tap(layer_name)) throw UnknownTap("unknown feature tap '" + layer_name + "'");
  if (data.size() == 0) throw std::invalid_argument("extract_features: empty dataset");
  FeatureMatrix fm{{}, data.labels, layer_name};
  std::size_t D = 0;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t end = std::min(data.size(), start + batch);
    std::map<std::string, Var<T>> taps;
    Graph<T> g(false);
    ForwardContext<T> ctx{g};
    ctx.taps = &taps;
    net.forward(make_var(image_batch<T>(data, start, end)), ctx);
    const auto& f = *taps.at(layer_name);
    if (start == 0) {
      D = f.numel() / (end - start);
      fm.vectors = Tensor<double>({data.size(), D});
    }
    for (std::size_t i = 0; i < f.numel(); ++i) fm.vectors.data[start * D + i] = static_cast<double>(f.data[i]);
  }
  for (double v : fm.vectors.data) {
    if (!std::isfinite(v)) throw std::domain_error("extract_features: non-finite activation");
  }
  return fm;
}

inline constexpr double kDefaultVarianceFloor = 1e-6;

/// Diagonal Gaussian per class.
struct ClassConditionalDensity {
  std::string layer_name;
  std::size_t dim = 0;
  double variance_floor = kDefaultVarianceFloor;
  std::vector<int> classes;                 // ascending
  std::vector<std::vector<double>> means;   // per class, length dim
  std::vector<std::vector<double>> variances;

  std::size_t num_classes() const { return classes.size(); }
  bool operator==(const ClassConditionalDensity&) const = default;
};

/// Per-class sample mean and unbiased variance (two-pass), variances
/// clamped to `variance_floor`. Classes absent from the fit set are omitted.
inline ClassConditionalDensity fit_class_densities(const FeatureMatrix& fm, std::size_t num_classes,
                                                   double variance_floor = kDefaultVarianceFloor) {
  if (!(variance_floor > 0.0)) throw std::invalid_argument("fit_class_densities: floor must be > 0");
  const std::size_t D = fm.dim();
  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < fm.size(); ++i) {
    const int y = fm.labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw std::out_of_range("fit_class_densities: label " + std::to_string(y));
    }
    members[y].push_back(i);
  }
  ClassConditionalDensity d{fm.layer_name, D, variance_floor, {}, {}, {}};
  for (std::size_t k = 0; k < num_classes; ++k) {
    const auto& idx = members[k];
    if (idx.empty()) continue;
    if (idx.size() < 2) {
      throw std::invalid_argument("fit_class_densities: class " + std::to_string(k) +
                                  " has fewer than 2 samples");
    }
    std::vector<double> mean(D, 0.0), var(D, 0.0);
    for (auto i : idx) {
      auto r = fm.row(i);
      for (std::size_t j = 0; j < D; ++j) mean[j] += r[j];
    }
    for (auto& m : mean) m /= static_cast<double>(idx.size());
    for (auto i : idx) {
      auto r = fm.row(i);
      for (std::size_t j = 0; j < D; ++j) var[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
    }
    for (auto& v : var) v = std::max(v / static_cast<double>(idx.size() - 1), variance_floor);
    d.classes.push_back(static_cast<int>(k));
    d.means.push_back(std::move(mean));
    d.variances.push_back(std::move(var));
  }
  if (d.classes.empty()) throw std::invalid_argument("fit_class_densities: empty feature matrix");
  return d;
}

/// ln N(x; mean_c, diag(var_c)) for the c-th fitted class (index into
/// `classes`, not the label).
inline double loglik(std::span<const double> x, const ClassConditionalDensity& d, std::size_t c) {
  if (x.size() != d.dim) throw ShapeError("loglik: feature length does not match density");
  const auto& mu = d.means.at(c);
  const auto& var = d.variances.at(c);
  double quad = 0.0, logdet = 0.0;
  for (std::size_t j = 0; j < d.dim; ++j) {
    const double diff = x[j] - mu[j];
    quad += diff * diff / var[j];
    logdet += std::log(var[j]);
  }
  return -0.5 * static_cast<double>(d.dim) * std::log(2.0 * std::numbers::pi) - 0.5 * logdet - 0.5 * quad;
}

struct DfPrediction {
  int label;
  double score;  // max log-likelihood; low means anomalous
};

/// Most likely class; ties go to the lowest label.
inline DfPrediction df_classify(std::span<const double> x, const ClassConditionalDensity& d) {
  DfPrediction best{d.classes.at(0), loglik(x, d, 0)};
  for (std::size_t c = 1; c < d.num_classes(); ++c) {
    const double s = loglik(x, d, c);
    if (s > best.score) best = {d.classes[c], s};
  }
  return best;
}

inline std::vector<DfPrediction> df_classify_all(const FeatureMatrix& fm, const ClassConditionalDensity& d) {
  std::vector<DfPrediction> out;
  out.reserve(fm.size());
  for (std::size_t i = 0; i < fm.size(); ++i) out.push_back(df_classify(fm.row(i), d));
  return out;
}

// ---------------------------------------------------------------------------
// Density snapshot: "PSDF", u32 version, layer name, u32 K, u32 D, f64 floor,
// then per class i32 label, f64[D] mean, f64[D] variance. Little-endian.

inline constexpr char kDensityMagic[4] = {'P', 'S', 'D', 'F'};
inline constexpr std::uint32_t kDensityVersion = 1;

inline std::vector<std::uint8_t> encode_density(const ClassConditionalDensity& d) {
  io::Writer w(std::endian::little);
  w.put_bytes(kDensityMagic, 4);
  w.put<std::uint32_t>(kDensityVersion);
  w.put_string(d.layer_name);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.num_classes()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(d.dim));
  w.put<double>(d.variance_floor);
  for (std::size_t c = 0; c < d.num_classes(); ++c) {
    w.put<std::int32_t>(d.classes[c]);
    for (double v : d.means[c]) w.put<double>(v);
    for (double v : d.variances[c]) w.put<double>(v);
  }
  return w.bytes();
}

inline ClassConditionalDensity decode_density(const std::vector<std::uint8_t>& bytes,
                                              const std::string& what = "density file") {
  io::Reader r(bytes, what, std::endian::little);
  char magic[4];
  r.get_bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kDensityMagic)) throw FormatError(what + ": bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kDensityVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  ClassConditionalDensity d;
  d.layer_name = r.get_string();
  const auto K = r.get<std::uint32_t>();
  d.dim = r.get<std::uint32_t>();
  d.variance_floor = r.get<double>();
  if (K == 0 || d.dim == 0) throw FormatError(what + ": empty density");
  r.need(static_cast<std::size_t>(K) * (4 + 16 * d.dim));
  for (std::uint32_t c = 0; c < K; ++c) {
    d.classes.push_back(r.get<std::int32_t>());
    std::vector<double> mean(d.dim), var(d.dim);
    for (auto& v : mean) v = r.get<double>();
    for (auto& v : var) {
      v = r.get<double>();
      if (!(v >= d.variance_floor)) throw FormatError(what + ": variance below floor");
    }
    d.means.push_back(std::move(mean));
    d.variances.push_back(std::move(var));
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  return d;
}

inline void save_density(const ClassConditionalDensity& d, const std::filesystem::path& path) {
  io::write_file(path, encode_density(d));
}

inline ClassConditionalDensity read_density(const std::filesystem::path& path) {
  return decode_density(io::read_file(path), path.string());
}

/// CSV with columns label,f0,...,f{D-1}.
inline std::string format_feature_csv(const FeatureMatrix& fm) {
  std::ostringstream os;
  os << "label";
  for (std::size_t j = 0; j < fm.dim(); ++j) os << ",f" << j;
  os << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < fm.size(); ++i) {
    os << fm.labels[i];
    for (double v : fm.row(i)) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

}  // namespace poisonguard
