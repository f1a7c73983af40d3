#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/algorithm/string.hpp>
#include <boost/crc.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "poisonguard/deepfeatures/deepfeatures.hpp"
#include "poisonguard/models/network.hpp"
#include "poisonguard/poison/poison.hpp"
#include "poisonguard/train/train.hpp"
#include "poisonguard/uncertainty/uncertainty.hpp"

namespace poisonguard {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class DatasetKind { mnist, cifar10 };

inline const char* to_string(DatasetKind d) { return d == DatasetKind::mnist ? "mnist" : "cifar10"; }

inline DatasetKind parse_dataset(const std::string& s) {
  if (s == "mnist") return DatasetKind::mnist;
  if (s == "cifar10") return DatasetKind::cifar10;
  throw ConfigError("unknown dataset '" + s + "'");
}

inline const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> m{"dnn", "df", "bnn"};
  return m;
}

struct ExperimentConfig {
  DatasetKind dataset = DatasetKind::mnist;
  Architecture architecture = Architecture::scnn;
  std::vector<int> fractions{0, 10, 20, 30, 40, 50};
  std::uint64_t seed = 0;
  std::size_t mc_samples = kDefaultMcSamples;
  std::vector<std::string> methods = all_methods();
  std::filesystem::path dataset_dir;
  std::filesystem::path out = "runs";
  std::size_t eval_batch = 500;

  TriggerSpec trigger = mnist_trigger();
  TrainConfig train;  // deterministic network
  TrainConfig bnn;    // variational network
  std::string df_layer = kPenultimateTap;
  double df_variance_floor = kDefaultVarianceFloor;

  bool wants(const std::string& method) const {
    return std::find(methods.begin(), methods.end(), method) != methods.end();
  }

  void validate() const {
    // Input shapes fix the pairing: SCNN takes 1x28x28, ResNet-20 3x32x32.
    const bool pairs = (dataset == DatasetKind::mnist) == (architecture == Architecture::scnn);
    if (!pairs) {
      throw ConfigError(std::string("architecture ") + to_string(architecture) + " does not accept " +
                        to_string(dataset) + " images");
    }
    if (fractions.empty()) throw ConfigError("experiment.fractions is empty");
    for (int f : fractions) {
      if (f < 0 || f > 100) throw ConfigError("fraction " + std::to_string(f) + " outside [0,100]");
    }
    if (mc_samples < 1) throw ConfigError("experiment.mc_samples must be >= 1");
    if (methods.empty()) throw ConfigError("experiment.methods is empty");
    for (const auto& m : methods) {
      if (std::find(all_methods().begin(), all_methods().end(), m) == all_methods().end()) {
        throw ConfigError("unknown method '" + m + "'");
      }
    }
    if (eval_batch < 1) throw ConfigError("experiment.eval_batch must be >= 1");
    try {
      train.validate();
      bnn.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    if (!(df_variance_floor > 0.0)) throw ConfigError("deepfeatures.variance_floor must be > 0");
  }
};

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& key) {
  std::vector<T> out;
  std::vector<std::string> parts;
  boost::split(parts, text, boost::is_any_of(","));
  for (auto& p : parts) {
    boost::trim(p);
    if (p.empty()) continue;
    std::istringstream is(p);
    T v;
    if (!(is >> v) || !is.eof()) throw ConfigError(key + ": cannot parse '" + p + "'");
    out.push_back(v);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  os << std::setprecision(17);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

template <typename T>
void read_key(const boost::property_tree::ptree& pt, const std::string& key, T& target) {
  if (auto v = pt.get_optional<std::string>(key)) {
    std::istringstream is(boost::trim_copy(*v));
    T parsed;
    if (!(is >> parsed) || !is.eof()) throw ConfigError(key + ": cannot parse '" + *v + "'");
    target = parsed;
  }
}

inline void read_bool(const boost::property_tree::ptree& pt, const std::string& key, bool& target) {
  if (auto v = pt.get_optional<std::string>(key)) {
    const auto s = boost::to_lower_copy(boost::trim_copy(*v));
    if (s == "true" || s == "1" || s == "yes") target = true;
    else if (s == "false" || s == "0" || s == "no") target = false;
    else throw ConfigError(key + ": expected a boolean, got '" + *v + "'");
  }
}

inline void read_train_section(const boost::property_tree::ptree& pt, const std::string& s, TrainConfig& t) {
  read_key(pt, s + ".epochs", t.epochs);
  read_key(pt, s + ".batch_size", t.batch_size);
  read_key(pt, s + ".lr", t.lr.initial);
  if (auto v = pt.get_optional<std::string>(s + ".milestones")) {
    t.lr.milestones = parse_list<std::size_t>(*v, s + ".milestones");
  }
  read_key(pt, s + ".lr_decay", t.lr.decay);
  read_key(pt, s + ".momentum", t.momentum);
  read_key(pt, s + ".weight_decay", t.weight_decay);
  read_bool(pt, s + ".augment", t.augment);
}

}  // namespace detail

/// Defaults for a dataset before any file overrides.
inline ExperimentConfig default_config(DatasetKind dataset) {
  ExperimentConfig c;
  c.dataset = dataset;
  c.train.epochs = 10;
  c.train.batch_size = 64;
  c.train.lr = {0.01, {7}, 0.1};
  c.train.momentum = 0.9;
  c.train.weight_decay = 5e-4;
  c.bnn.epochs = 3;
  c.bnn.batch_size = 64;
  c.bnn.lr = {0.005, {}, 0.1};
  c.bnn.momentum = 0.9;
  if (dataset == DatasetKind::cifar10) {
    c.architecture = Architecture::resnet20;
    c.trigger = cifar_trigger();
    c.train.epochs = 160;
    c.train.batch_size = 128;
    c.train.lr = {0.1, {80, 120}, 0.1};
    c.train.weight_decay = 1e-4;
    c.train.augment = true;
    c.bnn.epochs = 10;
    c.bnn.batch_size = 128;
    c.bnn.lr = {0.01, {}, 0.1};
    c.bnn.augment = true;
  }
  // The full KL weighs against each batch-mean loss, i.e. kl_scale =
  // 1 / batch_size. "auto" in a config file selects 1 / N_train instead.
  c.bnn.kl_scale = 1.0 / static_cast<double>(c.bnn.batch_size);
  return c;
}

/// INI file with sections [experiment], [poison], [train], [bnn],
/// [deepfeatures]. Unknown keys are rejected.
inline ExperimentConfig parse_config(std::istream& in, const std::string& source = "config") {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  static const std::set<std::string> known{
      "experiment.dataset", "experiment.architecture", "experiment.fractions", "experiment.seed",
      "experiment.mc_samples", "experiment.methods", "experiment.dataset_dir", "experiment.out",
      "experiment.eval_batch", "poison.trigger", "poison.intensity", "train.epochs",
      "train.batch_size", "train.lr", "train.milestones", "train.lr_decay", "train.momentum",
      "train.weight_decay", "train.augment", "bnn.epochs", "bnn.batch_size", "bnn.lr",
      "bnn.milestones", "bnn.lr_decay", "bnn.momentum", "bnn.weight_decay", "bnn.augment",
      "bnn.mc_train_samples", "bnn.moped_delta", "bnn.sigma_floor", "bnn.kl_scale",
      "bnn.train_sigma", "bnn.rho_lr_scale", "deepfeatures.layer", "deepfeatures.variance_floor"};
  for (const auto& [section, body] : pt) {
    if (body.empty()) throw ConfigError(source + ": key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      if (!known.count(section + "." + key)) throw ConfigError(source + ": unknown key " + section + "." + key);
    }
  }

  const auto dataset = parse_dataset(pt.get<std::string>("experiment.dataset", "mnist"));
  ExperimentConfig c = default_config(dataset);
  if (auto a = pt.get_optional<std::string>("experiment.architecture")) c.architecture = parse_architecture(*a);
  if (auto f = pt.get_optional<std::string>("experiment.fractions")) c.fractions = detail::parse_list<int>(*f, "experiment.fractions");
  detail::read_key(pt, "experiment.seed", c.seed);
  detail::read_key(pt, "experiment.mc_samples", c.mc_samples);
  if (auto m = pt.get_optional<std::string>("experiment.methods")) c.methods = detail::parse_list<std::string>(*m, "experiment.methods");
  if (auto d = pt.get_optional<std::string>("experiment.dataset_dir")) c.dataset_dir = boost::trim_copy(*d);
  if (auto o = pt.get_optional<std::string>("experiment.out")) c.out = boost::trim_copy(*o);
  detail::read_key(pt, "experiment.eval_batch", c.eval_batch);

  if (auto t = pt.get_optional<std::string>("poison.trigger")) {
    const auto name = boost::trim_copy(*t);
    if (name == "four_pixel") c.trigger = mnist_trigger();
    else if (name == "square") c.trigger = cifar_trigger();
    else throw ConfigError("poison.trigger: expected four_pixel or square, got '" + name + "'");
  }
  detail::read_key(pt, "poison.intensity", c.trigger.intensity);

  detail::read_train_section(pt, "train", c.train);
  detail::read_train_section(pt, "bnn", c.bnn);
  detail::read_key(pt, "bnn.mc_train_samples", c.bnn.mc_train_samples);
  detail::read_key(pt, "bnn.moped_delta", c.bnn.moped_delta);
  detail::read_key(pt, "bnn.sigma_floor", c.bnn.sigma_floor);
  if (auto k = pt.get_optional<std::string>("bnn.kl_scale")) {
    if (boost::trim_copy(*k) == "auto") {
      c.bnn.kl_scale.reset();
    } else {
      double v;
      detail::read_key(pt, "bnn.kl_scale", v);
      c.bnn.kl_scale = v;
    }
  }
  detail::read_bool(pt, "bnn.train_sigma", c.bnn.train_sigma);
  detail::read_key(pt, "bnn.rho_lr_scale", c.bnn.rho_lr_scale);
  if (auto l = pt.get_optional<std::string>("deepfeatures.layer")) c.df_layer = boost::trim_copy(*l);
  detail::read_key(pt, "deepfeatures.variance_floor", c.df_variance_floor);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  return parse_config(in, path.string());
}

namespace detail {

inline void write_train_section(std::ostream& os, const std::string& name, const TrainConfig& t) {
  os << '[' << name << "]\n"
     << "epochs = " << t.epochs << '\n'
     << "batch_size = " << t.batch_size << '\n'
     << "lr = " << t.lr.initial << '\n'
     << "milestones = " << join(t.lr.milestones) << '\n'
     << "lr_decay = " << t.lr.decay << '\n'
     << "momentum = " << t.momentum << '\n'
     << "weight_decay = " << t.weight_decay << '\n'
     << "augment = " << (t.augment ? "true" : "false") << '\n';
}

}  // namespace detail

enum class Stage { dnn_train, dnn_eval, df, bnn_train, bnn_eval };

inline const char* to_string(Stage s) {
  switch (s) {
    case Stage::dnn_train: return "dnn_train";
    case Stage::dnn_eval: return "dnn_eval";
    case Stage::df: return "df";
    case Stage::bnn_train: return "bnn_train";
    case Stage::bnn_eval: return "bnn_eval";
  }
  return "?";
}

/// The settings a stage (and the stages it consumes) depends on, in a fixed
/// textual form. Paths and the fraction/method lists never enter, so stored
/// artifacts stay reusable across sweeps.
inline std::string stage_settings(const ExperimentConfig& c, Stage stage) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "[experiment]\ndataset = " << to_string(c.dataset) << "\narchitecture = " << to_string(c.architecture)
     << "\nseed = " << c.seed << '\n';
  os << "[poison]\ntrigger = " << (c.trigger.kind == TriggerKind::four_pixel ? "four_pixel" : "square")
     << "\nintensity = " << c.trigger.intensity << '\n';
  detail::write_train_section(os, "train", c.train);
  if (stage == Stage::df) {
    os << "[deepfeatures]\nlayer = " << c.df_layer << "\nvariance_floor = " << c.df_variance_floor << '\n';
  }
  if (stage == Stage::bnn_train || stage == Stage::bnn_eval) {
    detail::write_train_section(os, "bnn", c.bnn);
    os << "mc_train_samples = " << c.bnn.mc_train_samples << "\nmoped_delta = " << c.bnn.moped_delta
       << "\nsigma_floor = " << c.bnn.sigma_floor << "\nkl_scale = ";
    if (c.bnn.kl_scale) os << *c.bnn.kl_scale;
    else os << "auto";
    os << "\ntrain_sigma = " << (c.bnn.train_sigma ? "true" : "false") << "\nrho_lr_scale = " << c.bnn.rho_lr_scale
       << '\n';
  }
  if (stage == Stage::bnn_eval) os << "[eval]\nmc_samples = " << c.mc_samples << "\neval_batch = " << c.eval_batch << '\n';
  if (stage == Stage::dnn_eval || stage == Stage::df) os << "[eval]\neval_batch = " << c.eval_batch << '\n';
  return os.str();
}

inline std::uint32_t crc32_of(const void* data, std::size_t n) {
  boost::crc_32_type crc;
  crc.process_bytes(data, n);
  return crc.checksum();
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

inline std::string config_hash(const ExperimentConfig& c, Stage stage) {
  const auto s = stage_settings(c, stage);
  return hex32(crc32_of(s.data(), s.size()));
}

}  // namespace poisonguard
