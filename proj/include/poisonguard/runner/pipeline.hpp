#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "poisonguard/deepfeatures/deepfeatures.hpp"
#include "poisonguard/eval/metrics.hpp"
#include "poisonguard/eval/tables.hpp"
#include "poisonguard/runner/config.hpp"
#include "poisonguard/uncertainty/uncertainty.hpp"

namespace poisonguard {

namespace fs = std::filesystem;

/// Raised when a pipeline stage fails; names the stage.
class StageFailure : public std::runtime_error {
 public:
  StageFailure(Stage stage, int fraction, const std::string& what)
      : std::runtime_error(std::string("stage ") + to_string(stage) + " (fraction " +
                           std::to_string(fraction) + "%): " + what),
        stage(stage), fraction(fraction) {}
  Stage stage;
  int fraction;
};

struct MetricRecord {
  std::string dataset;
  std::string split;   // clean | poisoned | detection
  std::string method;  // dnn | df | bnn
  int fraction = 0;
  std::string metric;  // accuracy | aupr | auroc
  double value = 0.0;
  bool operator==(const MetricRecord&) const = default;
};

inline std::string format_metrics_csv(const std::vector<MetricRecord>& rows) {
  std::ostringstream os;
  os << "dataset,split,method,fraction,metric,value\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.dataset << ',' << r.split << ',' << r.method << ',' << r.fraction << ',' << r.metric << ','
       << r.value << '\n';
  }
  return os.str();
}

inline std::vector<MetricRecord> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "dataset,split,method,fraction,metric,value") {
    throw FormatError("metrics csv: missing header");
  }
  std::vector<MetricRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 6) throw FormatError("metrics csv: expected 6 fields in '" + line + "'");
    out.push_back({f[0], f[1], f[2], std::stoi(f[3]), f[4], std::stod(f[5])});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest: one JSON file per fraction directory listing every artifact with
// its CRC-32, producing stage and the settings hash of that stage.

class Manifest {
 public:
  explicit Manifest(fs::path root) : root_(std::move(root)) {
    const auto path = root_ / "manifest.json";
    if (fs::exists(path)) {
      std::ifstream in(path);
      try {
        doc_ = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        spdlog::warn("ignoring unreadable manifest {}: {}", path.string(), e.what());
      }
    }
    if (!doc_.is_object() || !doc_.contains("entries") || !doc_["entries"].is_array()) {
      doc_ = {{"entries", nlohmann::json::array()}};
    }
  }

  const fs::path& root() const { return root_; }

  static std::string file_crc(const fs::path& path) {
    const auto bytes = io::read_file(path);
    return hex32(crc32_of(bytes.data(), bytes.size()));
  }

  /// True when the stage has entries, all produced under `hash`, and every
  /// listed file still matches its checksum.
  bool stage_valid(Stage stage, const std::string& hash) const {
    bool any = false;
    for (const auto& e : doc_["entries"]) {
      if (e.value("stage", "") != to_string(stage)) continue;
      any = true;
      if (e.value("config_hash", "") != hash) return false;
      const fs::path p = root_ / e.value("path", "");
      if (!fs::exists(p) || file_crc(p) != e.value("crc32", "")) return false;
    }
    return any;
  }

  void clear_stage(Stage stage) {
    auto& entries = doc_["entries"];
    nlohmann::json kept = nlohmann::json::array();
    for (const auto& e : entries) {
      if (e.value("stage", "") != to_string(stage)) kept.push_back(e);
    }
    entries = kept;
  }

  void record(Stage stage, const std::string& hash, const fs::path& relative) {
    doc_["entries"].push_back({{"path", relative.generic_string()},
                               {"crc32", file_crc(root_ / relative)},
                               {"stage", to_string(stage)},
                               {"config_hash", hash}});
  }

  /// Wall time of the run that produced the stage's current artifacts.
  void set_seconds(Stage stage, double seconds) { doc_["seconds"][to_string(stage)] = seconds; }

  std::optional<double> seconds(Stage stage) const {
    if (!doc_.contains("seconds") || !doc_["seconds"].contains(to_string(stage))) return std::nullopt;
    return doc_["seconds"][to_string(stage)].get<double>();
  }

  void save() const {
    fs::create_directories(root_);
    const auto tmp = root_ / "manifest.json.tmp";
    {
      std::ofstream out(tmp);
      out << doc_.dump(2) << '\n';
    }
    fs::rename(tmp, root_ / "manifest.json");
  }

 private:
  fs::path root_;
  nlohmann::json doc_;
};

inline void write_text(const fs::path& path, const std::string& text) {
  io::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

inline std::string read_text(const fs::path& path) {
  const auto bytes = io::read_file(path);
  return {bytes.begin(), bytes.end()};
}

// ---------------------------------------------------------------------------

/// Clean training set plus the two halves of the held-out split.
struct DataBundle {
  LabeledDataset train;
  LabeledDataset fit_half;       // density fitting
  LabeledDataset eval_half;      // clean evaluation
  LabeledDataset poisoned_eval;  // eval half, triggered and relabelled
};

inline DataBundle load_data(const ExperimentConfig& cfg) {
  if (cfg.dataset_dir.empty()) throw ConfigError("no dataset directory given (experiment.dataset_dir or --dataset-dir)");
  TrainTestPair pair = cfg.dataset == DatasetKind::mnist ? load_mnist(cfg.dataset_dir) : load_cifar10(cfg.dataset_dir);
  auto split = split_half(pair.test, cfg.seed);
  DataBundle b{std::move(pair.train), std::move(split.fit_half), std::move(split.eval_half), {}};
  b.poisoned_eval = poison_entire(b.eval_half, cfg.trigger);
  return b;
}

inline fs::path fraction_dir(const ExperimentConfig& cfg, int fraction) {
  return cfg.out / to_string(cfg.dataset) / std::to_string(fraction);
}

struct FractionResult {
  int fraction = 0;
  std::vector<MetricRecord> metrics;
  double seconds = 0.0;
};

/// Scores of the clean half (negatives) followed by the poisoned half
/// (positives).
inline Scorecard detection_card(std::vector<double> clean, const std::vector<double>& poisoned,
                                const std::string& method, const ExperimentConfig& cfg, int fraction) {
  Scorecard sc;
  sc.is_poisoned.assign(clean.size(), false);
  sc.is_poisoned.resize(clean.size() + poisoned.size(), true);
  sc.scores = std::move(clean);
  sc.scores.insert(sc.scores.end(), poisoned.begin(), poisoned.end());
  sc.method = method;
  sc.dataset = to_string(cfg.dataset);
  sc.fraction = fraction;
  return sc;
}

/// Runs (or resumes) every enabled stage for one poison fraction.
class FractionRun {
 public:
  using Net = Network<float>;

  FractionRun(const ExperimentConfig& cfg, const DataBundle& data, int fraction)
      : cfg_(cfg), data_(data), fraction_(fraction), manifest_(fraction_dir(cfg, fraction)) {}

  FractionResult run() {
    const auto t0 = std::chrono::steady_clock::now();
    FractionResult res{fraction_, {}, 0.0};
    spdlog::info("[{} {}%] start", to_string(cfg_.dataset), fraction_);
    // Without poison there is nothing to detect; only the clean DNN cell exists.
    const bool poisoned = fraction_ > 0;
    append(res, stage(Stage::dnn_eval, [&] { return dnn_eval(); }));
    if (poisoned && cfg_.wants("df")) append(res, stage(Stage::df, [&] { return df(); }));
    if (poisoned && cfg_.wants("bnn")) append(res, stage(Stage::bnn_eval, [&] { return bnn_eval(); }));
    if (!poisoned && (cfg_.wants("df") || cfg_.wants("bnn"))) {
      spdlog::info("[{} {}%] df/bnn need poisoned data; skipped", to_string(cfg_.dataset), fraction_);
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("[{} {}%] done in {:.1f} s", to_string(cfg_.dataset), fraction_, res.seconds);
    return res;
  }

  /// Trains (or loads) the requested network without evaluating it.
  void train_only(const std::string& method) {
    if (method == "dnn") {
      dnn();
    } else if (method == "bnn") {
      if (fraction_ == 0) throw ConfigError("bnn training needs a poison fraction > 0");
      bnn();
    } else {
      throw ConfigError("train supports dnn and bnn, not '" + method + "'");
    }
  }

  /// Writes the composed poisoned training set in the dataset's own format.
  void export_poisoned_trainset() {
    const auto& ds = composed();
    const auto dir = manifest_.root() / "data";
    if (cfg_.dataset == DatasetKind::mnist) {
      io::write_file(dir / "train-images-idx3-ubyte", encode_idx_images(ds));
      io::write_file(dir / "train-labels-idx1-ubyte", encode_idx_labels(ds.labels));
    } else {
      io::write_file(dir / "train_batch.bin", encode_cifar_batch(ds));
    }
    std::ostringstream flags;
    flags << "index,label,poison\n";
    for (std::size_t i = 0; i < ds.size(); ++i) flags << i << ',' << ds.labels[i] << ',' << (ds.poisoned[i] ? 1 : 0) << '\n';
    write_text(dir / "poison_flags.csv", flags.str());
    spdlog::info("wrote {} samples ({} poisoned) to {}", ds.size(),
                 std::count(ds.poisoned.begin(), ds.poisoned.end(), true), dir.string());
  }

 private:
  template <typename F>
  auto stage(Stage s, F&& body) -> decltype(body()) {
    try {
      return body();
    } catch (const StageFailure&) {
      throw;
    } catch (const std::exception& e) {
      throw StageFailure(s, fraction_, e.what());
    }
  }

  static void append(FractionResult& res, const std::vector<MetricRecord>& rows) {
    res.metrics.insert(res.metrics.end(), rows.begin(), rows.end());
  }

  const LabeledDataset& composed() {
    if (!composed_) {
      composed_ = compose_poisoned_trainset(data_.train, {cfg_.trigger, static_cast<double>(fraction_), cfg_.seed});
    }
    return *composed_;
  }

  MetricRecord metric(const std::string& split, const std::string& method, const std::string& name,
                      double value) const {
    return {to_string(cfg_.dataset), split, method, fraction_, name, value};
  }

  /// Reuses a finished stage when its manifest entries are intact.
  bool reusable(Stage s) const {
    if (manifest_.stage_valid(s, config_hash(cfg_, s))) {
      spdlog::info("[{} {}%] {} up to date", to_string(cfg_.dataset), fraction_, to_string(s));
      return true;
    }
    return false;
  }

  void commit(Stage s, const std::vector<fs::path>& files, std::chrono::steady_clock::time_point started) {
    manifest_.clear_stage(s);
    for (const auto& f : files) manifest_.record(s, config_hash(cfg_, s), f);
    manifest_.set_seconds(s, std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    manifest_.save();
  }

  void log_epoch(const char* what, const EpochLog& e) const {
    spdlog::info("[{} {}%] {} epoch {}: loss {:.4f} acc {:.2f} kl {:.4f}", to_string(cfg_.dataset), fraction_, what,
                 e.epoch, e.loss, e.accuracy, e.kl);
  }

  Net& dnn() {
    if (dnn_) return *dnn_;
    return stage(Stage::dnn_train, [&]() -> Net& {
      dnn_ = build_network<float>(cfg_.architecture, 10, false, cfg_.seed);
      const fs::path model = "dnn/model.psnt";
      if (reusable(Stage::dnn_train)) {
        load_checkpoint(*dnn_, read_checkpoint(manifest_.root() / model));
        return *dnn_;
      }
      auto tcfg = cfg_.train;
      tcfg.seed = cfg_.seed;
      const auto t0 = std::chrono::steady_clock::now();
      auto result = train_deterministic(*dnn_, composed(), tcfg, [&](const EpochLog& e) { log_epoch("dnn", e); });
      save_checkpoint(result.checkpoint, manifest_.root() / model);
      write_text(manifest_.root() / "dnn/train_log.csv", format_training_log(result.log));
      commit(Stage::dnn_train, {model, "dnn/train_log.csv"}, t0);
      spdlog::info("[{} {}%] dnn trained in {:.1f} s", to_string(cfg_.dataset), fraction_,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      return *dnn_;
    });
  }

  Net& bnn() {
    if (bnn_) return *bnn_;
    Net& det = dnn();
    return stage(Stage::bnn_train, [&]() -> Net& {
      bnn_ = build_network<float>(cfg_.architecture, 10, true, cfg_.seed);
      const fs::path model = "bnn/model.psnt";
      if (reusable(Stage::bnn_train)) {
        load_checkpoint(*bnn_, read_checkpoint(manifest_.root() / model));
        return *bnn_;
      }
      apply_moped(*bnn_, make_checkpoint(det), cfg_.bnn.moped_delta, cfg_.bnn.sigma_floor);
      auto tcfg = cfg_.bnn;
      tcfg.seed = cfg_.seed;
      const auto t0 = std::chrono::steady_clock::now();
      auto result = train_bayesian(*bnn_, composed(), tcfg, [&](const EpochLog& e) { log_epoch("bnn", e); });
      save_checkpoint(result.checkpoint, manifest_.root() / model);
      write_text(manifest_.root() / "bnn/train_log.csv", format_training_log(result.log));
      commit(Stage::bnn_train, {model, "bnn/train_log.csv"}, t0);
      spdlog::info("[{} {}%] bnn trained in {:.1f} s", to_string(cfg_.dataset), fraction_,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      return *bnn_;
    });
  }

  std::vector<MetricRecord> reuse_metrics(Stage s, const fs::path& metrics_file) {
    if (!reusable(s)) return {};
    return parse_metrics_csv(read_text(manifest_.root() / metrics_file));
  }

  std::vector<MetricRecord> dnn_eval() {
    const fs::path metrics_file = "dnn/metrics.csv";
    // The network is needed anyway when this stage must rerun, and checking
    // the training stage first keeps a stale model from being reused.
    Net& net = dnn();
    if (auto cached = reuse_metrics(Stage::dnn_eval, metrics_file); !cached.empty()) return cached;

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<MetricRecord> rows;
    std::vector<fs::path> files{metrics_file};
    auto clean = deterministic_summary(net, data_.eval_half, cfg_.eval_batch);
    const auto clean_pred = predicted_classes(clean);
    const auto clean_h = predictive_entropy(clean);
    rows.push_back(metric("clean", "dnn", "accuracy", accuracy(clean_pred, data_.eval_half, AccuracyMode::clean)));
    write_text(manifest_.root() / "dnn/scores_clean.csv",
               format_score_csv(data_.eval_half, clean_pred, clean_h, std::vector<double>(clean_h.size(), 0.0)));
    files.emplace_back("dnn/scores_clean.csv");
    if (fraction_ > 0) {
      auto pois = deterministic_summary(net, data_.poisoned_eval, cfg_.eval_batch);
      const auto pois_pred = predicted_classes(pois);
      const auto pois_h = predictive_entropy(pois);
      rows.push_back(metric("poisoned", "dnn", "accuracy", accuracy(pois_pred, data_.poisoned_eval, AccuracyMode::poisoned)));
      auto card = detection_card(clean_h, pois_h, "dnn", cfg_, fraction_);
      rows.push_back(metric("detection", "dnn", "aupr", aupr(card)));
      rows.push_back(metric("detection", "dnn", "auroc", auroc(card)));
      write_text(manifest_.root() / "dnn/scores_poisoned.csv",
                 format_score_csv(data_.poisoned_eval, pois_pred, pois_h, std::vector<double>(pois_h.size(), 0.0)));
      write_text(manifest_.root() / "dnn/pr_curve.csv", format_curve_csv(card));
      files.emplace_back("dnn/scores_poisoned.csv");
      files.emplace_back("dnn/pr_curve.csv");
    }
    write_text(manifest_.root() / metrics_file, format_metrics_csv(rows));
    commit(Stage::dnn_eval, files, t0);
    return rows;
  }

  std::string df_scores_csv(const LabeledDataset& ds, const std::vector<DfPrediction>& p) const {
    std::ostringstream os;
    os << "index,label,poison,pred,max_loglik\n" << std::setprecision(17);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      os << i << ',' << ds.labels[i] << ',' << (ds.poisoned[i] ? 1 : 0) << ',' << p[i].label << ',' << p[i].score << '\n';
    }
    return os.str();
  }

  std::vector<MetricRecord> df() {
    const fs::path metrics_file = "df/metrics.csv";
    Net& net = dnn();
    if (auto cached = reuse_metrics(Stage::df, metrics_file); !cached.empty()) return cached;

    const auto t0 = std::chrono::steady_clock::now();
    auto fit = extract_features(net, cfg_.df_layer, data_.fit_half, cfg_.eval_batch);
    auto density = fit_class_densities(fit, net.num_classes(), cfg_.df_variance_floor);
    save_density(density, manifest_.root() / "df/density.psdf");
    auto clean = df_classify_all(extract_features(net, cfg_.df_layer, data_.eval_half, cfg_.eval_batch), density);
    auto pois = df_classify_all(extract_features(net, cfg_.df_layer, data_.poisoned_eval, cfg_.eval_batch), density);
    auto labels_of = [](const std::vector<DfPrediction>& p) {
      std::vector<int> out;
      for (const auto& x : p) out.push_back(x.label);
      return out;
    };
    // Low likelihood means anomalous, so the detection score is its negation.
    auto anomaly = [](const std::vector<DfPrediction>& p) {
      std::vector<double> out;
      for (const auto& x : p) out.push_back(-x.score);
      return out;
    };
    std::vector<MetricRecord> rows;
    rows.push_back(metric("clean", "df", "accuracy", accuracy(labels_of(clean), data_.eval_half, AccuracyMode::clean)));
    rows.push_back(metric("poisoned", "df", "accuracy", accuracy(labels_of(pois), data_.poisoned_eval, AccuracyMode::poisoned)));
    auto card = detection_card(anomaly(clean), anomaly(pois), "df", cfg_, fraction_);
    rows.push_back(metric("detection", "df", "aupr", aupr(card)));
    rows.push_back(metric("detection", "df", "auroc", auroc(card)));
    write_text(manifest_.root() / "df/scores_clean.csv", df_scores_csv(data_.eval_half, clean));
    write_text(manifest_.root() / "df/scores_poisoned.csv", df_scores_csv(data_.poisoned_eval, pois));
    write_text(manifest_.root() / "df/pr_curve.csv", format_curve_csv(card));
    write_text(manifest_.root() / metrics_file, format_metrics_csv(rows));
    commit(Stage::df, {"df/density.psdf", "df/scores_clean.csv", "df/scores_poisoned.csv", "df/pr_curve.csv", metrics_file},
           t0);
    spdlog::info("[{} {}%] df done in {:.1f} s", to_string(cfg_.dataset), fraction_,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return rows;
  }

  std::vector<MetricRecord> bnn_eval() {
    const fs::path metrics_file = "bnn/metrics.csv";
    Net& net = bnn();
    if (auto cached = reuse_metrics(Stage::bnn_eval, metrics_file); !cached.empty()) return cached;

    const auto t0 = std::chrono::steady_clock::now();
    // Distinct draw streams for the two evaluation sets.
    auto clean = predictive_distribution(net, data_.eval_half, cfg_.mc_samples, cfg_.seed * 2 + 1, cfg_.eval_batch);
    auto pois = predictive_distribution(net, data_.poisoned_eval, cfg_.mc_samples, cfg_.seed * 2 + 2, cfg_.eval_batch);
    const auto clean_pred = predicted_classes(clean), pois_pred = predicted_classes(pois);
    const auto clean_mi = bald(clean), pois_mi = bald(pois);
    std::vector<MetricRecord> rows;
    rows.push_back(metric("clean", "bnn", "accuracy", accuracy(clean_pred, data_.eval_half, AccuracyMode::clean)));
    rows.push_back(metric("poisoned", "bnn", "accuracy", accuracy(pois_pred, data_.poisoned_eval, AccuracyMode::poisoned)));
    auto card = detection_card(clean_mi, pois_mi, "bnn", cfg_, fraction_);
    rows.push_back(metric("detection", "bnn", "aupr", aupr(card)));
    rows.push_back(metric("detection", "bnn", "auroc", auroc(card)));
    write_text(manifest_.root() / "bnn/scores_clean.csv",
               format_score_csv(data_.eval_half, clean_pred, predictive_entropy(clean), clean_mi));
    write_text(manifest_.root() / "bnn/scores_poisoned.csv",
               format_score_csv(data_.poisoned_eval, pois_pred, predictive_entropy(pois), pois_mi));
    write_text(manifest_.root() / "bnn/pr_curve.csv", format_curve_csv(card));
    write_text(manifest_.root() / metrics_file, format_metrics_csv(rows));
    commit(Stage::bnn_eval, {"bnn/scores_clean.csv", "bnn/scores_poisoned.csv", "bnn/pr_curve.csv", metrics_file}, t0);
    spdlog::info("[{} {}%] bnn scored with {} draws in {:.1f} s", to_string(cfg_.dataset), fraction_, cfg_.mc_samples,
                 std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    return rows;
  }

  const ExperimentConfig& cfg_;
  const DataBundle& data_;
  int fraction_;
  Manifest manifest_;
  std::optional<LabeledDataset> composed_;
  std::optional<Net> dnn_, bnn_;
};

inline FractionResult run_pipeline(const ExperimentConfig& cfg, const DataBundle& data, int fraction) {
  return FractionRun(cfg, data, fraction).run();
}

// ---------------------------------------------------------------------------

struct SweepTables {
  ResultsTable accuracy{"accuracy"};
  ResultsTable aupr{"aupr"};
  ResultsTable auroc{"auroc"};
};

inline void add_metric(SweepTables& t, const MetricRecord& r) {
  const CellKey key{r.dataset, r.split, r.method, r.fraction};
  if (r.metric == "accuracy") t.accuracy.set(key, r.value);
  else if (r.metric == "aupr") t.aupr.set(key, r.value);
  else if (r.metric == "auroc") t.auroc.set(key, r.value);
}

/// Marks every cell the fraction should have produced but did not.
inline void mark_failed(SweepTables& t, const ExperimentConfig& cfg, int fraction) {
  const std::string ds = to_string(cfg.dataset);
  auto fail = [&](ResultsTable& table, const std::string& split, const std::string& method) {
    const CellKey key{ds, split, method, fraction};
    if (!table.cells().count(key)) table.set_failed(key);
  };
  if (fraction == 0) {
    fail(t.accuracy, "clean", "dnn");
    return;
  }
  for (const auto& m : cfg.methods) {
    fail(t.accuracy, "clean", m);
    fail(t.accuracy, "poisoned", m);
    fail(t.aupr, "detection", m);
    fail(t.auroc, "detection", m);
  }
}

struct SweepResult {
  SweepTables tables;
  std::vector<FractionResult> fractions;
  std::vector<std::string> failures;
};

inline std::string format_report(const SweepTables& t) {
  std::ostringstream os;
  os << "## Accuracy (%)\n\n" << render_table(t.accuracy, TableFormat::markdown) << '\n'
     << "## Detection AUPR (%)\n\n" << render_table(t.aupr, TableFormat::markdown) << '\n'
     << "## Detection AUROC (%)\n\n" << render_table(t.auroc, TableFormat::markdown);
  return os.str();
}

inline void write_tables(const SweepTables& t, const fs::path& dir) {
  for (const auto* table : {&t.accuracy, &t.aupr, &t.auroc}) {
    write_text(dir / (table->metric() + ".csv"), render_table(*table, TableFormat::csv));
    write_text(dir / (table->metric() + ".md"), render_table(*table, TableFormat::markdown));
  }
  write_text(dir / "report.md", format_report(t));
}

/// Regenerates markdown from stored table CSVs in `dir`.
inline SweepTables read_tables(const fs::path& dir) {
  SweepTables t;
  t.accuracy = parse_table_csv(read_text(dir / "accuracy.csv"), "accuracy");
  t.aupr = parse_table_csv(read_text(dir / "aupr.csv"), "aupr");
  t.auroc = parse_table_csv(read_text(dir / "auroc.csv"), "auroc");
  return t;
}

/// Runs every fraction in order; a failing fraction is logged, its cells
/// are marked failed, and the sweep continues.
inline SweepResult run_sweep(const ExperimentConfig& cfg, const DataBundle& data) {
  SweepResult res;
  std::ostringstream timings;
  timings << "fraction,seconds,status\n";
  for (int f : cfg.fractions) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string status = "ok";
    try {
      auto fr = run_pipeline(cfg, data, f);
      for (const auto& m : fr.metrics) add_metric(res.tables, m);
      res.fractions.push_back(std::move(fr));
    } catch (const std::exception& e) {
      spdlog::error("{}", e.what());
      res.failures.push_back(e.what());
      status = "failed";
      // Completed stages of this fraction still contribute their cells.
      const auto dir = fraction_dir(cfg, f);
      for (const char* m : {"dnn", "df", "bnn"}) {
        const auto path = dir / m / "metrics.csv";
        if (!fs::exists(path)) continue;
        try {
          for (const auto& r : parse_metrics_csv(read_text(path))) add_metric(res.tables, r);
        } catch (const std::exception&) {
        }
      }
      mark_failed(res.tables, cfg, f);
    }
    timings << f << ',' << std::fixed << std::setprecision(1)
            << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << ',' << status << '\n';
  }
  const auto dir = cfg.out / to_string(cfg.dataset);
  write_tables(res.tables, dir);
  write_text(dir / "timings.csv", timings.str());
  return res;
}

}  // namespace poisonguard
