#pragma once

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "poisonguard/runner/pipeline.hpp"

namespace poisonguard {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitPipeline = 2 };

struct CliOverrides {
  std::string config;
  std::string dataset_dir;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<int> fractions;
  std::vector<std::string> methods;
  std::optional<std::size_t> mc_samples;
};

inline ExperimentConfig resolve_config(const CliOverrides& o) {
  auto cfg = load_config(o.config);
  if (!o.dataset_dir.empty()) cfg.dataset_dir = o.dataset_dir;
  if (!o.out.empty()) cfg.out = o.out;
  if (o.seed) cfg.seed = *o.seed;
  if (!o.fractions.empty()) cfg.fractions = o.fractions;
  if (!o.methods.empty()) cfg.methods = o.methods;
  if (o.mc_samples) cfg.mc_samples = *o.mc_samples;
  cfg.validate();
  return cfg;
}

namespace detail {

inline void print_metrics(std::ostream& os, const std::vector<MetricRecord>& rows) {
  for (const auto& r : rows) {
    os << r.dataset << ' ' << r.fraction << "% " << r.method << ' ' << r.split << ' ' << r.metric << ' '
       << std::fixed << std::setprecision(2) << r.value << '\n';
  }
}

/// `dir` may hold the table CSVs itself or one subdirectory per dataset.
inline std::vector<fs::path> table_dirs(const fs::path& dir) {
  if (fs::exists(dir / "accuracy.csv")) return {dir};
  std::vector<fs::path> out;
  if (fs::is_directory(dir)) {
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_directory() && fs::exists(e.path() / "accuracy.csv")) out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Entry point of the `poisonguard` tool. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Backdoor poisoning experiments: train, poison, detect, sweep, report"};
  app.require_subcommand(1);
  CliOverrides o;

  auto add_common = [&](CLI::App* sub, bool need_config) {
    auto* c = sub->add_option("--config", o.config, "experiment INI file");
    if (need_config) c->required()->check(CLI::ExistingFile);
    sub->add_option("--dataset-dir", o.dataset_dir, "directory holding the dataset files");
    sub->add_option("--out", o.out, "output root");
    sub->add_option("--seed", o.seed, "experiment seed");
    sub->add_option("--fraction", o.fractions, "poison fraction(s) in percent")->check(CLI::Range(0, 100));
    sub->add_option("--method", o.methods, "method(s): dnn, df, bnn")->check(CLI::IsMember({"dnn", "df", "bnn"}));
    sub->add_option("--mc-samples", o.mc_samples, "Monte Carlo draws for the BNN")->check(CLI::PositiveNumber);
  };
  auto* train = app.add_subcommand("train", "train the DNN (and optionally the BNN) on a poisoned set");
  auto* poison = app.add_subcommand("poison", "write the poisoned training set");
  auto* detect = app.add_subcommand("detect", "run the full pipeline for one or more fractions");
  auto* sweep = app.add_subcommand("sweep", "run all fractions and write the result tables");
  auto* report = app.add_subcommand("report", "re-render markdown tables from stored CSVs");
  for (auto* s : {train, poison, detect, sweep}) add_common(s, true);
  add_common(report, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (report->parsed()) {
      fs::path root = o.out;
      if (root.empty()) {
        if (o.config.empty()) {
          err << "error: report needs --out or --config\n\n" << report->help();
          return kExitUsage;
        }
        root = resolve_config(o).out;
      }
      const auto dirs = detail::table_dirs(root);
      if (dirs.empty()) {
        err << "error: no stored tables under " << root.string() << '\n';
        return kExitPipeline;
      }
      for (const auto& d : dirs) {
        auto tables = read_tables(d);
        write_tables(tables, d);
        out << format_report(tables);
      }
      return kExitOk;
    }

    const auto cfg = resolve_config(o);
    const auto data = load_data(cfg);
    if (sweep->parsed()) {
      auto res = run_sweep(cfg, data);
      out << format_report(res.tables);
      return res.failures.empty() ? kExitOk : kExitPipeline;
    }
    for (int f : cfg.fractions) {
      if (poison->parsed()) {
        FractionRun(cfg, data, f).export_poisoned_trainset();
      } else if (train->parsed()) {
        FractionRun run(cfg, data, f);
        for (const auto& m : cfg.methods) {
          if (m == "df") continue;  // nothing to train
          if (m == "bnn" && f == 0) continue;
          run.train_only(m);
        }
      } else if (detect->parsed()) {
        detail::print_metrics(out, run_pipeline(cfg, data, f).metrics);
      }
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitPipeline;
  }
}

}  // namespace poisonguard
