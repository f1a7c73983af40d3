#pragma once

#include <cmath>
#include <compare>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace poisonguard {

struct CellKey {
  std::string dataset;
  std::string split;
  std::string method;
  int fraction = 0;
};

namespace detail {

inline int method_rank(const std::string& m) {
  if (m == "dnn") return 0;
  if (m == "df") return 1;
  if (m == "bnn") return 2;
  return 3;
}

inline int split_rank(const std::string& s) {
  if (s == "clean") return 0;
  if (s == "poisoned") return 1;
  return 2;
}

inline std::string format_cell(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace detail

/// Row order: dataset, then split (clean, poisoned, others), then method
/// (dnn, df, bnn, others), then fraction.
inline bool operator<(const CellKey& a, const CellKey& b) {
  auto tie = [](const CellKey& k) {
    return std::make_tuple(k.dataset, detail::split_rank(k.split), k.split, detail::method_rank(k.method),
                           k.method, k.fraction);
  };
  return tie(a) < tie(b);
}
inline bool operator==(const CellKey& a, const CellKey& b) {
  return a.dataset == b.dataset && a.split == b.split && a.method == b.method && a.fraction == b.fraction;
}

/// A percentage rounded to 2 decimals, or a failed computation.
struct Cell {
  bool failed = false;
  double value = 0.0;
  bool operator==(const Cell&) const = default;
};

/// Sparse table of percentages keyed by row (dataset, split, method) and
/// column (poison fraction). Columns are the fractions that hold any cell.
class ResultsTable {
 public:
  explicit ResultsTable(std::string metric = {}) : metric_(std::move(metric)) {}

  void set(const CellKey& key, double percent) {
    check_fraction(key.fraction);
    cells_[key] = Cell{false, std::round(percent * 100.0) / 100.0};
  }
  void set_failed(const CellKey& key) {
    check_fraction(key.fraction);
    cells_[key] = Cell{true, 0.0};
  }

  const std::map<CellKey, Cell>& cells() const { return cells_; }
  const std::string& metric() const { return metric_; }
  bool empty() const { return cells_.empty(); }

  std::set<int> columns() const {
    std::set<int> out;
    for (const auto& [k, c] : cells_) out.insert(k.fraction);
    return out;
  }

  bool operator==(const ResultsTable& o) const { return cells_ == o.cells_; }

 private:
  static void check_fraction(int f) {
    if (f < 0 || f > 100) throw std::invalid_argument("results table: fraction " + std::to_string(f));
  }

  std::string metric_;
  std::map<CellKey, Cell> cells_;
};

enum class TableFormat { csv, markdown };

/// Long CSV (dataset,split,method,fraction,value) or a wide markdown table
/// with one column per fraction; "-" marks a missing cell, "x" a failed one.
inline std::string render_table(const ResultsTable& t, TableFormat format) {
  std::ostringstream os;
  if (format == TableFormat::csv) {
    os << "dataset,split,method,fraction,value\n";
    for (const auto& [k, c] : t.cells()) {
      os << k.dataset << ',' << k.split << ',' << k.method << ',' << k.fraction << ','
         << (c.failed ? "x" : detail::format_cell(c.value)) << '\n';
    }
    return os.str();
  }
  const auto cols = t.columns();
  os << "| dataset | split | method |";
  for (int f : cols) os << ' ' << f << " |";
  os << "\n|---|---|---|";
  for (std::size_t i = 0; i < cols.size(); ++i) os << "---:|";
  os << '\n';
  std::vector<CellKey> rows;
  for (const auto& [k, c] : t.cells()) {
    if (rows.empty() || rows.back().dataset != k.dataset || rows.back().split != k.split ||
        rows.back().method != k.method) {
      rows.push_back({k.dataset, k.split, k.method, 0});
    }
  }
  for (const auto& r : rows) {
    os << "| " << r.dataset << " | " << r.split << " | " << r.method << " |";
    for (int f : cols) {
      auto it = t.cells().find({r.dataset, r.split, r.method, f});
      os << ' ' << (it == t.cells().end() ? "-" : it->second.failed ? "x" : detail::format_cell(it->second.value))
         << " |";
    }
    os << '\n';
  }
  return os.str();
}

/// Inverse of the CSV rendering.
inline ResultsTable parse_table_csv(const std::string& text, std::string metric = {}) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "dataset,split,method,fraction,value") {
    throw std::invalid_argument("results csv: missing header");
  }
  ResultsTable t(std::move(metric));
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 5) throw std::invalid_argument("results csv line " + std::to_string(lineno) + ": expected 5 fields");
    CellKey key{f[0], f[1], f[2], 0};
    try {
      key.fraction = std::stoi(f[3]);
      if (f[4] == "x") {
        t.set_failed(key);
      } else {
        t.set(key, std::stod(f[4]));
      }
    } catch (const std::logic_error&) {
      throw std::invalid_argument("results csv line " + std::to_string(lineno) + ": bad number");
    }
  }
  return t;
}

}  // namespace poisonguard
