// Interaction-log ingestion, entity indexing, inter-event deltas and
// chronological splits.
//
// Input format (CSV, one header row):
//
//   user_id,item_id,timestamp,state_label,comma_separated_list_of_features
//
// The state_label column is optional; it is recognised by name in the header.
// Every column after it is a float feature; the count must be constant.

#pragma once

#include "traj/numkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace traj {

struct Interaction {
  std::size_t user = 0;
  std::size_t item = 0;
  double timestamp = 0.0;
  Vec features;
  int state_label = 0;
  std::size_t seq_id = 0;

  bool operator==(const Interaction&) const = default;
};

struct Dataset {
  std::vector<Interaction> interactions;
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t feature_dim = 0;
  bool has_state_labels = false;
  std::vector<std::string> user_ids;  // index -> original identifier
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, std::size_t> user_index;
  std::unordered_map<std::string, std::size_t> item_index;

  std::size_t size() const { return interactions.size(); }
  const Interaction& operator[](std::size_t r) const { return interactions[r]; }
};

/// Half-open range of sequence positions.
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t r) const { return r >= begin && r < end; }
  bool operator==(const IndexRange&) const = default;
};

struct Split {
  IndexRange train;
  IndexRange validation;
  IndexRange test;
};

struct IngestOptions {
  char delimiter = ',';
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto* first = s.data();
  const auto* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || s.empty()) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

struct RawRow {
  std::string user;
  std::string item;
  double timestamp;
  int label;
  Vec features;
};

}  // namespace detail

inline Dataset parse_interactions(std::istream& in, const std::string& source,
                                  const IngestOptions& opts = {}) {
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!detail::trim(line).empty()) {
      have_header = true;
      break;
    }
  }
  if (!have_header) throw Error(source + ": no interactions (empty file)");

  const auto header = detail::split_fields(line, opts.delimiter);
  if (header.size() < 3) {
    throw Error(source + ":" + std::to_string(line_no) +
                ": header needs at least user_id,item_id,timestamp");
  }
  const bool has_labels = header.size() >= 4 && header[3] == "state_label";
  const std::size_t fixed_cols = has_labels ? 4 : 3;

  std::vector<detail::RawRow> rows;
  std::optional<std::size_t> feature_count;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto fields = detail::split_fields(line, opts.delimiter);
    const auto where = [&] { return source + ":" + std::to_string(line_no) + ": "; };
    if (fields.size() < fixed_cols) {
      throw Error(where() + "malformed row, expected at least " +
                  std::to_string(fixed_cols) + " columns");
    }
    const std::size_t f = fields.size() - fixed_cols;
    if (!feature_count) {
      feature_count = f;
    } else if (*feature_count != f) {
      throw Error(where() + "inconsistent feature count " + std::to_string(f) +
                  " (expected " + std::to_string(*feature_count) + ")");
    }
    if (fields[0].empty() || fields[1].empty()) throw Error(where() + "empty identifier");
    detail::RawRow row;
    row.user = std::string(fields[0]);
    row.item = std::string(fields[1]);
    const auto ts = detail::parse_double(fields[2]);
    if (!ts || !std::isfinite(*ts)) throw Error(where() + "malformed timestamp");
    if (*ts < 0.0) throw Error(where() + "negative timestamp");
    row.timestamp = *ts;
    row.label = 0;
    if (has_labels) {
      const auto lab = detail::parse_double(fields[3]);
      if (!lab || (*lab != 0.0 && *lab != 1.0)) {
        throw Error(where() + "state_label must be 0 or 1");
      }
      row.label = static_cast<int>(*lab);
    }
    row.features.reserve(f);
    for (std::size_t k = fixed_cols; k < fields.size(); ++k) {
      const auto v = detail::parse_double(fields[k]);
      if (!v || !std::isfinite(*v)) {
        throw Error(where() + "malformed feature in column " + std::to_string(k + 1));
      }
      row.features.push_back(*v);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error(source + ": no interactions");

  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });

  Dataset ds;
  ds.has_state_labels = has_labels;
  // Feature-less logs get one constant zero feature so layer shapes stay uniform.
  const bool pad = *feature_count == 0;
  ds.feature_dim = pad ? 1 : *feature_count;
  ds.interactions.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto& row = rows[r];
    Interaction x;
    auto [uit, unew] = ds.user_index.try_emplace(row.user, ds.user_ids.size());
    if (unew) ds.user_ids.push_back(row.user);
    auto [iit, inew] = ds.item_index.try_emplace(row.item, ds.item_ids.size());
    if (inew) ds.item_ids.push_back(row.item);
    x.user = uit->second;
    x.item = iit->second;
    x.timestamp = row.timestamp;
    x.state_label = row.label;
    x.features = pad ? Vec{0.0} : std::move(row.features);
    x.seq_id = r;
    ds.interactions.push_back(std::move(x));
  }
  ds.num_users = ds.user_ids.size();
  ds.num_items = ds.item_ids.size();
  return ds;
}

inline Dataset load_interactions(const std::string& path, const IngestOptions& opts = {}) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open interaction file '" + path + "'");
  return parse_interactions(in, path, opts);
}

/// Writes `ds` in the ingest format; reloading reproduces the interactions
/// exactly (shortest round-trip float formatting).
inline void save_interactions(const Dataset& ds, std::ostream& out) {
  out << "user_id,item_id,timestamp";
  if (ds.has_state_labels) out << ",state_label";
  out << ",comma_separated_list_of_features\n";
  for (const auto& x : ds.interactions) {
    out << ds.user_ids[x.user] << ',' << ds.item_ids[x.item] << ','
        << detail::format_double(x.timestamp);
    if (ds.has_state_labels) out << ',' << x.state_label;
    for (double f : x.features) out << ',' << detail::format_double(f);
    out << '\n';
  }
}

inline void save_interactions(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write interaction file '" + path + "'");
  save_interactions(ds, out);
}

/// Builds a dataset from already-indexed interactions (synthetic streams,
/// tests). Interactions are stably sorted by time and seq_ids renumbered.
inline Dataset make_dataset(std::vector<Interaction> xs, std::size_t num_users,
                            std::size_t num_items, std::size_t feature_dim,
                            bool has_state_labels) {
  std::stable_sort(xs.begin(), xs.end(), [](const auto& a, const auto& b) {
    return a.timestamp < b.timestamp;
  });
  Dataset ds;
  ds.num_users = num_users;
  ds.num_items = num_items;
  ds.feature_dim = feature_dim;
  ds.has_state_labels = has_state_labels;
  for (std::size_t u = 0; u < num_users; ++u) {
    ds.user_ids.push_back("u" + std::to_string(u));
    ds.user_index.emplace(ds.user_ids.back(), u);
  }
  for (std::size_t i = 0; i < num_items; ++i) {
    ds.item_ids.push_back("i" + std::to_string(i));
    ds.item_index.emplace(ds.item_ids.back(), i);
  }
  for (std::size_t r = 0; r < xs.size(); ++r) {
    auto& x = xs[r];
    if (x.user >= num_users || x.item >= num_items) {
      throw Error("make_dataset: entity index out of range at position " + std::to_string(r));
    }
    if (x.features.size() != feature_dim) {
      throw Error("make_dataset: feature length mismatch at position " + std::to_string(r));
    }
    if (x.timestamp < 0.0) throw Error("make_dataset: negative timestamp");
    x.seq_id = r;
  }
  ds.interactions = std::move(xs);
  return ds;
}

/// Boundaries are floor(|S| * cumulative_pct / 100). Without `test_pct` the
/// test range takes the remainder.
inline Split chronological_split(std::size_t count, double train_pct, double val_pct,
                                 std::optional<double> test_pct = std::nullopt) {
  if (!(train_pct > 0.0) || !(val_pct > 0.0) || !(train_pct + val_pct < 100.0)) {
    throw Error("chronological_split: percentages out of range (train " +
                detail::format_double(train_pct) + ", validation " +
                detail::format_double(val_pct) + ")");
  }
  if (test_pct && (!(*test_pct > 0.0) || train_pct + val_pct + *test_pct > 100.0 + 1e-9)) {
    throw Error("chronological_split: test percentage out of range");
  }
  const auto boundary = [count](double pct) {
    const double raw = static_cast<double>(count) * pct / 100.0;
    return std::min(count, static_cast<std::size_t>(std::floor(raw + 1e-9)));
  };
  Split s;
  s.train = {0, boundary(train_pct)};
  s.validation = {s.train.end, boundary(train_pct + val_pct)};
  s.test = {s.validation.end, test_pct ? boundary(train_pct + val_pct + *test_pct) : count};
  if (s.train.empty() || s.validation.empty() || s.test.empty()) {
    throw Error("chronological_split: empty split (train " + std::to_string(s.train.size()) +
                ", validation " + std::to_string(s.validation.size()) + ", test " +
                std::to_string(s.test.size()) + ")");
  }
  return s;
}

inline Split chronological_split(const Dataset& ds, double train_pct, double val_pct,
                                 std::optional<double> test_pct = std::nullopt) {
  return chronological_split(ds.size(), train_pct, val_pct, test_pct);
}

enum class DeltaScale { MeanStd, Max, None };

inline std::string to_string(DeltaScale s) {
  switch (s) {
    case DeltaScale::MeanStd: return "mean-std";
    case DeltaScale::Max: return "max";
    case DeltaScale::None: return "none";
  }
  return "?";
}

inline DeltaScale parse_delta_scale(std::string_view s) {
  if (s == "mean-std") return DeltaScale::MeanStd;
  if (s == "max") return DeltaScale::Max;
  if (s == "none") return DeltaScale::None;
  throw Error("unknown delta scale '" + std::string(s) + "' (mean-std|max|none)");
}

struct DeltaTable {
  Vec raw_u;    // seconds since the user's previous interaction
  Vec raw_i;    // seconds since the item's previous interaction
  Vec delta_u;  // normalized
  Vec delta_i;
  DeltaScale scale = DeltaScale::None;
  double user_offset = 0.0, user_divisor = 1.0;
  double item_offset = 0.0, item_divisor = 1.0;
};

namespace detail {

inline std::pair<double, double> delta_normalizer(const Vec& raw, IndexRange stats,
                                                  DeltaScale scale) {
  if (scale == DeltaScale::None || stats.empty()) return {0.0, 1.0};
  if (scale == DeltaScale::Max) {
    double mx = 0.0;
    for (std::size_t r = stats.begin; r < stats.end; ++r) mx = std::max(mx, raw[r]);
    return {0.0, mx > 0.0 ? mx : 1.0};
  }
  const double n = static_cast<double>(stats.size());
  double mean = 0.0;
  for (std::size_t r = stats.begin; r < stats.end; ++r) mean += raw[r];
  mean /= n;
  double var = 0.0;
  for (std::size_t r = stats.begin; r < stats.end; ++r) var += (raw[r] - mean) * (raw[r] - mean);
  const double sd = std::sqrt(var / n);
  return {mean, sd > 0.0 ? sd : 1.0};
}

}  // namespace detail

/// One forward pass with per-entity last-seen timestamps. Normalization
/// statistics come from `stats_range` only (normally the train split).
inline DeltaTable compute_deltas(const Dataset& ds, DeltaScale scale, IndexRange stats_range) {
  DeltaTable t;
  t.scale = scale;
  const std::size_t n = ds.size();
  t.raw_u.resize(n);
  t.raw_i.resize(n);
  std::vector<std::optional<double>> last_u(ds.num_users), last_i(ds.num_items);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& x = ds.interactions[r];
    t.raw_u[r] = last_u[x.user] ? x.timestamp - *last_u[x.user] : 0.0;
    t.raw_i[r] = last_i[x.item] ? x.timestamp - *last_i[x.item] : 0.0;
    last_u[x.user] = x.timestamp;
    last_i[x.item] = x.timestamp;
  }
  stats_range.end = std::min(stats_range.end, n);
  std::tie(t.user_offset, t.user_divisor) = detail::delta_normalizer(t.raw_u, stats_range, scale);
  std::tie(t.item_offset, t.item_divisor) = detail::delta_normalizer(t.raw_i, stats_range, scale);
  t.delta_u.resize(n);
  t.delta_i.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    t.delta_u[r] = (t.raw_u[r] - t.user_offset) / t.user_divisor;
    t.delta_i[r] = (t.raw_i[r] - t.item_offset) / t.item_divisor;
  }
  return t;
}

inline DeltaTable compute_deltas(const Dataset& ds, DeltaScale scale) {
  return compute_deltas(ds, scale, IndexRange{0, ds.size()});
}

}  // namespace traj
