// Random-hyperplane LSH over item vectors [one-hot(k) | dyn_k].
//
// A hyperplane r of length d_i + n gives item k the projection
// r[k] + r[d_i:]·dyn_k, so the one-hot part is never materialized. Each table
// hashes an item to the sign pattern of its `planes` projections.

#pragma once

#include "traj/model.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <unordered_map>
#include <vector>

namespace traj {

struct LshConfig {
  std::size_t planes = 8;  // hyperplanes (signature bits) per table
  std::size_t tables = 4;
  std::uint64_t seed = 0;
};

class LshIndex {
 public:
  LshIndex(std::size_t num_items, std::size_t embedding_dim, LshConfig cfg)
      : num_items_(num_items), dim_(embedding_dim), cfg_(cfg) {
    if (cfg.planes == 0) throw Error("LshIndex: planes per table must be >= 1");
    if (cfg.planes > 64) throw Error("LshIndex: at most 64 planes per table");
    if (cfg.tables == 0) throw Error("LshIndex: need at least one table");
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    hyperplanes_ = Mat(cfg.tables * cfg.planes, num_items + embedding_dim);
    for (double& v : hyperplanes_.values()) v = normal(rng);
    buckets_.resize(cfg.tables);
    signatures_.assign(num_items * cfg.tables, 0);
    stale_.assign(num_items, true);
  }

  std::size_t num_items() const { return num_items_; }
  const LshConfig& config() const { return cfg_; }

  void build(ConstMatRef item_dyn) {
    check_items(item_dyn);
    for (auto& table : buckets_) table.clear();
    for (std::size_t k = 0; k < num_items_; ++k) {
      for (std::size_t t = 0; t < cfg_.tables; ++t) {
        const auto sig = item_signature(t, k, item_dyn.row(k));
        signatures_[k * cfg_.tables + t] = sig;
        buckets_[t][sig].push_back(k);
      }
      stale_[k] = false;
    }
  }

  void mark_stale(std::size_t item) { stale_.at(item) = true; }
  bool is_stale(std::size_t item) const { return stale_.at(item); }

  /// Re-hashes every stale item against its current embedding.
  void repair(ConstMatRef item_dyn) {
    check_items(item_dyn);
    for (std::size_t k = 0; k < num_items_; ++k) {
      if (stale_[k]) rehash(k, item_dyn.row(k));
    }
  }

  /// Union of bucket members matching the query in any table, ascending.
  std::vector<std::size_t> candidates(std::span<const double> query) const {
    if (query.size() != num_items_ + dim_) throw Error("LshIndex: query length mismatch");
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < cfg_.tables; ++t) {
      const auto it = buckets_[t].find(query_signature(t, query));
      if (it != buckets_[t].end()) out.insert(out.end(), it->second.begin(), it->second.end());
    }
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  /// Every item sits in exactly one bucket per table.
  bool consistent() const {
    for (std::size_t t = 0; t < cfg_.tables; ++t) {
      std::vector<int> seen(num_items_, 0);
      for (const auto& [sig, members] : buckets_[t]) {
        for (std::size_t k : members) {
          if (signatures_[k * cfg_.tables + t] != sig) return false;
          ++seen[k];
        }
      }
      if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; })) return false;
    }
    return true;
  }

 private:
  void check_items(ConstMatRef item_dyn) const {
    if (item_dyn.rows() != num_items_ || item_dyn.cols() != dim_) {
      throw Error("LshIndex: item matrix " + shape_string(item_dyn.rows(), item_dyn.cols()) +
                  " does not match index " + shape_string(num_items_, dim_));
    }
  }

  void rehash(std::size_t k, std::span<const double> dyn) {
    for (std::size_t t = 0; t < cfg_.tables; ++t) {
      auto& old_sig = signatures_[k * cfg_.tables + t];
      const auto sig = item_signature(t, k, dyn);
      if (auto it = buckets_[t].find(old_sig); it != buckets_[t].end()) {
        auto& v = it->second;
        v.erase(std::remove(v.begin(), v.end(), k), v.end());
        if (v.empty()) buckets_[t].erase(it);
      }
      buckets_[t][sig].push_back(k);
      old_sig = sig;
    }
    stale_[k] = false;
  }

  std::uint64_t item_signature(std::size_t t, std::size_t k, std::span<const double> dyn) const {
    std::uint64_t sig = 0;
    for (std::size_t h = 0; h < cfg_.planes; ++h) {
      const auto plane = hyperplanes_.row(t * cfg_.planes + h);
      double s = plane[k];
      for (std::size_t c = 0; c < dim_; ++c) s += plane[num_items_ + c] * dyn[c];
      if (s >= 0.0) sig |= std::uint64_t{1} << h;
    }
    return sig;
  }

  std::uint64_t query_signature(std::size_t t, std::span<const double> q) const {
    std::uint64_t sig = 0;
    for (std::size_t h = 0; h < cfg_.planes; ++h) {
      if (dot(hyperplanes_.row(t * cfg_.planes + h), q) >= 0.0) sig |= std::uint64_t{1} << h;
    }
    return sig;
  }

  std::size_t num_items_;
  std::size_t dim_;
  LshConfig cfg_;
  Mat hyperplanes_;
  std::vector<std::unordered_map<std::uint64_t, std::vector<std::size_t>>> buckets_;
  std::vector<std::uint64_t> signatures_;  // item-major, one per table
  std::vector<bool> stale_;
};

inline LshIndex lsh_build(ConstMatRef item_dyn, LshConfig cfg) {
  LshIndex index(item_dyn.rows(), item_dyn.cols(), cfg);
  index.build(item_dyn);
  return index;
}

/// Candidates from the index re-ranked by exact distance; at most `k`.
/// When no bucket matches, every item is a candidate.
inline std::vector<std::size_t> lsh_query(const LshIndex& index, ConstMatRef item_dyn,
                                          std::span<const double> j_pred, std::size_t k) {
  auto cand = index.candidates(j_pred);
  if (cand.empty()) {
    cand.resize(index.num_items());
    std::iota(cand.begin(), cand.end(), 0);
  }
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(cand.size());
  for (std::size_t c : cand) {
    scored.emplace_back(item_distance(j_pred, index.num_items(), c, item_dyn.row(c)), c);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < scored.size() && r < k; ++r) out.push_back(scored[r].second);
  return out;
}

}  // namespace traj
