// Ranking metrics (MRR, recall@k), state-change AUC, and the sequential
// evaluation protocol.
//
// Evaluation walks a range in time order. For each interaction the user is
// projected to the interaction time, the item embedding is predicted and the
// ground-truth item ranked against every item; only then is the update
// applied, so later interactions see current state. Parameters stay frozen.

#pragma once

#include "traj/data.hpp"
#include "traj/lsh.hpp"
#include "traj/model.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <optional>
#include <vector>

namespace traj {

struct RankRecord {
  std::size_t seq_id = 0;
  std::size_t rank = 0;  // 1-based
  double reciprocal_rank = 0.0;
};

struct MetricsReport {
  std::optional<double> mrr;
  std::optional<double> recall_at_10;
  std::optional<double> auc;
  std::size_t n_test_interactions = 0;
  double wall_clock_seconds = 0.0;
};

/// Squared distances from `j_pred` to every item [one-hot(k) | dyn_k].
inline Vec item_squared_distances(std::span<const double> j_pred, ConstMatRef item_dyn) {
  const std::size_t items = item_dyn.rows();
  const std::size_t n = item_dyn.cols();
  if (j_pred.size() != items + n) {
    throw Error("ranking: predicted vector length " + std::to_string(j_pred.size()) +
                " does not match " + std::to_string(items) + " items + " + std::to_string(n));
  }
  double static_sq = 0.0;
  for (std::size_t r = 0; r < items; ++r) static_sq += j_pred[r] * j_pred[r];
  // ‖js − e_k‖² = ‖js‖² − 2 js[k] + 1
  Vec out(items);
  const auto dyn = ConstVecMap(j_pred.data() + items, static_cast<Eigen::Index>(n));
  const auto m = item_dyn.eigen();
  for (std::size_t k = 0; k < items; ++k) {
    const double dyn_sq = (m.row(static_cast<Eigen::Index>(k)).transpose() - dyn).squaredNorm();
    out[k] = static_sq - 2.0 * j_pred[k] + 1.0 + dyn_sq;
  }
  return out;
}

/// Rank of `true_idx` by ascending distance. Items at exactly the true
/// item's distance (itself included, `ties` of them) share positions
/// less+1 .. less+ties; the true item takes the mean position rounded up:
/// rank = less + ceil((1 + ties) / 2).
inline std::size_t rank_from_distances(std::span<const double> dist, std::size_t true_idx) {
  if (dist.empty()) throw Error("rank_ground_truth: empty item set");
  if (true_idx >= dist.size()) throw Error("rank_ground_truth: true item out of range");
  const double target = dist[true_idx];
  std::size_t less = 0, ties = 0;
  for (double d : dist) {
    if (d < target) {
      ++less;
    } else if (d == target) {
      ++ties;
    }
  }
  return less + (ties + 2) / 2;
}

inline std::size_t rank_ground_truth(std::span<const double> j_pred, ConstMatRef item_dyn,
                                     std::size_t true_idx) {
  if (item_dyn.rows() == 0) throw Error("rank_ground_truth: empty item set");
  return rank_from_distances(item_squared_distances(j_pred, item_dyn), true_idx);
}

inline double mean_reciprocal_rank(std::span<const std::size_t> ranks) {
  if (ranks.empty()) throw Error("mean_reciprocal_rank: no ranks");
  double s = 0.0;
  for (std::size_t r : ranks) s += 1.0 / static_cast<double>(r);
  return s / static_cast<double>(ranks.size());
}

inline double recall_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw Error("recall_at_k: no ranks");
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [k](std::size_t r) { return r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

/// Mann–Whitney AUC: P(score of a random positive > score of a random
/// negative), ties counted one half. O(N log N) via midranks.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("auc: scores/labels length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] != 0) {
        pos_rank_sum += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) {
    throw Error("AUC undefined: need at least one positive and one negative label");
  }
  const double p = static_cast<double>(positives);
  const double q = static_cast<double>(negatives);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

struct EvalOptions {
  bool use_lsh = false;
  LshConfig lsh;
  std::size_t recall_k = 10;
  bool state_use_static = true;
};

/// Applies the update operation for interaction `r` to `state`.
inline void advance_state(const Dataset& ds, const DeltaTable& deltas, std::size_t r,
                          const ModelParams& p, EmbeddingState& state, Vec* user_out = nullptr) {
  const auto& x = ds.interactions[r];
  auto next = update_embeddings(state.user_dyn.row(x.user), state.item_dyn.row(x.item),
                                x.features, deltas.delta_u[r], deltas.delta_i[r], p);
  std::copy(next.user.begin(), next.user.end(), state.user_dyn.row(x.user).begin());
  std::copy(next.item.begin(), next.item.end(), state.item_dyn.row(x.item).begin());
  state.user_last_time[x.user] = x.timestamp;
  state.item_last_time[x.item] = x.timestamp;
  state.user_last_item[x.user] = x.item;
  if (user_out) *user_out = std::move(next.user);
}

/// Predicted item vector for interaction `r` from the current state.
inline Vec predict_for(const Dataset& ds, const DeltaTable& deltas, std::size_t r,
                       const ModelParams& p, const EmbeddingState& state) {
  const auto& x = ds.interactions[r];
  const Vec u_proj = project_user(state.user_dyn.row(x.user), deltas.delta_u[r], p);
  const auto prev = state.user_last_item[x.user];
  std::span<const double> prev_dyn;
  if (prev) prev_dyn = state.item_dyn.row(*prev);
  return predict_item_embedding(u_proj, x.user, prev_dyn, prev, p);
}

/// Ranks every interaction in `range` and leaves `state` advanced to its end.
/// With LSH enabled the true item's rank is its position among the exactly
/// re-ranked candidates, or num_items when it is not a candidate.
inline std::pair<MetricsReport, std::vector<RankRecord>> evaluate_interactions(
    const Dataset& ds, const DeltaTable& deltas, IndexRange range, const ModelParams& p,
    EmbeddingState& state, const EvalOptions& opts = {}) {
  const auto start = std::chrono::steady_clock::now();
  range.end = std::min(range.end, ds.size());
  std::optional<LshIndex> index;
  if (opts.use_lsh) index = lsh_build(state.item_dyn, opts.lsh);

  std::vector<RankRecord> records;
  records.reserve(range.size());
  std::vector<std::size_t> ranks;
  ranks.reserve(range.size());
  for (std::size_t r = range.begin; r < range.end; ++r) {
    const auto& x = ds.interactions[r];
    const Vec j_pred = predict_for(ds, deltas, r, p, state);
    std::size_t rank = 0;
    if (index) {
      index->repair(state.item_dyn);
      const auto top = lsh_query(*index, state.item_dyn, j_pred, ds.num_items);
      const auto it = std::find(top.begin(), top.end(), x.item);
      rank = it == top.end() ? ds.num_items : static_cast<std::size_t>(it - top.begin()) + 1;
    } else {
      rank = rank_ground_truth(j_pred, state.item_dyn, x.item);
    }
    ranks.push_back(rank);
    records.push_back({r, rank, 1.0 / static_cast<double>(rank)});
    advance_state(ds, deltas, r, p, state);
    if (index) index->mark_stale(x.item);
  }
  MetricsReport report;
  report.n_test_interactions = ranks.size();
  if (!ranks.empty()) {
    report.mrr = mean_reciprocal_rank(ranks);
    report.recall_at_10 = recall_at_k(ranks, opts.recall_k);
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {report, std::move(records)};
}

struct StateScores {
  Vec scores;
  std::vector<int> labels;
};

/// Post-update state-change probability for every interaction in `range`.
inline StateScores score_state_changes(const Dataset& ds, const DeltaTable& deltas,
                                       IndexRange range, const ModelParams& p,
                                       EmbeddingState& state, bool use_static = true) {
  range.end = std::min(range.end, ds.size());
  StateScores out;
  out.scores.reserve(range.size());
  out.labels.reserve(range.size());
  Vec u_new;
  for (std::size_t r = range.begin; r < range.end; ++r) {
    advance_state(ds, deltas, r, p, state, &u_new);
    out.scores.push_back(predict_state_change(u_new, ds.interactions[r].user, p, use_static));
    out.labels.push_back(ds.interactions[r].state_label);
  }
  return out;
}

inline MetricsReport evaluate_state_change(const Dataset& ds, const DeltaTable& deltas,
                                           IndexRange range, const ModelParams& p,
                                           EmbeddingState& state, bool use_static = true) {
  if (!ds.has_state_labels) throw Error("no state labels in dataset");
  const auto start = std::chrono::steady_clock::now();
  const auto scored = score_state_changes(ds, deltas, range, p, state, use_static);
  if (std::none_of(scored.labels.begin(), scored.labels.end(), [](int l) { return l != 0; })) {
    throw Error("AUC undefined: no positive state labels in evaluation range");
  }
  MetricsReport report;
  report.auc = auc(scored.scores, scored.labels);
  report.n_test_interactions = scored.scores.size();
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace traj
