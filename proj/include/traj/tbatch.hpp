// t-Batch: partition of a time-ordered interaction stream into ordered
// independent edge sets.
//
// Interaction r between user u and item i is placed in batch
//   max(1 + maxBatch(u), 1 + maxBatch(i))
// where maxBatch(e) is the largest batch index already holding an interaction
// of entity e (0 when none). One pass, O(|S|).
//
// Guarantees consumed by the trainer:
//   * no user and no item appears twice in a batch, so batch members can be
//     processed concurrently;
//   * each entity's interactions land in strictly increasing batch indices, so
//     processing batches in order respects per-entity time order.

#pragma once

#include "traj/data.hpp"

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace traj {

struct BatchPlan {
  /// Each batch lists seq_ids in ascending order.
  std::vector<std::vector<std::size_t>> batches;

  std::size_t num_batches() const { return batches.size(); }
  std::size_t num_interactions() const {
    std::size_t n = 0;
    for (const auto& b : batches) n += b.size();
    return n;
  }
};

inline BatchPlan assign_batches(const Dataset& ds, IndexRange range) {
  range.end = std::min(range.end, ds.size());
  BatchPlan plan;
  if (range.empty()) return plan;
  // max_batch_user / max_batch_item hold 1-based batch indices, 0 = none yet.
  std::vector<std::size_t> max_batch_user(ds.num_users, 0);
  std::vector<std::size_t> max_batch_item(ds.num_items, 0);
  // First pass assigns batch indices; the second sizes each batch once and
  // fills it, so no batch reallocates while growing.
  std::vector<std::uint32_t> batch_of(range.size());
  std::vector<std::size_t> sizes;
  for (std::size_t r = range.begin; r < range.end; ++r) {
    const auto& x = ds.interactions[r];
    const std::size_t k = std::max(max_batch_user[x.user], max_batch_item[x.item]) + 1;
    max_batch_user[x.user] = k;
    max_batch_item[x.item] = k;
    // k is at most one past the current batch count, so the plan never has
    // holes and no trailing empty batches need discarding.
    if (k > sizes.size()) sizes.push_back(0);
    ++sizes[k - 1];
    batch_of[r - range.begin] = static_cast<std::uint32_t>(k - 1);
  }
  plan.batches.resize(sizes.size());
  for (std::size_t b = 0; b < sizes.size(); ++b) plan.batches[b].reserve(sizes[b]);
  for (std::size_t r = range.begin; r < range.end; ++r) plan.batches[batch_of[r - range.begin]].push_back(r);
  return plan;
}

inline BatchPlan assign_batches(const Dataset& ds) {
  return assign_batches(ds, IndexRange{0, ds.size()});
}

struct PlanViolation {
  enum class Kind {
    SharedEntity,  // two interactions of one user or item in one batch
    OrderBroken,   // an entity's batch indices do not increase with seq_id
    Coverage,      // seq_id missing, duplicated or outside the range
  };
  Kind kind;
  std::size_t batch;
  std::size_t seq_id;
  std::string detail;
};

struct PlanVerification {
  std::vector<PlanViolation> violations;

  bool valid() const { return violations.empty(); }
  std::size_t count(PlanViolation::Kind k) const {
    return static_cast<std::size_t>(std::count_if(
        violations.begin(), violations.end(), [k](const auto& v) { return v.kind == k; }));
  }
};

/// Independent checker: recomputes every property from scratch without the
/// assignment rule.
inline PlanVerification verify_plan(const BatchPlan& plan, const Dataset& ds, IndexRange range) {
  range.end = std::min(range.end, ds.size());
  if (plan.num_interactions() != range.size()) {
    throw Error("verify_plan: plan holds " + std::to_string(plan.num_interactions()) +
                " interactions but the range has " + std::to_string(range.size()));
  }
  PlanVerification report;
  using Kind = PlanViolation::Kind;
  constexpr std::size_t kUnseen = static_cast<std::size_t>(-1);
  std::vector<std::size_t> batch_of(range.size(), kUnseen);

  std::vector<std::size_t> user_stamp(ds.num_users, kUnseen);
  std::vector<std::size_t> item_stamp(ds.num_items, kUnseen);
  for (std::size_t b = 0; b < plan.batches.size(); ++b) {
    for (std::size_t r : plan.batches[b]) {
      if (!range.contains(r)) {
        report.violations.push_back({Kind::Coverage, b, r, "seq_id outside range"});
        continue;
      }
      if (batch_of[r - range.begin] != kUnseen) {
        report.violations.push_back({Kind::Coverage, b, r, "seq_id assigned twice"});
        continue;
      }
      batch_of[r - range.begin] = b;
      const auto& x = ds.interactions[r];
      if (user_stamp[x.user] == b) {
        report.violations.push_back({Kind::SharedEntity, b, r, "user repeated in batch"});
      }
      if (item_stamp[x.item] == b) {
        report.violations.push_back({Kind::SharedEntity, b, r, "item repeated in batch"});
      }
      user_stamp[x.user] = b;
      item_stamp[x.item] = b;
    }
  }

  std::vector<std::size_t> last_user_batch(ds.num_users, kUnseen);
  std::vector<std::size_t> last_item_batch(ds.num_items, kUnseen);
  for (std::size_t r = range.begin; r < range.end; ++r) {
    const std::size_t b = batch_of[r - range.begin];
    if (b == kUnseen) {
      report.violations.push_back({Kind::Coverage, kUnseen, r, "seq_id missing from plan"});
      continue;
    }
    const auto& x = ds.interactions[r];
    const auto check = [&](std::vector<std::size_t>& last, std::size_t e, const char* what) {
      if (last[e] != kUnseen && last[e] >= b) {
        report.violations.push_back({Kind::OrderBroken, b, r,
                                     std::string(what) + " " + std::to_string(e) +
                                         " previously in batch " + std::to_string(last[e])});
      }
      last[e] = b;
    };
    check(last_user_batch, x.user, "user");
    check(last_item_batch, x.item, "item");
  }
  return report;
}

inline PlanVerification verify_plan(const BatchPlan& plan, const Dataset& ds) {
  return verify_plan(plan, ds, IndexRange{0, ds.size()});
}

struct PlanStats {
  std::size_t num_interactions = 0;
  std::size_t num_batches = 0;
  std::size_t max_batch_size = 0;
  double mean_batch_size = 0.0;
  double parallelism_ratio = 0.0;  // |S| / num_batches
};

inline PlanStats plan_stats(const BatchPlan& plan) {
  PlanStats s;
  s.num_batches = plan.batches.size();
  for (const auto& b : plan.batches) {
    s.num_interactions += b.size();
    s.max_batch_size = std::max(s.max_batch_size, b.size());
  }
  if (s.num_batches > 0) {
    s.mean_batch_size = static_cast<double>(s.num_interactions) / static_cast<double>(s.num_batches);
    s.parallelism_ratio = s.mean_batch_size;
  }
  return s;
}

}  // namespace traj
