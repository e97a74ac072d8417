#include "test_util.hpp"

using namespace traj;
using Kind = PlanViolation::Kind;

namespace {
/// Brute-force oracle: an interaction's batch is one past the deepest
/// earlier interaction that shares its user or item.
std::vector<std::size_t> depth_oracle(const Dataset& ds) {
  std::vector<std::size_t> depth(ds.size(), 0);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    std::size_t d = 0;
    for (std::size_t q = 0; q < r; ++q) {
      if (ds[q].user == ds[r].user || ds[q].item == ds[r].item) d = std::max(d, depth[q] + 1);
    }
    depth[r] = d;
  }
  return depth;
}

Dataset stream(std::size_t n, std::size_t users, std::size_t items, std::uint64_t seed) {
  RandomStreamConfig cfg;
  cfg.num_interactions = n;
  cfg.num_users = users;
  cfg.num_items = items;
  cfg.feature_dim = 1;
  cfg.seed = seed;
  return random_stream(cfg);
}
}  // namespace

TEST(AssignBatches, AllDistinctIsOneBatch) {
  const auto ds = all_distinct_stream(50);
  const auto plan = assign_batches(ds);
  EXPECT_EQ(plan.num_batches(), 1u);
  EXPECT_EQ(plan.batches[0].size(), 50u);
}

TEST(AssignBatches, SingleUserIsFullySerial) {
  const auto ds = single_user_stream(40);
  const auto plan = assign_batches(ds);
  EXPECT_EQ(plan.num_batches(), 40u);
  for (std::size_t b = 0; b < 40; ++b) EXPECT_EQ(plan.batches[b], (std::vector<std::size_t>{b}));
}

TEST(AssignBatches, HandExample) {
  // (u0,i0) (u1,i1) (u0,i1) (u2,i2) (u1,i0)
  std::vector<Interaction> xs;
  const std::size_t pairs[5][2] = {{0, 0}, {1, 1}, {0, 1}, {2, 2}, {1, 0}};
  for (std::size_t r = 0; r < 5; ++r) xs.push_back({pairs[r][0], pairs[r][1], double(r), {0.0}, 0, 0});
  const auto ds = make_dataset(xs, 3, 3, 1, false);
  const auto plan = assign_batches(ds);
  ASSERT_EQ(plan.num_batches(), 2u);
  EXPECT_EQ(plan.batches[0], (std::vector<std::size_t>{0, 1, 3}));
  EXPECT_EQ(plan.batches[1], (std::vector<std::size_t>{2, 4}));
}

TEST(AssignBatches, MatchesDependencyDepthOracle) {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto ds = stream(300, 1 + seed % 12, 1 + (seed * 7) % 15, seed);
    const auto plan = assign_batches(ds);
    const auto depth = depth_oracle(ds);
    for (std::size_t b = 0; b < plan.num_batches(); ++b) {
      for (std::size_t r : plan.batches[b]) ASSERT_EQ(depth[r], b) << "seed " << seed << " r " << r;
    }
  }
}

TEST(AssignBatches, SubRangeOnly) {
  const auto ds = stream(200, 5, 5, 3);
  const IndexRange train{0, 150};
  const auto plan = assign_batches(ds, train);
  EXPECT_EQ(plan.num_interactions(), 150u);
  EXPECT_TRUE(verify_plan(plan, ds, train).valid());
  for (const auto& b : plan.batches)
    for (std::size_t r : b) EXPECT_LT(r, 150u);
}

TEST(AssignBatches, PropertyValidNoHolesSortedBatches) {
  std::mt19937_64 rng(77);
  for (int t = 0; t < 200; ++t) {
    const auto ds = stream(1 + rng() % 800, 1 + rng() % 50, 1 + rng() % 50, rng());
    const auto plan = assign_batches(ds);
    EXPECT_TRUE(verify_plan(plan, ds).valid());
    EXPECT_GE(plan.num_batches(), 1u);
    EXPECT_LE(plan.num_batches(), ds.size());
    for (const auto& b : plan.batches) {
      EXPECT_FALSE(b.empty());
      EXPECT_TRUE(std::is_sorted(b.begin(), b.end()));
    }
  }
}

TEST(VerifyPlan, DetectsSharedEntity) {
  const auto ds = single_user_stream(3);
  BatchPlan plan{{{0, 1}, {2}}};
  const auto v = verify_plan(plan, ds);
  EXPECT_FALSE(v.valid());
  EXPECT_GE(v.count(Kind::SharedEntity), 1u);
}

TEST(VerifyPlan, DetectsPermutedOrder) {
  const auto ds = single_user_stream(3);
  auto plan = assign_batches(ds);
  std::swap(plan.batches[0], plan.batches[2]);
  const auto v = verify_plan(plan, ds);
  EXPECT_GE(v.count(Kind::OrderBroken), 1u);
}

TEST(VerifyPlan, DetectsCoverageProblems) {
  const auto ds = all_distinct_stream(4);
  EXPECT_GE(verify_plan(BatchPlan{{{0, 1, 2, 2}}}, ds).count(Kind::Coverage), 2u);  // dup + missing
  EXPECT_GE(verify_plan(BatchPlan{{{0, 1, 2, 9}}}, ds).count(Kind::Coverage), 1u);
  EXPECT_THROW(verify_plan(BatchPlan{{{0, 1}}}, ds), Error);
}

TEST(PlanStats, Fields) {
  const auto ds = all_distinct_stream(10);
  auto s = plan_stats(assign_batches(ds));
  EXPECT_EQ(s.num_batches, 1u);
  EXPECT_EQ(s.max_batch_size, 10u);
  EXPECT_DOUBLE_EQ(s.mean_batch_size, 10.0);
  s = plan_stats(assign_batches(single_user_stream(10)));
  EXPECT_EQ(s.num_batches, 10u);
  EXPECT_DOUBLE_EQ(s.parallelism_ratio, 1.0);
}
