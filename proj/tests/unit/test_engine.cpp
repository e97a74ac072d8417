#include "test_util.hpp"

#include "reference.hpp"

using namespace traj;
using reference::OwnedContext;

namespace {
const ModelDims kDims{4, 5, 5, 2};

EngineOptions options(bool state_loss) {
  EngineOptions o;
  o.weights = {0.7, 1.3, 0.9, 2.5};
  o.state_loss = state_loss;
  return o;
}

void expect_all_pass(const std::vector<reference::TensorCheck>& checks) {
  for (const auto& c : checks) {
    EXPECT_TRUE(c.report.passed) << kTensorNames[static_cast<std::size_t>(c.tensor)] << " rel err "
                                 << c.report.max_rel_error << " at " << c.report.worst_param_index;
  }
}
}  // namespace

class StepGradient : public ::testing::TestWithParam<std::tuple<bool, bool, int>> {};

TEST_P(StepGradient, MatchesFiniteDifferences) {
  const auto [with_prev, state_loss, seed] = GetParam();
  std::mt19937_64 rng(static_cast<std::uint64_t>(seed));
  const auto p = testutil::random_params(kDims, rng());
  const OwnedContext oc(kDims, rng, with_prev, seed % 2);
  const auto opt = options(state_loss);
  const auto g = backward_step(oc.ctx, p, opt);
  EXPECT_NEAR(g.loss.total(opt.weights), reference::interaction_total(oc.ctx, p, opt), 1e-12);
  expect_all_pass(reference::check_tensors(
      [&](const ModelParams& q) { return reference::interaction_total(oc.ctx, q, opt); }, p, g.params));

  // Input embeddings.
  const auto input_check = [&](Vec OwnedContext::*member, const Vec& analytic) {
    OwnedContext work = oc;
    const auto f = [&](std::span<const double> v) {
      std::copy(v.begin(), v.end(), (work.*member).begin());
      return reference::interaction_total(work.ctx, p, opt, nullptr, nullptr, oc.item_prev);
    };
    return finite_diff_check(f, oc.*member, analytic, 1e-6);
  };
  EXPECT_TRUE(input_check(&OwnedContext::user_prev, g.user_prev).passed);
  EXPECT_TRUE(input_check(&OwnedContext::item_prev, g.item_prev).passed);
  if (with_prev) {
    EXPECT_TRUE(input_check(&OwnedContext::prev_item_dyn, g.prev_item_dyn).passed);
  }
}

INSTANTIATE_TEST_SUITE_P(Contexts, StepGradient,
                         ::testing::Combine(::testing::Bool(), ::testing::Bool(), ::testing::Range(1, 4)));

TEST(StepGradient, BiasGradientIsUnitResidual) {
  std::mt19937_64 rng(21);
  const auto p = testutil::random_params(kDims, 3);
  OwnedContext oc(kDims, rng, true, 0);
  const auto opt = options(false);
  const auto g = backward_step(oc.ctx, p, opt);
  const Vec uh = project_user(oc.user_prev, oc.ctx.delta_u, p);
  const Vec j = predict_item_embedding(uh, oc.ctx.user, oc.prev_item_dyn, oc.ctx.prev_item, p);
  Vec target(kDims.prediction_dim(), 0.0);
  target[oc.ctx.item] = 1.0;
  std::copy(oc.item_prev.begin(), oc.item_prev.end(), target.begin() + kDims.num_items);
  const double norm = l2_distance(j, target);
  const auto gb = g.params[Tensor::PredB].values();
  for (std::size_t r = 0; r < j.size(); ++r) EXPECT_NEAR(gb[r], (j[r] - target[r]) / norm, 1e-14);
}

TEST(StepGradient, ZeroDistanceGivesZeroSubgradient) {
  // Perfect prediction and unchanged embeddings: every L2 term is at 0.
  const ModelDims d{2, 1, 2, 1};
  ModelParams p(d);
  // Update cells output sigmoid(0) = 0.5, so start from 0.5 to keep them fixed.
  const Vec half{0.5, 0.5};
  // Prediction: B = [one-hot(1) | 0.5, 0.5]
  auto b = p[Tensor::PredB];
  b(1, 0) = 1.0;
  b(2, 0) = 0.5;
  b(3, 0) = 0.5;
  InteractionContext c;
  c.user = 0;
  c.item = 1;
  const Vec f{0.0};
  c.features = f;
  c.user_prev = half;
  c.item_prev = half;
  const auto g = backward_step(c, p, options(false));
  EXPECT_EQ(g.loss.prediction, 0.0);
  EXPECT_EQ(g.loss.user_reg, 0.0);
  EXPECT_EQ(g.loss.item_reg, 0.0);
  for (double v : g.params.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Batch, ForwardMatchesSingleOps) {
  RandomStreamConfig cfg;
  cfg.num_interactions = 300;
  cfg.num_users = 12;
  cfg.num_items = 9;
  cfg.feature_dim = 2;
  cfg.seed = 4;
  const auto ds = random_stream(cfg);
  const ModelDims d{6, ds.num_users, ds.num_items, ds.feature_dim};
  const auto p = testutil::random_params(d, 6);
  const auto deltas = compute_deltas(ds, DeltaScale::MeanStd);
  const auto opt = options(false);
  auto state = init_state(d, 1);
  const auto plan = assign_batches(ds);
  ThreadPool pool(3);
  BatchWorkspace ws;
  for (const auto& batch : plan.batches) {
    gather_batch(ds, deltas, batch, state, d, ws);
    forward_batch(p, EngineOptions{opt.weights, false, true, 1}, ws, &pool);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto c = context_from_state(ds, deltas, batch[b], state);
      Vec u1, i1;
      const double ref = reference::interaction_total(c, p, opt, &u1, &i1);
      const auto row = static_cast<Eigen::Index>(b);
      const double got = ws.pred_norm(row) + opt.weights.lambda_u * ws.user_drift(row) +
                         opt.weights.lambda_i * ws.item_drift(row);
      ASSERT_NEAR(got, ref, 1e-12);
      for (std::size_t k = 0; k < d.embedding_dim; ++k) {
        ASSERT_NEAR(ws.u1(row, static_cast<Eigen::Index>(k)), u1[k], 1e-14);
        ASSERT_NEAR(ws.i1(row, static_cast<Eigen::Index>(k)), i1[k], 1e-14);
      }
    }
    commit_batch(ws, state);
  }
}

TEST(Batch, BackwardEqualsSumOfSteps) {
  RandomStreamConfig cfg;
  cfg.num_interactions = 200;
  cfg.num_users = 40;
  cfg.num_items = 40;
  cfg.seed = 8;
  const auto ds = random_stream(cfg);
  const ModelDims d{5, ds.num_users, ds.num_items, ds.feature_dim};
  const auto p = testutil::random_params(d, 2);
  const auto deltas = compute_deltas(ds, DeltaScale::MeanStd);
  auto opt = options(false);
  opt.min_rows_per_task = 2;
  auto state = init_state(d, 3);
  const auto plan = assign_batches(ds);
  ThreadPool pool(4);
  BatchWorkspace ws;
  for (std::size_t k = 0; k < 5; ++k) {
    const auto& batch = plan.batches[k];
    gather_batch(ds, deltas, batch, state, d, ws);
    forward_batch(p, opt, ws, &pool);
    auto pooled = p.zeros_like(), serial = p.zeros_like(), summed = p.zeros_like();
    backward_batch(p, opt, ws, nullptr, nullptr, pooled, nullptr, &pool);
    backward_batch(p, opt, ws, nullptr, nullptr, serial, nullptr, nullptr);
    for (std::size_t r : batch) {
      const auto g = backward_step(context_from_state(ds, deltas, r, state), p, opt);
      for (std::size_t q = 0; q < summed.size(); ++q) summed.flat()[q] += g.params.flat()[q];
    }
    EXPECT_LT(testutil::max_abs_diff(pooled.flat(), serial.flat()), 1e-12);
    EXPECT_LT(testutil::max_abs_diff(serial.flat(), summed.flat()), 1e-10);
    commit_batch(ws, state);
  }
}

TEST(WindowTape, FullWindowGradientMatchesFiniteDifferences) {
  // Gradients flow through the embedding chain across batches.
  RandomStreamConfig cfg;
  cfg.num_interactions = 24;
  cfg.num_users = 4;
  cfg.num_items = 5;
  cfg.feature_dim = 2;
  cfg.seed = 13;
  auto ds = random_stream(cfg);
  for (std::size_t r = 0; r < ds.size(); ++r) ds.interactions[r].state_label = r % 7 == 3;
  ds.has_state_labels = true;
  const ModelDims d{4, ds.num_users, ds.num_items, ds.feature_dim};
  const auto p = testutil::random_params(d, 17, 0.4);
  const auto deltas = compute_deltas(ds, DeltaScale::MeanStd);
  const auto opt = options(true);
  const auto initial = init_state(d, 5);
  const auto plan = assign_batches(ds);
  ASSERT_GT(plan.num_batches(), 3u);

  WindowTape tape(d);
  auto state = initial;
  double taped = 0.0;
  for (const auto& b : plan.batches) taped += tape.step(ds, deltas, b, p, opt, state, nullptr).total(opt.weights);
  auto grads = p.zeros_like();
  tape.backward(p, opt, grads, nullptr);

  std::vector<Vec> targets;
  EXPECT_NEAR(taped, reference::plan_total(ds, deltas, plan, p, opt, initial, targets), 1e-10);
  expect_all_pass(reference::check_tensors(
      [&](const ModelParams& q) { return reference::plan_total(ds, deltas, plan, q, opt, initial, targets); },
      p, grads));
}

TEST(WindowTape, DiffersFromPerBatchTruncation) {
  RandomStreamConfig cfg;
  cfg.num_interactions = 30;
  cfg.num_users = 3;
  cfg.num_items = 3;
  cfg.seed = 2;
  const auto ds = random_stream(cfg);
  const ModelDims d{3, ds.num_users, ds.num_items, ds.feature_dim};
  const auto p = testutil::random_params(d, 1);
  const auto deltas = compute_deltas(ds, DeltaScale::MeanStd);
  const auto opt = options(false);
  const auto plan = assign_batches(ds);
  auto s1 = init_state(d, 0), s2 = s1;
  WindowTape tape(d);
  for (const auto& b : plan.batches) tape.step(ds, deltas, b, p, opt, s1, nullptr);
  auto full = p.zeros_like(), truncated = p.zeros_like();
  tape.backward(p, opt, full, nullptr);
  BatchWorkspace ws;
  for (const auto& b : plan.batches) {
    gather_batch(ds, deltas, b, s2, d, ws);
    forward_batch(p, opt, ws);
    backward_batch(p, opt, ws, nullptr, nullptr, truncated);
    commit_batch(ws, s2);
  }
  EXPECT_EQ(s1, s2);
  EXPECT_GT(testutil::max_abs_diff(full.flat(), truncated.flat()), 1e-6);
}
