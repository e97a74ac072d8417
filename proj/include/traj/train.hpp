// Training: Adam with decoupled weight decay, epochs over a t-Batch plan, and
// the epoch loop with best-validation model selection.
//
// Every epoch restarts from the initial embedding state and replays the
// training range in batch order. With DetachPolicy::PerBatch the embeddings
// entering a batch are constants, so each batch is its own backpropagation
// window followed by one optimizer step. DetachPolicy::None keeps the whole
// epoch as one window (gradients flow through the embedding chain across
// batches) and therefore takes a single optimizer step per epoch.

#pragma once

#include "traj/engine.hpp"
#include "traj/eval.hpp"
#include "traj/tbatch.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace traj {

enum class Task { Interaction, StateChange };
enum class DetachPolicy { PerBatch, None };

inline std::string to_string(Task t) {
  return t == Task::Interaction ? "interaction" : "state_change";
}
inline Task parse_task(std::string_view s) {
  if (s == "interaction") return Task::Interaction;
  if (s == "state_change") return Task::StateChange;
  throw Error("unknown task '" + std::string(s) + "' (interaction|state_change)");
}
inline std::string to_string(DetachPolicy d) {
  return d == DetachPolicy::PerBatch ? "per-batch" : "none";
}
inline DetachPolicy parse_detach_policy(std::string_view s) {
  if (s == "per-batch") return DetachPolicy::PerBatch;
  if (s == "none") return DetachPolicy::None;
  throw Error("unknown detach policy '" + std::string(s) + "' (per-batch|none)");
}

struct TrainConfig {
  Task task = Task::Interaction;
  std::size_t epochs = 50;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  std::size_t embedding_dim = 128;
  double lambda_u = 1.0;
  double lambda_i = 1.0;
  double state_loss_scale = 1.0;
  // Weight of label-1 cross-entropy terms; unset means negatives / positives
  // over the training range (1 when it holds no positives).
  std::optional<double> state_pos_weight;
  std::uint64_t seed = 0;
  DetachPolicy detach_policy = DetachPolicy::PerBatch;
  DeltaScale delta_scale = DeltaScale::MeanStd;
  bool state_use_static = true;
  std::size_t threads = 0;     // 0: hardware concurrency, capped by TRAJ_NUM_THREADS
  bool deterministic = false;  // forces a single thread
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (epochs < 1) throw Error("TrainConfig: epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw Error("TrainConfig: learning_rate must be positive");
    if (weight_decay < 0.0) throw Error("TrainConfig: weight_decay must be >= 0");
    if (embedding_dim == 0) throw Error("TrainConfig: embedding_dim must be positive");
    if (lambda_u < 0.0 || lambda_i < 0.0 || state_loss_scale < 0.0 ||
        (state_pos_weight && !(*state_pos_weight > 0.0))) {
      throw Error("TrainConfig: loss weights must be >= 0");
    }
  }

  std::size_t thread_count() const { return deterministic ? 1 : resolve_thread_count(threads); }
};

struct OptState {
  Vec m;
  Vec v;
  std::uint64_t step = 0;
};

/// One Adam step with bias correction and decoupled weight decay:
///   θ ← θ − lr·(m̂ / (√v̂ + ε) + wd·θ)
inline void adam_step(ModelParams& p, const ModelParams& grads, OptState& opt,
                      const TrainConfig& cfg) {
  if (grads.size() != p.size()) throw Error("adam_step: gradient shape mismatch");
  if (opt.m.size() != p.size()) {
    opt.m.assign(p.size(), 0.0);
    opt.v.assign(p.size(), 0.0);
  }
  ++opt.step;
  const double t = static_cast<double>(opt.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto theta = p.flat();
  const auto g = grads.flat();
  for (std::size_t k = 0; k < theta.size(); ++k) {
    opt.m[k] = cfg.beta1 * opt.m[k] + (1.0 - cfg.beta1) * g[k];
    opt.v[k] = cfg.beta2 * opt.v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
    const double m_hat = opt.m[k] / c1;
    const double v_hat = opt.v[k] / c2;
    theta[k] -= cfg.learning_rate * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) +
                                     cfg.weight_decay * theta[k]);
  }
}

inline double resolved_state_pos_weight(const TrainConfig& cfg, const Dataset& ds, IndexRange train) {
  if (cfg.state_pos_weight) return *cfg.state_pos_weight;
  std::size_t pos = 0;
  for (std::size_t r = train.begin; r < train.end; ++r) pos += ds[r].state_label != 0;
  if (pos == 0) return 1.0;
  return static_cast<double>(train.size() - pos) / static_cast<double>(pos);
}

inline EngineOptions engine_options(const TrainConfig& cfg, const Dataset& ds, IndexRange train) {
  EngineOptions o;
  o.weights = {cfg.lambda_u, cfg.lambda_i, cfg.state_loss_scale,
               resolved_state_pos_weight(cfg, ds, train)};
  o.state_loss = ds.has_state_labels && cfg.state_loss_scale > 0.0;
  o.state_use_static = cfg.state_use_static;
  return o;
}

struct EpochReport {
  std::size_t epoch = 0;
  LossComponents loss;
  double total_loss = 0.0;
  double seconds = 0.0;
  std::size_t batches = 0;
  std::size_t optimizer_steps = 0;
  std::optional<double> validation_metric;
  std::optional<MetricsReport> test;
};

namespace detail {
inline void check_finite_loss(const LossComponents& c, std::size_t batch) {
  if (!std::isfinite(c.prediction) || !std::isfinite(c.user_reg) ||
      !std::isfinite(c.item_reg) || !std::isfinite(c.state_ce)) {
    throw Error("non-finite loss in batch " + std::to_string(batch) +
                " (prediction " + std::to_string(c.prediction) + ", user_reg " +
                std::to_string(c.user_reg) + ", item_reg " + std::to_string(c.item_reg) +
                ", state_ce " + std::to_string(c.state_ce) + ")");
  }
}
}  // namespace detail

/// One pass over the training range. The plan must cover exactly the
/// training range and pass verify_plan; it is rejected before any update
/// otherwise.
inline EpochReport train_epoch(const Dataset& ds, const DeltaTable& deltas, const Split& split,
                               const BatchPlan& plan, ModelParams& params,
                               EmbeddingState& state, OptState& opt, const TrainConfig& cfg,
                               ThreadPool& pool) {
  const auto verification = verify_plan(plan, ds, split.train);
  if (!verification.valid()) {
    const auto& v = verification.violations.front();
    throw Error("train_epoch: batch plan rejected (" + std::to_string(verification.violations.size()) +
                " violations; first at seq_id " + std::to_string(v.seq_id) + ": " + v.detail + ")");
  }
  const auto start = std::chrono::steady_clock::now();
  const EngineOptions eopt = engine_options(cfg, ds, split.train);
  EpochReport report;
  ModelParams grads = params.zeros_like();

  if (cfg.detach_policy == DetachPolicy::PerBatch) {
    BatchWorkspace ws;
    for (std::size_t b = 0; b < plan.batches.size(); ++b) {
      gather_batch(ds, deltas, plan.batches[b], state, params.dims(), ws);
      forward_batch(params, eopt, ws, &pool);
      const auto loss = batch_loss(ws);
      detail::check_finite_loss(loss, b);
      report.loss += loss;
      grads.set_zero();
      backward_batch(params, eopt, ws, nullptr, nullptr, grads, nullptr, &pool);
      commit_batch(ws, state);
      adam_step(params, grads, opt, cfg);
      ++report.optimizer_steps;
    }
  } else {
    WindowTape tape(params.dims());
    for (std::size_t b = 0; b < plan.batches.size(); ++b) {
      const auto loss = tape.step(ds, deltas, plan.batches[b], params, eopt, state, &pool);
      detail::check_finite_loss(loss, b);
      report.loss += loss;
    }
    tape.backward(params, eopt, grads, &pool);
    adam_step(params, grads, opt, cfg);
    ++report.optimizer_steps;
  }
  report.batches = plan.batches.size();
  report.total_loss = report.loss.total(eopt.weights);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

/// Forward-only pass over a plan with frozen parameters; advances `state`.
/// A null pool or a single-interaction plan gives strictly sequential
/// processing.
inline LossComponents forward_epoch(const Dataset& ds, const DeltaTable& deltas,
                                    const BatchPlan& plan, const ModelParams& params,
                                    EmbeddingState& state, const EngineOptions& eopt,
                                    ThreadPool* pool) {
  LossComponents total;
  BatchWorkspace ws;
  for (const auto& batch : plan.batches) {
    gather_batch(ds, deltas, batch, state, params.dims(), ws);
    forward_batch(params, eopt, ws, pool);
    total += batch_loss(ws);
    commit_batch(ws, state);
  }
  return total;
}

/// Plan with one interaction per batch, in time order.
inline BatchPlan sequential_plan(IndexRange range) {
  BatchPlan plan;
  plan.batches.reserve(range.size());
  for (std::size_t r = range.begin; r < range.end; ++r) plan.batches.push_back({r});
  return plan;
}

struct TrainedModel {
  std::size_t epoch = 0;
  ModelParams params;
  EmbeddingState state;  // after the training range, before validation
  std::optional<double> validation_metric;
  MetricsReport test;
};

struct TrainingResult {
  ModelParams params;
  EmbeddingState state;
  std::vector<EpochReport> epochs;
  TrainedModel best;
  DeltaTable deltas;
  PlanStats plan;
};

/// Validation then test evaluation continuing from `state_after_train`.
/// Returns (validation metric, test report).
inline std::pair<double, MetricsReport> evaluate_split(const Dataset& ds,
                                                       const DeltaTable& deltas,
                                                       const Split& split,
                                                       const ModelParams& params,
                                                       EmbeddingState state, Task task,
                                                       const EvalOptions& eopts = {}) {
  if (task == Task::Interaction) {
    const auto val = evaluate_interactions(ds, deltas, split.validation, params, state, eopts);
    auto test = evaluate_interactions(ds, deltas, split.test, params, state, eopts).first;
    return {val.first.mrr.value_or(0.0), test};
  }
  const auto val = evaluate_state_change(ds, deltas, split.validation, params, state, eopts.state_use_static);
  const auto test = evaluate_state_change(ds, deltas, split.test, params, state, eopts.state_use_static);
  return {val.auc.value_or(0.5), test};
}

using EpochCallback = std::function<void(const EpochReport&)>;

/// Trains for cfg.epochs and keeps the epoch with the best validation metric
/// (MRR for the interaction task, AUC for state change; first wins on ties).
inline TrainingResult run_training(const Dataset& ds, const Split& split, const TrainConfig& cfg,
                                   const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (cfg.task == Task::StateChange && !ds.has_state_labels) {
    throw Error("no state labels in dataset (required for the state_change task)");
  }
  const ModelDims dims{cfg.embedding_dim, ds.num_users, ds.num_items, ds.feature_dim};
  TrainingResult result;
  result.params = init_params(dims, cfg.seed);
  result.deltas = compute_deltas(ds, cfg.delta_scale, split.train);
  const BatchPlan plan = assign_batches(ds, split.train);
  result.plan = plan_stats(plan);
  const EmbeddingState initial = init_state(dims, cfg.seed + 0x9e3779b97f4a7c15ULL);
  ThreadPool pool(cfg.thread_count());
  OptState opt;
  EvalOptions eopts;
  eopts.state_use_static = cfg.state_use_static;

  std::optional<double> best_metric;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    EmbeddingState state = initial;
    EpochReport report = train_epoch(ds, result.deltas, split, plan, result.params, state, opt, cfg, pool);
    report.epoch = e;
    auto [val_metric, test] = evaluate_split(ds, result.deltas, split, result.params, state, cfg.task, eopts);
    report.validation_metric = val_metric;
    report.test = test;
    if (!best_metric || val_metric > *best_metric) {
      best_metric = val_metric;
      result.best = TrainedModel{e, result.params, state, val_metric, test};
    }
    result.state = std::move(state);
    if (on_epoch) on_epoch(report);
    result.epochs.push_back(std::move(report));
  }
  return result;
}

}  // namespace traj
