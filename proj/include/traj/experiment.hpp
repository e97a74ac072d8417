// Experiment commands behind the traj CLI: train, evaluate, sweep and
// batch-stats. Each command returns a process exit code and reports
// failures on the error stream; JSON outputs carry "schema_version".

#pragma once

#include "traj/checkpoint.hpp"
#include "traj/train.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

namespace traj {

inline constexpr int kSchemaVersion = 1;

using json = nlohmann::json;

// ---------------------------------------------------------------- JSON I/O

inline void to_json(json& j, const MetricsReport& m) {
  j = json{{"schema_version", kSchemaVersion},
           {"n_test_interactions", m.n_test_interactions},
           {"wall_clock_seconds", m.wall_clock_seconds}};
  if (m.mrr) j["mrr"] = *m.mrr;
  if (m.recall_at_10) j["recall_at_10"] = *m.recall_at_10;
  if (m.auc) j["auc"] = *m.auc;
}

inline void check_schema(const json& j, const char* what) {
  if (!j.is_object() || !j.contains("schema_version")) {
    throw Error(std::string(what) + ": missing schema_version");
  }
  if (j.at("schema_version").get<int>() != kSchemaVersion) {
    throw Error(std::string(what) + ": unsupported schema_version " + j.at("schema_version").dump());
  }
}

inline void from_json(const json& j, MetricsReport& m) {
  check_schema(j, "metrics report");
  m = MetricsReport{};
  if (j.contains("mrr")) m.mrr = j.at("mrr").get<double>();
  if (j.contains("recall_at_10")) m.recall_at_10 = j.at("recall_at_10").get<double>();
  if (j.contains("auc")) m.auc = j.at("auc").get<double>();
  m.n_test_interactions = j.at("n_test_interactions").get<std::size_t>();
  m.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
}

inline json loss_json(const LossComponents& c, double total) {
  return json{{"prediction", c.prediction},
              {"user_reg", c.user_reg},
              {"item_reg", c.item_reg},
              {"state_ce", c.state_ce},
              {"total", total}};
}

inline void to_json(json& j, const EpochReport& e) {
  j = json{{"schema_version", kSchemaVersion},
           {"epoch", e.epoch},
           {"loss", loss_json(e.loss, e.total_loss)},
           {"seconds", e.seconds},
           {"batches", e.batches},
           {"optimizer_steps", e.optimizer_steps}};
  j["val_metric"] = e.validation_metric ? json(*e.validation_metric) : json(nullptr);
  if (e.test) j["test"] = *e.test;
}

inline void from_json(const json& j, EpochReport& e) {
  check_schema(j, "epoch report");
  e = EpochReport{};
  e.epoch = j.at("epoch").get<std::size_t>();
  const auto& l = j.at("loss");
  e.loss.prediction = l.at("prediction").get<double>();
  e.loss.user_reg = l.at("user_reg").get<double>();
  e.loss.item_reg = l.at("item_reg").get<double>();
  e.loss.state_ce = l.at("state_ce").get<double>();
  e.total_loss = l.at("total").get<double>();
  e.seconds = j.at("seconds").get<double>();
  e.batches = j.at("batches").get<std::size_t>();
  e.optimizer_steps = j.at("optimizer_steps").get<std::size_t>();
  if (!j.at("val_metric").is_null()) e.validation_metric = j.at("val_metric").get<double>();
  if (j.contains("test")) e.test = j.at("test").get<MetricsReport>();
}

inline void to_json(json& j, const PlanStats& s) {
  j = json{{"num_interactions", s.num_interactions},
           {"num_batches", s.num_batches},
           {"max_batch_size", s.max_batch_size},
           {"mean_batch_size", s.mean_batch_size},
           {"parallelism_ratio", s.parallelism_ratio}};
}

inline void from_json(const json& j, PlanStats& s) {
  s.num_interactions = j.at("num_interactions").get<std::size_t>();
  s.num_batches = j.at("num_batches").get<std::size_t>();
  s.max_batch_size = j.at("max_batch_size").get<std::size_t>();
  s.mean_batch_size = j.at("mean_batch_size").get<double>();
  s.parallelism_ratio = j.at("parallelism_ratio").get<double>();
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("malformed JSON in '" + path + "': " + e.what());
  }
}

inline std::vector<EpochReport> read_epoch_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::vector<EpochReport> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(json::parse(line).get<EpochReport>());
  }
  return out;
}

// ------------------------------------------------------------------ specs

struct ExperimentSpec {
  std::string data_path;
  std::string out_dir = "traj_out";
  // Unset percentages take the task default: 80/10 for interaction
  // prediction, 60/20 for state change; test gets the remainder.
  std::optional<double> train_pct;
  std::optional<double> val_pct;
  TrainConfig train;
  std::vector<double> sweep_train_pct;
  std::vector<std::size_t> sweep_dim;
  std::size_t jobs = 1;
  bool use_lsh = false;
  LshConfig lsh;
  std::string checkpoint_path;  // evaluate
  std::string ranks_csv;        // optional per-interaction rank dump
  bool timing = true;           // batch-stats

  double resolved_train_pct() const {
    return train_pct.value_or(train.task == Task::Interaction ? 80.0 : 60.0);
  }
  double resolved_val_pct() const {
    return val_pct.value_or(train.task == Task::Interaction ? 10.0 : 20.0);
  }
};

inline Dataset load_for(const ExperimentSpec& spec) {
  if (spec.data_path.empty()) throw Error("no dataset given (--data)");
  if (!std::filesystem::exists(spec.data_path)) {
    throw Error("dataset not found: '" + spec.data_path + "'");
  }
  Dataset ds = load_interactions(spec.data_path);
  if (spec.train.task == Task::StateChange && !ds.has_state_labels) {
    throw Error("no state labels in '" + spec.data_path + "' (required for --task state_change)");
  }
  return ds;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::map<std::string, std::string> checkpoint_metadata(const ExperimentSpec& spec,
                                                              const Split& split,
                                                              std::size_t epoch) {
  const auto& c = spec.train;
  return {{"task", to_string(c.task)},
          {"train_end", std::to_string(split.train.end)},
          {"val_end", std::to_string(split.validation.end)},
          {"test_end", std::to_string(split.test.end)},
          {"delta_scale", to_string(c.delta_scale)},
          {"state_use_static", c.state_use_static ? "1" : "0"},
          {"seed", std::to_string(c.seed)},
          {"epoch", std::to_string(epoch)},
          {"learning_rate", format_number(c.learning_rate)},
          {"lambda_u", format_number(c.lambda_u)},
          {"lambda_i", format_number(c.lambda_i)},
          {"state_loss_scale", format_number(c.state_loss_scale)},
          {"data", spec.data_path}};
}

inline const std::string& metadata_at(const Checkpoint& ck, const std::string& key) {
  const auto it = ck.metadata.find(key);
  if (it == ck.metadata.end()) throw Error("checkpoint metadata lacks '" + key + "'");
  return it->second;
}

inline void write_ranks_csv(const std::string& path, const std::vector<RankRecord>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << "seq_id,rank,reciprocal_rank\n";
  for (const auto& r : records) out << r.seq_id << ',' << r.rank << ',' << format_number(r.reciprocal_rank) << '\n';
}

namespace detail {
template <class F>
int guarded(std::ostream& err, const char* command, F&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    err << "traj " << command << ": error: " << e.what() << '\n';
    return 1;
  }
}
}  // namespace detail

// --------------------------------------------------------------- commands

/// Trains and writes <out>/epochs.jsonl, <out>/checkpoint.bin (best
/// validation epoch) and <out>/metrics.json (its test report).
inline int cmd_train(const ExperimentSpec& spec, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, "train", [&] {
    const Dataset ds = load_for(spec);
    const Split split = chronological_split(ds, spec.resolved_train_pct(), spec.resolved_val_pct());
    std::filesystem::create_directories(spec.out_dir);
    const auto dir = std::filesystem::path(spec.out_dir);
    std::ofstream log(dir / "epochs.jsonl");
    if (!log) throw Error("cannot write '" + (dir / "epochs.jsonl").string() + "'");

    const auto result = run_training(ds, split, spec.train, [&](const EpochReport& e) {
      log << json(e).dump() << '\n' << std::flush;
      err << "epoch " << e.epoch << " loss " << e.total_loss << " val "
          << e.validation_metric.value_or(0.0) << " (" << e.seconds << " s)\n";
    });

    Checkpoint ck{result.best.params, result.best.state,
                  checkpoint_metadata(spec, split, result.best.epoch)};
    write_checkpoint((dir / "checkpoint.bin").string(), ck);

    json metrics = result.best.test;
    metrics["task"] = to_string(spec.train.task);
    metrics["best_epoch"] = result.best.epoch;
    metrics["val_metric"] = result.best.validation_metric.value_or(0.0);
    json curve = json::array();
    for (const auto& e : result.epochs) curve.push_back(e.total_loss);
    metrics["loss_curve"] = curve;
    metrics["plan"] = result.plan;
    std::ofstream(dir / "metrics.json") << metrics.dump(2) << '\n';
    out << metrics.dump(2) << '\n';
    return 0;
  });
}

/// Replays validation then test from the checkpointed state with the
/// checkpoint's split and settings, and prints the test MetricsReport.
inline int cmd_evaluate(const ExperimentSpec& spec, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, "evaluate", [&] {
    if (spec.checkpoint_path.empty()) throw Error("no checkpoint given (--checkpoint)");
    const Checkpoint ck = read_checkpoint(spec.checkpoint_path);
    const Task task = parse_task(metadata_at(ck, "task"));
    ExperimentSpec s = spec;
    s.train.task = task;
    const Dataset ds = load_for(s);
    const auto& d = ck.params.dims();
    if (d.num_users != ds.num_users || d.num_items != ds.num_items || d.feature_dim != ds.feature_dim) {
      throw Error("checkpoint/dataset dimension mismatch: checkpoint has " +
                  std::to_string(d.num_users) + " users, " + std::to_string(d.num_items) +
                  " items, " + std::to_string(d.feature_dim) + " features; dataset has " +
                  std::to_string(ds.num_users) + ", " + std::to_string(ds.num_items) + ", " +
                  std::to_string(ds.feature_dim));
    }
    Split split;
    split.train = {0, std::stoull(metadata_at(ck, "train_end"))};
    split.validation = {split.train.end, std::stoull(metadata_at(ck, "val_end"))};
    split.test = {split.validation.end, std::stoull(metadata_at(ck, "test_end"))};
    if (split.test.end > ds.size()) throw Error("checkpoint split exceeds dataset length");
    const auto deltas = compute_deltas(ds, parse_delta_scale(metadata_at(ck, "delta_scale")), split.train);
    EvalOptions eopts;
    eopts.use_lsh = spec.use_lsh;
    eopts.lsh = spec.lsh;
    eopts.state_use_static = metadata_at(ck, "state_use_static") == "1";

    MetricsReport report;
    EmbeddingState state = ck.state;
    if (task == Task::Interaction) {
      evaluate_interactions(ds, deltas, split.validation, ck.params, state, eopts);
      auto [m, records] = evaluate_interactions(ds, deltas, split.test, ck.params, state, eopts);
      report = m;
      if (!spec.ranks_csv.empty()) write_ranks_csv(spec.ranks_csv, records);
    } else {
      score_state_changes(ds, deltas, split.validation, ck.params, state, eopts.state_use_static);
      report = evaluate_state_change(ds, deltas, split.test, ck.params, state, eopts.state_use_static);
    }
    json j = report;
    j["task"] = to_string(task);
    j["lsh"] = spec.use_lsh;
    out << j.dump(2) << '\n';
    return 0;
  });
}

struct SweepPoint {
  double train_pct = 0.0;
  std::size_t embedding_dim = 0;
  bool operator<(const SweepPoint& o) const {
    return std::tie(train_pct, embedding_dim) < std::tie(o.train_pct, o.embedding_dim);
  }
  bool operator==(const SweepPoint&) const = default;
};

/// Cartesian grid of the sweep axes in the given order; an empty axis
/// contributes the spec's base value. Duplicates are dropped with a warning.
inline std::vector<SweepPoint> sweep_grid(const ExperimentSpec& spec, std::ostream& err) {
  std::vector<double> pcts = spec.sweep_train_pct;
  std::vector<std::size_t> dims = spec.sweep_dim;
  if (pcts.empty() && dims.empty()) throw Error("sweep needs at least one axis (--sweep-train-pct, --sweep-dim)");
  if (pcts.empty()) pcts.push_back(spec.resolved_train_pct());
  if (dims.empty()) dims.push_back(spec.train.embedding_dim);
  std::vector<SweepPoint> grid;
  std::set<SweepPoint> seen;
  for (double p : pcts) {
    for (std::size_t d : dims) {
      const SweepPoint pt{p, d};
      if (!seen.insert(pt).second) {
        err << "warning: duplicate sweep point train_pct=" << p << " dim=" << d << " ignored\n";
        continue;
      }
      grid.push_back(pt);
    }
  }
  return grid;
}

/// Runs every grid point; validation and test windows both take val_pct
/// right after each training prefix. Writes <out>/sweep.json and
/// <out>/sweep.csv. Failed points are reported and the rest still run.
inline int cmd_sweep(const ExperimentSpec& spec, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, "sweep", [&] {
    const Dataset ds = load_for(spec);
    const auto grid = sweep_grid(spec, err);
    const double val_pct = spec.resolved_val_pct();
    std::vector<json> results(grid.size());
    std::mutex io;
    std::atomic<std::size_t> next{0};

    const auto run_point = [&](std::size_t k) {
      const auto& pt = grid[k];
      json r{{"schema_version", kSchemaVersion}, {"train_pct", pt.train_pct},
             {"embedding_dim", pt.embedding_dim}};
      try {
        TrainConfig cfg = spec.train;
        cfg.embedding_dim = pt.embedding_dim;
        if (spec.jobs > 1) cfg.threads = 1;
        const Split split = chronological_split(ds, pt.train_pct, val_pct, val_pct);
        const auto res = run_training(ds, split, cfg);
        r["status"] = "ok";
        r["best_epoch"] = res.best.epoch;
        r["metrics"] = res.best.test;
      } catch (const std::exception& e) {
        r["status"] = "error";
        r["error"] = e.what();
        std::lock_guard lock(io);
        err << "sweep point train_pct=" << pt.train_pct << " dim=" << pt.embedding_dim
            << " failed: " << e.what() << '\n';
      }
      results[k] = std::move(r);
    };
    const std::size_t jobs = std::clamp<std::size_t>(spec.jobs, 1, std::max<std::size_t>(grid.size(), 1));
    {
      std::vector<std::jthread> workers;
      for (std::size_t w = 0; w < jobs; ++w) {
        workers.emplace_back([&] {
          for (std::size_t k = next++; k < grid.size(); k = next++) run_point(k);
        });
      }
    }

    std::filesystem::create_directories(spec.out_dir);
    const auto dir = std::filesystem::path(spec.out_dir);
    json all{{"schema_version", kSchemaVersion}, {"task", to_string(spec.train.task)},
             {"points", results}};
    std::ofstream(dir / "sweep.json") << all.dump(2) << '\n';
    std::ofstream csv(dir / "sweep.csv");
    csv << "train_pct,embedding_dim,status,mrr,recall_at_10,auc\n";
    bool failed = false;
    for (const auto& r : results) {
      csv << r["train_pct"].get<double>() << ',' << r["embedding_dim"].get<std::size_t>() << ','
          << r["status"].get<std::string>();
      for (const char* key : {"mrr", "recall_at_10", "auc"}) {
        csv << ',';
        if (r.contains("metrics") && r["metrics"].contains(key)) csv << format_number(r["metrics"][key].get<double>());
      }
      csv << '\n';
      failed = failed || r["status"] != "ok";
    }
    out << all.dump(2) << '\n';
    return failed ? 1 : 0;
  });
}

struct ForwardTiming {
  double sequential_seconds = 0.0;
  double batched_seconds = 0.0;
  double max_abs_diff = 0.0;  // between the two final embedding states
  std::size_t threads = 1;
};

/// Times a frozen-parameter forward epoch over `range` one interaction at a
/// time and batch-by-batch per `plan` (using `pool`), from the same
/// initial state.
inline ForwardTiming time_forward_epoch(const Dataset& ds, const DeltaTable& deltas,
                                        const BatchPlan& plan, IndexRange range,
                                        const ModelParams& params, const EmbeddingState& initial,
                                        ThreadPool& pool) {
  const EngineOptions eopt{};
  const BatchPlan seq = sequential_plan(range);
  ForwardTiming t;
  t.threads = pool.size();
  EmbeddingState a = initial;
  auto start = std::chrono::steady_clock::now();
  forward_epoch(ds, deltas, seq, params, a, eopt, nullptr);
  t.sequential_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EmbeddingState b = initial;
  start = std::chrono::steady_clock::now();
  forward_epoch(ds, deltas, plan, params, b, eopt, &pool);
  t.batched_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (std::size_t k = 0; k < a.user_dyn.values().size(); ++k) {
    t.max_abs_diff = std::max(t.max_abs_diff, std::abs(a.user_dyn.values()[k] - b.user_dyn.values()[k]));
  }
  for (std::size_t k = 0; k < a.item_dyn.values().size(); ++k) {
    t.max_abs_diff = std::max(t.max_abs_diff, std::abs(a.item_dyn.values()[k] - b.item_dyn.values()[k]));
  }
  return t;
}

/// Prints the t-Batch plan statistics of the whole dataset and, unless
/// disabled, sequential vs batched timing of a frozen forward epoch.
inline int cmd_batch_stats(const ExperimentSpec& spec, std::ostream& out, std::ostream& err) {
  return detail::guarded(err, "batch-stats", [&] {
    const Dataset ds = load_for(spec);
    const BatchPlan plan = assign_batches(ds);
    json j = plan_stats(plan);
    j["schema_version"] = kSchemaVersion;
    if (spec.timing) {
      const ModelDims dims{spec.train.embedding_dim, ds.num_users, ds.num_items, ds.feature_dim};
      const auto params = init_params(dims, spec.train.seed);
      const auto deltas = compute_deltas(ds, spec.train.delta_scale);
      ThreadPool pool(spec.train.thread_count());
      const auto t = time_forward_epoch(ds, deltas, plan, {0, ds.size()}, params,
                                        init_state(dims, spec.train.seed), pool);
      j["embedding_dim"] = dims.embedding_dim;
      j["threads"] = t.threads;
      j["sequential_seconds"] = t.sequential_seconds;
      j["batched_seconds"] = t.batched_seconds;
      j["speedup"] = t.batched_seconds > 0.0 ? t.sequential_seconds / t.batched_seconds : 0.0;
    }
    out << j.dump(2) << '\n';
    return 0;
  });
}

}  // namespace traj
