// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero when any fails. Thresholds are fixed below.

#include "reference.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdlib>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

using namespace traj;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass;
  std::string detail;
};

int failures = 0;
std::vector<int> selected;  // empty: all

void report(int id, const char* name, const std::function<Outcome()>& body) {
  if (!selected.empty() && std::find(selected.begin(), selected.end(), id) == selected.end()) return;
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  if (!o.pass) ++failures;
  std::printf("%s  %d. %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(),
              seconds_since(t0));
  std::fflush(stdout);
}

template <class... Args>
std::string fmt(const char* f, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1 --------------------------------------------------------------------
Outcome tbatch_properties() {
  constexpr int kStreams = 1000;
  constexpr double kMaxScaling = 13.0;
  std::mt19937_64 rng(2024);
  std::size_t violations = 0, bad_counts = 0;
  for (int s = 0; s < kStreams; ++s) {
    RandomStreamConfig cfg;
    cfg.num_interactions = 1 + rng() % 5000;
    cfg.num_users = 1 + rng() % 50;
    cfg.num_items = 1 + rng() % 50;
    cfg.feature_dim = 1;
    cfg.seed = rng();
    const auto ds = random_stream(cfg);
    const auto plan = assign_batches(ds);
    violations += verify_plan(plan, ds).violations.size();
    bad_counts += plan.num_batches() < 1 || plan.num_batches() > ds.size();
  }

  // Linear scaling: 10x interactions should cost at most 13x time. Both sizes
  // are well past last-level cache so the ratio reflects the algorithm, not
  // the step in memory latency between them. Each size is timed as the average over repeated calls filling at least 0.25 s,
  // best of five such trials.
  const auto timed = [](std::size_t n) {
    RandomStreamConfig cfg;
    cfg.num_interactions = n;
    cfg.num_users = 5000;
    cfg.num_items = 5000;
    cfg.feature_dim = 1;
    cfg.seed = 5;
    const auto ds = random_stream(cfg);
    double best = 1e300;
    for (int trial = 0; trial < 5; ++trial) {
      std::size_t calls = 0;
      const auto t0 = Clock::now();
      do {
        if (assign_batches(ds).num_interactions() != n) throw Error("plan size mismatch");
        ++calls;
      } while (seconds_since(t0) < 0.25);
      best = std::min(best, seconds_since(t0) / static_cast<double>(calls));
    }
    return best;
  };
  const double small = timed(500000), large = timed(5000000);
  const double ratio = large / small;
  const bool pass = violations == 0 && bad_counts == 0 && ratio <= kMaxScaling;
  return {pass, fmt("%d streams, %zu violations, %zu out-of-range batch counts; 10x interactions -> %.2fx time (limit %.0fx)",
                    kStreams, violations, bad_counts, ratio, kMaxScaling)};
}

// 2 --------------------------------------------------------------------
double max_state_diff(const EmbeddingState& a, const EmbeddingState& b) {
  double m = 0.0;
  for (std::size_t k = 0; k < a.user_dyn.values().size(); ++k)
    m = std::max(m, std::abs(a.user_dyn.values()[k] - b.user_dyn.values()[k]));
  for (std::size_t k = 0; k < a.item_dyn.values().size(); ++k)
    m = std::max(m, std::abs(a.item_dyn.values()[k] - b.item_dyn.values()[k]));
  return m;
}

Outcome forward_equivalence() {
  constexpr double kTol = 1e-9;
  RandomStreamConfig cfg;
  cfg.num_interactions = 2000;
  cfg.num_users = 40;
  cfg.num_items = 40;
  cfg.feature_dim = 3;
  cfg.seed = 17;
  const auto ds = random_stream(cfg);
  const ModelDims d{8, ds.num_users, ds.num_items, ds.feature_dim};
  const auto params = init_params(d, 99);
  const auto deltas = compute_deltas(ds, DeltaScale::MeanStd);
  const auto initial = init_state(d, 3);

  // Sequential: the single-interaction reference operations in time order.
  auto seq = initial;
  for (std::size_t r = 0; r < ds.size(); ++r) advance_state(ds, deltas, r, params, seq);
  // Batched: the t-Batch plan through the batch engine on 4 threads.
  auto bat = initial;
  ThreadPool pool(4);
  EngineOptions opt;
  opt.min_rows_per_task = 1;
  const auto plan = assign_batches(ds);
  forward_epoch(ds, deltas, plan, params, bat, opt, &pool);
  const double diff = max_state_diff(seq, bat);
  const bool times_equal = seq.user_last_time == bat.user_last_time && seq.item_last_time == bat.item_last_time;
  return {diff <= kTol && times_equal,
          fmt("%zu batches, max |sequential - batched| = %.3g (limit %.0e)", plan.num_batches(), diff, kTol)};
}

// 3 --------------------------------------------------------------------
Outcome gradient_check() {
  constexpr double kTol = 1e-4;
  const ModelDims d{4, 5, 5, 2};
  EngineOptions opt;
  opt.weights = {0.8, 1.2, 1.5, 3.0};
  opt.state_loss = true;
  std::mt19937_64 rng(31);
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  for (int trial = 0; trial < 6; ++trial) {
    auto p = init_params(d, rng());
    for (double& v : p[Tensor::PredB].values()) v = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    const reference::OwnedContext oc(d, rng, trial % 3 != 0, trial % 2);
    const auto g = backward_step(oc.ctx, p, opt);
    for (const auto& c : reference::check_tensors(
             [&](const ModelParams& q) { return reference::interaction_total(oc.ctx, q, opt); }, p, g.params, 1e-6,
             kTol)) {
      ++checked;
      if (c.report.max_rel_error >= worst) {
        worst = c.report.max_rel_error;
        worst_name = kTensorNames[static_cast<std::size_t>(c.tensor)];
      }
    }
  }
  return {worst < kTol, fmt("%zu tensor checks over 6 random contexts, max relative error %.2e (%s), limit %.0e",
                            checked, worst, worst_name.c_str(), kTol)};
}

// 4 --------------------------------------------------------------------
Outcome projection_identity() {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 3.0);
  std::size_t exact = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng() % 64;
    ModelParams p(ModelDims{n, 1, 1, 1});
    for (double& v : p[Tensor::ProjWp].values()) v = g(rng);
    Vec u(n);
    for (double& v : u) v = g(rng);
    exact += project_user(u, 0.0, p) == u;
  }
  return {exact == 1000, fmt("%zu / 1000 pairs bit-identical at delta 0", exact)};
}

// 5 --------------------------------------------------------------------
double harmonic(std::size_t n) {
  double h = 0.0;
  for (std::size_t k = 1; k <= n; ++k) h += 1.0 / static_cast<double>(k);
  return h;
}

// Training outcomes vary with the seed, so criteria 5 and 6 gate on the mean
// over a fixed set of seeds and print every run.
constexpr std::array<std::uint64_t, 3> kSeeds{1, 2, 3};

std::string join_runs(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += (out.empty() ? "" : ", ") + fmt("%.4f", x);
  return out;
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

Outcome planted_learning() {
  constexpr std::size_t kItems = 20;
  // A uniformly random rank over N items has E[1/rank] = H(N) / N.
  const double random_mrr = harmonic(kItems) / static_cast<double>(kItems);
  std::vector<double> runs;
  for (const auto seed : kSeeds) {
    CycleStreamConfig c;
    c.num_users = 50;
    c.num_items = kItems;
    c.num_interactions = 10000;
    c.preferred = 3;
    c.seed = seed;
    const auto ds = planted_cycle_stream(c);
    TrainConfig cfg;
    cfg.epochs = 20;
    cfg.embedding_dim = 32;
    cfg.seed = seed;
    runs.push_back(run_training(ds, chronological_split(ds, 80, 10), cfg).best.test.mrr.value_or(0.0));
  }
  const double m = mean(runs);
  const bool pass = m >= 0.5 && m >= 5.0 * random_mrr;
  return {pass, fmt("mean test MRR %.4f over seeds (%s); need >= 0.5 and >= 5 x %.4f = %.4f", m,
                    join_runs(runs).c_str(), random_mrr, 5.0 * random_mrr)};
}

// 6 --------------------------------------------------------------------
double dropout_auc(std::uint64_t seed, bool use_static) {
  DropoutStreamConfig c;
  c.seed = seed;
  const auto ds = dropout_stream(c);
  TrainConfig cfg;
  cfg.task = Task::StateChange;
  cfg.epochs = 20;
  cfg.embedding_dim = 32;
  cfg.seed = seed;
  cfg.state_use_static = use_static;
  return run_training(ds, chronological_split(ds, 60, 20), cfg).best.test.auc.value_or(0.0);
}

Outcome state_change_learning() {
  // The classifier reads the dynamic embedding only: per-user one-hot inputs
  // can only memorize which training users dropped out.
  std::vector<double> runs;
  for (const auto seed : kSeeds) runs.push_back(dropout_auc(seed, false));
  const double m = mean(runs);
  const double with_static = dropout_auc(kSeeds[0], true);
  return {m >= 0.70, fmt("mean test AUC %.4f over seeds (%s), need >= 0.70; with one-hot user input: %.4f", m,
                         join_runs(runs).c_str(), with_static)};
}

// 7 --------------------------------------------------------------------
Outcome speedup() {
  constexpr double kMin = 3.0;
  constexpr std::size_t kThreads = 4;
  RandomStreamConfig cfg;
  cfg.num_interactions = 100000;
  cfg.num_users = 1000;
  cfg.num_items = 1000;
  cfg.feature_dim = 4;
  cfg.seed = 7;
  const auto ds = random_stream(cfg);
  const ModelDims d{128, ds.num_users, ds.num_items, ds.feature_dim};
  const auto params = init_params(d, 1);
  const auto deltas = compute_deltas(ds, DeltaScale::MeanStd);
  const auto plan = assign_batches(ds);
  ThreadPool pool(kThreads);
  const auto t = time_forward_epoch(ds, deltas, plan, {0, ds.size()}, params, init_state(d, 1), pool);
  const double s = t.sequential_seconds / t.batched_seconds;
  return {s >= kMin && t.max_abs_diff <= 1e-9,
          fmt("%zu batches (mean size %.1f); one-at-a-time %.2f s, batched on %zu threads %.2f s -> %.2fx (need %.1fx); "
              "%u hardware threads; states agree to %.1e",
              plan.num_batches(), plan_stats(plan).mean_batch_size, t.sequential_seconds, t.threads,
              t.batched_seconds, s, kMin, std::thread::hardware_concurrency(), t.max_abs_diff)};
}

// 8 --------------------------------------------------------------------
Outcome metric_oracles() {
  const std::vector<std::size_t> ranks{1, 2, 4};
  const double mrr = mean_reciprocal_rank(ranks);
  const double rec = recall_at_k(ranks, 10);
  const Vec s{0.8, 0.6, 0.4, 0.2};
  const std::vector<int> y{1, 0, 1, 0};
  const double a = auc(s, y);
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  const bool pass = std::abs(mrr - 1.75 / 3.0) < 1e-15 && rec == 1.0 && a == 0.75 && a == wins / pairs &&
                    auc(Vec{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0 &&
                    auc(Vec{0.5, 0.5, 0.5}, std::vector<int>{1, 0, 0}) == 0.5;
  return {pass, fmt("MRR %.6f (expect 0.583333), recall@10 %.1f, AUC %.2f vs brute force %.2f", mrr, rec, a, wins / pairs)};
}

// 9 --------------------------------------------------------------------
Outcome public_format() {
  const auto dir = std::filesystem::temp_directory_path() / "traj_acceptance_public";
  std::filesystem::create_directories(dir);
  const auto path = dir / "public_format.csv";
  {
    std::ofstream out(path);
    out << "user_id,item_id,timestamp,state_label,comma_separated_list_of_features\n";
    std::mt19937_64 rng(9);
    for (int r = 0; r < 500; ++r) {
      out << (rng() % 40) << ',' << (rng() % 25) << ',' << r * 3.5 << ',' << (r % 97 == 0 ? 1 : 0);
      for (int f = 0; f < 172; ++f) out << ',' << static_cast<double>(rng() % 1000) / 1000.0;
      out << '\n';
    }
  }
  const auto ds = load_interactions(path.string());
  std::filesystem::remove_all(dir);
  const bool pass = ds.size() == 500 && ds.feature_dim == 172 && ds.has_state_labels;
  return {pass, fmt("release-format file loads (%zu rows, %zu features, labels %s); paper-scale numbers are not gated",
                    ds.size(), ds.feature_dim, ds.has_state_labels ? "yes" : "no")};
}

}  // namespace

// Optional arguments select criteria by number.
int main(int argc, char** argv) {
  for (int a = 1; a < argc; ++a) selected.push_back(std::atoi(argv[a]));
  report(1, "t-Batch correctness", tbatch_properties);
  report(2, "batched/sequential forward equivalence", forward_equivalence);
  report(3, "gradient correctness", gradient_check);
  report(4, "projection identity", projection_identity);
  report(5, "planted-structure learning", planted_learning);
  report(6, "state-change learning", state_change_learning);
  report(7, "t-Batch speedup", speedup);
  report(8, "metric oracles", metric_oracles);
  report(9, "public dataset format", public_format);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
