// Seeded synthetic interaction streams for tests, benchmarks and demos.

#pragma once

#include "traj/data.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

namespace traj {

struct RandomStreamConfig {
  std::size_t num_interactions = 1000;
  std::size_t num_users = 50;
  std::size_t num_items = 50;
  std::size_t feature_dim = 2;
  double tie_probability = 0.1;  // chance the next event shares the previous timestamp
  std::uint64_t seed = 0;
};

/// Uniformly random users and items on an increasing clock with occasional
/// timestamp ties.
inline Dataset random_stream(const RandomStreamConfig& cfg) {
  if (cfg.num_users == 0 || cfg.num_items == 0) throw Error("random_stream: need users and items");
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> user(0, cfg.num_users - 1);
  std::uniform_int_distribution<std::size_t> item(0, cfg.num_items - 1);
  std::exponential_distribution<double> gap(1.0);
  std::bernoulli_distribution tie(cfg.tie_probability);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<Interaction> xs(cfg.num_interactions);
  double t = 0.0;
  for (auto& x : xs) {
    if (!tie(rng)) t += gap(rng);
    x.user = user(rng);
    x.item = item(rng);
    x.timestamp = t;
    x.features.resize(cfg.feature_dim);
    for (double& f : x.features) f = noise(rng);
  }
  return make_dataset(std::move(xs), cfg.num_users, cfg.num_items, cfg.feature_dim, false);
}

struct CycleStreamConfig {
  std::size_t num_users = 50;
  std::size_t num_items = 20;
  std::size_t num_interactions = 10000;
  std::size_t preferred = 3;
  double noise = 0.05;  // chance an event goes to a uniformly random item
  std::size_t feature_dim = 2;
  std::uint64_t seed = 0;
};

/// Each user repeatedly cycles through its own small set of preferred
/// items; with probability `noise` an event hits a random item instead
/// (the cycle position still advances).
inline Dataset planted_cycle_stream(const CycleStreamConfig& cfg) {
  if (cfg.preferred == 0 || cfg.preferred > cfg.num_items) {
    throw Error("planted_cycle_stream: preferred must be in [1, num_items]");
  }
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::vector<std::size_t>> prefs(cfg.num_users);
  std::vector<std::size_t> all(cfg.num_items);
  std::iota(all.begin(), all.end(), 0);
  for (auto& p : prefs) {
    std::shuffle(all.begin(), all.end(), rng);
    p.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.preferred));
  }
  std::vector<std::size_t> pos(cfg.num_users, 0);
  std::uniform_int_distribution<std::size_t> user(0, cfg.num_users - 1);
  std::uniform_int_distribution<std::size_t> item(0, cfg.num_items - 1);
  std::bernoulli_distribution noisy(cfg.noise);
  std::exponential_distribution<double> gap(1.0);
  std::normal_distribution<double> feat(0.0, 1.0);
  std::vector<Interaction> xs(cfg.num_interactions);
  double t = 0.0;
  for (auto& x : xs) {
    t += gap(rng);
    x.user = user(rng);
    const auto& p = prefs[x.user];
    x.item = noisy(rng) ? item(rng) : p[pos[x.user] % p.size()];
    ++pos[x.user];
    x.timestamp = t;
    x.features.resize(cfg.feature_dim);
    for (double& f : x.features) f = feat(rng);
  }
  return make_dataset(std::move(xs), cfg.num_users, cfg.num_items, cfg.feature_dim, false);
}

struct DropoutStreamConfig {
  std::size_t num_users = 1000;
  std::size_t num_dropouts = 100;
  std::size_t num_items = 50;
  double events_per_user = 10.0;  // mean count for a user active over the whole horizon
  std::size_t drift_window = 4;   // events before (and including) the drop-out whose features drift
  double drift = 2.0;             // feature-0 shift at the final event
  std::size_t feature_dim = 4;
  std::uint64_t seed = 0;
};

/// Users interact on [0, horizon]; drop-out users stop early and their last
/// event is labelled 1. Feature 0 of a drop-out user's last `drift_window`
/// events ramps up towards `drift`.
inline Dataset dropout_stream(const DropoutStreamConfig& cfg) {
  if (cfg.num_dropouts > cfg.num_users) throw Error("dropout_stream: more drop-outs than users");
  if (cfg.num_items == 0 || cfg.feature_dim == 0) throw Error("dropout_stream: need items and features");
  std::mt19937_64 rng(cfg.seed);
  const double horizon = 1000.0;
  std::vector<std::size_t> users(cfg.num_users);
  std::iota(users.begin(), users.end(), 0);
  std::shuffle(users.begin(), users.end(), rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> item(0, cfg.num_items - 1);
  std::normal_distribution<double> feat(0.0, 1.0);

  std::vector<Interaction> xs;
  for (std::size_t k = 0; k < users.size(); ++k) {
    const bool drops = k < cfg.num_dropouts;
    const double end = drops ? horizon * (0.05 + 0.95 * unit(rng)) : horizon;
    std::poisson_distribution<std::size_t> count(cfg.events_per_user * end / horizon);
    std::size_t c = count(rng);
    if (drops) c = std::max(c, cfg.drift_window + 1);
    if (c == 0) continue;
    std::vector<double> times(c);
    for (double& t : times) t = end * unit(rng);
    std::sort(times.begin(), times.end());
    const std::size_t home = item(rng);
    for (std::size_t e = 0; e < c; ++e) {
      Interaction x;
      x.user = users[k];
      x.item = unit(rng) < 0.5 ? home : item(rng);
      x.timestamp = times[e];
      x.features.resize(cfg.feature_dim);
      for (double& f : x.features) f = feat(rng);
      if (drops && e + cfg.drift_window >= c) {
        const double ramp = static_cast<double>(e + cfg.drift_window + 1 - c) /
                            static_cast<double>(cfg.drift_window);
        x.features[0] += cfg.drift * ramp;
      }
      x.state_label = drops && e + 1 == c ? 1 : 0;
      xs.push_back(std::move(x));
    }
  }
  return make_dataset(std::move(xs), cfg.num_users, cfg.num_items, cfg.feature_dim, true);
}

/// Every interaction has a fresh user and a fresh item.
inline Dataset all_distinct_stream(std::size_t n, std::size_t feature_dim = 1) {
  std::vector<Interaction> xs(n);
  for (std::size_t r = 0; r < n; ++r) {
    xs[r].user = r;
    xs[r].item = r;
    xs[r].timestamp = static_cast<double>(r);
    xs[r].features.assign(feature_dim, 0.0);
  }
  return make_dataset(std::move(xs), n, n, feature_dim, false);
}

/// One user interacting with `num_items` items round-robin.
inline Dataset single_user_stream(std::size_t n, std::size_t num_items = 5,
                                  std::size_t feature_dim = 1) {
  std::vector<Interaction> xs(n);
  for (std::size_t r = 0; r < n; ++r) {
    xs[r].user = 0;
    xs[r].item = r % num_items;
    xs[r].timestamp = static_cast<double>(r);
    xs[r].features.assign(feature_dim, 0.0);
  }
  return make_dataset(std::move(xs), 1, num_items, feature_dim, false);
}

}  // namespace traj
