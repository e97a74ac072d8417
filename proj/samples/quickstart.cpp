// Train a small model on a CSV log and print test metrics.
//   quickstart [path/to/log.csv] [epochs]

#include "traj/traj.hpp"

#include <iostream>

int main(int argc, char** argv) {
  const std::string path = argc > 1 ? argv[1] : TRAJ_SAMPLE_DATA;
  try {
    const traj::Dataset ds = traj::load_interactions(path);
    std::cout << ds.size() << " interactions, " << ds.num_users << " users, " << ds.num_items
              << " items, " << ds.feature_dim << " features\n";

    traj::TrainConfig cfg;
    cfg.epochs = argc > 2 ? std::stoul(argv[2]) : 5;
    cfg.embedding_dim = 16;
    cfg.deterministic = true;
    const auto split = traj::chronological_split(ds, 80.0, 10.0);
    const auto stats = traj::plan_stats(traj::assign_batches(ds, split.train));
    std::cout << "t-Batch: " << stats.num_batches << " batches, mean size " << stats.mean_batch_size
              << "\n";

    const auto result = traj::run_training(ds, split, cfg, [](const traj::EpochReport& e) {
      std::cout << "epoch " << e.epoch << "  loss " << e.total_loss << "  val MRR "
                << e.validation_metric.value_or(0.0) << '\n';
    });
    const auto& best = result.best;
    std::cout << "best epoch " << best.epoch << ": test MRR " << best.test.mrr.value_or(0.0)
              << ", recall@10 " << best.test.recall_at_10.value_or(0.0) << '\n';
  } catch (const std::exception& e) {
    std::cerr << "quickstart: " << e.what() << '\n';
    return 1;
  }
}
