// traj: train, evaluate, sweep and inspect dynamic-embedding trajectory models.

#include "traj/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  traj::ExperimentSpec spec;
  auto& cfg = spec.train;
  std::string task = "interaction", delta_scale = "mean-std", detach = "per-batch";
  double train_pct = 0.0, val_pct = 0.0, pos_weight = 1.0;

  CLI::App app{"Dynamic embedding trajectories for temporal interaction logs"};
  app.set_config("--config", "", "key=value file of option defaults; flags win");
  app.require_subcommand(1);

  app.add_option("--data", spec.data_path, "Interaction CSV (user_id,item_id,timestamp[,state_label],features...)");
  app.add_option("--task", task, "interaction | state_change")->check(CLI::IsMember({"interaction", "state_change"}));
  app.add_option("--out", spec.out_dir, "Output directory")->capture_default_str();
  app.add_option("--epochs", cfg.epochs)->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--lr", cfg.learning_rate, "Learning rate")->capture_default_str();
  app.add_option("--weight-decay", cfg.weight_decay)->capture_default_str();
  app.add_option("--dim", cfg.embedding_dim, "Dynamic embedding size")->capture_default_str();
  auto* train_opt = app.add_option("--train-pct", train_pct, "Training prefix percent (default 80, state_change 60)");
  auto* val_opt = app.add_option("--val-pct", val_pct, "Validation percent (default 10, state_change 20)");
  app.add_option("--lambda-u", cfg.lambda_u)->capture_default_str();
  app.add_option("--lambda-i", cfg.lambda_i)->capture_default_str();
  app.add_option("--state-loss-scale", cfg.state_loss_scale)->capture_default_str();
  auto* pos_weight_opt = app.add_option("--state-pos-weight", pos_weight,
                                        "Weight of label-1 cross-entropy terms (default: train negatives/positives)");
  app.add_option("--seed", cfg.seed)->capture_default_str();
  app.add_flag("--deterministic", cfg.deterministic, "Single-threaded, bit-reproducible");
  app.add_option("--threads", cfg.threads, "Worker threads (0: all cores; TRAJ_NUM_THREADS caps)");
  app.add_option("--delta-scale", delta_scale)->capture_default_str()->check(CLI::IsMember({"mean-std", "max", "none"}));
  app.add_option("--detach", detach)->capture_default_str()->check(CLI::IsMember({"per-batch", "none"}));
  app.add_flag("!--no-static-state-input", cfg.state_use_static, "State classifier sees only the dynamic embedding");

  auto* train = app.add_subcommand("train", "Train and write checkpoint.bin, epochs.jsonl, metrics.json")->fallthrough();
  auto* evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on its test range")->fallthrough();
  evaluate->add_option("--checkpoint", spec.checkpoint_path)->required();
  evaluate->add_flag("--lsh", spec.use_lsh, "Retrieve candidates with random-hyperplane LSH");
  evaluate->add_option("--lsh-planes", spec.lsh.planes)->capture_default_str();
  evaluate->add_option("--lsh-tables", spec.lsh.tables)->capture_default_str();
  evaluate->add_option("--ranks-csv", spec.ranks_csv, "Write per-interaction ranks here");
  auto* sweep = app.add_subcommand("sweep", "Grid over training percent and embedding size")->fallthrough();
  sweep->add_option("--sweep-train-pct", spec.sweep_train_pct)->delimiter(',');
  sweep->add_option("--sweep-dim", spec.sweep_dim)->delimiter(',');
  sweep->add_option("--jobs", spec.jobs, "Grid points run concurrently")->capture_default_str();
  auto* stats = app.add_subcommand("batch-stats", "t-Batch plan statistics and forward timing")->fallthrough();
  bool no_timing = false;
  stats->add_flag("--no-timing", no_timing);

  CLI11_PARSE(app, argc, argv);

  try {
    cfg.task = traj::parse_task(task);
    cfg.delta_scale = traj::parse_delta_scale(delta_scale);
    cfg.detach_policy = traj::parse_detach_policy(detach);
  } catch (const std::exception& e) {
    std::cerr << "traj: error: " << e.what() << '\n';
    return 2;
  }
  if (train_opt->count() > 0) spec.train_pct = train_pct;
  if (val_opt->count() > 0) spec.val_pct = val_pct;
  if (pos_weight_opt->count() > 0) cfg.state_pos_weight = pos_weight;
  spec.timing = !no_timing;

  if (*train) return traj::cmd_train(spec, std::cout, std::cerr);
  if (*evaluate) return traj::cmd_evaluate(spec, std::cout, std::cerr);
  if (*sweep) return traj::cmd_sweep(spec, std::cout, std::cerr);
  if (*stats) return traj::cmd_batch_stats(spec, std::cout, std::cerr);
  return 2;
}
