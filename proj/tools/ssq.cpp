// Command-line harness: train/evaluate/generate entry points over the
// sequence-to-sequence models, plus dataset generation and checkpoint
// averaging.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "ssq/train.hpp"

using namespace ssq;

namespace {

int cmd_train(const std::string& config_path, int64_t seed_override, const std::string& out_dir) {
  auto cfg = harness::load_config(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  auto res = harness::train<float>(cfg);
  nlohmann::ordered_json summary;
  summary["epochs_run"] = res.epochs_run;
  summary["steps"] = res.steps;
  summary["best_val_metric"] = res.best_metric;
  summary["best_checkpoints"] = res.best_paths;
  summary["averaged_checkpoint"] = res.averaged_path;
  summary["metrics_log"] = res.metrics_path;
  std::ofstream(cfg.out_dir + "/train_summary.json", std::ios::binary) << summary.dump(2) << "\n";
  std::cout << summary.dump(2) << std::endl;
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path, int beam,
             const std::string& out_dir) {
  auto ckpt = harness::load_checkpoint(ckpt_path);
  auto model = harness::model_from_checkpoint<float>(ckpt);
  const auto& cfg = model.cfg;
  if (beam < 1) beam = cfg.beam_size;
  auto edges = harness::default_bucket_edges(cfg.train_len_max);

  nlohmann::ordered_json out;
  std::string csv;
  if (cfg.is_continuous()) {
    auto ds = tasks::load_continuous(data_path, cfg.vocab);
    auto metrics = harness::evaluate_continuous(model, ds, edges);
    out = harness::l1_metrics_to_json(metrics);
    std::ostringstream os;
    os << "bucket_lo,bucket_hi,count,frames,l1\n";
    for (const auto& b : metrics.buckets) {
      os << b.lo << ",";
      if (b.hi >= 0.0)
        os << b.hi;
      else
        os << "inf";
      os << "," << b.count << "," << b.frames << "," << b.l1_mean << "\n";
    }
    csv = os.str();
  } else {
    auto ds = tasks::load_discrete(data_path, cfg.vocab);
    auto result = harness::evaluate_discrete(model, ds, beam, edges, cfg.eval_max_len_slack);
    out = tasks::metrics_to_json(result.metrics);
    csv = tasks::metrics_to_csv(result.metrics);
  }
  std::cout << out.dump(2) << std::endl;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir + "/metrics.json", std::ios::binary) << out.dump(2) << "\n";
    std::ofstream(out_dir + "/metrics.csv", std::ios::binary) << csv;
  }
  return 0;
}

int cmd_avg(const std::string& out_path, const std::vector<std::string>& ckpts) {
  harness::save_checkpoint(out_path, harness::average_checkpoint_files(ckpts));
  std::cout << "wrote " << out_path << " (mean of " << ckpts.size() << " checkpoints)"
            << std::endl;
  return 0;
}

int cmd_longform(const std::string& config_path, int64_t seed_override,
                 const std::string& out_dir) {
  auto cfg = harness::load_config(config_path);
  if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  auto report = harness::run_longform_experiment(cfg);
  std::cout << report.json.dump(2) << std::endl;
  std::cout << "report: " << report.report_path << "\n"
            << "buckets: " << report.buckets_csv_path << "\n"
            << "loss curves: " << report.loss_curves_path << std::endl;
  return 0;
}

int cmd_gen_data(const std::string& task, const std::string& out_path, int n, int len_min,
                 int len_max, int vocab, int feature_dim, uint64_t seed, int concat_k) {
  if (task == "continuous") {
    auto ds = tasks::gen_continuous_task(n, len_min, len_max, feature_dim, seed, vocab);
    if (concat_k > 1) ds = tasks::concat_longform(ds, concat_k);
    tasks::save_continuous(out_path, ds);
    std::cout << "wrote " << ds.items.size() << " continuous examples to " << out_path
              << std::endl;
    return 0;
  }
  tasks::DiscreteDataset ds;
  if (task == "copy")
    ds = tasks::gen_copy_task(n, len_min, len_max, vocab, seed);
  else if (task == "reverse")
    ds = tasks::gen_reverse_task(n, len_min, len_max, vocab, seed);
  else
    throw ConfigError("gen-data: task must be copy, reverse or continuous");
  if (concat_k > 1) ds = tasks::concat_longform(ds, concat_k);
  tasks::save_discrete(out_path, ds);
  std::cout << "wrote " << ds.items.size() << " discrete examples to " << out_path << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"State-space sequence decoder harness"};
  app.require_subcommand(1);

  std::string config_path, out_dir, ckpt_path, data_path, out_path, task = "copy";
  int64_t seed_override = -1;
  int beam = -1;
  std::vector<std::string> avg_inputs;
  int n = 1000, len_min = 5, len_max = 20, vocab = 16, feature_dim = 8, concat_k = 1;
  uint64_t gen_seed = 1;

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
  train_cmd->add_option("--config", config_path, "Config path (JSON or key=value)")->required();
  train_cmd->add_option("--seed", seed_override, "Override the config seed");
  train_cmd->add_option("--out", out_dir, "Override the output directory");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset file");
  eval_cmd->add_option("--ckpt", ckpt_path, "Checkpoint path")->required();
  eval_cmd->add_option("--data", data_path, "Dataset path (JSONL)")->required();
  eval_cmd->add_option("--beam", beam, "Beam size (defaults to the checkpoint config)");
  eval_cmd->add_option("--out", out_dir, "Directory for metrics.json / metrics.csv");

  auto* avg_cmd = app.add_subcommand("avg", "Average checkpoints elementwise");
  avg_cmd->add_option("--out", out_path, "Output checkpoint path")->required();
  avg_cmd->add_option("ckpts", avg_inputs, "Input checkpoints")->required()->expected(-1);

  auto* longform_cmd =
      app.add_subcommand("longform", "Train both variants and compare length robustness");
  longform_cmd->add_option("--config", config_path, "Config path")->required();
  longform_cmd->add_option("--seed", seed_override, "Override the config seed");
  longform_cmd->add_option("--out", out_dir, "Override the output directory");

  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  gen_cmd->add_option("--task", task, "copy | reverse | continuous")->required();
  gen_cmd->add_option("--out", out_path, "Output JSONL path")->required();
  gen_cmd->add_option("--n", n, "Number of examples");
  gen_cmd->add_option("--len-min", len_min, "Minimum source length");
  gen_cmd->add_option("--len-max", len_max, "Maximum source length");
  gen_cmd->add_option("--vocab", vocab, "Task vocabulary size");
  gen_cmd->add_option("--feature-dim", feature_dim, "Continuous frame width");
  gen_cmd->add_option("--seed", gen_seed, "Generator seed");
  gen_cmd->add_option("--concat", concat_k, "Merge groups of k consecutive examples");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, seed_override, out_dir);
    if (eval_cmd->parsed()) return cmd_eval(ckpt_path, data_path, beam, out_dir);
    if (avg_cmd->parsed()) return cmd_avg(out_path, avg_inputs);
    if (longform_cmd->parsed()) return cmd_longform(config_path, seed_override, out_dir);
    if (gen_cmd->parsed())
      return cmd_gen_data(task, out_path, n, len_min, len_max, vocab, feature_dim, gen_seed,
                          concat_k);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
