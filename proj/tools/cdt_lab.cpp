#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdt/harness.hpp"

namespace h = cdt::harness;

int main(int argc, char** argv) {
  CLI::App app{"Synthetic multi-hop QA lab: data generation, training, attribution probes and reports"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(CDT_VERSION));

  std::string config, dataset, run_dir, checkpoint, out_path, sweep = h::DenoiseSettings{}.sweep_text;
  std::vector<std::string> runs;
  h::TrainOverrides ov;
  std::string objective, head_mode = "all", threshold = "mean";
  double lr = 0, beta = 0, percentile = 50;
  std::uint64_t seed = 0;
  std::size_t top_k = 30, head_top_k = 4, max_samples = 0, steps = 0, stop_after = 0;
  bool resume = false;

  auto* gen = app.add_subcommand("gen-data", "generate a labelled dataset and its manifest");
  gen->add_option("--config", config, "generation spec (JSON)")->required();
  gen->add_option("--dataset", dataset, "output JSONL path")->required();

  auto* tr = app.add_subcommand("train", "train a model under the CE or CDT objective");
  tr->add_option("--config", config, "training config (JSON)");
  tr->add_option("--dataset", dataset, "dataset written by gen-data")->required();
  tr->add_option("--run-dir", run_dir, "run directory (relative paths resolve under $CDT_RUN_ROOT)")->required();
  auto* o_obj = tr->add_option("--objective", objective, "ce or cdt")->check(CLI::IsMember({"ce", "cdt"}));
  auto* o_lr = tr->add_option("--lr", lr, "learning rate");
  auto* o_beta = tr->add_option("--beta", beta, "denoising strength multiplier");
  auto* o_seed = tr->add_option("--seed", seed, "init and batch-order seed");
  auto* o_topk = tr->add_option("--top-k", top_k, "detection top-k");
  auto* o_head = tr->add_option("--head-mode", head_mode, "all or top_k_heads")
                     ->check(CLI::IsMember({"all", "top_k_heads"}));
  auto* o_steps = tr->add_option("--steps", steps, "optimizer steps");
  tr->add_option("--stop-after", stop_after, "stop once this step completes");
  tr->add_flag("--resume", resume, "continue from the newest checkpoint in the run directory");

  auto* pr = app.add_subcommand("probe", "per-sample attribution and detection report");
  pr->add_option("--checkpoint", checkpoint)->required();
  pr->add_option("--dataset", dataset)->required();
  pr->add_option("--out", out_path, "report path (JSON)")->required();
  pr->add_option("--top-k", top_k);
  pr->add_option("--head-mode", head_mode)->check(CLI::IsMember({"all", "top_k_heads"}));
  pr->add_option("--head-top-k", head_top_k);
  pr->add_option("--max-samples", max_samples);

  auto* dn = app.add_subcommand("denoise-analyze", "manual embedding denoising sweep on a trained model");
  dn->add_option("--checkpoint", checkpoint)->required();
  dn->add_option("--dataset", dataset)->required();
  dn->add_option("--out", out_path, "report path (JSON)")->required();
  dn->add_option("--sweep", sweep, "comma-separated strengths");
  dn->add_option("--threshold", threshold)->check(CLI::IsMember({"mean", "percentile"}));
  dn->add_option("--percentile", percentile);
  dn->add_option("--max-samples", max_samples);

  auto* rp = app.add_subcommand("report", "merge run logs into comparison tables");
  rp->add_option("--run-dir", runs, "run directories")->required();
  rp->add_option("--out", out_path, "output prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? h::kOk : h::kConfig;
  }

  return h::guarded([&]() -> int {
    if (*gen) return h::cmd_gen_data(config, dataset, std::cout, std::cerr);
    if (*tr) {
      if (*o_obj) ov.objective = objective;
      if (*o_lr) ov.lr = lr;
      if (*o_beta) ov.beta = beta;
      if (*o_seed) ov.seed = seed;
      if (*o_topk) ov.top_k = top_k;
      if (*o_head) ov.head_mode = head_mode;
      if (*o_steps) ov.steps = steps;
      ov.stop_after = stop_after;
      return h::cmd_train(config, dataset, run_dir, ov, resume, std::cout, std::cerr);
    }
    if (*pr)
      return h::cmd_probe(checkpoint, dataset, out_path,
                          {top_k, head_top_k, cdt::attr::head_mode_from(head_mode), max_samples}, std::cout);
    if (*dn) {
      h::DenoiseSettings ds;
      ds.sweep_text = sweep;
      ds.threshold_mode = threshold == "mean" ? cdt::denoise::ThresholdMode::mean : cdt::denoise::ThresholdMode::percentile;
      ds.percentile = percentile;
      ds.max_samples = max_samples;
      return h::cmd_denoise_analyze(checkpoint, dataset, ds, out_path, std::cout);
    }
    return h::cmd_report(runs, out_path, std::cout, std::cerr);
  });
}
