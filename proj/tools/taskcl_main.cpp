#include <CLI11.hpp>

#include "taskcl/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"task-level contrastive meta-learning toolkit"};
  app.require_subcommand(1);

  taskcl::cli::CommonArgs common;
  long seed_opt = -1;
  std::string out_opt;

  auto add_common = [&](CLI::App* sub, bool needs_config = true) {
    if (needs_config) sub->add_option("--config", common.config_path, "experiment file");
    sub->add_option("--seed", seed_opt, "root seed override");
    sub->add_option("--out", out_opt, "output directory override");
  };
  auto finalize_common = [&]() {
    if (seed_opt >= 0) common.seed = seed_opt;
    if (!out_opt.empty()) common.out_dir = out_opt;
  };

  auto* train = app.add_subcommand("train", "train a method and emit checkpoint, log and metrics");
  add_common(train);

  auto* eval = app.add_subcommand("eval", "evaluate a saved checkpoint");
  std::string ckpt_dir;
  add_common(eval);
  eval->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();

  auto* ablate = app.add_subcommand("ablate-aug", "run the augmentation-strategy ablation table");
  add_common(ablate);

  auto* route = app.add_subcommand("route", "route tasks to experts and plot the cluster/domain heatmap");
  std::string run_dir;
  int route_tasks = 200;
  add_common(route);
  route->add_option("--run", run_dir, "training run directory (with checkpoint/ and optional bank/)")
      ->required();
  route->add_option("--tasks", route_tasks, "number of tasks to route");

  auto* probe = app.add_subcommand("probe", "linear domain probe on an embeddings CSV");
  std::string embeddings_csv, probe_out = ".";
  long probe_seed = 0;
  probe->add_option("--embeddings", embeddings_csv, "embeddings CSV path")->required();
  probe->add_option("--out", probe_out, "output directory");
  probe->add_option("--seed", probe_seed, "split seed");

  auto* report = app.add_subcommand("report", "consolidated human-readable run summary");
  std::string report_run, report_out;
  report->add_option("--run", report_run, "training run directory")->required();
  report->add_option("--out", report_out, "output file (default <run>/report.txt)");

  CLI11_PARSE(app, argc, argv);
  finalize_common();

  if (train->parsed()) return taskcl::cli::cmd_train(common);
  if (eval->parsed()) return taskcl::cli::cmd_eval(common, ckpt_dir);
  if (ablate->parsed()) return taskcl::cli::cmd_ablate_aug(common);
  if (route->parsed()) return taskcl::cli::cmd_route(common, run_dir, route_tasks);
  if (probe->parsed()) return taskcl::cli::cmd_probe(embeddings_csv, probe_out, probe_seed);
  if (report->parsed())
    return taskcl::cli::cmd_report(report_run,
                                   report_out.empty()
                                       ? (std::filesystem::path(report_run) / "report.txt").string()
                                       : report_out);
  return 1;
}
