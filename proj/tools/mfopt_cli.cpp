// Command-line driver for the multi-fidelity placement optimization pipelines.
// Every subcommand reads and writes artifacts under --out, so stages can be
// run independently or chained:
//
//   mfopt gen-data --out run1
//   mfopt train-learned --out run1
//   mfopt train-mde-s2s --out run1
//   mfopt finetune-mde --out run1
//   mfopt eval-models --out run1
//   mfopt eval-mdes --out run1
//   mfopt run-baselines --out run1
//   mfopt efficiency-curve --out run1
//   mfopt optimize --out run1 --task 0 --baseline combined_s2s
//   mfopt report --out run1

#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "mfopt/config.hpp"
#include "mfopt/harness.hpp"

namespace {

struct GlobalOpts {
  std::string config_path;
  std::string out = "out";
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
};

mfopt::ExperimentConfig resolve_config(const GlobalOpts& g) {
  mfopt::ExperimentConfig cfg;
  if (!g.config_path.empty()) cfg = mfopt::load_config_file(g.config_path);
  if (g.seed_set) cfg.seed = g.seed;
  if (g.threads > 0) cfg.threads = g.threads;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-fidelity placement optimization harness"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--config", g.config_path, "JSON experiment config")
      ->check(CLI::ExistingFile);
  app.add_option("--out", g.out, "output directory (artifacts and results)");
  app.add_option("--seed", g.seed, "override the config seed")
      ->each([&g](const std::string&) { g.seed_set = true; });
  app.add_option("--threads", g.threads, "worker threads for data-parallel stages");

  uint64_t task_index = 0;
  std::string baseline = "combined_s2s";

  auto* gen = app.add_subcommand("gen-data", "generate source/target datasets");
  auto* train_l = app.add_subcommand("train-learned", "train the learned predictive model");
  auto* train_m = app.add_subcommand("train-mde-s2s", "train sim-to-sim deviation estimators");
  auto* finetune = app.add_subcommand("finetune-mde", "fine-tune estimators on target data");
  auto* eval_m = app.add_subcommand("eval-models", "predictive-model accuracy tables");
  auto* eval_d = app.add_subcommand("eval-mdes", "deviation-estimator accuracy tables");
  auto* baselines = app.add_subcommand("run-baselines", "optimization baselines comparison");
  auto* efficiency = app.add_subcommand("efficiency-curve", "fine-tune vs from-scratch sample curve");
  auto* optimize = app.add_subcommand("optimize", "run one optimization task and dump its trace");
  optimize->add_option("--task", task_index, "task index within the demo stream");
  optimize->add_option("--baseline", baseline,
                       "only_h | only_l | only_s | combined_s2s | combined_s2r");
  auto* report = app.add_subcommand("report", "aggregate results into report tables and charts");

  // global flags may appear after the subcommand name
  for (CLI::App* sub : app.get_subcommands({})) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const mfopt::ExperimentConfig cfg = resolve_config(g);
    const mfopt::harness::Paths paths{g.out};
    paths.ensure();

    if (gen->parsed()) mfopt::harness::gen_data(cfg, paths);
    if (train_l->parsed()) mfopt::harness::train_learned_stage(cfg, paths);
    if (train_m->parsed()) mfopt::harness::train_mde_s2s_stage(cfg, paths);
    if (finetune->parsed()) mfopt::harness::finetune_stage(cfg, paths);
    if (eval_m->parsed()) mfopt::harness::eval_models_stage(cfg, paths);
    if (eval_d->parsed()) mfopt::harness::eval_mdes_stage(cfg, paths);
    if (baselines->parsed()) mfopt::harness::run_baselines_stage(cfg, paths);
    if (efficiency->parsed()) mfopt::harness::efficiency_stage(cfg, paths);
    if (optimize->parsed())
      mfopt::harness::optimize_stage(cfg, paths, task_index, baseline);
    if (report->parsed()) mfopt::harness::report_stage(cfg, paths);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
