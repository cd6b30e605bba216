#pragma once

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfopt/errors.hpp"
#include "mfopt/gp.hpp"
#include "mfopt/nn.hpp"
#include "mfopt/optimize.hpp"
#include "mfopt/rng.hpp"
#include "mfopt/scene_gen.hpp"
#include "mfopt/sim.hpp"

namespace mfopt {

// One JSON document drives every pipeline. Parsing is strict: unknown keys
// are rejected so config typos cannot silently fall back to defaults.
struct ExperimentConfig {
  uint64_t seed = 1;
  int threads = 1;

  GenConfig gen;          // grid dims and cell size live here
  SimParams sim;
  double target_eps_e_ref = 0.3;
  double target_eps_alpha = -0.3;
  double target_noise_sigma_cm = 0.12;
  double target_noise_corr_cells = 3.0;

  DeviationConfig deviation{0.0, 0.4};  // d_norm 0: freeze at s2s training

  int source_train = 1000, source_test = 300;
  int target_train = 80, target_test = 20;

  nn::TrainConfig train_learned{1e-3, 16, 3000, nn::LossKind::MSE, 11};
  nn::TrainConfig train_s2s{1e-3, 16, 2400, nn::LossKind::L1, 12};
  nn::TrainConfig finetune{3e-3, 16, 500, nn::LossKind::L1, 13};

  OptimizerConfig optimizer;

  int eval_tasks = 20;
  int eval_seeds = 5;
  std::vector<int> efficiency_sizes = {10, 20, 40, 80};
  std::vector<std::string> baselines = {"only_h", "only_l", "only_s",
                                        "combined_s2s", "combined_s2r"};

  TargetEnvParams target_params() const {
    return make_target_params(sim, target_eps_e_ref, target_eps_alpha,
                              target_noise_sigma_cm, target_noise_corr_cells,
                              mix_seed(seed, 0xfeedULL));
  }

  void validate() const {
    gen.validate();
    sim.validate();
    if (!(deviation.d_max > 0.0 && deviation.d_max <= 1.0))
      throw ConfigInvalid("d_max must be in (0, 1]");
    if (source_train < 1 || source_test < 1 || target_train < 0 || target_test < 1)
      throw ConfigInvalid("bad dataset sizes");
    train_learned.validate();
    train_s2s.validate();
    finetune.validate();
    optimizer.validate();
    if (eval_tasks < 1 || eval_seeds < 1) throw ConfigInvalid("bad eval sizes");
    for (int n : efficiency_sizes)
      if (n < 0 || n > target_train)
        throw ConfigInvalid("efficiency sizes must be within target_train");
    for (const auto& b : baselines)
      if (b != "only_h" && b != "only_l" && b != "only_s" &&
          b != "combined_s2s" && b != "combined_s2r")
        throw ConfigInvalid("unknown baseline: " + b);
    if (threads < 1) throw ConfigInvalid("threads must be >= 1");
  }
};

namespace cfgio {

inline void expect_keys(const nlohmann::json& j, const std::string& where,
                        const std::set<std::string>& allowed) {
  if (!j.is_object()) throw ConfigInvalid("config section " + where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k))
      throw ConfigInvalid("unknown config key \"" + k + "\" in " + where);
}

inline void parse_gen(const nlohmann::json& j, GenConfig& g) {
  expect_keys(j, "gen",
              {"grid", "plate_radius_cm", "plate_base_cm", "rim_height_cm",
               "rim_width_cm", "n_obstacles", "obstacle_len_cm",
               "obstacle_wid_cm", "obstacle_h_cm", "object_area_cm2",
               "thickness_cm", "material_palette", "plate_material",
               "obstacle_material", "cross_object_prob"});
  if (j.contains("grid")) {
    expect_keys(j["grid"], "gen.grid", {"width", "height", "cell_size"});
    g.grid_width = j["grid"].value("width", g.grid_width);
    g.grid_height = j["grid"].value("height", g.grid_height);
    g.cell_size = j["grid"].value("cell_size", g.cell_size);
  }
  g.plate_radius_cm = j.value("plate_radius_cm", g.plate_radius_cm);
  g.plate_base_cm = j.value("plate_base_cm", g.plate_base_cm);
  g.rim_height_cm = j.value("rim_height_cm", g.rim_height_cm);
  g.rim_width_cm = j.value("rim_width_cm", g.rim_width_cm);
  auto range2 = [&](const char* key, auto& lo, auto& hi) {
    if (!j.contains(key)) return;
    const auto& a = j[key];
    if (!a.is_array() || a.size() != 2)
      throw ConfigInvalid(std::string("gen.") + key + " must be [lo, hi]");
    lo = a[0];
    hi = a[1];
  };
  range2("n_obstacles", g.n_obstacles_min, g.n_obstacles_max);
  range2("obstacle_len_cm", g.obstacle_len_min_cm, g.obstacle_len_max_cm);
  range2("obstacle_wid_cm", g.obstacle_wid_min_cm, g.obstacle_wid_max_cm);
  range2("obstacle_h_cm", g.obstacle_h_min_cm, g.obstacle_h_max_cm);
  range2("object_area_cm2", g.object_area_min_cm2, g.object_area_max_cm2);
  range2("thickness_cm", g.thickness_min_cm, g.thickness_max_cm);
  auto parse_material = [](const nlohmann::json& m, const std::string& where) {
    expect_keys(m, where, {"mass_g", "youngs_kpa", "poisson"});
    return ObjectMaterial{m.value("mass_g", 0.0f), m.value("youngs_kpa", 0.0f),
                          m.value("poisson", 0.0f)};
  };
  if (j.contains("material_palette")) {
    g.material_palette.clear();
    for (const auto& m : j["material_palette"])
      g.material_palette.push_back(parse_material(m, "gen.material_palette[]"));
  }
  if (j.contains("plate_material"))
    g.plate_material = parse_material(j["plate_material"], "gen.plate_material");
  if (j.contains("obstacle_material"))
    g.obstacle_material =
        parse_material(j["obstacle_material"], "gen.obstacle_material");
  g.cross_object_prob = j.value("cross_object_prob", g.cross_object_prob);
}

inline nlohmann::json gen_to_json(const GenConfig& g) {
  nlohmann::json j;
  j["grid"] = {{"width", g.grid_width},
               {"height", g.grid_height},
               {"cell_size", g.cell_size}};
  j["plate_radius_cm"] = g.plate_radius_cm;
  j["plate_base_cm"] = g.plate_base_cm;
  j["rim_height_cm"] = g.rim_height_cm;
  j["rim_width_cm"] = g.rim_width_cm;
  j["n_obstacles"] = {g.n_obstacles_min, g.n_obstacles_max};
  j["obstacle_len_cm"] = {g.obstacle_len_min_cm, g.obstacle_len_max_cm};
  j["obstacle_wid_cm"] = {g.obstacle_wid_min_cm, g.obstacle_wid_max_cm};
  j["obstacle_h_cm"] = {g.obstacle_h_min_cm, g.obstacle_h_max_cm};
  j["object_area_cm2"] = {g.object_area_min_cm2, g.object_area_max_cm2};
  j["thickness_cm"] = {g.thickness_min_cm, g.thickness_max_cm};
  j["material_palette"] = nlohmann::json::array();
  for (const auto& m : g.material_palette)
    j["material_palette"].push_back({{"mass_g", m.mass_g},
                                     {"youngs_kpa", m.youngs_kpa},
                                     {"poisson", m.poisson}});
  j["plate_material"] = {{"mass_g", g.plate_material.mass_g},
                         {"youngs_kpa", g.plate_material.youngs_kpa},
                         {"poisson", g.plate_material.poisson}};
  j["obstacle_material"] = {{"mass_g", g.obstacle_material.mass_g},
                            {"youngs_kpa", g.obstacle_material.youngs_kpa},
                            {"poisson", g.obstacle_material.poisson}};
  j["cross_object_prob"] = g.cross_object_prob;
  return j;
}

inline void parse_train(const nlohmann::json& j, const std::string& where,
                        nn::TrainConfig& t) {
  expect_keys(j, where, {"learning_rate", "batch_size", "iterations", "loss", "seed"});
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.iterations = j.value("iterations", t.iterations);
  t.seed = j.value("seed", t.seed);
  if (j.contains("loss")) {
    const std::string l = j["loss"].get<std::string>();
    if (l == "mse")
      t.loss = nn::LossKind::MSE;
    else if (l == "l1")
      t.loss = nn::LossKind::L1;
    else
      throw ConfigInvalid("loss must be \"mse\" or \"l1\" in " + where);
  }
}

inline nlohmann::json train_to_json(const nn::TrainConfig& t) {
  return {{"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"iterations", t.iterations},
          {"loss", t.loss == nn::LossKind::MSE ? "mse" : "l1"},
          {"seed", t.seed}};
}

}  // namespace cfgio

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  cfgio::expect_keys(j, "<root>",
                     {"seed", "threads", "gen", "sim", "target_env", "deviation",
                      "datasets", "train_learned", "train_s2s", "finetune",
                      "optimizer", "eval", "baselines"});
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  if (j.contains("gen")) cfgio::parse_gen(j["gen"], c.gen);
  if (j.contains("sim")) {
    cfgio::expect_keys(j["sim"], "sim",
                       {"e_ref_kpa", "alpha", "rho_max", "relax_iters"});
    c.sim.e_ref_kpa = j["sim"].value("e_ref_kpa", c.sim.e_ref_kpa);
    c.sim.alpha = j["sim"].value("alpha", c.sim.alpha);
    c.sim.rho_max = j["sim"].value("rho_max", c.sim.rho_max);
    c.sim.relax_iters = j["sim"].value("relax_iters", c.sim.relax_iters);
  }
  if (j.contains("target_env")) {
    cfgio::expect_keys(j["target_env"], "target_env",
                       {"eps_e_ref", "eps_alpha", "noise_sigma_cm",
                        "noise_corr_cells"});
    c.target_eps_e_ref = j["target_env"].value("eps_e_ref", c.target_eps_e_ref);
    c.target_eps_alpha = j["target_env"].value("eps_alpha", c.target_eps_alpha);
    c.target_noise_sigma_cm =
        j["target_env"].value("noise_sigma_cm", c.target_noise_sigma_cm);
    c.target_noise_corr_cells =
        j["target_env"].value("noise_corr_cells", c.target_noise_corr_cells);
  }
  if (j.contains("deviation")) {
    cfgio::expect_keys(j["deviation"], "deviation", {"d_max", "d_norm"});
    c.deviation.d_max = j["deviation"].value("d_max", c.deviation.d_max);
    c.deviation.d_norm = j["deviation"].value("d_norm", c.deviation.d_norm);
  }
  if (j.contains("datasets")) {
    cfgio::expect_keys(j["datasets"], "datasets",
                       {"source_train", "source_test", "target_train",
                        "target_test"});
    c.source_train = j["datasets"].value("source_train", c.source_train);
    c.source_test = j["datasets"].value("source_test", c.source_test);
    c.target_train = j["datasets"].value("target_train", c.target_train);
    c.target_test = j["datasets"].value("target_test", c.target_test);
  }
  if (j.contains("train_learned"))
    cfgio::parse_train(j["train_learned"], "train_learned", c.train_learned);
  if (j.contains("train_s2s"))
    cfgio::parse_train(j["train_s2s"], "train_s2s", c.train_s2s);
  if (j.contains("finetune")) cfgio::parse_train(j["finetune"], "finetune", c.finetune);
  if (j.contains("optimizer")) {
    cfgio::expect_keys(j["optimizer"], "optimizer",
                       {"budget", "beta", "n_uniform", "n_stratified", "gp"});
    auto& o = c.optimizer;
    o.budget = j["optimizer"].value("budget", o.budget);
    o.beta = j["optimizer"].value("beta", o.beta);
    o.n_uniform_candidates = j["optimizer"].value("n_uniform", o.n_uniform_candidates);
    o.n_stratified_candidates =
        j["optimizer"].value("n_stratified", o.n_stratified_candidates);
    if (j["optimizer"].contains("gp")) {
      cfgio::expect_keys(j["optimizer"]["gp"], "optimizer.gp",
                         {"signal_var", "length_scale_cm", "noise_var"});
      o.gp.signal_var = j["optimizer"]["gp"].value("signal_var", o.gp.signal_var);
      o.gp.length_scale_cm =
          j["optimizer"]["gp"].value("length_scale_cm", o.gp.length_scale_cm);
      o.gp.noise_var = j["optimizer"]["gp"].value("noise_var", o.gp.noise_var);
    }
  }
  if (j.contains("eval")) {
    cfgio::expect_keys(j["eval"], "eval", {"n_tasks", "n_seeds", "efficiency_sizes"});
    c.eval_tasks = j["eval"].value("n_tasks", c.eval_tasks);
    c.eval_seeds = j["eval"].value("n_seeds", c.eval_seeds);
    if (j["eval"].contains("efficiency_sizes"))
      c.efficiency_sizes = j["eval"]["efficiency_sizes"].get<std::vector<int>>();
  }
  if (j.contains("baselines"))
    c.baselines = j["baselines"].get<std::vector<std::string>>();
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["gen"] = cfgio::gen_to_json(c.gen);
  j["sim"] = {{"e_ref_kpa", c.sim.e_ref_kpa},
              {"alpha", c.sim.alpha},
              {"rho_max", c.sim.rho_max},
              {"relax_iters", c.sim.relax_iters}};
  j["target_env"] = {{"eps_e_ref", c.target_eps_e_ref},
                     {"eps_alpha", c.target_eps_alpha},
                     {"noise_sigma_cm", c.target_noise_sigma_cm},
                     {"noise_corr_cells", c.target_noise_corr_cells}};
  j["deviation"] = {{"d_max", c.deviation.d_max}, {"d_norm", c.deviation.d_norm}};
  j["datasets"] = {{"source_train", c.source_train},
                   {"source_test", c.source_test},
                   {"target_train", c.target_train},
                   {"target_test", c.target_test}};
  j["train_learned"] = cfgio::train_to_json(c.train_learned);
  j["train_s2s"] = cfgio::train_to_json(c.train_s2s);
  j["finetune"] = cfgio::train_to_json(c.finetune);
  j["optimizer"] = {{"budget", c.optimizer.budget},
                    {"beta", c.optimizer.beta},
                    {"n_uniform", c.optimizer.n_uniform_candidates},
                    {"n_stratified", c.optimizer.n_stratified_candidates},
                    {"gp",
                     {{"signal_var", c.optimizer.gp.signal_var},
                      {"length_scale_cm", c.optimizer.gp.length_scale_cm},
                      {"noise_var", c.optimizer.gp.noise_var}}}};
  j["eval"] = {{"n_tasks", c.eval_tasks},
               {"n_seeds", c.eval_seeds},
               {"efficiency_sizes", c.efficiency_sizes}};
  j["baselines"] = c.baselines;
  return j;
}

inline uint64_t config_hash(const ExperimentConfig& c) {
  const std::string s = config_to_json(c).dump();
  return fnv1a64(s.data(), s.size());
}

inline ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigInvalid(std::string("config parse error: ") + e.what());
  }
  return config_from_json(j);
}

}  // namespace mfopt
