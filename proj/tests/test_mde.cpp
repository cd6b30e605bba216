#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "mfopt/mde.hpp"
#include "mfopt/scene_gen.hpp"

using namespace mfopt;

namespace {

GenConfig cfg32(uint64_t seed) {
  GenConfig cfg;
  cfg.rng_seed = seed;
  cfg.grid_width = 32;
  cfg.grid_height = 32;
  cfg.plate_radius_cm = 7.0f;
  cfg.object_area_min_cm2 = 6.0f;
  cfg.object_area_max_cm2 = 12.0f;
  cfg.obstacle_len_min_cm = 2.0f;
  cfg.obstacle_len_max_cm = 4.0f;
  cfg.n_obstacles_min = 1;
  cfg.n_obstacles_max = 3;
  return cfg;
}

std::vector<float> all_params(const nn::Network<float>& net) {
  std::vector<float> out;
  net.for_each_layer([&](const nn::LayerState<float>& l) {
    out.insert(out.end(), l.W.begin(), l.W.end());
    out.insert(out.end(), l.b.begin(), l.b.end());
  });
  return out;
}

}  // namespace

TEST_CASE("untrained estimator outputs exactly zero, always within [0,1]") {
  GenConfig cfg = cfg32(3);
  Rng rng(cfg.rng_seed);
  MdeNet m = make_mde_net(32, 32, cfg.cell_size, 4);
  for (int i = 0; i < 5; ++i) {
    const SceneState s = generate_scene(cfg, rng);
    const Action a = sample_legal_action(legal_action_rect(s.object), rng);
    CHECK(mde_predict(m, s, a) == 0.0);
  }
  // after arbitrary head perturbation the clamp still bounds the output
  m.net.trunk[3].b[0] = 7.5f;
  for (int i = 0; i < 5; ++i) {
    const SceneState s = generate_scene(cfg, rng);
    const Action a = sample_legal_action(legal_action_rect(s.object), rng);
    const double v = mde_predict(m, s, a);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("precondition rule: strict threshold, reference always admissible") {
  // estimates (0.1, 0.5), d_max 0.4 -> models {0, 2} (f1 and the simulator)
  CHECK(applicable_from_estimates({0.1, 0.5}, 0.4, 3) == std::vector<int>{0, 2});
  // boundary is strict: (0.4, 0.4) admits only the simulator
  CHECK(applicable_from_estimates({0.4, 0.4}, 0.4, 3) == std::vector<int>{2});
  CHECK(applicable_from_estimates({0.0, 0.0}, 0.4, 3) == std::vector<int>{0, 1, 2});
}

TEST_CASE("selection picks the fastest applicable model (property)") {
  Rng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::vector<double> est = {rng.uniform(), rng.uniform()};
    const double d_max = 0.4;
    const auto app = applicable_from_estimates(est, d_max, 3);

    // independent brute-force reference of the rule
    std::vector<int> ref;
    for (int i = 0; i < 2; ++i)
      if (est[size_t(i)] < d_max) ref.push_back(i);
    ref.push_back(2);

    REQUIRE(app == ref);
    const int selected = app.front();
    int expected = 2;
    for (int i = 1; i >= 0; --i)
      if (est[size_t(i)] < d_max) expected = i;
    CHECK(selected == expected);
  }
}

TEST_CASE("self-comparison trains to near-zero output") {
  GenConfig cfg = cfg32(23);
  SimParams p;
  p.relax_iters = 4;
  const Environment env = make_source_env(p);
  const Dataset ds = build_dataset(cfg, env, 120, "train");

  const PredictFn sim_fn = [&p](const SceneState& s, const Action& a) {
    return simulate_place(s, a, p);
  };
  DeviationConfig dev{1.0, 0.4};
  nn::TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 8;
  tc.iterations = 100;
  // model compared against itself: every label is exactly zero
  MdeNet m = train_s2s(sim_fn, sim_fn, ds, dev, tc, 31);
  Rng rng(5);
  double mean = 0.0;
  for (int i = 0; i < 20; ++i) {
    const SceneState s = generate_scene(cfg, rng);
    const Action a = sample_legal_action(legal_action_rect(s.object), rng);
    mean += mde_predict(m, s, a);
  }
  CHECK(mean / 20.0 < 0.02);
}

TEST_CASE("heuristic-vs-simulator deviations: zero on flat plate, positive on obstacles") {
  GenConfig cfg = cfg32(29);
  cfg.n_obstacles_min = cfg.n_obstacles_max = 0;
  cfg.material_palette = {{180.0f, 5000.0f, 0.30f}, {181.0f, 5.0f, 0.45f}};
  SimParams p;

  // rigid object entirely on the flat interior: exact agreement
  Rng rng(2);
  SceneState s = generate_scene(cfg, rng);
  s.object_material = {180.0f, 5000.0f, 0.30f};
  const Action center{0.5f * 32 * cfg.cell_size, 0.5f * 32 * cfg.cell_size};
  const double d_flat =
      deviation(heuristic_predict(s, center), simulate_place(s, center, p));
  CHECK(d_flat == 0.0);

  // place over a raised box: the heuristic stacks while the simulator bridges
  GenConfig cfg2 = cfg32(29);
  cfg2.n_obstacles_min = cfg2.n_obstacles_max = 3;
  Rng rng2(7);
  SceneState s2 = generate_scene(cfg2, rng2);
  s2.object_material = {180.0f, 5000.0f, 0.30f};
  double worst = 0.0;
  Rng rng3(11);
  for (int i = 0; i < 10; ++i) {
    const Action a = sample_legal_action(legal_action_rect(s2.object), rng3);
    worst = std::max(worst, deviation(heuristic_predict(s2, a),
                                      simulate_place(s2, a, p)));
  }
  CHECK(worst > 0.0);
}

TEST_CASE("fine-tuning touches only the head and skips empty datasets") {
  GenConfig cfg = cfg32(31);
  SimParams p;
  p.relax_iters = 4;
  const Environment src = make_source_env(p);
  const Dataset ds = build_dataset(cfg, src, 100, "train");

  const PredictFn heur_fn = [](const SceneState& s, const Action& a) {
    return heuristic_predict(s, a);
  };
  const PredictFn sim_fn = [&p](const SceneState& s, const Action& a) {
    return simulate_place(s, a, p);
  };
  DeviationConfig dev{0.05, 0.4};
  nn::TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 8;
  tc.iterations = 60;
  MdeNet s2s = train_s2s(heur_fn, sim_fn, ds, dev, tc, 77);

  // target data from a perturbed environment
  TargetEnvParams tp = make_target_params(p, 0.3, -0.3, 0.05, 2.0, 5);
  const Environment tgt = make_target_env(tp);
  GenConfig tcfg = cfg32(99);
  const Dataset tds = build_dataset(tcfg, tgt, 20, "train");

  nn::TrainConfig ft;
  ft.learning_rate = 3e-3;
  ft.batch_size = 8;
  ft.iterations = 50;
  const MdeNet tuned = finetune_s2r(s2s, heur_fn, tds.records, dev, ft);

  // every non-head parameter bitwise unchanged; head changed
  for (size_t bi = 0; bi < s2s.net.branches.size(); ++bi)
    for (size_t li = 0; li < s2s.net.branches[bi].size(); ++li) {
      CHECK(tuned.net.branches[bi][li].W == s2s.net.branches[bi][li].W);
      CHECK(tuned.net.branches[bi][li].b == s2s.net.branches[bi][li].b);
    }
  CHECK(tuned.net.trunk[1].W == s2s.net.trunk[1].W);
  CHECK(tuned.net.trunk[3].W != s2s.net.trunk[3].W);

  // zero-sample fine-tune returns the network unchanged
  const MdeNet same = finetune_s2r(s2s, heur_fn, {}, dev, ft);
  CHECK(all_params(same.net) == all_params(s2s.net));

  // fine-tuned estimator differs somewhere
  Rng rng(3);
  bool moved = false;
  for (int i = 0; i < 10 && !moved; ++i) {
    const SceneState s = generate_scene(cfg, rng);
    const Action a = sample_legal_action(legal_action_rect(s.object), rng);
    moved = mde_predict(tuned, s, a) != mde_predict(s2s, s, a);
  }
  CHECK(moved);
}

TEST_CASE("bank persists with manifest and reloads bit-exactly") {
  namespace fs = std::filesystem;
  MdeBank bank;
  bank.mdes.push_back(make_mde_net(32, 32, 0.5f, 1));
  bank.mdes.push_back(make_mde_net(32, 32, 0.5f, 2));
  bank.mdes[1].net.trunk[3].b[0] = 0.37f;
  bank.d_norms = {0.042, 0.078};
  bank.d_max = 0.4;
  bank.reward_d_norm = 0.06;
  bank.provenance = "s2s";

  const std::string dir = (fs::temp_directory_path() / "mfopt_bank_test").string();
  save_bank(bank, dir);
  const MdeBank back = load_bank(dir);
  CHECK(back.provenance == "s2s");
  CHECK(back.d_max == 0.4);
  CHECK(back.d_norms == std::vector<double>{0.042, 0.078});
  CHECK(back.reward_d_norm == 0.06);
  REQUIRE(back.mdes.size() == 2);
  CHECK(all_params(back.mdes[0].net) == all_params(bank.mdes[0].net));
  CHECK(all_params(back.mdes[1].net) == all_params(bank.mdes[1].net));

  GenConfig cfg = cfg32(3);
  Rng rng(9);
  const SceneState s = generate_scene(cfg, rng);
  const Action a = sample_legal_action(legal_action_rect(s.object), rng);
  CHECK(select_model(back, s, a) == select_model(bank, s, a));
  fs::remove_all(dir);
}

TEST_CASE("a briefly trained estimator beats the constant-mean baseline") {
  GenConfig cfg = cfg32(61);
  SimParams p;
  p.relax_iters = 4;
  const Environment env = make_source_env(p);
  const Dataset train = build_dataset(cfg, env, 140, "train");
  GenConfig hcfg = cfg32(62);
  const Dataset held = build_dataset(hcfg, env, 60, "test");

  const PredictFn heur_fn = [](const SceneState& s, const Action& a) {
    return heuristic_predict(s, a);
  };
  // d_norm from the training labels themselves (95th percentile convention)
  std::vector<double> raw;
  for (const auto& r : train.records)
    raw.push_back(deviation(heuristic_predict(r.state, r.action), r.outcome));
  std::vector<double> sorted = raw;
  std::sort(sorted.begin(), sorted.end());
  DeviationConfig dev{std::max(1e-6, sorted[size_t(0.95 * (sorted.size() - 1))]), 0.4};

  const PredictFn sim_fn = [&p](const SceneState& s, const Action& a) {
    return simulate_place(s, a, p);
  };
  nn::TrainConfig tc;
  tc.learning_rate = 2e-3;
  tc.batch_size = 8;
  tc.iterations = 250;
  const MdeNet net = train_s2s(heur_fn, sim_fn, train, dev, tc, 88, 2);

  double mean_label = 0.0;
  for (double d : raw) mean_label += normalize_deviation(d, dev);
  mean_label /= double(raw.size());

  double err_net = 0.0, err_const = 0.0;
  for (const auto& r : held.records) {
    const double truth = normalize_deviation(
        deviation(heuristic_predict(r.state, r.action), r.outcome), dev);
    err_net += std::abs(mde_predict(net, r.state, r.action) - truth);
    err_const += std::abs(mean_label - truth);
  }
  CHECK(err_net < err_const);
}
