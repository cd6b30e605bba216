#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfopt/errors.hpp"
#include "mfopt/grid.hpp"
#include "mfopt/learned_model.hpp"
#include "mfopt/nn.hpp"
#include "mfopt/parallel.hpp"
#include "mfopt/scene_gen.hpp"

namespace mfopt {

// Model Deviation Estimator: regresses the normalized deviation of one
// predictive model from a reference outcome, given the initial state and the
// action. Scene and object enter through separate CNN encoders whose input
// images fuse the heightmap with the material property channels; the head is
// zero-initialized so an untrained estimator predicts zero deviation.
struct MdeNet {
  nn::Network<float> net;
  int grid_w = 0, grid_h = 0;
  float cell_size = 0.5f;
};

namespace mde_input {

// material channels are squashed to O(1): log-scaled stiffness, scaled density
inline float norm_youngs(float e_kpa) { return std::log10(1.0f + e_kpa) / 8.0f; }
inline float norm_density(float d) { return d / 2.0f; }
inline float norm_poisson(float p) { return 2.0f * p; }

inline nn::Tensor<float> scene_tensor(const SceneState& s0) {
  const auto& hm = s0.scene;
  nn::Tensor<float> t = nn::Tensor<float>::zeros(hm.height, hm.width, 4);
  for (size_t i = 0; i < hm.values.size(); ++i) {
    t.v[i * 4 + 0] = hm.values[i] / model_input::kHeightScale;
    t.v[i * 4 + 1] = norm_density(s0.scene_mask.mass_density[i]);
    t.v[i * 4 + 2] = s0.scene_mask.youngs_modulus[i] > 0.0f
                         ? norm_youngs(s0.scene_mask.youngs_modulus[i])
                         : 0.0f;
    t.v[i * 4 + 3] = norm_poisson(s0.scene_mask.poisson_ratio[i]);
  }
  return t;
}

// The object's thickness map is shifted to the queried action before
// encoding, so the two encoders are spatially registered; the single
// material triple is broadcast over the footprint channels.
inline nn::Tensor<float> object_tensor(const SceneState& s0, const Action& a) {
  const Heightmap shifted = shift_object(s0.object, a, s0.object.cell_size);
  const auto& m = s0.object_material;
  nn::Tensor<float> t = nn::Tensor<float>::zeros(shifted.height, shifted.width, 4);
  const float dens = norm_density(m.mass_g / 150.0f);
  const float youngs = norm_youngs(m.youngs_kpa);
  const float poisson = norm_poisson(m.poisson);
  for (size_t i = 0; i < shifted.values.size(); ++i) {
    const bool occ = shifted.values[i] > 0.0f;
    t.v[i * 4 + 0] = shifted.values[i] / model_input::kHeightScale;
    t.v[i * 4 + 1] = occ ? dens : 0.0f;
    t.v[i * 4 + 2] = occ ? youngs : 0.0f;
    t.v[i * 4 + 3] = occ ? poisson : 0.0f;
  }
  return t;
}

}  // namespace mde_input

inline nn::NetworkSpec mde_net_spec(int grid_w, int grid_h, uint64_t seed) {
  using nn::LayerSpec;
  nn::NetworkSpec s;
  s.seed = seed;
  nn::BranchSpec scene{"scene", grid_h, grid_w, 4, {}};
  nn::BranchSpec object{"object", grid_h, grid_w, 4, {}};
  for (int c : {4, 8, 16}) {
    scene.layers.push_back(LayerSpec::conv(c, 3, 2, 1));
    scene.layers.push_back(LayerSpec::relu());
    object.layers.push_back(LayerSpec::conv(c, 3, 2, 1));
    object.layers.push_back(LayerSpec::relu());
  }
  // encoder outputs stay spatial through the concat (the action embedding is
  // tiled), so co-located scene/object features sit in adjacent channels when
  // the head flattens them
  nn::BranchSpec action{"action", 1, 1, 2, {LayerSpec::dense(16), LayerSpec::relu()}};
  s.branches = {scene, object, action};
  // the [0, 1] clamp is applied at prediction time; training regresses the
  // unclamped head so saturated outputs keep their L1 gradient
  s.trunk = {
      LayerSpec::flatten(),
      LayerSpec::dense(64),
      LayerSpec::relu(),
      LayerSpec::dense(1, /*zero=*/true),
  };
  return s;
}

inline MdeNet make_mde_net(int grid_w, int grid_h, float cell_size, uint64_t seed) {
  MdeNet m;
  m.net = nn::build_network<float>(mde_net_spec(grid_w, grid_h, seed));
  m.grid_w = grid_w;
  m.grid_h = grid_h;
  m.cell_size = cell_size;
  return m;
}

inline std::vector<nn::Tensor<float>> mde_inputs(const MdeNet& m,
                                                 const SceneState& s0,
                                                 const Action& a) {
  if (s0.scene.width != m.grid_w || s0.scene.height != m.grid_h)
    throw ShapeMismatch("scene dims do not match the trained estimator");
  return {mde_input::scene_tensor(s0), mde_input::object_tensor(s0, a),
          model_input::action_tensor(a, m.grid_w, m.grid_h, m.cell_size)};
}

inline double mde_predict(const MdeNet& m, const SceneState& s0, const Action& a) {
  const double raw = double(nn::forward(m.net, mde_inputs(m, s0, a)).v[0]);
  return std::clamp(raw, 0.0, 1.0);
}

using PredictFn = std::function<Heightmap(const SceneState&, const Action&)>;

struct LabeledPair {
  const SceneState* state;
  Action action;
  double label;  // normalized deviation in [0, 1]
};

namespace detail {

inline nn::TrainConfig l1_config(const nn::TrainConfig& cfg) {
  nn::TrainConfig c = cfg;
  c.loss = nn::LossKind::L1;
  return c;
}

inline TrainTrace train_mde(MdeNet& m, const std::vector<LabeledPair>& pairs,
                            const nn::TrainConfig& cfg, int threads = 1) {
  if (pairs.empty()) return {};
  std::vector<nn::Sample<float>> samples(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    samples[i].inputs = mde_inputs(m, *pairs[i].state, pairs[i].action);
    samples[i].target = nn::Tensor<float>::vec({float(pairs[i].label)});
  }
  auto adam = nn::AdamState<float>::init(m.net);
  Rng rng(cfg.seed);
  TrainTrace trace;
  std::vector<nn::Sample<float>> batch;
  const int bs = std::min<int>(cfg.batch_size, int(samples.size()));
  for (int it = 0; it < cfg.iterations; ++it) {
    batch.clear();
    for (int b = 0; b < bs; ++b)
      batch.push_back(samples[size_t(rng.uniform_int(0, int(samples.size()) - 1))]);
    nn::TrainConfig step_cfg = detail::l1_config(cfg);
    if (cfg.iterations >= 10 && it >= (cfg.iterations * 4) / 5)
      step_cfg.learning_rate = 0.1 * cfg.learning_rate;
    trace.loss.push_back(nn::train_step(m.net, batch, step_cfg, adam, threads));
  }
  return trace;
}

}  // namespace detail

// Raw deviations d(model(s, a), reference(s, a)) over (state, action) pairs.
inline std::vector<double> compute_raw_deviations(
    const PredictFn& model, const PredictFn& reference,
    const std::vector<const DataRecord*>& records, int threads = 1) {
  std::vector<double> out(records.size(), 0.0);
  parallel_for(int(records.size()), threads, [&](int i) {
    const auto& r = *records[size_t(i)];
    out[size_t(i)] =
        deviation(model(r.state, r.action), reference(r.state, r.action));
  });
  return out;
}

// Sim-to-sim training: L1-regress the normalized deviation between model_i's
// predictions and the reference model's predictions on the same pairs.
inline MdeNet train_s2s(const PredictFn& model_i, const PredictFn& reference,
                        const Dataset& dataset, const DeviationConfig& dev,
                        const nn::TrainConfig& cfg, uint64_t net_seed,
                        int threads = 1, TrainTrace* trace_out = nullptr) {
  dev.validate();
  if (dataset.records.size() < 100)
    throw ConfigInvalid("s2s training needs >= 100 pairs");
  const auto& r0 = dataset.records.front().state.scene;
  MdeNet m = make_mde_net(r0.width, r0.height, r0.cell_size, net_seed);

  std::vector<const DataRecord*> recs;
  recs.reserve(dataset.records.size());
  for (const auto& r : dataset.records) recs.push_back(&r);
  const auto raw = compute_raw_deviations(model_i, reference, recs, threads);

  std::vector<LabeledPair> pairs(recs.size());
  for (size_t i = 0; i < recs.size(); ++i)
    pairs[i] = {&recs[i]->state, recs[i]->action, normalize_deviation(raw[i], dev)};
  TrainTrace tr = detail::train_mde(m, pairs, cfg, threads);
  if (trace_out) *trace_out = tr;
  return m;
}

// Sim-to-real fine-tuning: freeze everything except the last layer and
// regress against deviations from target-environment outcomes.
inline MdeNet finetune_s2r(const MdeNet& pretrained, const PredictFn& model_i,
                           const std::vector<DataRecord>& target_records,
                           const DeviationConfig& dev, const nn::TrainConfig& cfg,
                           int threads = 1) {
  dev.validate();
  MdeNet m = pretrained;  // non-head weights stay bitwise identical
  if (target_records.empty() || cfg.iterations == 0) return m;

  std::vector<const DataRecord*> recs;
  for (const auto& r : target_records) recs.push_back(&r);
  std::vector<double> raw(recs.size(), 0.0);
  parallel_for(int(recs.size()), threads, [&](int i) {
    const auto& r = *recs[size_t(i)];
    raw[size_t(i)] = deviation(model_i(r.state, r.action), r.outcome);
  });

  std::vector<LabeledPair> pairs(recs.size());
  for (size_t i = 0; i < recs.size(); ++i)
    pairs[i] = {&recs[i]->state, recs[i]->action, normalize_deviation(raw[i], dev)};

  nn::freeze_all_but_last(m.net);
  detail::train_mde(m, pairs, cfg, threads);
  return m;
}

// One estimator per non-terminal model; the reference simulator needs none
// because it is always admissible. Every estimator carries its own
// normalization constant (the 95th percentile of its raw training
// deviations), so each output is scaled [0, 1] against its own error
// distribution and the shared d_max threshold gates all of them; rewards
// use the pooled scale.
struct MdeBank {
  std::vector<MdeNet> mdes;      // mdes[i] gates family model i (i = 0, 1)
  std::vector<double> d_norms;   // per-estimator scale, cm
  double d_max = 0.4;
  double reward_d_norm = 1.0;    // pooled scale for the optimizer's reward
  std::string provenance;        // "s2s" or "s2r-finetuned"
  int family_size = 3;

  DeviationConfig mde_dev(size_t i) const { return {d_norms[i], d_max}; }
  DeviationConfig reward_dev() const { return {reward_d_norm, d_max}; }
};

// Precondition rule: model i is applicable iff its estimated deviation is
// strictly below d_max; the last (reference) model is always applicable.
inline std::vector<int> applicable_from_estimates(const std::vector<double>& est,
                                                  double d_max, int family_size) {
  std::vector<int> out;
  for (int i = 0; i < int(est.size()) && i < family_size - 1; ++i)
    if (est[size_t(i)] < d_max) out.push_back(i);
  out.push_back(family_size - 1);
  return out;
}

inline std::vector<double> mde_estimates(const MdeBank& bank, const SceneState& s0,
                                         const Action& a) {
  std::vector<double> est;
  est.reserve(bank.mdes.size());
  for (const auto& m : bank.mdes) est.push_back(mde_predict(m, s0, a));
  return est;
}

inline std::vector<int> applicable_models(const MdeBank& bank, const SceneState& s0,
                                          const Action& a) {
  return applicable_from_estimates(mde_estimates(bank, s0, a), bank.d_max,
                                   bank.family_size);
}

// The fastest applicable model, i.e. the minimum admissible index.
inline int select_model(const MdeBank& bank, const SceneState& s0, const Action& a) {
  return applicable_models(bank, s0, a).front();
}

inline void save_bank(const MdeBank& bank, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["provenance"] = bank.provenance;
  manifest["d_max"] = bank.d_max;
  manifest["reward_d_norm"] = bank.reward_d_norm;
  manifest["family_size"] = bank.family_size;
  manifest["models"] = nlohmann::json::array();
  for (size_t i = 0; i < bank.mdes.size(); ++i) {
    const std::string name = "mde_f" + std::to_string(i + 1) + ".net";
    auto os = io::open_out(dir + "/" + name);
    nn::save_network(bank.mdes[i].net, os);
    io::write_u32(os, uint32_t(bank.mdes[i].grid_w));
    io::write_u32(os, uint32_t(bank.mdes[i].grid_h));
    io::write_f32(os, bank.mdes[i].cell_size);
    manifest["models"].push_back({{"model_index", i + 1},
                                  {"file", name},
                                  {"d_norm", bank.d_norms[i]}});
  }
  auto ms = io::open_out(dir + "/manifest.json");
  ms << manifest.dump(2) << "\n";
}

inline MdeBank load_bank(const std::string& dir) {
  std::ifstream ms(dir + "/manifest.json");
  if (!ms) throw MissingCheckpoint("missing bank manifest in " + dir);
  nlohmann::json manifest;
  ms >> manifest;
  MdeBank bank;
  bank.provenance = manifest.at("provenance").get<std::string>();
  bank.d_max = manifest.at("d_max").get<double>();
  bank.reward_d_norm = manifest.at("reward_d_norm").get<double>();
  bank.family_size = manifest.value("family_size", 3);
  for (const auto& mj : manifest.at("models")) {
    const std::string path = dir + "/" + mj.at("file").get<std::string>();
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingCheckpoint("missing bank net: " + path);
    MdeNet m;
    m.net = nn::load_network<float>(is);
    m.grid_w = int(io::read_u32(is));
    m.grid_h = int(io::read_u32(is));
    m.cell_size = io::read_f32(is);
    bank.mdes.push_back(std::move(m));
    bank.d_norms.push_back(mj.at("d_norm").get<double>());
  }
  return bank;
}

}  // namespace mfopt
