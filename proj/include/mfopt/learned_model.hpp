#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mfopt/errors.hpp"
#include "mfopt/grid.hpp"
#include "mfopt/nn.hpp"
#include "mfopt/scene_gen.hpp"

namespace mfopt {

// f2: residual encoder-decoder. The network sees the initial scene, the
// object thickness map and the action, and emits a residual that is added to
// the initial scene heightmap; the final tconv is zero-initialized so the
// untrained model predicts the initial scene unchanged.
struct ResidualPredictor {
  nn::Network<float> net;
  int grid_w = 0, grid_h = 0;
  float cell_size = 0.5f;
};

namespace model_input {

inline constexpr float kHeightScale = 3.0f;  // cm; brings heights to O(1)

inline float norm_ax(float x_cm, int cells, float cell) {
  return 2.0f * (x_cm / (float(cells) * cell)) - 1.0f;
}

inline nn::Tensor<float> height_tensor(const Heightmap& m) {
  nn::Tensor<float> t = nn::Tensor<float>::zeros(m.height, m.width, 1);
  for (size_t i = 0; i < m.values.size(); ++i) t.v[i] = m.values[i] / kHeightScale;
  return t;
}

inline nn::Tensor<float> action_tensor(const Action& a, int w, int h, float cell) {
  return nn::Tensor<float>::vec({norm_ax(a.x, w, cell), norm_ax(a.y, h, cell)});
}

}  // namespace model_input

// Bottleneck spatial extent after the three stride-2 encoder stages.
inline std::pair<int, int> bottleneck_dims(int grid_w, int grid_h) {
  auto down3 = [](int n) {
    for (int i = 0; i < 3; ++i) n = (n + 2 - 3) / 2 + 1;
    return n;
  };
  return {down3(grid_w), down3(grid_h)};
}

// Action conditioning at the bottleneck: a dense embedding of the raw action
// (tiled across the bottleneck) concatenated with two action-relative
// coordinate planes. The relative planes make "paint the object at the
// action" a translation-invariant decoding problem.
inline nn::NetworkSpec residual_predictor_spec(int grid_w, int grid_h,
                                               uint64_t seed) {
  using nn::LayerSpec;
  nn::NetworkSpec s;
  s.seed = seed;
  nn::BranchSpec scene{"scene", grid_h, grid_w, 1, {}};
  nn::BranchSpec object{"object", grid_h, grid_w, 1, {}};
  for (int c : {8, 16, 32}) {
    scene.layers.push_back(LayerSpec::conv(c, 3, 2, 1));
    scene.layers.push_back(LayerSpec::relu());
    object.layers.push_back(LayerSpec::conv(c, 3, 2, 1));
    object.layers.push_back(LayerSpec::relu());
  }
  nn::BranchSpec action{"action", 1, 1, 2, {LayerSpec::dense(32), LayerSpec::relu()}};
  const auto [bw, bh] = bottleneck_dims(grid_w, grid_h);
  nn::BranchSpec position{"position", bh, bw, 2, {}};  // passthrough planes
  s.branches = {scene, object, action, position};
  s.trunk = {
      LayerSpec::tconv(48, 4, 2, 1), LayerSpec::relu(),
      LayerSpec::tconv(24, 4, 2, 1), LayerSpec::relu(),
      LayerSpec::tconv(1, 4, 2, 1, 0, /*zero=*/true),
  };
  return s;
}

inline ResidualPredictor make_residual_predictor(int grid_w, int grid_h,
                                                 float cell_size, uint64_t seed) {
  ResidualPredictor m;
  m.net = nn::build_network<float>(residual_predictor_spec(grid_w, grid_h, seed));
  m.grid_w = grid_w;
  m.grid_h = grid_h;
  m.cell_size = cell_size;
  return m;
}

inline std::vector<nn::Tensor<float>> learned_model_inputs(
    const ResidualPredictor& m, const SceneState& s0, const Action& a) {
  if (s0.scene.width != m.grid_w || s0.scene.height != m.grid_h)
    throw ShapeMismatch("scene dims do not match the trained model");
  const auto [bw, bh] = bottleneck_dims(m.grid_w, m.grid_h);
  nn::Tensor<float> pos = nn::Tensor<float>::zeros(bh, bw, 2);
  const float sx = float(m.grid_w) * m.cell_size / float(bw);
  const float sy = float(m.grid_h) * m.cell_size / float(bh);
  const float half_w = 0.5f * float(m.grid_w) * m.cell_size;
  for (int by = 0; by < bh; ++by)
    for (int bx = 0; bx < bw; ++bx) {
      pos.at(by, bx, 0) = ((float(bx) + 0.5f) * sx - a.x) / half_w;
      pos.at(by, bx, 1) = ((float(by) + 0.5f) * sy - a.y) / half_w;
    }
  return {model_input::height_tensor(s0.scene),
          model_input::height_tensor(s0.object),
          model_input::action_tensor(a, m.grid_w, m.grid_h, m.cell_size),
          std::move(pos)};
}

inline Heightmap learned_predict(const ResidualPredictor& m, const SceneState& s0,
                                 const Action& a) {
  const auto out = nn::forward(m.net, learned_model_inputs(m, s0, a));
  Heightmap pred = s0.scene;
  for (size_t i = 0; i < pred.values.size(); ++i)
    pred.values[i] = std::max(
        0.0f, pred.values[i] + out.v[i] * model_input::kHeightScale);
  return pred;
}

struct TrainTrace {
  std::vector<double> loss;  // one entry per iteration
};

// MSE on the predicted residual against (outcome - initial scene).
inline TrainTrace train_learned(ResidualPredictor& m, const Dataset& dataset,
                                const nn::TrainConfig& cfg, int threads = 1) {
  cfg.validate();
  if (dataset.env_tag != "source")
    throw ConfigInvalid("learned model trains on source-env data");
  if (dataset.records.size() < 100)
    throw ConfigInvalid("learned model needs >= 100 records");

  std::vector<nn::Sample<float>> samples(dataset.records.size());
  for (size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& r = dataset.records[i];
    samples[i].inputs = learned_model_inputs(m, r.state, r.action);
    nn::Tensor<float> t = nn::Tensor<float>::zeros(m.grid_h, m.grid_w, 1);
    for (size_t k = 0; k < t.v.size(); ++k)
      t.v[k] = (r.outcome.values[k] - r.state.scene.values[k]) /
               model_input::kHeightScale;
    samples[i].target = std::move(t);
  }

  auto adam = nn::AdamState<float>::init(m.net);
  Rng rng(cfg.seed);
  TrainTrace trace;
  trace.loss.reserve(size_t(cfg.iterations));
  std::vector<nn::Sample<float>> batch;
  for (int it = 0; it < cfg.iterations; ++it) {
    batch.clear();
    for (int b = 0; b < cfg.batch_size; ++b)
      batch.push_back(samples[size_t(rng.uniform_int(0, int(samples.size()) - 1))]);
    // settle into the MSE minimum: 10x smaller steps for the last fifth
    nn::TrainConfig step_cfg = cfg;
    if (cfg.iterations >= 10 && it >= (cfg.iterations * 4) / 5)
      step_cfg.learning_rate = 0.1 * cfg.learning_rate;
    trace.loss.push_back(nn::train_step(m.net, batch, step_cfg, adam, threads));
  }
  return trace;
}

inline void save_predictor(const ResidualPredictor& m, const std::string& path) {
  auto os = io::open_out(path);
  nn::save_network(m.net, os);
  io::write_u32(os, uint32_t(m.grid_w));
  io::write_u32(os, uint32_t(m.grid_h));
  io::write_f32(os, m.cell_size);
}

inline ResidualPredictor load_predictor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingCheckpoint("missing checkpoint: " + path);
  ResidualPredictor m;
  m.net = nn::load_network<float>(is);
  m.grid_w = int(io::read_u32(is));
  m.grid_h = int(io::read_u32(is));
  m.cell_size = io::read_f32(is);
  return m;
}

}  // namespace mfopt
