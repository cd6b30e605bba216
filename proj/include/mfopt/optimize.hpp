#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfopt/errors.hpp"
#include "mfopt/gp.hpp"
#include "mfopt/grid.hpp"
#include "mfopt/mde.hpp"
#include "mfopt/rng.hpp"
#include "mfopt/sim.hpp"

namespace mfopt {

struct OptimizerConfig {
  int budget = 50;
  double beta = 4.0;  // UCB exploration weight
  int n_uniform_candidates = 128;
  int n_stratified_candidates = 128;
  GpParams gp;
  uint64_t seed = 0;
  int forced_model = -1;  // >= 0 bypasses MDE selection (single-model baselines)

  void validate() const {
    if (budget < 1) throw ConfigInvalid("budget must be >= 1");
    if (!(beta >= 0.0)) throw ConfigInvalid("beta must be >= 0");
    if (n_uniform_candidates + n_stratified_candidates < 1)
      throw ConfigInvalid("need at least one candidate");
    gp.validate();
  }
};

// Candidate actions for one step: uniform draws plus a jittered stratified
// grid over the legal rectangle, so every step can reach the whole space.
inline std::vector<Action> make_candidates(const ActionRect& rect, int n_uniform,
                                           int n_stratified, Rng& rng) {
  if (rect.empty()) throw NoLegalCandidates("legal action rectangle is empty");
  std::vector<Action> out;
  out.reserve(size_t(n_uniform + n_stratified));
  for (int i = 0; i < n_uniform; ++i) {
    out.push_back(Action{float(rng.uniform(rect.x_min, rect.x_max)),
                         float(rng.uniform(rect.y_min, rect.y_max))});
  }
  if (n_stratified > 0) {
    int gx = 1, gy = n_stratified;
    for (int g = int(std::sqrt(double(n_stratified))); g >= 1; --g)
      if (n_stratified % g == 0) {
        gx = g;
        gy = n_stratified / g;
        break;
      }
    const double sx = (rect.x_max - rect.x_min) / gx;
    const double sy = (rect.y_max - rect.y_min) / gy;
    for (int iy = 0; iy < gy; ++iy)
      for (int ix = 0; ix < gx; ++ix)
        out.push_back(Action{float(rect.x_min + (ix + rng.uniform()) * sx),
                             float(rect.y_min + (iy + rng.uniform()) * sy)});
  }
  return out;
}

// GP-UCB acquisition: argmax of mean + sqrt(beta) * std over the candidate
// set; ties break toward the lowest candidate index.
inline size_t propose_index(const GpState& gp, const std::vector<Action>& candidates,
                            double beta) {
  if (candidates.empty()) throw NoLegalCandidates("empty candidate set");
  const double root_beta = std::sqrt(beta);
  size_t best = 0;
  double best_ucb = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < candidates.size(); ++i) {
    const auto post = gp.posterior(candidates[i]);
    const double ucb = post.mean + root_beta * post.std;
    if (ucb > best_ucb) {
      best_ucb = ucb;
      best = i;
    }
  }
  return best;
}

inline Action propose_action(const GpState& gp, const std::vector<Action>& candidates,
                             double beta) {
  return candidates[propose_index(gp, candidates, beta)];
}

// Deterministic local polish of the proposed action: a bounded pattern
// search on the posterior mean around the UCB pick. The candidate sweep
// handles global exploration; within one stratification cell the remaining
// candidate ties carry no information, so the pick slides to the locally
// predicted optimum. Displacement is capped to keep the move local.
inline Action refine_on_posterior_mean(const GpState& gp, const Action& picked,
                                       const ActionRect& rect,
                                       double max_radius_cm = 1.5) {
  auto mean_at = [&](const Action& q) { return gp.posterior(q).mean; };
  Action a = picked;
  double best = mean_at(a);
  double step = 0.75;  // cm
  while (step >= 0.05) {
    bool moved = false;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dx == 0 && dy == 0) continue;
        Action q{float(std::clamp(double(a.x) + dx * step, double(rect.x_min),
                                  double(rect.x_max))),
                 float(std::clamp(double(a.y) + dy * step, double(rect.y_min),
                                  double(rect.y_max)))};
        if (std::hypot(double(q.x) - double(picked.x),
                       double(q.y) - double(picked.y)) > max_radius_cm)
          continue;
        const double v = mean_at(q);
        if (v > best) {
          best = v;
          a = q;
          moved = true;
        }
      }
    if (!moved) step *= 0.5;
  }
  return a;
}

struct StepRecord {
  int step = 0;
  Action action;
  int model_index = 0;        // 0-based family index
  double raw_deviation = 0.0;  // cm, prediction vs goal
  double reward = 0.0;
  double mde1 = -1.0, mde2 = -1.0;  // -1 when selection was bypassed
  double wall_ms = 0.0;
};

struct OptTrace {
  std::vector<StepRecord> steps;
  Action best_action;
  double best_reward = 0.0;      // best observed during the search
  double best_reward_ref = 0.0;  // best action re-evaluated with the reference model
  std::array<int, 3> model_calls = {0, 0, 0};
  double total_wall_ms = 0.0;
};

// 50-step (by default) GP-UCB search over placements. Each step proposes an
// action, asks the MDE bank for the fastest applicable model, evaluates the
// reward against the goal and conditions the GP on it. The returned best
// action is the best *observed* one, re-evaluated with the reference model
// for reporting.
inline OptTrace optimize(const SceneState& s0, const Heightmap& goal,
                         const ModelFamily& family, const MdeBank* bank,
                         const DeviationConfig& dev, const OptimizerConfig& cfg) {
  cfg.validate();
  dev.validate();
  if (cfg.forced_model < 0 && bank == nullptr)
    throw ConfigInvalid("combined optimization needs an MDE bank");
  if (cfg.forced_model >= int(family.size()))
    throw ConfigInvalid("forced model index out of range");

  const ActionRect rect = legal_action_rect(s0.object);
  GpState gp(cfg.gp);
  OptTrace trace;
  trace.steps.reserve(size_t(cfg.budget));

  const auto t_start = std::chrono::steady_clock::now();
  for (int step = 0; step < cfg.budget; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(mix_seed(cfg.seed, uint64_t(step)));
    const auto candidates = make_candidates(rect, cfg.n_uniform_candidates,
                                            cfg.n_stratified_candidates, rng);
    const Action a = refine_on_posterior_mean(
        gp, propose_action(gp, candidates, cfg.beta), rect);

    StepRecord rec;
    rec.step = step;
    rec.action = a;
    if (cfg.forced_model >= 0) {
      rec.model_index = cfg.forced_model;
    } else {
      const auto est = mde_estimates(*bank, s0, a);
      rec.mde1 = est.size() > 0 ? est[0] : -1.0;
      rec.mde2 = est.size() > 1 ? est[1] : -1.0;
      rec.model_index =
          applicable_from_estimates(est, bank->d_max, bank->family_size).front();
    }

    const Heightmap pred = family[size_t(rec.model_index)].predict(s0, a);
    ++trace.model_calls[size_t(rec.model_index)];
    rec.raw_deviation = deviation(pred, goal);
    rec.reward = -normalize_deviation(rec.raw_deviation, dev);
    gp.add(a, rec.reward);

    rec.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    trace.steps.push_back(rec);
  }
  trace.total_wall_ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t_start)
                            .count();

  size_t best = 0;
  for (size_t i = 1; i < trace.steps.size(); ++i)
    if (trace.steps[i].reward > trace.steps[best].reward) best = i;
  trace.best_action = trace.steps[best].action;
  trace.best_reward = trace.steps[best].reward;

  const Heightmap ref_pred =
      family[family.size() - 1].predict(s0, trace.best_action);
  trace.best_reward_ref = -normalize_deviation(deviation(ref_pred, goal), dev);
  return trace;
}

// One row per step; wall_ms is measured time and varies between runs.
inline void write_trace_csv(const OptTrace& t, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write trace: " + path);
  os << "step,x,y,model_index,reward,mde1,mde2,wall_ms\r\n";
  char buf[256];
  for (const auto& s : t.steps) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%d,%.9f,%.6f,%.6f,%.3f\r\n",
                  s.step, double(s.action.x), double(s.action.y),
                  s.model_index + 1, s.reward, s.mde1, s.mde2, s.wall_ms);
    os << buf;
  }
}

inline nlohmann::json trace_summary_json(const OptTrace& t) {
  nlohmann::json j;
  j["best_action"] = {t.best_action.x, t.best_action.y};
  j["best_reward"] = t.best_reward;
  j["best_reward_ref"] = t.best_reward_ref;
  j["steps"] = t.steps.size();
  j["model_calls"] = {t.model_calls[0], t.model_calls[1], t.model_calls[2]};
  j["total_wall_ms"] = t.total_wall_ms;
  return j;
}

}  // namespace mfopt
