#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfopt/errors.hpp"
#include "mfopt/grid.hpp"
#include "mfopt/grid_io.hpp"
#include "mfopt/parallel.hpp"
#include "mfopt/rng.hpp"
#include "mfopt/sim.hpp"

namespace mfopt {

// Procedural plate / obstacle / object generator. Everything is a pure
// function of (config, seed); two runs produce byte-identical scenes.
struct GenConfig {
  uint64_t rng_seed = 1;

  int grid_width = 64;
  int grid_height = 64;
  float cell_size = 0.5f;  // cm

  float plate_radius_cm = 11.5f;
  float plate_base_cm = 0.8f;
  float rim_height_cm = 1.8f;
  float rim_width_cm = 1.0f;

  int n_obstacles_min = 4;
  int n_obstacles_max = 6;
  float obstacle_len_min_cm = 5.0f;
  float obstacle_len_max_cm = 9.0f;
  float obstacle_wid_min_cm = 3.0f;
  float obstacle_wid_max_cm = 5.0f;
  float obstacle_h_min_cm = 4.8f;
  float obstacle_h_max_cm = 5.3f;

  float object_area_min_cm2 = 44.0f;
  float object_area_max_cm2 = 56.0f;
  float thickness_min_cm = 1.0f;
  float thickness_max_cm = 1.4f;

  // Object materials; must span both deformable and rigid behavior. The
  // per-entry thickness scale keys material to visible geometry (well-done
  // steaks are thinner), so heightmap-only models can identify the material.
  std::vector<ObjectMaterial> material_palette = {
      {175.0f, 90.0f, 0.42f},    // rare: partially conforms over obstacles
      {205.0f, 9000.0f, 0.32f},  // well-done: bridges obstacles rigidly
  };
  std::vector<float> palette_thickness_scale = {1.0f, 0.72f};

  // Substrate materials (fixed: no hidden confounders in generated scenes).
  ObjectMaterial plate_material = {0.0f, 7.0e7f, 0.22f};     // ceramic
  ObjectMaterial obstacle_material = {0.0f, 5.0e4f, 0.30f};  // crisp fry

  double cross_object_prob = 0.0;

  void validate() const {
    if (grid_width < 8 || grid_height < 8) throw ConfigInvalid("grid dims must be >= 8");
    if (!(cell_size > 0.0f)) throw ConfigInvalid("cell_size must be > 0");
    if (n_obstacles_min < 0 || n_obstacles_min > n_obstacles_max)
      throw ConfigInvalid("bad obstacle count range");
    if (obstacle_len_min_cm > obstacle_len_max_cm ||
        obstacle_wid_min_cm > obstacle_wid_max_cm ||
        obstacle_h_min_cm > obstacle_h_max_cm)
      throw ConfigInvalid("bad obstacle dim range");
    if (object_area_min_cm2 > object_area_max_cm2 || object_area_min_cm2 <= 0)
      throw ConfigInvalid("bad object area range");
    if (thickness_min_cm > thickness_max_cm || thickness_min_cm <= 0)
      throw ConfigInvalid("bad thickness range");
    if (material_palette.size() < 2) throw ConfigInvalid("palette needs >= 2 entries");
    float e_lo = material_palette[0].youngs_kpa, e_hi = e_lo;
    for (const auto& m : material_palette) {
      e_lo = std::min(e_lo, m.youngs_kpa);
      e_hi = std::max(e_hi, m.youngs_kpa);
      if (!(m.youngs_kpa > 0 && m.mass_g > 0 && m.poisson >= 0 && m.poisson < 0.5f))
        throw ConfigInvalid("bad palette entry");
    }
    if (e_hi < 100.0f * e_lo)
      throw ConfigInvalid("palette must span >= 100x in youngs modulus");
    if (!palette_thickness_scale.empty() &&
        palette_thickness_scale.size() != material_palette.size())
      throw ConfigInvalid("palette_thickness_scale length mismatch");
    for (float sc : palette_thickness_scale)
      if (!(sc > 0.0f)) throw ConfigInvalid("bad palette thickness scale");
    if (!(cross_object_prob >= 0.0 && cross_object_prob <= 1.0))
      throw ConfigInvalid("cross_object_prob must be in [0, 1]");
  }
};

namespace detail {

struct Ellipse {
  double cx, cy, rx, ry, cos_t, sin_t;  // cm, rotated
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double u = (dx * cos_t + dy * sin_t) / rx;
    const double v = (-dx * sin_t + dy * cos_t) / ry;
    return u * u + v * v <= 1.0;
  }
};

// Union of 2-4 overlapping ellipses, smoothed into a thickness profile.
// Chained centers keep the footprint 4-connected.
inline Heightmap generate_object_blob(const GenConfig& cfg, Rng& rng,
                                      ObjectMaterial* material_out) {
  const int w = cfg.grid_width, h = cfg.grid_height;
  const float cell = cfg.cell_size;
  const double cx0 = 0.5 * w * cell, cy0 = 0.5 * h * cell;

  const int palette_idx = rng.uniform_int(0, int(cfg.material_palette.size()) - 1);
  if (material_out) *material_out = cfg.material_palette[size_t(palette_idx)];
  const double thickness_scale =
      cfg.palette_thickness_scale.empty()
          ? 1.0
          : double(cfg.palette_thickness_scale[size_t(palette_idx)]);

  for (int attempt = 0; attempt < 8; ++attempt) {
    const double target_area =
        rng.uniform(cfg.object_area_min_cm2, cfg.object_area_max_cm2);
    const double peak =
        thickness_scale * rng.uniform(cfg.thickness_min_cm, cfg.thickness_max_cm);
    const double r0 = std::sqrt(target_area / 3.14159265358979);
    const int n_ell = rng.uniform_int(2, 4);

    std::vector<Ellipse> ells;
    for (int i = 0; i < n_ell; ++i) {
      Ellipse e;
      if (i == 0) {
        e.cx = cx0;
        e.cy = cy0;
      } else {
        // new center inside the previous ellipse -> connected union
        const Ellipse& prev = ells.back();
        const double ang = rng.uniform(0.0, 6.283185307179586);
        const double rad = rng.uniform(0.0, 0.5 * std::min(prev.rx, prev.ry));
        e.cx = prev.cx + rad * std::cos(ang);
        e.cy = prev.cy + rad * std::sin(ang);
      }
      e.rx = rng.uniform(0.55, 0.9) * r0;
      e.ry = rng.uniform(0.55, 0.9) * r0;
      const double theta = rng.uniform(0.0, 3.14159265358979);
      e.cos_t = std::cos(theta);
      e.sin_t = std::sin(theta);
      ells.push_back(e);
    }

    auto rasterize = [&](double scale) {
      Heightmap mask = Heightmap::zeros(w, h, cell);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double px = (x + 0.5) * cell, py = (y + 0.5) * cell;
          for (const auto& e : ells) {
            Ellipse se = e;
            se.cx = cx0 + (e.cx - cx0) * scale;
            se.cy = cy0 + (e.cy - cy0) * scale;
            se.rx *= scale;
            se.ry *= scale;
            if (se.contains(px, py)) {
              mask.at(x, y) = 1.0f;
              break;
            }
          }
        }
      return mask;
    };

    Heightmap mask = rasterize(1.0);
    double area = 0.0;
    for (float v : mask.values) area += v;
    area *= double(cell) * double(cell);
    if (area <= 0.0) continue;
    const double scale = std::sqrt(target_area / area);
    mask = rasterize(scale);

    // keep a margin so every blob admits some legal action
    const CellRect bb = footprint_bbox(mask);
    if (bb.empty() || bb.x0 < 2 || bb.y0 < 2 || bb.x1 >= w - 2 || bb.y1 >= h - 2)
      continue;
    if (!footprint_connected4(mask)) continue;

    // smooth thickness: box-blur the indicator, renormalize to the peak
    std::vector<double> prof(mask.values.begin(), mask.values.end());
    std::vector<double> tmp(prof.size());
    for (int pass = 0; pass < 5; ++pass) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          int cnt = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int nx = x + dx, ny = y + dy;
              if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
              acc += prof[size_t(ny) * w + nx];
              ++cnt;
            }
          tmp[size_t(y) * w + x] = acc / cnt;
        }
      prof.swap(tmp);
    }
    double pmax = 0.0;
    for (size_t i = 0; i < prof.size(); ++i)
      if (mask.values[i] > 0.0f) pmax = std::max(pmax, prof[i]);
    if (pmax <= 0.0) continue;

    Heightmap object = Heightmap::zeros(w, h, cell);
    for (size_t i = 0; i < prof.size(); ++i)
      if (mask.values[i] > 0.0f)
        object.values[i] = float(std::max(0.05, prof[i] / pmax) * peak);
    return object;
  }
  throw ConfigInvalid("could not generate a valid object blob");
}

}  // namespace detail

inline SceneState generate_scene(const GenConfig& cfg, Rng& rng) {
  cfg.validate();
  const int w = cfg.grid_width, h = cfg.grid_height;
  const float cell = cfg.cell_size;

  SceneState s;
  s.scene = Heightmap::zeros(w, h, cell);
  s.scene_mask = MaterialMask::zeros(w, h, cell);

  const double cx = 0.5 * w * cell, cy = 0.5 * h * cell;
  const double r_plate = cfg.plate_radius_cm;
  const double r_inner = r_plate - cfg.rim_width_cm;

  auto set_material = [&](size_t i, const ObjectMaterial& m, float density) {
    s.scene_mask.mass_density[i] = density;
    s.scene_mask.youngs_modulus[i] = m.youngs_kpa;
    s.scene_mask.poisson_ratio[i] = m.poisson;
  };

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double px = (x + 0.5) * cell, py = (y + 0.5) * cell;
      const double d = std::hypot(px - cx, py - cy);
      if (d > r_plate) continue;
      const size_t i = size_t(y) * w + x;
      s.scene.values[i] = (d >= r_inner) ? cfg.plate_base_cm + cfg.rim_height_cm
                                         : cfg.plate_base_cm;
      set_material(i, cfg.plate_material, 2.4f);
    }

  const int n_fries = rng.uniform_int(cfg.n_obstacles_min, cfg.n_obstacles_max);
  for (int f = 0; f < n_fries; ++f) {
    const bool horizontal = rng.uniform() < 0.5;
    const double len = rng.uniform(cfg.obstacle_len_min_cm, cfg.obstacle_len_max_cm);
    const double wid = rng.uniform(cfg.obstacle_wid_min_cm, cfg.obstacle_wid_max_cm);
    const double hgt = rng.uniform(cfg.obstacle_h_min_cm, cfg.obstacle_h_max_cm);
    const double ang = rng.uniform(0.0, 6.283185307179586);
    const double rad = rng.uniform(0.0, std::max(0.0, r_inner - 0.5 * wid - 1.0));
    const double fx = cx + rad * std::cos(ang), fy = cy + rad * std::sin(ang);
    const double half_l = 0.5 * len, half_w = 0.5 * wid;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double px = (x + 0.5) * cell, py = (y + 0.5) * cell;
        const double dx = std::abs(px - fx), dy = std::abs(py - fy);
        const bool inside = horizontal ? (dx <= half_l && dy <= half_w)
                                       : (dx <= half_w && dy <= half_l);
        if (!inside) continue;
        if (std::hypot(px - cx, py - cy) >= r_inner) continue;  // keep off the rim
        const size_t i = size_t(y) * w + x;
        const float top = float(cfg.plate_base_cm + hgt);
        if (top > s.scene.values[i]) {
          s.scene.values[i] = top;
          set_material(i, cfg.obstacle_material, 0.6f);
        }
      }
  }

  s.object = detail::generate_object_blob(cfg, rng, &s.object_material);
  s.scene.validate();
  s.scene_mask.validate_against(s.scene);
  return s;
}

// An environment that can actually execute a placement (as opposed to merely
// predicting it): the reference simulator or the perturbed target world.
struct Environment {
  std::string tag;  // "source" or "target"
  std::function<Heightmap(const SceneState&, const Action&)> execute;
};

inline Environment make_source_env(const SimParams& p) {
  return Environment{"source",
                     [p](const SceneState& s, const Action& a) { return simulate_place(s, a, p); }};
}

inline Environment make_target_env(const TargetEnvParams& tp) {
  return Environment{"target",
                     [tp](const SceneState& s, const Action& a) { return target_execute(s, a, tp); }};
}

struct Task {
  SceneState initial;
  Heightmap goal;
  Action ground_truth_action;
  std::string env_tag;
};

inline Action sample_legal_action(const ActionRect& rect, Rng& rng) {
  if (rect.empty()) throw NoLegalAction("no in-bounds placement exists");
  return Action{float(rng.uniform(rect.x_min, rect.x_max)),
                float(rng.uniform(rect.y_min, rect.y_max))};
}

inline Task make_task(const GenConfig& cfg, const Environment& env, Rng& rng) {
  Task t;
  t.initial = generate_scene(cfg, rng);
  t.env_tag = env.tag;

  SceneState exec_state = t.initial;
  ActionRect rect = legal_action_rect(t.initial.object);
  if (cfg.cross_object_prob > 0.0 && rng.uniform() < cfg.cross_object_prob) {
    // goal demonstrated with a different object
    exec_state.object =
        detail::generate_object_blob(cfg, rng, &exec_state.object_material);
    const ActionRect r2 = legal_action_rect(exec_state.object);
    rect.x_min = std::max(rect.x_min, r2.x_min);
    rect.x_max = std::min(rect.x_max, r2.x_max);
    rect.y_min = std::max(rect.y_min, r2.y_min);
    rect.y_max = std::min(rect.y_max, r2.y_max);
  }
  t.ground_truth_action = sample_legal_action(rect, rng);
  t.goal = env.execute(exec_state, t.ground_truth_action);
  return t;
}

struct DataRecord {
  SceneState state;
  Action action;
  Heightmap outcome;
};

struct Dataset {
  std::vector<DataRecord> records;
  std::string split;    // "train" or "test"
  std::string env_tag;  // "source" or "target"
};

inline Dataset build_dataset(const GenConfig& cfg, const Environment& env, int n,
                             const std::string& split, int threads = 1) {
  if (n < 1) throw ConfigInvalid("dataset size must be >= 1");
  cfg.validate();
  Dataset ds;
  ds.split = split;
  ds.env_tag = env.tag;
  ds.records.resize(size_t(n));
  parallel_for(n, threads, [&](int i) {
    Rng rng(mix_seed(cfg.rng_seed, uint64_t(i)));
    DataRecord rec;
    rec.state = generate_scene(cfg, rng);
    rec.action = sample_legal_action(legal_action_rect(rec.state.object), rng);
    rec.outcome = env.execute(rec.state, rec.action);
    ds.records[size_t(i)] = std::move(rec);
  });
  return ds;
}

// ---- dataset file format: magic "MDED", u32 count, then per record the
// scene block, object block, mask block, 3 f32 material values, the action
// as 2 f32, and the outcome block. JSON manifest sidecar at <path>.json.

inline void save_dataset(const Dataset& ds, const std::string& path,
                         const nlohmann::json& manifest) {
  auto os = io::open_out(path);
  io::write_magic(os, "MDED");
  io::write_u32(os, uint32_t(ds.records.size()));
  for (const auto& r : ds.records) {
    io::write_heightmap(os, r.state.scene);
    io::write_heightmap(os, r.state.object);
    io::write_mask(os, r.state.scene_mask);
    io::write_f32(os, r.state.object_material.mass_g);
    io::write_f32(os, r.state.object_material.youngs_kpa);
    io::write_f32(os, r.state.object_material.poisson);
    io::write_f32(os, r.action.x);
    io::write_f32(os, r.action.y);
    io::write_heightmap(os, r.outcome);
  }
  if (!os) throw IoError("failed writing dataset: " + path);
  os.close();

  nlohmann::json m = manifest;
  m["split"] = ds.split;
  m["env_tag"] = ds.env_tag;
  m["count"] = ds.records.size();
  auto ms = io::open_out(path + ".json");
  ms << m.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& path) {
  auto is = io::open_in(path);
  io::expect_magic(is, "MDED");
  const uint32_t n = io::read_u32(is);
  Dataset ds;
  ds.records.resize(n);
  for (auto& r : ds.records) {
    r.state.scene = io::read_heightmap(is);
    r.state.object = io::read_heightmap(is);
    r.state.scene_mask = io::read_mask(is);
    r.state.object_material.mass_g = io::read_f32(is);
    r.state.object_material.youngs_kpa = io::read_f32(is);
    r.state.object_material.poisson = io::read_f32(is);
    r.action.x = io::read_f32(is);
    r.action.y = io::read_f32(is);
    r.outcome = io::read_heightmap(is);
  }
  std::ifstream ms(path + ".json");
  if (ms) {
    nlohmann::json m;
    ms >> m;
    if (m.contains("split")) ds.split = m["split"].get<std::string>();
    if (m.contains("env_tag")) ds.env_tag = m["env_tag"].get<std::string>();
  }
  return ds;
}

}  // namespace mfopt
