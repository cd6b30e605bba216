#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "mfopt/errors.hpp"

namespace mfopt {

// Dense top-down grid of surface heights in cm. Row-major, y * width + x.
// Heights are stored single precision; every metric accumulates in double.
struct Heightmap {
  int width = 0;
  int height = 0;
  float cell_size = 0.5f;  // cm per cell
  std::vector<float> values;

  static Heightmap zeros(int w, int h, float cell) {
    if (w < 8 || h < 8) throw ConfigInvalid("heightmap dims must be >= 8");
    if (!(cell > 0.0f)) throw ConfigInvalid("cell_size must be > 0");
    Heightmap m;
    m.width = w;
    m.height = h;
    m.cell_size = cell;
    m.values.assign(size_t(w) * size_t(h), 0.0f);
    return m;
  }

  float& at(int x, int y) { return values[size_t(y) * width + x]; }
  float at(int x, int y) const { return values[size_t(y) * width + x]; }

  size_t cells() const { return size_t(width) * size_t(height); }

  bool same_dims(const Heightmap& o) const {
    return width == o.width && height == o.height;
  }

  void validate() const {
    if (width < 8 || height < 8) throw ConfigInvalid("heightmap dims must be >= 8");
    if (values.size() != cells()) throw ConfigInvalid("heightmap buffer size mismatch");
    for (float v : values)
      if (!std::isfinite(v) || v < 0.0f)
        throw ConfigInvalid("heightmap values must be finite and >= 0");
  }
};

// Planar placement target for the object footprint center, in cm.
struct Action {
  float x = 0.0f;
  float y = 0.0f;
};

// Per-cell material property planes for the topmost item at each cell.
struct MaterialMask {
  int width = 0;
  int height = 0;
  float cell_size = 0.5f;
  std::vector<float> mass_density;    // g/cm^3
  std::vector<float> youngs_modulus;  // kPa
  std::vector<float> poisson_ratio;   // unitless, [0, 0.5) where occupied

  static MaterialMask zeros(int w, int h, float cell) {
    if (w < 8 || h < 8) throw ConfigInvalid("mask dims must be >= 8");
    MaterialMask m;
    m.width = w;
    m.height = h;
    m.cell_size = cell;
    m.mass_density.assign(size_t(w) * size_t(h), 0.0f);
    m.youngs_modulus.assign(size_t(w) * size_t(h), 0.0f);
    m.poisson_ratio.assign(size_t(w) * size_t(h), 0.0f);
    return m;
  }

  size_t cells() const { return size_t(width) * size_t(height); }

  // youngs > 0 exactly where the paired heightmap exceeds background height
  void validate_against(const Heightmap& hm, float background = 0.0f) const {
    if (width != hm.width || height != hm.height)
      throw DimMismatch("mask/heightmap dims differ");
    for (size_t i = 0; i < cells(); ++i) {
      const bool occupied = hm.values[i] > background;
      if (occupied != (youngs_modulus[i] > 0.0f))
        throw ConfigInvalid("mask youngs plane inconsistent with heights");
      if (occupied) {
        if (!(poisson_ratio[i] >= 0.0f && poisson_ratio[i] < 0.5f))
          throw ConfigInvalid("poisson ratio outside [0, 0.5)");
      } else if (poisson_ratio[i] != 0.0f) {
        throw ConfigInvalid("poisson ratio nonzero on empty cell");
      }
    }
  }
};

struct ObjectMaterial {
  float mass_g = 0.0f;
  float youngs_kpa = 0.0f;
  float poisson = 0.0f;
};

// Initial state: scene surface + its material planes, plus the grasped
// object's thickness map (flat-bottom assumption) and its uniform material.
struct SceneState {
  Heightmap scene;
  MaterialMask scene_mask;
  Heightmap object;
  ObjectMaterial object_material;
};

struct DeviationConfig {
  double d_norm = 1.0;  // cm, normalization constant frozen at training time
  double d_max = 0.4;   // precondition threshold on the normalized scale

  void validate() const {
    if (!(d_norm > 0.0)) throw ConfigInvalid("d_norm must be > 0");
    if (!(d_max > 0.0 && d_max <= 1.0)) throw ConfigInvalid("d_max must be in (0, 1]");
  }
};

struct CellRect {  // inclusive cell-index bounds
  int x0 = 0, y0 = 0, x1 = -1, y1 = -1;
  bool empty() const { return x1 < x0 || y1 < y0; }
};

inline CellRect footprint_bbox(const Heightmap& m) {
  CellRect r{m.width, m.height, -1, -1};
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x)
      if (m.at(x, y) > 0.0f) {
        r.x0 = std::min(r.x0, x);
        r.y0 = std::min(r.y0, y);
        r.x1 = std::max(r.x1, x);
        r.y1 = std::max(r.y1, y);
      }
  return r;
}

inline bool footprint_connected4(const Heightmap& m) {
  const CellRect bb = footprint_bbox(m);
  if (bb.empty()) return false;
  std::vector<uint8_t> seen(m.cells(), 0);
  std::vector<int> stack;
  int start = -1, total = 0;
  for (size_t i = 0; i < m.cells(); ++i)
    if (m.values[i] > 0.0f) {
      ++total;
      if (start < 0) start = int(i);
    }
  stack.push_back(start);
  seen[start] = 1;
  int reached = 0;
  while (!stack.empty()) {
    const int i = stack.back();
    stack.pop_back();
    ++reached;
    const int x = i % m.width, y = i / m.width;
    const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
    for (auto& n : nb) {
      if (n[0] < 0 || n[0] >= m.width || n[1] < 0 || n[1] >= m.height) continue;
      const int j = n[1] * m.width + n[0];
      if (!seen[j] && m.values[j] > 0.0f) {
        seen[j] = 1;
        stack.push_back(j);
      }
    }
  }
  return reached == total;
}

// Continuous footprint-center coordinate in cm (cell i spans [i, i+1)*cell,
// its center sits at (i + 0.5)*cell).
inline Action footprint_center_cm(const Heightmap& object) {
  const CellRect bb = footprint_bbox(object);
  if (bb.empty()) throw ConfigInvalid("object has empty footprint");
  return Action{float((bb.x0 + bb.x1 + 1) * 0.5 * object.cell_size),
                float((bb.y0 + bb.y1 + 1) * 0.5 * object.cell_size)};
}

inline std::pair<int, int> shift_cells_for(const Heightmap& object,
                                           const Action& a, float cell_size) {
  const CellRect bb = footprint_bbox(object);
  if (bb.empty()) throw ConfigInvalid("object has empty footprint");
  const double ccx = (bb.x0 + bb.x1) * 0.5;
  const double ccy = (bb.y0 + bb.y1) * 0.5;
  // nearest-cell rounding of the requested center, half away from zero
  const int dx = int(std::lround(a.x / cell_size - 0.5 - ccx));
  const int dy = int(std::lround(a.y / cell_size - 0.5 - ccy));
  return {dx, dy};
}

// Translates the object thickness map so its footprint center lands on the
// action coordinates. Pure integer-cell translation; no interpolation.
inline Heightmap shift_object(const Heightmap& object, const Action& a,
                              float cell_size) {
  const auto [dx, dy] = shift_cells_for(object, a, cell_size);
  const CellRect bb = footprint_bbox(object);
  if (bb.x0 + dx < 0 || bb.x1 + dx >= object.width || bb.y0 + dy < 0 ||
      bb.y1 + dy >= object.height)
    throw OutOfBounds("shifted footprint leaves the grid");
  Heightmap out = Heightmap::zeros(object.width, object.height, object.cell_size);
  for (int y = bb.y0; y <= bb.y1; ++y)
    for (int x = bb.x0; x <= bb.x1; ++x) {
      const float t = object.at(x, y);
      if (t > 0.0f) out.at(x + dx, y + dy) = t;
    }
  return out;
}

// Action rectangle (cm) whose every point keeps the shifted footprint in-grid.
struct ActionRect {
  float x_min = 0, x_max = 0, y_min = 0, y_max = 0;
  bool empty() const { return x_max < x_min || y_max < y_min; }
};

inline ActionRect legal_action_rect(const Heightmap& object) {
  const CellRect bb = footprint_bbox(object);
  if (bb.empty()) throw ConfigInvalid("object has empty footprint");
  const float cell = object.cell_size;
  const double cx = (bb.x0 + bb.x1 + 1) * 0.5;  // center in cell units
  const double cy = (bb.y0 + bb.y1 + 1) * 0.5;
  ActionRect r;
  // Stay strictly inside the rounding boundary of the outermost legal shift.
  r.x_min = float(((-bb.x0) + cx - 0.49) * cell);
  r.x_max = float(((object.width - 1 - bb.x1) + cx + 0.49) * cell);
  r.y_min = float(((-bb.y0) + cy - 0.49) * cell);
  r.y_max = float(((object.height - 1 - bb.y1) + cy + 0.49) * cell);
  return r;
}

inline Heightmap overlay_add(const Heightmap& scene,
                             const Heightmap& shifted_object) {
  if (!scene.same_dims(shifted_object))
    throw DimMismatch("overlay_add: dims differ");
  Heightmap out = scene;
  for (size_t i = 0; i < out.values.size(); ++i)
    out.values[i] += shifted_object.values[i];
  return out;
}

// Mean absolute per-cell height difference in cm. Mean, not sum, so the
// value is comparable across grid resolutions.
inline double deviation(const Heightmap& pred, const Heightmap& truth) {
  if (!pred.same_dims(truth)) throw DimMismatch("deviation: dims differ");
  double acc = 0.0;
  for (size_t i = 0; i < pred.values.size(); ++i)
    acc += std::abs(double(pred.values[i]) - double(truth.values[i]));
  return acc / double(pred.cells());
}

inline double rmse(const Heightmap& pred, const Heightmap& truth) {
  if (!pred.same_dims(truth)) throw DimMismatch("rmse: dims differ");
  double acc = 0.0;
  for (size_t i = 0; i < pred.values.size(); ++i) {
    const double d = double(pred.values[i]) - double(truth.values[i]);
    acc += d * d;
  }
  return std::sqrt(acc / double(pred.cells()));
}

inline double normalize_deviation(double d, const DeviationConfig& cfg) {
  if (!(d >= 0.0)) throw ConfigInvalid("deviation must be >= 0");
  return std::min(d / cfg.d_norm, 1.0);
}

}  // namespace mfopt
