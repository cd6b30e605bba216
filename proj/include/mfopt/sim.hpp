#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mfopt/errors.hpp"
#include "mfopt/grid.hpp"
#include "mfopt/rng.hpp"

namespace mfopt {

// Reference placement simulator parameters. This is the artifact's
// high-fidelity stand-in: deterministic, so its own dataset outcomes are
// reproduced with zero error.
struct SimParams {
  double e_ref_kpa = 40.0;   // conformity scale: kappa = exp(-E_obj / e_ref)
  double alpha = 0.5;        // substrate compression gain
  double rho_max = 0.5;      // max compression fraction
  int relax_iters = 50;      // draping relaxation passes on the fine grid

  void validate() const {
    if (!(e_ref_kpa > 0.0)) throw ConfigInvalid("e_ref must be > 0");
    if (!(rho_max >= 0.0 && rho_max <= 0.9)) throw ConfigInvalid("rho_max must be in [0, 0.9]");
    if (relax_iters < 1) throw ConfigInvalid("relax_iters must be >= 1");
  }
};

// f1: shift the object thickness map to the action and add it onto the scene.
inline Heightmap heuristic_predict(const SceneState& s0, const Action& a) {
  return overlay_add(s0.scene, shift_object(s0.object, a, s0.scene.cell_size));
}

// Compression fractions below this round to nothing at heightmap precision;
// rigid substrates (plate, fries) land here and stay bit-exact.
inline constexpr double kRhoFlush = 1e-4;

// Internal fidelity of the draping solve (fine cells per coarse cell, per axis).
inline constexpr int kSimSupersample = 16;

// Width of the drape band, in coarse cells measured from the footprint edge.
inline constexpr int kDrapeBandCells = 2;

// Phase 1 of the placement model: deformable scene cells under the footprint
// compress by rho = min(rho_max, alpha * mass / (youngs * footprint_area)).
inline Heightmap substrate_after_compression(const SceneState& s0,
                                             const Heightmap& shifted,
                                             const SimParams& p) {
  Heightmap out = s0.scene;
  size_t n_fp = 0;
  for (size_t i = 0; i < shifted.values.size(); ++i)
    if (shifted.values[i] > 0.0f) ++n_fp;
  if (n_fp == 0) return out;
  const double area_cm2 = double(n_fp) * double(s0.scene.cell_size) * double(s0.scene.cell_size);
  for (size_t i = 0; i < shifted.values.size(); ++i) {
    if (shifted.values[i] <= 0.0f) continue;
    const double e_cell = s0.scene_mask.youngs_modulus[i];
    if (e_cell <= 0.0) continue;  // nothing underneath to compress
    double rho = std::min(p.rho_max, p.alpha * double(s0.object_material.mass_g) /
                                         (e_cell * area_cm2));
    if (rho < kRhoFlush) rho = 0.0;
    out.values[i] = float(double(out.values[i]) * (1.0 - rho));
  }
  return out;
}

namespace detail {

// Conservative pairwise smoothing of the object's top surface inside the
// footprint boundary band, on a supersampled grid. Every flux is applied
// antisymmetrically and limited so no cell drops below its support, which
// keeps the total draped volume constant to rounding.
inline void relax_drape(std::vector<double>& top, const std::vector<double>& floor,
                        const std::vector<uint8_t>& band, int fw, int fh,
                        double rate, int iters) {
  for (int it = 0; it < iters; ++it) {
    for (int y = 0; y < fh; ++y) {
      const size_t row = size_t(y) * fw;
      for (int x = 0; x + 1 < fw; ++x) {
        const size_t p = row + x, q = p + 1;
        if (!(band[p] && band[q])) continue;
        double f = rate * (top[p] - top[q]);
        if (f > 0.0)
          f = std::min(f, top[p] - floor[p]);
        else
          f = std::max(f, -(top[q] - floor[q]));
        top[p] -= f;
        top[q] += f;
      }
    }
    for (int y = 0; y + 1 < fh; ++y) {
      const size_t row = size_t(y) * fw;
      for (int x = 0; x < fw; ++x) {
        const size_t p = row + x, q = p + fw;
        if (!(band[p] && band[q])) continue;
        double f = rate * (top[p] - top[q]);
        if (f > 0.0)
          f = std::min(f, top[p] - floor[p]);
        else
          f = std::max(f, -(top[q] - floor[q]));
        top[p] -= f;
        top[q] += f;
      }
    }
  }
}

}  // namespace detail

// f3: deterministic three-phase placement.
//   (1) substrate compression under the footprint
//   (2) rigid resting height z* = max compressed support
//   (3) conformity blend kappa*(support + thick) + (1-kappa)*(z* + thick),
//       then relax_iters conservative draping passes restricted to the
//       footprint boundary band, solved at kSimSupersample x resolution.
// For rigid objects kappa underflows below rounding and the relaxation is an
// exact no-op, so rigid flat-plate placements match heuristic_predict bitwise.
inline Heightmap simulate_place(const SceneState& s0, const Action& a,
                                const SimParams& p) {
  p.validate();
  const Heightmap shifted = shift_object(s0.object, a, s0.scene.cell_size);
  const Heightmap support = substrate_after_compression(s0, shifted, p);

  double zstar = 0.0;
  for (size_t i = 0; i < shifted.values.size(); ++i)
    if (shifted.values[i] > 0.0f)
      zstar = std::max(zstar, double(support.values[i]));

  const double kappa =
      std::exp(-double(s0.object_material.youngs_kpa) / p.e_ref_kpa);

  const int w = s0.scene.width, h = s0.scene.height;
  std::vector<double> top_coarse(size_t(w) * h, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const size_t i = size_t(y) * w + x;
      const double t = shifted.values[i];
      if (t <= 0.0) continue;
      const double sup = support.values[i];
      top_coarse[i] = kappa * (sup + t) + (1.0 - kappa) * (zstar + t);
    }

  // Drape band on the coarse grid: footprint cells within kDrapeBandCells
  // (Chebyshev) of a non-footprint cell.
  const CellRect bb = footprint_bbox(shifted);
  std::vector<uint8_t> band_coarse(size_t(w) * h, 0);
  for (int y = bb.y0; y <= bb.y1; ++y)
    for (int x = bb.x0; x <= bb.x1; ++x) {
      if (shifted.at(x, y) <= 0.0f) continue;
      bool edge = false;
      for (int dy = -kDrapeBandCells; dy <= kDrapeBandCells && !edge; ++dy)
        for (int dx = -kDrapeBandCells; dx <= kDrapeBandCells && !edge; ++dx) {
          const int nx = x + dx, ny = y + dy;
          if (nx < 0 || nx >= w || ny < 0 || ny >= h || shifted.at(nx, ny) <= 0.0f)
            edge = true;
        }
      if (edge) band_coarse[size_t(y) * w + x] = 1;
    }

  // Fine-grid draping solve over the footprint bounding box.
  const int S = kSimSupersample;
  const int bw = bb.x1 - bb.x0 + 1, bh = bb.y1 - bb.y0 + 1;
  const int fw = bw * S, fh = bh * S;
  std::vector<double> top_f(size_t(fw) * fh, 0.0), floor_f(size_t(fw) * fh, 0.0);
  std::vector<uint8_t> fp_f(size_t(fw) * fh, 0), band_f(size_t(fw) * fh, 0);
  for (int fy = 0; fy < fh; ++fy) {
    const int cy = bb.y0 + fy / S;
    for (int fx = 0; fx < fw; ++fx) {
      const int cx = bb.x0 + fx / S;
      const size_t ci = size_t(cy) * w + cx;
      const size_t fi = size_t(fy) * fw + fx;
      if (shifted.values[ci] > 0.0f) {
        fp_f[fi] = 1;
        band_f[fi] = band_coarse[ci];
        top_f[fi] = top_coarse[ci];
        floor_f[fi] = support.values[ci];
      }
    }
  }
  // Non-footprint fine cells stay out of the band; zero both masks there so
  // fluxes never cross the footprint edge.
  for (size_t i = 0; i < fp_f.size(); ++i)
    if (!fp_f[i]) band_f[i] = 0;

  detail::relax_drape(top_f, floor_f, band_f, fw, fh, 0.25 * kappa,
                      p.relax_iters);

  Heightmap out = support;
  const double inv_area = 1.0 / (double(S) * double(S));
  for (int cy = bb.y0; cy <= bb.y1; ++cy)
    for (int cx = bb.x0; cx <= bb.x1; ++cx) {
      const size_t ci = size_t(cy) * w + cx;
      if (shifted.values[ci] <= 0.0f) continue;
      double acc = 0.0;
      const int oy = (cy - bb.y0) * S, ox = (cx - bb.x0) * S;
      for (int sy = 0; sy < S; ++sy) {
        const size_t row = size_t(oy + sy) * fw + ox;
        for (int sx = 0; sx < S; ++sx) acc += top_f[row + sx];
      }
      out.values[ci] = float(acc * inv_area);
    }
  return out;
}

// Target ("real world" stand-in) environment: the same placement model under
// perturbed physics plus spatially correlated measurement noise.
struct TargetEnvParams {
  SimParams base;              // already-perturbed simulator parameters
  double noise_sigma_cm = 0.1;
  double noise_corr_cells = 3.0;
  uint64_t rng_seed = 0;

  void validate() const {
    base.validate();
    if (!(noise_sigma_cm >= 0.0)) throw ConfigInvalid("noise_sigma must be >= 0");
    if (!(noise_corr_cells >= 0.0)) throw ConfigInvalid("noise_corr must be >= 0");
  }
};

inline TargetEnvParams make_target_params(const SimParams& source, double eps_e_ref,
                                          double eps_alpha, double noise_sigma,
                                          double noise_corr, uint64_t seed) {
  TargetEnvParams tp;
  tp.base = source;
  tp.base.e_ref_kpa = source.e_ref_kpa * (1.0 + eps_e_ref);
  tp.base.alpha = source.alpha * (1.0 + eps_alpha);
  tp.noise_sigma_cm = noise_sigma;
  tp.noise_corr_cells = noise_corr;
  tp.rng_seed = seed;
  return tp;
}

inline Heightmap target_execute(const SceneState& s0, const Action& a,
                                const TargetEnvParams& tp) {
  tp.validate();
  Heightmap out = simulate_place(s0, a, tp.base);
  if (tp.noise_sigma_cm <= 0.0) return out;

  // Noise stream is a pure function of (seed, scene, object, action).
  uint64_t h = fnv1a64(&tp.rng_seed, sizeof tp.rng_seed);
  h = fnv1a64(s0.scene.values.data(), s0.scene.values.size() * 4, h);
  h = fnv1a64(s0.object.values.data(), s0.object.values.size() * 4, h);
  h = fnv1a64(&a.x, 4, h);
  h = fnv1a64(&a.y, 4, h);
  Rng rng(h);

  const int w = out.width, hgt = out.height;
  std::vector<double> white(size_t(w) * hgt);
  for (auto& v : white) v = rng.gaussian();

  // Separable gaussian blur, then rescale so the field std is noise_sigma.
  const double sigma = std::max(tp.noise_corr_cells, 1e-9);
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(size_t(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[size_t(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    ksum += kernel[size_t(i + radius)];
  }
  double k2 = 0.0;
  for (auto& k : kernel) {
    k /= ksum;
    k2 += k * k;
  }
  const double gain = tp.noise_sigma_cm / k2;  // blur shrinks std by (sum k^2)

  std::vector<double> tmp(white.size());
  for (int y = 0; y < hgt; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int xx = std::clamp(x + i, 0, w - 1);
        acc += kernel[size_t(i + radius)] * white[size_t(y) * w + xx];
      }
      tmp[size_t(y) * w + x] = acc;
    }
  for (int y = 0; y < hgt; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const int yy = std::clamp(y + i, 0, hgt - 1);
        acc += kernel[size_t(i + radius)] * tmp[size_t(yy) * w + x];
      }
      const size_t idx = size_t(y) * w + x;
      out.values[idx] = std::max(0.0f, float(double(out.values[idx]) + gain * acc));
    }
  return out;
}

// The predictive-model family F, index-ordered by computational cost:
// models[0] = heuristic, models[1] = learned, models[2] = reference simulator.
struct PredictiveModel {
  std::string name;
  std::function<Heightmap(const SceneState&, const Action&)> predict;
};

struct ModelFamily {
  std::vector<PredictiveModel> models;

  size_t size() const { return models.size(); }
  const PredictiveModel& operator[](size_t i) const { return models[i]; }
};

}  // namespace mfopt
