#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mfopt/errors.hpp"
#include "mfopt/grid_io.hpp"
#include "mfopt/parallel.hpp"
#include "mfopt/rng.hpp"

// Minimal dense/conv network substrate with exact reverse-mode gradients and
// an adaptive-moment optimizer. Templated on the scalar type: float in
// production, double in the finite-difference test harness.
namespace mfopt::nn {

template <typename S>
struct Tensor {
  int h = 1, w = 1, c = 1;
  std::vector<S> v;

  static Tensor zeros(int h_, int w_, int c_) {
    Tensor t;
    t.h = h_;
    t.w = w_;
    t.c = c_;
    t.v.assign(size_t(h_) * w_ * c_, S(0));
    return t;
  }
  static Tensor vec(std::vector<S> values) {
    Tensor t;
    t.h = 1;
    t.w = 1;
    t.c = int(values.size());
    t.v = std::move(values);
    return t;
  }
  size_t count() const { return size_t(h) * w * c; }
  S& at(int y, int x, int ch) { return v[(size_t(y) * w + x) * c + ch]; }
  S at(int y, int x, int ch) const { return v[(size_t(y) * w + x) * c + ch]; }
  bool same_shape(const Tensor& o) const { return h == o.h && w == o.w && c == o.c; }
};

enum class LayerKind { Conv2d, TConv2d, Dense, Relu, Flatten, Clamp01 };

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int channels = 0;  // conv/tconv out channels
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  int out_pad = 0;   // tconv only
  int units = 0;     // dense
  bool zero_init = false;

  static LayerSpec conv(int c, int k, int s, int p, bool zero = false) {
    LayerSpec l;
    l.kind = LayerKind::Conv2d;
    l.channels = c;
    l.kernel = k;
    l.stride = s;
    l.pad = p;
    l.zero_init = zero;
    return l;
  }
  static LayerSpec tconv(int c, int k, int s, int p, int op = 0, bool zero = false) {
    LayerSpec l;
    l.kind = LayerKind::TConv2d;
    l.channels = c;
    l.kernel = k;
    l.stride = s;
    l.pad = p;
    l.out_pad = op;
    l.zero_init = zero;
    return l;
  }
  static LayerSpec dense(int units, bool zero = false) {
    LayerSpec l;
    l.kind = LayerKind::Dense;
    l.units = units;
    l.zero_init = zero;
    return l;
  }
  static LayerSpec relu() { return LayerSpec{}; }
  static LayerSpec flatten() {
    LayerSpec l;
    l.kind = LayerKind::Flatten;
    return l;
  }
  static LayerSpec clamp01() {
    LayerSpec l;
    l.kind = LayerKind::Clamp01;
    return l;
  }
};

struct BranchSpec {
  std::string name;
  int in_h = 1, in_w = 1, in_c = 1;
  std::vector<LayerSpec> layers;  // may be empty (passthrough input)
};

struct NetworkSpec {
  std::vector<BranchSpec> branches;  // outputs meet at one concat point
  std::vector<LayerSpec> trunk;
  uint64_t seed = 0;
};

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::TConv2d: return "tconv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::Relu: return "relu";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Clamp01: return "clamp01";
  }
  return "?";
}

inline LayerKind kind_from_name(const std::string& s) {
  if (s == "conv2d") return LayerKind::Conv2d;
  if (s == "tconv2d") return LayerKind::TConv2d;
  if (s == "dense") return LayerKind::Dense;
  if (s == "relu") return LayerKind::Relu;
  if (s == "flatten") return LayerKind::Flatten;
  if (s == "clamp01") return LayerKind::Clamp01;
  throw IoError("unknown layer kind: " + s);
}

inline nlohmann::json layer_to_json(const LayerSpec& l) {
  nlohmann::json j;
  j["kind"] = kind_name(l.kind);
  if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::TConv2d) {
    j["channels"] = l.channels;
    j["kernel"] = l.kernel;
    j["stride"] = l.stride;
    j["pad"] = l.pad;
    if (l.kind == LayerKind::TConv2d) j["out_pad"] = l.out_pad;
  } else if (l.kind == LayerKind::Dense) {
    j["units"] = l.units;
  }
  if (l.zero_init) j["zero_init"] = true;
  return j;
}

inline LayerSpec layer_from_json(const nlohmann::json& j) {
  LayerSpec l;
  l.kind = kind_from_name(j.at("kind").get<std::string>());
  l.channels = j.value("channels", 0);
  l.kernel = j.value("kernel", 0);
  l.stride = j.value("stride", 1);
  l.pad = j.value("pad", 0);
  l.out_pad = j.value("out_pad", 0);
  l.units = j.value("units", 0);
  l.zero_init = j.value("zero_init", false);
  return l;
}

inline nlohmann::json spec_to_json(const NetworkSpec& s) {
  nlohmann::json j;
  j["seed"] = s.seed;
  j["branches"] = nlohmann::json::array();
  for (const auto& b : s.branches) {
    nlohmann::json bj;
    bj["name"] = b.name;
    bj["in"] = {b.in_h, b.in_w, b.in_c};
    bj["layers"] = nlohmann::json::array();
    for (const auto& l : b.layers) bj["layers"].push_back(layer_to_json(l));
    j["branches"].push_back(bj);
  }
  j["trunk"] = nlohmann::json::array();
  for (const auto& l : s.trunk) j["trunk"].push_back(layer_to_json(l));
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.seed = j.at("seed").get<uint64_t>();
  for (const auto& bj : j.at("branches")) {
    BranchSpec b;
    b.name = bj.at("name").get<std::string>();
    b.in_h = bj.at("in")[0].get<int>();
    b.in_w = bj.at("in")[1].get<int>();
    b.in_c = bj.at("in")[2].get<int>();
    for (const auto& lj : bj.at("layers")) b.layers.push_back(layer_from_json(lj));
    s.branches.push_back(std::move(b));
  }
  for (const auto& lj : j.at("trunk")) s.trunk.push_back(layer_from_json(lj));
  return s;
}

template <typename S>
struct LayerState {
  LayerSpec spec;
  int in_h = 1, in_w = 1, in_c = 1;
  int out_h = 1, out_w = 1, out_c = 1;
  std::vector<S> W, b;
  bool trainable = true;

  bool has_params() const { return !W.empty() || !b.empty(); }
};

template <typename S>
struct Network {
  NetworkSpec spec;
  std::vector<std::vector<LayerState<S>>> branches;
  std::vector<LayerState<S>> trunk;
  int cat_h = 1, cat_w = 1, cat_c = 1;      // concat output shape
  std::vector<int> branch_cat_offset;       // channel offset per branch
  std::vector<bool> branch_is_tiled;        // vector branch tiled over h x w

  // Declaration order: branch 0 layers, branch 1 layers, ..., trunk layers.
  template <typename Fn>
  void for_each_layer(Fn&& fn) {
    for (auto& br : branches)
      for (auto& l : br) fn(l);
    for (auto& l : trunk) fn(l);
  }
  template <typename Fn>
  void for_each_layer(Fn&& fn) const {
    for (const auto& br : branches)
      for (const auto& l : br) fn(l);
    for (const auto& l : trunk) fn(l);
  }

  size_t param_count() const {
    size_t n = 0;
    for_each_layer([&](const LayerState<S>& l) { n += l.W.size() + l.b.size(); });
    return n;
  }
};

namespace detail {

inline void infer_shape(const LayerSpec& l, int ih, int iw, int ic, int& oh,
                        int& ow, int& oc) {
  switch (l.kind) {
    case LayerKind::Conv2d:
      if (l.kernel < 1 || l.kernel > 16 || l.stride < 1 || l.channels < 1)
        throw ConfigInvalid("bad conv spec");
      oh = (ih + 2 * l.pad - l.kernel) / l.stride + 1;
      ow = (iw + 2 * l.pad - l.kernel) / l.stride + 1;
      oc = l.channels;
      if (oh < 1 || ow < 1) throw ShapeMismatch("conv output collapses");
      break;
    case LayerKind::TConv2d:
      if (l.kernel < 1 || l.kernel > 16 || l.stride < 1 || l.channels < 1)
        throw ConfigInvalid("bad tconv spec");
      oh = (ih - 1) * l.stride - 2 * l.pad + l.kernel + l.out_pad;
      ow = (iw - 1) * l.stride - 2 * l.pad + l.kernel + l.out_pad;
      oc = l.channels;
      if (oh < 1 || ow < 1) throw ShapeMismatch("tconv output collapses");
      break;
    case LayerKind::Dense:
      if (ih != 1 || iw != 1) throw ShapeMismatch("dense requires flattened input");
      if (l.units < 1) throw ConfigInvalid("bad dense spec");
      oh = ow = 1;
      oc = l.units;
      break;
    case LayerKind::Flatten:
      oh = ow = 1;
      oc = ih * iw * ic;
      break;
    case LayerKind::Relu:
    case LayerKind::Clamp01:
      oh = ih;
      ow = iw;
      oc = ic;
      break;
  }
}

template <typename S>
LayerState<S> make_layer(const LayerSpec& spec, int ih, int iw, int ic, Rng& rng) {
  LayerState<S> l;
  l.spec = spec;
  l.in_h = ih;
  l.in_w = iw;
  l.in_c = ic;
  infer_shape(spec, ih, iw, ic, l.out_h, l.out_w, l.out_c);

  auto kaiming = [&](size_t n, int fan_in) {
    std::vector<S> w(n);
    const double bound = std::sqrt(6.0 / std::max(1, fan_in));
    for (auto& x : w) x = S(rng.uniform(-bound, bound));
    return w;
  };

  switch (spec.kind) {
    case LayerKind::Conv2d: {
      const size_t n = size_t(l.out_c) * spec.kernel * spec.kernel * ic;
      l.W = spec.zero_init ? std::vector<S>(n, S(0))
                           : kaiming(n, spec.kernel * spec.kernel * ic);
      l.b.assign(size_t(l.out_c), S(0));
      break;
    }
    case LayerKind::TConv2d: {
      const size_t n = size_t(ic) * spec.kernel * spec.kernel * l.out_c;
      l.W = spec.zero_init ? std::vector<S>(n, S(0))
                           : kaiming(n, spec.kernel * spec.kernel * ic);
      l.b.assign(size_t(l.out_c), S(0));
      break;
    }
    case LayerKind::Dense: {
      const size_t n = size_t(l.out_c) * ic;
      l.W = spec.zero_init ? std::vector<S>(n, S(0)) : kaiming(n, ic);
      l.b.assign(size_t(l.out_c), S(0));
      break;
    }
    default:
      break;
  }
  return l;
}

}  // namespace detail

template <typename S>
Network<S> build_network(const NetworkSpec& spec) {
  if (spec.branches.empty()) throw ConfigInvalid("network needs >= 1 input branch");
  Network<S> net;
  net.spec = spec;

  int layer_counter = 0;
  std::vector<std::array<int, 3>> outs;
  for (const auto& bs : spec.branches) {
    std::vector<LayerState<S>> layers;
    int h = bs.in_h, w = bs.in_w, c = bs.in_c;
    for (const auto& ls : bs.layers) {
      Rng rng(mix_seed(spec.seed, uint64_t(layer_counter++)));
      auto l = detail::make_layer<S>(ls, h, w, c, rng);
      h = l.out_h;
      w = l.out_w;
      c = l.out_c;
      layers.push_back(std::move(l));
    }
    outs.push_back({h, w, c});
    net.branches.push_back(std::move(layers));
  }

  // Concat point: spatial outputs must agree on (h, w); vector outputs are
  // tiled across the spatial extent; channels stack in branch order.
  int cat_h = 1, cat_w = 1;
  for (const auto& o : outs)
    if (o[0] * o[1] > 1) {
      if (cat_h * cat_w > 1 && (cat_h != o[0] || cat_w != o[1]))
        throw ShapeMismatch("spatial branch outputs disagree at concat");
      cat_h = o[0];
      cat_w = o[1];
    }
  int off = 0;
  for (const auto& o : outs) {
    const bool tiled = (o[0] * o[1] == 1) && (cat_h * cat_w > 1);
    if (!tiled && o[0] * o[1] > 1 && (o[0] != cat_h || o[1] != cat_w))
      throw ShapeMismatch("branch output incompatible at concat");
    net.branch_is_tiled.push_back(tiled);
    net.branch_cat_offset.push_back(off);
    off += o[2];
  }
  net.cat_h = cat_h;
  net.cat_w = cat_w;
  net.cat_c = off;

  int h = cat_h, w = cat_w, c = off;
  for (const auto& ls : spec.trunk) {
    Rng rng(mix_seed(spec.seed, uint64_t(layer_counter++)));
    auto l = detail::make_layer<S>(ls, h, w, c, rng);
    h = l.out_h;
    w = l.out_w;
    c = l.out_c;
    net.trunk.push_back(std::move(l));
  }
  return net;
}

// ---- forward / backward ----------------------------------------------------

namespace detail {

// Conv and tconv share one weight layout, W[ky][kx][ic][oc], and one gather
// structure: every output pixel accumulates an OC-wide register row with the
// input value broadcast, so the innermost loop is unit-stride on both sides.
// A tap (ky, kx) connects in(iy, ix) to out(oy, ox) with
//   conv:  iy = oy * stride - pad + ky
//   tconv: oy = iy * stride - pad + ky  (gathered as iy = (oy + pad - ky) / stride)

template <typename S>
Tensor<S> layer_forward(const LayerState<S>& l, const Tensor<S>& in) {
  Tensor<S> out = Tensor<S>::zeros(l.out_h, l.out_w, l.out_c);
  const int K = l.spec.kernel, ST = l.spec.stride, P = l.spec.pad;
  switch (l.spec.kind) {
    case LayerKind::Conv2d: {
      const int IC = l.in_c, OC = l.out_c;
      std::vector<S> acc(static_cast<size_t>(OC));
      for (int oy = 0; oy < l.out_h; ++oy)
        for (int ox = 0; ox < l.out_w; ++ox) {
          for (int oc = 0; oc < OC; ++oc) acc[size_t(oc)] = l.b[size_t(oc)];
          for (int ky = 0; ky < K; ++ky) {
            const int iy = oy * ST - P + ky;
            if (iy < 0 || iy >= l.in_h) continue;
            for (int kx = 0; kx < K; ++kx) {
              const int ix = ox * ST - P + kx;
              if (ix < 0 || ix >= l.in_w) continue;
              const S* ip = in.v.data() + (size_t(iy) * l.in_w + ix) * IC;
              const S* wp = l.W.data() + (size_t(ky) * K + kx) * IC * OC;
              for (int ic = 0; ic < IC; ++ic) {
                const S x = ip[ic];
                const S* wrow = wp + size_t(ic) * OC;
                for (int oc = 0; oc < OC; ++oc) acc[size_t(oc)] += x * wrow[oc];
              }
            }
          }
          S* op = out.v.data() + (size_t(oy) * l.out_w + ox) * OC;
          for (int oc = 0; oc < OC; ++oc) op[oc] = acc[size_t(oc)];
        }
      break;
    }
    case LayerKind::TConv2d: {
      const int IC = l.in_c, OC = l.out_c;
      std::vector<S> acc(static_cast<size_t>(OC));
      for (int oy = 0; oy < l.out_h; ++oy) {
        int kys[16], iys[16], n_ky = 0;
        for (int ky = 0; ky < K; ++ky) {
          const int t = oy + P - ky;
          if (t >= 0 && t % ST == 0 && t / ST < l.in_h) {
            kys[n_ky] = ky;
            iys[n_ky] = t / ST;
            ++n_ky;
          }
        }
        for (int ox = 0; ox < l.out_w; ++ox) {
          if (OC == 1) {  // single output channel: contiguous dot over ic
            S acc0 = l.b[0];
            for (int k = 0; k < n_ky; ++k) {
              const int ky = kys[k], iy = iys[k];
              for (int kx = 0; kx < K; ++kx) {
                const int t = ox + P - kx;
                if (t < 0 || t % ST != 0 || t / ST >= l.in_w) continue;
                const S* ip = in.v.data() + (size_t(iy) * l.in_w + t / ST) * IC;
                const S* wp = l.W.data() + (size_t(ky) * K + kx) * IC;
                for (int ic = 0; ic < IC; ++ic) acc0 += ip[ic] * wp[ic];
              }
            }
            out.v[size_t(oy) * l.out_w + ox] = acc0;
            continue;
          }
          for (int oc = 0; oc < OC; ++oc) acc[size_t(oc)] = l.b[size_t(oc)];
          for (int k = 0; k < n_ky; ++k) {
            const int ky = kys[k], iy = iys[k];
            for (int kx = 0; kx < K; ++kx) {
              const int t = ox + P - kx;
              if (t < 0 || t % ST != 0 || t / ST >= l.in_w) continue;
              const int ix = t / ST;
              const S* ip = in.v.data() + (size_t(iy) * l.in_w + ix) * IC;
              const S* wp = l.W.data() + (size_t(ky) * K + kx) * IC * OC;
              for (int ic = 0; ic < IC; ++ic) {
                const S x = ip[ic];
                const S* wrow = wp + size_t(ic) * OC;
                for (int oc = 0; oc < OC; ++oc) acc[size_t(oc)] += x * wrow[oc];
              }
            }
          }
          S* op = out.v.data() + (size_t(oy) * l.out_w + ox) * OC;
          for (int oc = 0; oc < OC; ++oc) op[oc] = acc[size_t(oc)];
        }
      }
      break;
    }
    case LayerKind::Dense: {
      for (int u = 0; u < l.out_c; ++u) {
        S acc = l.b[size_t(u)];
        const S* wp = l.W.data() + size_t(u) * l.in_c;
        for (int i = 0; i < l.in_c; ++i) acc += wp[i] * in.v[size_t(i)];
        out.v[size_t(u)] = acc;
      }
      break;
    }
    case LayerKind::Flatten:
      out.v = in.v;
      break;
    case LayerKind::Relu:
      for (size_t i = 0; i < in.v.size(); ++i)
        out.v[i] = in.v[i] > S(0) ? in.v[i] : S(0);
      break;
    case LayerKind::Clamp01:
      for (size_t i = 0; i < in.v.size(); ++i)
        out.v[i] = std::clamp(in.v[i], S(0), S(1));
      break;
  }
  return out;
}

template <typename S>
struct LayerGrad {
  std::vector<S> dW, db;
};

// Computes input gradient and accumulates parameter gradients.
template <typename S>
Tensor<S> layer_backward(const LayerState<S>& l, const Tensor<S>& in,
                         const Tensor<S>& dout, LayerGrad<S>& g) {
  Tensor<S> din = Tensor<S>::zeros(l.in_h, l.in_w, l.in_c);
  if (g.dW.size() != l.W.size()) g.dW.assign(l.W.size(), S(0));
  if (g.db.size() != l.b.size()) g.db.assign(l.b.size(), S(0));
  const int K = l.spec.kernel, ST = l.spec.stride, P = l.spec.pad;
  switch (l.spec.kind) {
    case LayerKind::Conv2d: {
      const int IC = l.in_c, OC = l.out_c;
      for (int oy = 0; oy < l.out_h; ++oy)
        for (int ox = 0; ox < l.out_w; ++ox) {
          const S* go = dout.v.data() + (size_t(oy) * l.out_w + ox) * OC;
          for (int oc = 0; oc < OC; ++oc) g.db[size_t(oc)] += go[oc];
          for (int ky = 0; ky < K; ++ky) {
            const int iy = oy * ST - P + ky;
            if (iy < 0 || iy >= l.in_h) continue;
            for (int kx = 0; kx < K; ++kx) {
              const int ix = ox * ST - P + kx;
              if (ix < 0 || ix >= l.in_w) continue;
              const size_t ibase = (size_t(iy) * l.in_w + ix) * IC;
              const size_t woff = (size_t(ky) * K + kx) * IC * OC;
              for (int ic = 0; ic < IC; ++ic) {
                const S* wrow = l.W.data() + woff + size_t(ic) * OC;
                S* gwrow = g.dW.data() + woff + size_t(ic) * OC;
                const S x = in.v[ibase + ic];
                S acc = S(0);
                for (int oc = 0; oc < OC; ++oc) {
                  acc += go[oc] * wrow[oc];
                  gwrow[oc] += x * go[oc];
                }
                din.v[ibase + ic] += acc;
              }
            }
          }
        }
      break;
    }
    case LayerKind::TConv2d: {
      const int IC = l.in_c, OC = l.out_c;
      for (int oy = 0; oy < l.out_h; ++oy) {
        int kys[16], iys[16], n_ky = 0;
        for (int ky = 0; ky < K; ++ky) {
          const int t = oy + P - ky;
          if (t >= 0 && t % ST == 0 && t / ST < l.in_h) {
            kys[n_ky] = ky;
            iys[n_ky] = t / ST;
            ++n_ky;
          }
        }
        for (int ox = 0; ox < l.out_w; ++ox) {
          const S* go = dout.v.data() + (size_t(oy) * l.out_w + ox) * OC;
          for (int oc = 0; oc < OC; ++oc) g.db[size_t(oc)] += go[oc];
          if (OC == 1) {
            const S go0 = go[0];
            if (go0 == S(0)) continue;
            for (int k = 0; k < n_ky; ++k) {
              const int ky = kys[k], iy = iys[k];
              for (int kx = 0; kx < K; ++kx) {
                const int t = ox + P - kx;
                if (t < 0 || t % ST != 0 || t / ST >= l.in_w) continue;
                const size_t ibase = (size_t(iy) * l.in_w + t / ST) * IC;
                const size_t woff = (size_t(ky) * K + kx) * IC;
                const S* wp = l.W.data() + woff;
                S* gwp = g.dW.data() + woff;
                for (int ic = 0; ic < IC; ++ic) {
                  din.v[ibase + ic] += go0 * wp[ic];
                  gwp[ic] += go0 * in.v[ibase + ic];
                }
              }
            }
            continue;
          }
          for (int k = 0; k < n_ky; ++k) {
            const int ky = kys[k], iy = iys[k];
            for (int kx = 0; kx < K; ++kx) {
              const int t = ox + P - kx;
              if (t < 0 || t % ST != 0 || t / ST >= l.in_w) continue;
              const int ix = t / ST;
              const size_t ibase = (size_t(iy) * l.in_w + ix) * IC;
              const size_t woff = (size_t(ky) * K + kx) * IC * OC;
              for (int ic = 0; ic < IC; ++ic) {
                const S* wrow = l.W.data() + woff + size_t(ic) * OC;
                S* gwrow = g.dW.data() + woff + size_t(ic) * OC;
                const S x = in.v[ibase + ic];
                S acc = S(0);
                for (int oc = 0; oc < OC; ++oc) {
                  acc += go[oc] * wrow[oc];
                  gwrow[oc] += x * go[oc];
                }
                din.v[ibase + ic] += acc;
              }
            }
          }
        }
      }
      break;
    }
    case LayerKind::Dense: {
      for (int u = 0; u < l.out_c; ++u) {
        const S go = dout.v[size_t(u)];
        g.db[size_t(u)] += go;
        const S* wp = l.W.data() + size_t(u) * l.in_c;
        S* gwp = g.dW.data() + size_t(u) * l.in_c;
        for (int i = 0; i < l.in_c; ++i) {
          din.v[size_t(i)] += go * wp[i];
          gwp[i] += go * in.v[size_t(i)];
        }
      }
      break;
    }
    case LayerKind::Flatten:
      din.v = dout.v;
      break;
    case LayerKind::Relu:
      for (size_t i = 0; i < in.v.size(); ++i)
        din.v[i] = in.v[i] > S(0) ? dout.v[i] : S(0);
      break;
    case LayerKind::Clamp01:
      for (size_t i = 0; i < in.v.size(); ++i)
        din.v[i] = (in.v[i] >= S(0) && in.v[i] <= S(1)) ? dout.v[i] : S(0);
      break;
  }
  return din;
}

}  // namespace detail

template <typename S>
struct ForwardCache {
  // input tensor of every layer, in declaration order, plus the concat input
  std::vector<std::vector<Tensor<S>>> branch_inputs;
  std::vector<Tensor<S>> branch_outputs;
  std::vector<Tensor<S>> trunk_inputs;
  Tensor<S> output;
};

template <typename S>
Tensor<S> forward(const Network<S>& net, const std::vector<Tensor<S>>& inputs,
                  ForwardCache<S>* cache = nullptr) {
  if (inputs.size() != net.branches.size())
    throw ShapeMismatch("wrong number of input branches");
  if (cache) {
    cache->branch_inputs.assign(net.branches.size(), {});
    cache->branch_outputs.clear();
    cache->trunk_inputs.clear();
  }

  std::vector<Tensor<S>> branch_outputs;
  branch_outputs.reserve(net.branches.size());
  for (size_t bi = 0; bi < net.branches.size(); ++bi) {
    const auto& bs = net.spec.branches[bi];
    if (inputs[bi].h != bs.in_h || inputs[bi].w != bs.in_w || inputs[bi].c != bs.in_c)
      throw ShapeMismatch("input shape mismatch on branch " + bs.name);
    Tensor<S> x = inputs[bi];
    for (const auto& l : net.branches[bi]) {
      if (cache) cache->branch_inputs[bi].push_back(x);
      x = detail::layer_forward(l, x);
    }
    branch_outputs.push_back(std::move(x));
  }

  Tensor<S> cat = Tensor<S>::zeros(net.cat_h, net.cat_w, net.cat_c);
  for (size_t bi = 0; bi < net.branches.size(); ++bi) {
    const Tensor<S>& bo = branch_outputs[bi];
    const int off = net.branch_cat_offset[bi];
    if (net.branch_is_tiled[bi]) {
      for (int y = 0; y < net.cat_h; ++y)
        for (int x = 0; x < net.cat_w; ++x)
          for (int ch = 0; ch < bo.c; ++ch)
            cat.at(y, x, off + ch) = bo.v[size_t(ch)];
    } else {
      for (int y = 0; y < net.cat_h; ++y)
        for (int x = 0; x < net.cat_w; ++x)
          for (int ch = 0; ch < bo.c; ++ch)
            cat.at(y, x, off + ch) = bo.at(y, x, ch);
    }
  }
  if (cache) cache->branch_outputs = std::move(branch_outputs);

  Tensor<S> x = std::move(cat);
  for (const auto& l : net.trunk) {
    if (cache) cache->trunk_inputs.push_back(x);
    x = detail::layer_forward(l, x);
  }
  if (cache) cache->output = x;
  return x;
}

template <typename S>
struct Gradients {
  std::vector<std::vector<detail::LayerGrad<S>>> branches;
  std::vector<detail::LayerGrad<S>> trunk;

  static Gradients zeros_like(const Network<S>& net) {
    Gradients g;
    g.branches.resize(net.branches.size());
    for (size_t bi = 0; bi < net.branches.size(); ++bi) {
      g.branches[bi].resize(net.branches[bi].size());
      for (size_t li = 0; li < net.branches[bi].size(); ++li) {
        g.branches[bi][li].dW.assign(net.branches[bi][li].W.size(), S(0));
        g.branches[bi][li].db.assign(net.branches[bi][li].b.size(), S(0));
      }
    }
    g.trunk.resize(net.trunk.size());
    for (size_t li = 0; li < net.trunk.size(); ++li) {
      g.trunk[li].dW.assign(net.trunk[li].W.size(), S(0));
      g.trunk[li].db.assign(net.trunk[li].b.size(), S(0));
    }
    return g;
  }

  void scale(S s) {
    auto sc = [s](std::vector<S>& v) {
      for (auto& x : v) x *= s;
    };
    for (auto& br : branches)
      for (auto& l : br) {
        sc(l.dW);
        sc(l.db);
      }
    for (auto& l : trunk) {
      sc(l.dW);
      sc(l.db);
    }
  }
};

// Exact reverse-mode gradients of a scalar-valued loss whose gradient w.r.t.
// the network output is dout. Accumulates into g.
template <typename S>
void backward(const Network<S>& net, const ForwardCache<S>& cache,
              const Tensor<S>& dout, Gradients<S>& g) {
  Tensor<S> grad = dout;
  for (size_t li = net.trunk.size(); li-- > 0;)
    grad = detail::layer_backward(net.trunk[li], cache.trunk_inputs[li], grad,
                                  g.trunk[li]);

  // split concat gradient back into branch tails
  for (size_t bi = 0; bi < net.branches.size(); ++bi) {
    const Tensor<S>& bo = cache.branch_outputs[bi];
    const int off = net.branch_cat_offset[bi];
    Tensor<S> bg = Tensor<S>::zeros(bo.h, bo.w, bo.c);
    if (net.branch_is_tiled[bi]) {
      for (int y = 0; y < net.cat_h; ++y)
        for (int x = 0; x < net.cat_w; ++x)
          for (int ch = 0; ch < bo.c; ++ch)
            bg.v[size_t(ch)] += grad.at(y, x, off + ch);
    } else {
      for (int y = 0; y < net.cat_h; ++y)
        for (int x = 0; x < net.cat_w; ++x)
          for (int ch = 0; ch < bo.c; ++ch)
            bg.at(y, x, ch) = grad.at(y, x, off + ch);
    }
    for (size_t li = net.branches[bi].size(); li-- > 0;)
      bg = detail::layer_backward(net.branches[bi][li], cache.branch_inputs[bi][li],
                                  bg, g.branches[bi][li]);
  }
}

// ---- loss, optimizer, training ----------------------------------------------

enum class LossKind { MSE, L1 };

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 16;
  int iterations = 1000;
  LossKind loss = LossKind::MSE;
  uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigInvalid("learning_rate must be >= 0");
    if (batch_size < 1) throw ConfigInvalid("batch_size must be >= 1");
    if (iterations < 0) throw ConfigInvalid("iterations must be >= 0");
  }
};

// Returns loss and writes d(loss)/d(pred) into dgrad. Reductions in double.
template <typename S>
double loss_and_grad(LossKind kind, const Tensor<S>& pred, const Tensor<S>& target,
                     Tensor<S>& dgrad) {
  if (!pred.same_shape(target)) throw ShapeMismatch("loss: pred/target shapes differ");
  dgrad = Tensor<S>::zeros(pred.h, pred.w, pred.c);
  const double inv_n = 1.0 / double(pred.count());
  double acc = 0.0;
  if (kind == LossKind::MSE) {
    for (size_t i = 0; i < pred.v.size(); ++i) {
      const double d = double(pred.v[i]) - double(target.v[i]);
      acc += d * d;
      dgrad.v[i] = S(2.0 * d * inv_n);
    }
  } else {
    for (size_t i = 0; i < pred.v.size(); ++i) {
      const double d = double(pred.v[i]) - double(target.v[i]);
      acc += std::abs(d);
      dgrad.v[i] = S((d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) * inv_n);
    }
  }
  return acc * inv_n;
}

// Adaptive-moment update, beta = (0.9, 0.999), eps = 1e-8.
template <typename S>
struct AdamState {
  struct Slot {
    std::vector<S> mW, vW, mb, vb;
  };
  std::vector<std::vector<Slot>> branches;
  std::vector<Slot> trunk;
  int64_t t = 0;

  static AdamState init(const Network<S>& net) {
    AdamState st;
    st.branches.resize(net.branches.size());
    for (size_t bi = 0; bi < net.branches.size(); ++bi) {
      st.branches[bi].resize(net.branches[bi].size());
      for (size_t li = 0; li < net.branches[bi].size(); ++li) {
        auto& s = st.branches[bi][li];
        const auto& l = net.branches[bi][li];
        s.mW.assign(l.W.size(), S(0));
        s.vW.assign(l.W.size(), S(0));
        s.mb.assign(l.b.size(), S(0));
        s.vb.assign(l.b.size(), S(0));
      }
    }
    st.trunk.resize(net.trunk.size());
    for (size_t li = 0; li < net.trunk.size(); ++li) {
      auto& s = st.trunk[li];
      const auto& l = net.trunk[li];
      s.mW.assign(l.W.size(), S(0));
      s.vW.assign(l.W.size(), S(0));
      s.mb.assign(l.b.size(), S(0));
      s.vb.assign(l.b.size(), S(0));
    }
    return st;
  }
};

namespace detail {

template <typename S>
void adam_apply(std::vector<S>& theta, const std::vector<S>& grad,
                std::vector<S>& m, std::vector<S>& v, double lr, int64_t t) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, double(t));
  const double c2 = 1.0 - std::pow(b2, double(t));
  for (size_t i = 0; i < theta.size(); ++i) {
    const double g = double(grad[i]);
    m[i] = S(b1 * double(m[i]) + (1.0 - b1) * g);
    v[i] = S(b2 * double(v[i]) + (1.0 - b2) * g * g);
    const double mhat = double(m[i]) / c1;
    const double vhat = double(v[i]) / c2;
    theta[i] = S(double(theta[i]) - lr * mhat / (std::sqrt(vhat) + eps));
  }
}

}  // namespace detail

template <typename S>
void adam_step(Network<S>& net, const Gradients<S>& g, AdamState<S>& st, double lr) {
  ++st.t;
  for (size_t bi = 0; bi < net.branches.size(); ++bi)
    for (size_t li = 0; li < net.branches[bi].size(); ++li) {
      auto& l = net.branches[bi][li];
      if (!l.trainable || !l.has_params()) continue;
      detail::adam_apply(l.W, g.branches[bi][li].dW, st.branches[bi][li].mW,
                         st.branches[bi][li].vW, lr, st.t);
      detail::adam_apply(l.b, g.branches[bi][li].db, st.branches[bi][li].mb,
                         st.branches[bi][li].vb, lr, st.t);
    }
  for (size_t li = 0; li < net.trunk.size(); ++li) {
    auto& l = net.trunk[li];
    if (!l.trainable || !l.has_params()) continue;
    detail::adam_apply(l.W, g.trunk[li].dW, st.trunk[li].mW, st.trunk[li].vW, lr, st.t);
    detail::adam_apply(l.b, g.trunk[li].db, st.trunk[li].mb, st.trunk[li].vb, lr, st.t);
  }
}

template <typename S>
struct Sample {
  std::vector<Tensor<S>> inputs;
  Tensor<S> target;
};

// One optimizer update on a batch; returns the batch loss. With threads > 1
// the per-sample gradients are computed in parallel but reduced in sample
// order, so the result is bitwise identical for any thread count.
template <typename S>
double train_step(Network<S>& net, const std::vector<Sample<S>>& batch,
                  const TrainConfig& cfg, AdamState<S>& st, int threads = 1) {
  cfg.validate();
  if (batch.empty()) throw ConfigInvalid("empty batch");
  Gradients<S> g = Gradients<S>::zeros_like(net);
  double loss = 0.0;

  if (threads <= 1 || batch.size() == 1) {
    for (const auto& s : batch) {
      ForwardCache<S> cache;
      Tensor<S> pred = forward(net, s.inputs, &cache);
      Tensor<S> dgrad;
      loss += loss_and_grad(cfg.loss, pred, s.target, dgrad);
      backward(net, cache, dgrad, g);
    }
  } else {
    std::vector<Gradients<S>> per_sample(batch.size());
    std::vector<double> per_loss(batch.size(), 0.0);
    parallel_for(int(batch.size()), threads, [&](int i) {
      per_sample[size_t(i)] = Gradients<S>::zeros_like(net);
      ForwardCache<S> cache;
      Tensor<S> pred = forward(net, batch[size_t(i)].inputs, &cache);
      Tensor<S> dgrad;
      per_loss[size_t(i)] =
          loss_and_grad(cfg.loss, pred, batch[size_t(i)].target, dgrad);
      backward(net, cache, dgrad, per_sample[size_t(i)]);
    });
    auto add_into = [](std::vector<S>& dst, const std::vector<S>& src) {
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };
    for (size_t i = 0; i < batch.size(); ++i) {
      loss += per_loss[i];
      for (size_t bi = 0; bi < g.branches.size(); ++bi)
        for (size_t li = 0; li < g.branches[bi].size(); ++li) {
          add_into(g.branches[bi][li].dW, per_sample[i].branches[bi][li].dW);
          add_into(g.branches[bi][li].db, per_sample[i].branches[bi][li].db);
        }
      for (size_t li = 0; li < g.trunk.size(); ++li) {
        add_into(g.trunk[li].dW, per_sample[i].trunk[li].dW);
        add_into(g.trunk[li].db, per_sample[i].trunk[li].db);
      }
    }
  }

  loss /= double(batch.size());
  if (!std::isfinite(loss)) throw NonFiniteLoss("training loss is not finite");
  g.scale(S(1.0 / double(batch.size())));
  adam_step(net, g, st, cfg.learning_rate);
  return loss;
}

// Leaves only the final parameterized layer trainable.
template <typename S>
void freeze_all_but_last(Network<S>& net) {
  LayerState<S>* last = nullptr;
  int n_param_layers = 0;
  net.for_each_layer([&](LayerState<S>& l) {
    if (l.has_params()) {
      last = &l;
      ++n_param_layers;
    }
  });
  if (n_param_layers < 2) throw ConfigInvalid("freeze requires >= 2 parameterized layers");
  net.for_each_layer([&](LayerState<S>& l) { l.trainable = false; });
  last->trainable = true;
}

// ---- checkpoints: magic "MDEN", length-prefixed JSON spec, then the flat
// little-endian f32 parameter buffer in declaration order.

template <typename S>
void save_network(const Network<S>& net, std::ostream& os) {
  const std::string spec = spec_to_json(net.spec).dump();
  io::write_magic(os, "MDEN");
  io::write_u32(os, uint32_t(spec.size()));
  os.write(spec.data(), std::streamsize(spec.size()));
  net.for_each_layer([&](const LayerState<S>& l) {
    for (S x : l.W) io::write_f32(os, float(x));
    for (S x : l.b) io::write_f32(os, float(x));
  });
  if (!os) throw IoError("failed writing network checkpoint");
}

template <typename S = float>
Network<S> load_network(std::istream& is) {
  io::expect_magic(is, "MDEN");
  const uint32_t n = io::read_u32(is);
  std::string spec_str(n, '\0');
  is.read(spec_str.data(), n);
  if (!is) throw IoError("truncated network checkpoint");
  Network<S> net = build_network<S>(spec_from_json(nlohmann::json::parse(spec_str)));
  net.for_each_layer([&](LayerState<S>& l) {
    for (auto& x : l.W) x = S(io::read_f32(is));
    for (auto& x : l.b) x = S(io::read_f32(is));
  });
  return net;
}

template <typename S>
void save_network_file(const Network<S>& net, const std::string& path) {
  auto os = io::open_out(path);
  save_network(net, os);
}

template <typename S = float>
Network<S> load_network_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingCheckpoint("missing checkpoint: " + path);
  return load_network<S>(is);
}

}  // namespace mfopt::nn
