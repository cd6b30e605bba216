#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mfopt/nn.hpp"
#include "mfopt/rng.hpp"

using namespace mfopt;
using nn::LayerSpec;

namespace {

// Central finite differences (h = 1e-3) against the analytic reverse-mode
// gradients, checked parameter by parameter. Runs in double so the oracle
// noise floor sits far below the 1e-4 acceptance tolerance.
void check_gradients(nn::Network<double>& net,
                     const std::vector<nn::Tensor<double>>& inputs,
                     const nn::Tensor<double>& target, nn::LossKind loss_kind,
                     double tol = 1e-4) {
  nn::ForwardCache<double> cache;
  auto pred = nn::forward(net, inputs, &cache);
  nn::Tensor<double> dgrad;
  nn::loss_and_grad(loss_kind, pred, target, dgrad);
  auto grads = nn::Gradients<double>::zeros_like(net);
  nn::backward(net, cache, dgrad, grads);

  auto loss_value = [&] {
    auto p = nn::forward(net, inputs);
    nn::Tensor<double> unused;
    return nn::loss_and_grad(loss_kind, p, target, unused);
  };

  const double h = 1e-3;
  int checked = 0, skipped = 0;
  auto fd = [&](std::vector<double>& theta, size_t i, double step) {
    const double orig = theta[i];
    theta[i] = orig + step;
    const double lp = loss_value();
    theta[i] = orig - step;
    const double lm = loss_value();
    theta[i] = orig;
    return (lp - lm) / (2.0 * step);
  };
  auto check_buffer = [&](std::vector<double>& theta, const std::vector<double>& g) {
    for (size_t i = 0; i < theta.size(); ++i) {
      const double numeric = fd(theta, i, h);
      const double analytic = g[i];
      const double err = std::abs(analytic - numeric);
      const double scale = std::max(std::abs(analytic), std::abs(numeric));
      if (err > tol * scale + 1e-8) {
        // relu / L1 / clamp kinks make the loss piecewise smooth; a secant
        // that straddles a kink is not a valid derivative estimate. A kink
        // artifact shows up as step-size dependence or disappears as the
        // interval shrinks past the kink; a genuine gradient bug persists at
        // every step size.
        const double numeric_half = fd(theta, i, h / 2.0);
        const double numeric_small = fd(theta, i, h / 16.0);
        const bool inconsistent =
            std::abs(numeric_half - numeric) >
            0.25 * std::max(std::abs(numeric), std::abs(numeric_half)) + 1e-9;
        const bool small_step_agrees =
            std::abs(numeric_small - analytic) <=
            tol * std::max(std::abs(analytic), std::abs(numeric_small)) + 1e-7;
        if (inconsistent || small_step_agrees) {
          ++skipped;
          continue;
        }
        CAPTURE(analytic);
        CAPTURE(numeric);
        FAIL_CHECK("gradient mismatch: analytic=" << analytic
                                                  << " numeric=" << numeric);
      }
      ++checked;
    }
  };

  for (size_t bi = 0; bi < net.branches.size(); ++bi)
    for (size_t li = 0; li < net.branches[bi].size(); ++li) {
      check_buffer(net.branches[bi][li].W, grads.branches[bi][li].dW);
      check_buffer(net.branches[bi][li].b, grads.branches[bi][li].db);
    }
  for (size_t li = 0; li < net.trunk.size(); ++li) {
    check_buffer(net.trunk[li].W, grads.trunk[li].dW);
    check_buffer(net.trunk[li].b, grads.trunk[li].db);
  }
  CHECK(checked > 0);
  CHECK(skipped <= checked / 20);  // kink hits must stay rare
}

nn::Tensor<double> random_tensor(Rng& rng, int h, int w, int c, double lo = -1.0,
                                 double hi = 1.0) {
  auto t = nn::Tensor<double>::zeros(h, w, c);
  for (auto& v : t.v) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("dense layer with identity weights is the identity map") {
  nn::NetworkSpec spec;
  spec.seed = 1;
  spec.branches = {{"in", 1, 1, 3, {LayerSpec::dense(3)}}};
  auto net = nn::build_network<float>(spec);
  auto& l = net.branches[0][0];
  std::fill(l.W.begin(), l.W.end(), 0.0f);
  for (int i = 0; i < 3; ++i) l.W[size_t(i) * 3 + i] = 1.0f;
  std::fill(l.b.begin(), l.b.end(), 0.0f);

  auto in = nn::Tensor<float>::vec({0.3f, -1.5f, 2.0f});
  auto out = nn::forward(net, {in});
  CHECK(out.v == in.v);
}

TEST_CASE("relu zeroes negative inputs") {
  nn::NetworkSpec spec;
  spec.seed = 1;
  spec.branches = {{"in", 1, 1, 4, {LayerSpec::relu()}}};
  auto net = nn::build_network<float>(spec);
  auto out = nn::forward(net, {nn::Tensor<float>::vec({-1.f, -0.5f, -2.f, -0.01f})});
  for (float v : out.v) CHECK(v == 0.0f);
}

TEST_CASE("1x1 conv with a known kernel matches the hand-computed map") {
  nn::NetworkSpec spec;
  spec.seed = 1;
  spec.branches = {{"img", 4, 4, 1, {LayerSpec::conv(1, 1, 1, 0)}}};
  auto net = nn::build_network<float>(spec);
  net.branches[0][0].W = {2.0f};
  net.branches[0][0].b = {0.5f};
  auto in = nn::Tensor<float>::zeros(4, 4, 1);
  for (size_t i = 0; i < in.v.size(); ++i) in.v[i] = float(i) * 0.25f;
  auto out = nn::forward(net, {in});
  for (size_t i = 0; i < out.v.size(); ++i)
    CHECK(out.v[i] == doctest::Approx(2.0f * in.v[i] + 0.5f));
}

TEST_CASE("3x3 conv against an explicit correlation oracle") {
  nn::NetworkSpec spec;
  spec.seed = 5;
  spec.branches = {{"img", 5, 5, 1, {LayerSpec::conv(1, 3, 1, 1)}}};
  auto net = nn::build_network<float>(spec);
  Rng rng(11);
  for (auto& w : net.branches[0][0].W) w = float(rng.uniform(-1, 1));
  net.branches[0][0].b = {0.25f};
  auto in = nn::Tensor<float>::zeros(5, 5, 1);
  for (auto& v : in.v) v = float(rng.uniform(-1, 1));
  auto out = nn::forward(net, {in});

  const auto& W = net.branches[0][0].W;
  for (int oy = 0; oy < 5; ++oy)
    for (int ox = 0; ox < 5; ++ox) {
      double acc = 0.25;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int iy = oy - 1 + ky, ix = ox - 1 + kx;
          if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
          acc += double(W[size_t(ky) * 3 + kx]) * double(in.at(iy, ix, 0));
        }
      CHECK(out.at(oy, ox, 0) == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("zero loss gradient produces zero parameter gradients") {
  nn::NetworkSpec spec;
  spec.seed = 3;
  spec.branches = {{"in", 6, 6, 1,
                    {LayerSpec::conv(2, 3, 2, 1), LayerSpec::relu(),
                     LayerSpec::flatten(), LayerSpec::dense(4)}}};
  auto net = nn::build_network<double>(spec);
  Rng rng(4);
  auto in = random_tensor(rng, 6, 6, 1);
  nn::ForwardCache<double> cache;
  auto pred = nn::forward(net, {in}, &cache);

  auto dzero = nn::Tensor<double>::zeros(pred.h, pred.w, pred.c);
  auto g = nn::Gradients<double>::zeros_like(net);
  nn::backward(net, cache, dzero, g);
  for (const auto& br : g.branches)
    for (const auto& l : br) {
      for (double v : l.dW) CHECK(v == 0.0);
      for (double v : l.db) CHECK(v == 0.0);
    }

  // MSE at pred == target also has zero gradient
  nn::Tensor<double> dgrad;
  const double loss = nn::loss_and_grad(nn::LossKind::MSE, pred, pred, dgrad);
  CHECK(loss == 0.0);
  for (double v : dgrad.v) CHECK(v == 0.0);
}

TEST_CASE("finite differences validate every layer type on 20 random nets") {
  for (int trial = 0; trial < 20; ++trial) {
    Rng rng(1000 + uint64_t(trial) * 77);
    nn::NetworkSpec spec;
    spec.seed = 50 + uint64_t(trial);

    const bool spatial_concat = (trial % 2 == 1);
    const bool clamp_head = (trial % 2 == 1);
    const int img = 5 + trial % 3;  // 5..7
    const int in_c = 1 + trial % 2;

    nn::BranchSpec imgb{"img", img, img, in_c, {}};
    imgb.layers.push_back(LayerSpec::conv(2, 3, 2, 1));
    imgb.layers.push_back(LayerSpec::relu());
    if (trial % 3 == 0) imgb.layers.push_back(LayerSpec::tconv(2, 4, 2, 1));
    if (!spatial_concat) imgb.layers.push_back(LayerSpec::flatten());

    nn::BranchSpec vecb{"vec", 1, 1, 2, {LayerSpec::dense(3), LayerSpec::relu()}};
    spec.branches = {imgb, vecb};

    if (spatial_concat) {
      spec.trunk.push_back(LayerSpec::conv(2, 3, 1, 1));
      spec.trunk.push_back(LayerSpec::relu());
      spec.trunk.push_back(LayerSpec::tconv(1, 4, 2, 1));
      spec.trunk.push_back(LayerSpec::flatten());
    }
    spec.trunk.push_back(LayerSpec::dense(3));
    spec.trunk.push_back(LayerSpec::relu());
    spec.trunk.push_back(LayerSpec::dense(1));
    if (clamp_head) spec.trunk.push_back(LayerSpec::clamp01());

    auto net = nn::build_network<double>(spec);
    CHECK(net.param_count() < 3000);

    if (clamp_head) {
      // pin the pre-clamp output well inside (0, 1) so the finite-difference
      // probe never crosses the clamp kink
      auto& head = net.trunk[net.trunk.size() - 2];
      for (auto& w : head.W) w *= 0.01;
      head.b[0] = 0.5;
    }

    std::vector<nn::Tensor<double>> inputs = {random_tensor(rng, img, img, in_c),
                                              random_tensor(rng, 1, 1, 2)};
    const auto probe = nn::forward(net, inputs);
    auto target = random_tensor(rng, probe.h, probe.w, probe.c, 0.0, 1.0);
    const auto loss = (trial % 2 == 0) ? nn::LossKind::MSE : nn::LossKind::L1;
    check_gradients(net, inputs, target, loss);
  }
}

TEST_CASE("adaptive-moment training solves 1D linear regression") {
  nn::NetworkSpec spec;
  spec.seed = 9;
  spec.branches = {{"x", 1, 1, 1, {LayerSpec::dense(1)}}};
  auto net = nn::build_network<float>(spec);

  std::vector<nn::Sample<float>> batch;
  for (double x : {-1.0, -0.5, 0.0, 0.5, 1.0}) {
    nn::Sample<float> s;
    s.inputs = {nn::Tensor<float>::vec({float(x)})};
    s.target = nn::Tensor<float>::vec({float(2.0 * x)});
    batch.push_back(s);
  }

  nn::TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.batch_size = int(batch.size());
  auto adam = nn::AdamState<float>::init(net);
  std::vector<double> losses;
  for (int it = 0; it < 100; ++it)
    losses.push_back(nn::train_step(net, batch, cfg, adam));

  CHECK(losses.back() < 1e-3);
  // steady descent toward the closed-form optimum w=2, b=0; near convergence
  // the adaptive steps oscillate below the target, so only the descent phase
  // is required to be monotone window over window
  for (size_t i = 0; i + 10 <= 40; i += 10) CHECK(losses[i + 10] < losses[i]);
  CHECK(net.branches[0][0].W[0] == doctest::Approx(2.0f).epsilon(0.05));
}

TEST_CASE("learning rate zero leaves parameters bitwise unchanged") {
  nn::NetworkSpec spec;
  spec.seed = 17;
  spec.branches = {{"x", 1, 1, 2, {LayerSpec::dense(4), LayerSpec::relu(), LayerSpec::dense(1)}}};
  auto net = nn::build_network<float>(spec);
  auto before_w = net.branches[0][0].W;

  nn::Sample<float> s;
  s.inputs = {nn::Tensor<float>::vec({0.5f, -0.25f})};
  s.target = nn::Tensor<float>::vec({3.0f});
  nn::TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 1;
  auto adam = nn::AdamState<float>::init(net);
  for (int i = 0; i < 5; ++i) nn::train_step(net, {s}, cfg, adam);
  CHECK(net.branches[0][0].W == before_w);
}

TEST_CASE("identical seeds give identical training trajectories") {
  auto run = [] {
    nn::NetworkSpec spec;
    spec.seed = 33;
    spec.branches = {{"x", 1, 1, 2, {LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dense(1)}}};
    auto net = nn::build_network<float>(spec);
    nn::TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 4;
    auto adam = nn::AdamState<float>::init(net);
    Rng rng(5);
    for (int it = 0; it < 30; ++it) {
      std::vector<nn::Sample<float>> batch;
      for (int b = 0; b < 4; ++b) {
        nn::Sample<float> s;
        const float x0 = float(rng.uniform(-1, 1)), x1 = float(rng.uniform(-1, 1));
        s.inputs = {nn::Tensor<float>::vec({x0, x1})};
        s.target = nn::Tensor<float>::vec({x0 - x1});
        batch.push_back(s);
      }
      nn::train_step(net, batch, cfg, adam);
    }
    return net.branches[0][0].W;
  };
  CHECK(run() == run());
}

TEST_CASE("freeze_all_but_last trains only the head") {
  nn::NetworkSpec spec;
  spec.seed = 41;
  spec.branches = {{"x", 1, 1, 2,
                    {LayerSpec::dense(6), LayerSpec::relu(), LayerSpec::dense(4),
                     LayerSpec::relu()}}};
  spec.trunk = {LayerSpec::dense(1)};
  auto net = nn::build_network<float>(spec);
  nn::freeze_all_but_last(net);

  const auto w0 = net.branches[0][0].W;
  const auto w1 = net.branches[0][2].W;
  const auto head0 = net.trunk[0].W;

  nn::TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 1;
  auto adam = nn::AdamState<float>::init(net);
  nn::Sample<float> s;
  s.inputs = {nn::Tensor<float>::vec({0.7f, -0.2f})};
  s.target = nn::Tensor<float>::vec({1.5f});
  for (int i = 0; i < 100; ++i) nn::train_step(net, {s}, cfg, adam);

  CHECK(net.branches[0][0].W == w0);  // bitwise frozen
  CHECK(net.branches[0][2].W == w1);
  CHECK(net.trunk[0].W != head0);

  // forward output moved
  auto before = nn::build_network<float>(spec);
  CHECK(nn::forward(net, s.inputs).v[0] != nn::forward(before, s.inputs).v[0]);
}

TEST_CASE("checkpoint round-trip preserves spec and parameters") {
  nn::NetworkSpec spec;
  spec.seed = 77;
  spec.branches = {{"img", 8, 8, 1,
                    {LayerSpec::conv(4, 3, 2, 1), LayerSpec::relu(), LayerSpec::flatten()}},
                   {"vec", 1, 1, 2, {LayerSpec::dense(4)}}};
  spec.trunk = {LayerSpec::dense(2), LayerSpec::relu(), LayerSpec::dense(1, true),
                LayerSpec::clamp01()};
  auto net = nn::build_network<float>(spec);

  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  nn::save_network(net, ss);
  auto back = nn::load_network<float>(ss);

  CHECK(back.param_count() == net.param_count());
  CHECK(back.trunk[2].spec.zero_init);
  Rng rng(2);
  std::vector<nn::Tensor<float>> in;
  {
    auto t = nn::Tensor<float>::zeros(8, 8, 1);
    for (auto& v : t.v) v = float(rng.uniform(0, 1));
    in.push_back(t);
    in.push_back(nn::Tensor<float>::vec({0.1f, -0.4f}));
  }
  CHECK(nn::forward(net, in).v == nn::forward(back, in).v);
}

TEST_CASE("shape mismatches are rejected") {
  nn::NetworkSpec spec;
  spec.seed = 2;
  spec.branches = {{"img", 8, 8, 1, {LayerSpec::conv(2, 3, 2, 1)}}};
  auto net = nn::build_network<float>(spec);
  auto bad = nn::Tensor<float>::zeros(7, 8, 1);
  CHECK_THROWS_AS(nn::forward(net, {bad}), ShapeMismatch);
  CHECK_THROWS_AS(nn::forward(net, {}), ShapeMismatch);

  nn::NetworkSpec s2;
  s2.seed = 2;
  s2.branches = {{"a", 4, 4, 1, {}}, {"b", 5, 5, 1, {}}};
  CHECK_THROWS_AS(nn::build_network<float>(s2), ShapeMismatch);
}

TEST_CASE("zero-initialized head gives exactly zero output") {
  nn::NetworkSpec spec;
  spec.seed = 8;
  spec.branches = {{"x", 1, 1, 3, {LayerSpec::dense(5), LayerSpec::relu()}}};
  spec.trunk = {LayerSpec::dense(1, /*zero=*/true), LayerSpec::clamp01()};
  auto net = nn::build_network<float>(spec);
  Rng rng(6);
  for (int i = 0; i < 10; ++i) {
    auto in = nn::Tensor<float>::vec({float(rng.uniform(-2, 2)),
                                      float(rng.uniform(-2, 2)),
                                      float(rng.uniform(-2, 2))});
    CHECK(nn::forward(net, {in}).v[0] == 0.0f);
  }
}
