#pragma once

#include <cmath>
#include <vector>

#include "mfopt/errors.hpp"
#include "mfopt/grid.hpp"

namespace mfopt {

struct GpParams {
  double signal_var = 1.0;
  double length_scale_cm = 4.0;
  double noise_var = 1e-4;

  void validate() const {
    if (!(signal_var > 0.0) || !(length_scale_cm > 0.0) || !(noise_var >= 0.0))
      throw ConfigInvalid("bad GP hyperparameters");
  }
};

// Exact GP regression over 2D actions with a squared-exponential kernel.
// Observations are standardized internally (the posterior is mapped back), so
// reward scales from different tasks condition the solve equally well.
class GpState {
 public:
  explicit GpState(const GpParams& params = {}) : params_(params) {
    params_.validate();
  }

  void add(const Action& a, double reward) {
    x_.push_back(a);
    y_.push_back(reward);
    refit();
  }

  size_t size() const { return x_.size(); }
  const std::vector<Action>& observed_actions() const { return x_; }
  const std::vector<double>& observed_rewards() const { return y_; }
  const GpParams& params() const { return params_; }

  struct Posterior {
    double mean = 0.0;
    double std = 0.0;
  };

  Posterior posterior(const Action& q) const {
    const size_t n = x_.size();
    if (n == 0) return {y_shift_, std::sqrt(params_.signal_var)};
    std::vector<double> k(n);
    for (size_t i = 0; i < n; ++i) k[i] = kernel(q, x_[i]);
    // v = L^-1 k*
    std::vector<double> v = k;
    for (size_t i = 0; i < n; ++i) {
      double s = v[i];
      for (size_t j = 0; j < i; ++j) s -= chol_[i * n + j] * v[j];
      v[i] = s / chol_[i * n + i];
    }
    double mean_z = 0.0, kvk = 0.0;
    for (size_t i = 0; i < n; ++i) {
      mean_z += v[i] * alpha_partial_[i];
      kvk += v[i] * v[i];
    }
    const double var_z = std::max(0.0, kernel(q, q) - kvk);
    return {y_shift_ + y_scale_ * mean_z, y_scale_ * std::sqrt(var_z)};
  }

 private:
  double kernel(const Action& a, const Action& b) const {
    const double dx = double(a.x) - double(b.x);
    const double dy = double(a.y) - double(b.y);
    const double l2 = params_.length_scale_cm * params_.length_scale_cm;
    return params_.signal_var * std::exp(-(dx * dx + dy * dy) / (2.0 * l2));
  }

  void refit() {
    const size_t n = x_.size();
    y_shift_ = 0.0;
    for (double v : y_) y_shift_ += v;
    y_shift_ /= double(n);
    y_scale_ = 1.0;
    if (n >= 2) {
      double ss = 0.0;
      for (double v : y_) ss += (v - y_shift_) * (v - y_shift_);
      const double sd = std::sqrt(ss / double(n));
      if (sd > 1e-12) y_scale_ = sd;
    }

    std::vector<double> K(n * n);
    for (size_t i = 0; i < n; ++i)
      for (size_t j = 0; j <= i; ++j) {
        const double v = kernel(x_[i], x_[j]);
        K[i * n + j] = v;
        K[j * n + i] = v;
      }

    // Cholesky of K + (noise + jitter) I, escalating jitter on failure.
    double jitter = 0.0;
    for (int attempt = 0;; ++attempt) {
      chol_ = K;
      for (size_t i = 0; i < n; ++i) chol_[i * n + i] += params_.noise_var + jitter;
      if (cholesky_inplace(chol_, n)) break;
      if (attempt >= 8) throw SingularKernel("kernel matrix not positive definite");
      jitter = (jitter == 0.0) ? 1e-10 * params_.signal_var : jitter * 10.0;
    }

    // alpha_partial = L^-1 z where z is the standardized reward vector
    alpha_partial_.assign(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
      double s = (y_[i] - y_shift_) / y_scale_;
      for (size_t j = 0; j < i; ++j) s -= chol_[i * n + j] * alpha_partial_[j];
      alpha_partial_[i] = s / chol_[i * n + i];
    }
  }

  static bool cholesky_inplace(std::vector<double>& a, size_t n) {
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j <= i; ++j) {
        double s = a[i * n + j];
        for (size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
        if (i == j) {
          if (s <= 0.0) return false;
          a[i * n + i] = std::sqrt(s);
        } else {
          a[i * n + j] = s / a[j * n + j];
        }
      }
      for (size_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
    }
    return true;
  }

  GpParams params_;
  std::vector<Action> x_;
  std::vector<double> y_;
  std::vector<double> chol_;           // lower triangular L
  std::vector<double> alpha_partial_;  // L^-1 z
  double y_shift_ = 0.0;
  double y_scale_ = 1.0;
};

}  // namespace mfopt
