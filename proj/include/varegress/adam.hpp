#pragma once

#include <cmath>
#include <vector>

#include "varegress/autodiff.hpp"

namespace varegress::ad {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moments for a fixed, ordered parameter list.
class AdamState {
 public:
  explicit AdamState(const std::vector<Tensor>& params, AdamConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg.beta1 > 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 > 0.0 && cfg.beta2 < 1.0)) {
      throw Error("AdamState: beta1 and beta2 must lie in (0, 1)");
    }
    if (!(cfg.epsilon > 0.0)) throw Error("AdamState: epsilon must be positive");
    if (!(cfg.learning_rate > 0.0)) throw Error("AdamState: learning rate must be positive");
    for (const auto& p : params) {
      first_.emplace_back(p.size(), 0.0);
      second_.emplace_back(p.size(), 0.0);
    }
  }

  const AdamConfig& config() const noexcept { return cfg_; }
  std::size_t step_count() const noexcept { return steps_; }
  const std::vector<std::vector<double>>& first_moment() const noexcept { return first_; }
  const std::vector<std::vector<double>>& second_moment() const noexcept { return second_; }

  /// One bias-corrected Adam update. Gradients are zeroed afterwards.
  void step(std::vector<Tensor>& params) {
    if (params.size() != first_.size()) throw ShapeError("adam_step: parameter count differs from state");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].size() != first_[i].size()) {
        throw ShapeError("adam_step: parameter " + std::to_string(i) + " shape differs from state");
      }
      if (!params[i].has_grad()) throw Error("adam_step: parameter " + std::to_string(i) + " has no gradient");
    }
    ++steps_;
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(cfg_.beta1, t);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].mutable_values();
      auto g = params[i].mutable_grad();
      auto& m = first_[i];
      auto& v = second_[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
        v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        w[k] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
      }
      params[i].zero_grad();
    }
  }

 private:
  AdamConfig cfg_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

inline void adam_step(std::vector<Tensor>& params, AdamState& state) { state.step(params); }

}  // namespace varegress::ad
