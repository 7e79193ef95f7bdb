#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "icrl/diffcore/graph.hpp"

namespace icrl::diff {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. Parameters flagged `decay = false`
/// (norm gains, biases) are never decayed.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return step_; }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      if (m_[k].shape() != p.value.shape()) {
        throw ShapeError("adamw: moment shape " + shape_str(m_[k].shape()) + " does not match parameter '" +
                         p.name + "' " + shape_str(p.value.shape()));
      }
      const double decay = p.decay ? cfg_.lr * cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = double(p.grad[i]);
        double m = cfg_.beta1 * double(m_[k][i]) + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * double(v_[k][i]) + (1.0 - cfg_.beta2) * g * g;
        m_[k][i] = T(m);
        v_[k][i] = T(v);
        double w = double(p.value[i]);
        w -= decay * w;
        w -= cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.eps);
        p.value[i] = T(w);
      }
    }
  }

  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }

 private:
  std::vector<Parameter<T>*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t step_ = 0;
};

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Parameter<T>*>& params, double max_norm) {
  double ss = 0;
  for (auto* p : params)
    for (std::size_t i = 0; i < p->grad.size(); ++i) ss += double(p->grad[i]) * double(p->grad[i]);
  double norm = std::sqrt(ss);
  if (max_norm > 0 && norm > max_norm) {
    T s = T(max_norm / (norm + 1e-12));
    for (auto* p : params)
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= s;
  }
  return norm;
}

}  // namespace icrl::diff
