#pragma once

// Adam / AdamW (decoupled weight decay) and an EMA shadow tracker.

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "ctxwm/common.hpp"
#include "ctxwm/graph.hpp"

namespace ctxwm {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW) when > 0
  double grad_clip = 0.0;     // global-norm clip; 0 disables
};

template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, std::vector<Param<T>*> params) : cfg_(cfg), params_(std::move(params)) {
    for (auto* p : params_) {
      m_.push_back(Tensor<T>::zeros(p->value.shape));
      v_.push_back(Tensor<T>::zeros(p->value.shape));
    }
  }

  // one update from the gradients currently held in the params; clears them
  void step() {
    if (cfg_.grad_clip > 0) clip_global_norm();
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      Param<T>& p = *params_[k];
      for (size_t i = 0; i < p.value.data.size(); ++i) {
        double g = double(p.grad.data[i]);
        if (!std::isfinite(g))
          fail(Errc::numeric, "non-finite gradient in parameter '" + p.name + "'");
        double m = double(m_[k].data[i]) * cfg_.beta1 + (1.0 - cfg_.beta1) * g;
        double v = double(v_[k].data[i]) * cfg_.beta2 + (1.0 - cfg_.beta2) * g * g;
        m_[k].data[i] = T(m);
        v_[k].data[i] = T(v);
        double mhat = m / bc1;
        double vhat = v / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.eps);
        if (cfg_.weight_decay > 0) upd += cfg_.weight_decay * double(p.value.data[i]);
        p.value.data[i] = T(double(p.value.data[i]) - cfg_.lr * upd);
      }
      p.zero_grad();
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  int64_t step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  void clip_global_norm() {
    double sq = 0;
    for (auto* p : params_)
      for (T g : p->grad.data) sq += double(g) * double(g);
    double norm = std::sqrt(sq);
    if (norm <= cfg_.grad_clip || norm == 0) return;
    double s = cfg_.grad_clip / norm;
    for (auto* p : params_)
      for (auto& g : p->grad.data) g = T(double(g) * s);
  }

  AdamConfig cfg_;
  std::vector<Param<T>*> params_;
  std::vector<Tensor<T>> m_, v_;
  int64_t t_ = 0;
};

// shadow <- lambda * live + (1 - lambda) * shadow, elementwise across pairs
template <class T>
void ema_update(std::vector<Param<T>*> shadow, const std::vector<Param<T>*>& live, double lambda) {
  check(shadow.size() == live.size(), Errc::dimension, "ema parameter list size mismatch");
  check(lambda >= 0.0 && lambda <= 1.0, Errc::config, "ema momentum must lie in [0,1]");
  for (size_t k = 0; k < shadow.size(); ++k) {
    auto& s = shadow[k]->value.data;
    const auto& l = live[k]->value.data;
    check(s.size() == l.size(), Errc::dimension, "ema tensor size mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      s[i] = T(lambda * double(l[i]) + (1.0 - lambda) * double(s[i]));
  }
}

}  // namespace ctxwm
