#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "splitnas/tensor.hpp"

namespace splitnas {

enum class OptKind { sgd, sgd_momentum, adam };

inline OptKind opt_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptKind::sgd;
  if (s == "sgd-momentum") return OptKind::sgd_momentum;
  if (s == "adam") return OptKind::adam;
  throw ConfigError("unknown optimizer kind '" + s + "'");
}

// Per-parameter state is keyed by buffer identity so the same optimizer can
// keep training a parameter across epochs. Adam: m,v with bias correction,
// eps outside the sqrt denominator as in the reference update.
template <class T>
class Optimizer {
 public:
  Optimizer(std::vector<Parameter<T>> params, OptKind kind, T lr)
      : params_(std::move(params)), kind_(kind), lr_(lr) {}

  void step() {
    ++t_;
    for (auto& p : params_) {
      if (!p.tensor.has_grad())
        throw UsageError("optimizer step: parameter '" + p.name + "' has no gradient");
      auto& w = p.tensor.v();
      const auto& g = p.tensor.grad();
      switch (kind_) {
        case OptKind::sgd: {
          for (size_t i = 0; i < w.size(); ++i) w[i] -= lr_ * g[i];
          break;
        }
        case OptKind::sgd_momentum: {
          auto& u = state_m_[p.tensor.id()];
          if (u.size() != w.size()) u.assign(w.size(), T(0));
          for (size_t i = 0; i < w.size(); ++i) {
            u[i] = momentum_ * u[i] + g[i];
            w[i] -= lr_ * u[i];
          }
          break;
        }
        case OptKind::adam: {
          auto& m = state_m_[p.tensor.id()];
          auto& v = state_v_[p.tensor.id()];
          if (m.size() != w.size()) m.assign(w.size(), T(0));
          if (v.size() != w.size()) v.assign(w.size(), T(0));
          T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
          T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
          for (size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
            T mhat = m[i] / bc1;
            T vhat = v[i] / bc2;
            w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
          }
          break;
        }
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void set_lr(T lr) { lr_ = lr; }
  T lr() const { return lr_; }
  const std::vector<Parameter<T>>& params() const { return params_; }

 private:
  std::vector<Parameter<T>> params_;
  OptKind kind_;
  T lr_;
  T momentum_ = T(0.9);
  T beta1_ = T(0.9), beta2_ = T(0.999), eps_ = T(1e-8);
  int64_t t_ = 0;
  std::unordered_map<const void*, std::vector<T>> state_m_, state_v_;
};

}  // namespace splitnas
