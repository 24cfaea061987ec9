#pragma once

// AdamW with decoupled weight decay and bias-corrected moments.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "maskattn/tensor.hpp"

namespace maskattn::opt {

struct AdamWConfig {
  double lr = 5e-4;
  double weight_decay = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (lr <= 0) throw std::runtime_error("AdamWConfig: lr must be > 0");
    if (weight_decay < 0) throw std::runtime_error("AdamWConfig: weight_decay must be >= 0");
  }
};

template <class T>
struct ParamState {
  std::vector<T> m, v;
};

template <class T>
struct OptimizerState {
  std::vector<ParamState<T>> per_param;
  int64_t t = 0;
};

// One decoupled-decay Adam step over a flat list of (name, param, grad).
// Decay is applied separately from the moment update; grads must be finite.
template <class T>
void adamw_step(const std::vector<std::string>& names, std::vector<Tensor<T>*>& params,
                const std::vector<const std::vector<T>*>& grads, OptimizerState<T>& state,
                const AdamWConfig& cfg) {
  cfg.validate();
  if (params.size() != grads.size() || params.size() != names.size())
    throw std::runtime_error("adamw_step: list sizes disagree");
  if (state.per_param.empty()) {
    state.per_param.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.per_param[i].m.assign(size_t(params[i]->size()), T(0));
      state.per_param[i].v.assign(size_t(params[i]->size()), T(0));
    }
  }
  if (state.per_param.size() != params.size())
    throw std::runtime_error("adamw_step: optimizer state does not match parameter list");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    const std::vector<T>& g = *grads[i];
    if (int64_t(g.size()) != p.size())
      throw std::runtime_error("adamw_step: gradient shape mismatch for " + names[i]);
    ParamState<T>& st = state.per_param[i];
    T* pd = p.mutable_data();
    for (int64_t j = 0; j < p.size(); ++j) {
      const double gj = double(g[size_t(j)]);
      if (!std::isfinite(gj))
        throw std::runtime_error("adamw_step: non-finite gradient in parameter " + names[i]);
      double m = double(st.m[size_t(j)]) * cfg.beta1 + (1 - cfg.beta1) * gj;
      double v = double(st.v[size_t(j)]) * cfg.beta2 + (1 - cfg.beta2) * gj * gj;
      st.m[size_t(j)] = T(m);
      st.v[size_t(j)] = T(v);
      double upd = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      pd[j] = T(double(pd[j]) * (1.0 - cfg.lr * cfg.weight_decay) - upd);
    }
  }
}

}  // namespace maskattn::opt
