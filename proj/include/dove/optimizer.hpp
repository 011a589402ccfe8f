#pragma once

#include <cmath>
#include <string>

#include "dove/common.hpp"
#include "dove/params.hpp"
#include "dove/tensor.hpp"

namespace dove {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (lr < 0) throw ConfigError("train.lr", "must be >= 0");
    if (beta1 < 0 || beta1 >= 1) throw ConfigError("train.beta1", "must be in [0,1)");
    if (beta2 < 0 || beta2 >= 1) throw ConfigError("train.beta2", "must be in [0,1)");
    if (eps <= 0) throw ConfigError("train.eps", "must be > 0");
    if (weight_decay < 0) throw ConfigError("train.weight_decay", "must be >= 0");
  }
};

// Decoupled-weight-decay Adam with global-norm gradient clipping. Moments are
// kept as ordinary tensors so they can ride along in checkpoints.
template <typename T>
struct AdamW {
  AdamWConfig cfg;
  ParamSet<T> m;
  ParamSet<T> v;
  int64_t step_count = 0;

  explicit AdamW(AdamWConfig c = {}) : cfg(c) { cfg.validate(); }

  void init(const ParamSet<T>& params) {
    m = {};
    v = {};
    for (int64_t i = 0; i < params.size(); ++i) {
      const auto& [name, t] = params.item(i);
      m.add(name, Tensor<T>::zeros(t.shape()));
      v.add(name, Tensor<T>::zeros(t.shape()));
    }
    step_count = 0;
  }

  // Returns the pre-clip global gradient norm.
  double step(ParamSet<T>& params, const ParamSet<T>& grads) {
    if (m.size() != params.size()) throw ArgumentError("adamw: init() before step()");
    if (grads.size() != params.size()) throw ArgumentError("adamw: grad/param count mismatch");

    double sq = 0;
    for (int64_t i = 0; i < params.size(); ++i) {
      const auto& [name, g] = grads.item(i);
      if (name != params.item(i).first) throw ArgumentError("adamw: grad/param order mismatch");
      for (int64_t j = 0; j < g.numel(); ++j) {
        double gv = static_cast<double>(g[j]);
        if (!std::isfinite(gv))
          throw TrainingError("non-finite gradient in '" + name + "'");
        sq += gv * gv;
      }
    }
    double norm = std::sqrt(sq);
    double scale = (cfg.clip_norm > 0 && norm > cfg.clip_norm) ? cfg.clip_norm / norm : 1.0;

    ++step_count;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
    for (int64_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = params.item(i).second;
      const Tensor<T>& g = grads.item(i).second;
      Tensor<T>& mi = m.item(i).second;
      Tensor<T>& vi = v.item(i).second;
      for (int64_t j = 0; j < p.numel(); ++j) {
        double gv = static_cast<double>(g[j]) * scale;
        double mv = cfg.beta1 * static_cast<double>(mi[j]) + (1.0 - cfg.beta1) * gv;
        double vv = cfg.beta2 * static_cast<double>(vi[j]) + (1.0 - cfg.beta2) * gv * gv;
        mi[j] = static_cast<T>(mv);
        vi[j] = static_cast<T>(vv);
        double mhat = mv / bc1;
        double vhat = vv / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg.eps) +
                     cfg.weight_decay * static_cast<double>(p[j]);
        p[j] = static_cast<T>(static_cast<double>(p[j]) - cfg.lr * upd);
      }
    }
    return norm;
  }
};

}  // namespace dove
