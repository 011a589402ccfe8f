#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dove/common.hpp"
#include "dove/tensor.hpp"

namespace dove {

// Diffusion timestep, 1-based index into a schedule of length T.
struct Timestep {
  int t = 1;
  explicit Timestep(int value) : t(value) {
    if (t < 1) throw IndexError("timestep must be >= 1");
  }
};

// Linear-beta DDPM schedule: betas, alphas = 1 - beta, and the running
// product alpha_bar. Tables are double precision.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  int total_steps = 0;
};

inline NoiseSchedule make_schedule(int total_steps, double beta_start, double beta_end) {
  if (total_steps < 1) throw ArgumentError("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw ArgumentError("make_schedule: require 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.total_steps = total_steps;
  s.betas.resize(total_steps);
  s.alphas.resize(total_steps);
  s.alpha_bars.resize(total_steps);
  double running = 1.0;
  for (int i = 0; i < total_steps; ++i) {
    double beta = total_steps == 1
                      ? beta_start
                      : beta_start + (beta_end - beta_start) * static_cast<double>(i) /
                            static_cast<double>(total_steps - 1);
    s.betas[i] = beta;
    s.alphas[i] = 1.0 - beta;
    running *= s.alphas[i];
    s.alpha_bars[i] = running;
  }
  return s;
}

inline double alpha_bar(const NoiseSchedule& s, Timestep t) {
  if (t.t < 1 || t.t > s.total_steps) throw IndexError("alpha_bar: timestep out of range");
  return s.alpha_bars[t.t - 1];
}

// One-step v-prediction denoise: z_sr = sqrt(abar) * z_lr - sqrt(1 - abar) * v.
template <typename T>
Tensor<T> one_step_denoise(const Tensor<T>& z_lr, const Tensor<T>& v, const NoiseSchedule& s,
                           Timestep t) {
  if (!z_lr.same_shape(v))
    throw ArgumentError("one_step_denoise: z_lr and v shapes differ: " + shape_str(z_lr.shape()) +
                        " vs " + shape_str(v.shape()));
  const double abar = alpha_bar(s, t);
  const T signal = static_cast<T>(std::sqrt(abar));
  const T noise = static_cast<T>(std::sqrt(1.0 - abar));
  Tensor<T> out(z_lr.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = signal * z_lr[i] - noise * v[i];
  return out;
}

}  // namespace dove
