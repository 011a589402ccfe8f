#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dove/autodiff.hpp"
#include "dove/common.hpp"
#include "dove/rng.hpp"
#include "dove/tensor.hpp"

namespace dove {

// Ordered collection of named parameter tensors. Order is the declaration
// order of the model builder and fixes the serialization and optimizer-state
// layout.
template <typename T>
class ParamSet {
 public:
  Tensor<T>& add(std::string name, Tensor<T> init) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
    index_[name] = items_.size();
    items_.emplace_back(std::move(name), std::move(init));
    return items_.back().second;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
    return items_[it->second].second;
  }
  const Tensor<T>& at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
  }

  size_t size() const { return items_.size(); }
  const std::pair<std::string, Tensor<T>>& item(size_t i) const { return items_[i]; }
  std::pair<std::string, Tensor<T>>& item(size_t i) { return items_[i]; }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [_, t] : items_) n += t.numel();
    return n;
  }

  bool all_finite() const {
    for (const auto& [_, t] : items_)
      if (!t.all_finite()) return false;
    return true;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, t] : items_) out.add(name, t.template cast<U>());
    return out;
  }

  // Merge another set under this one (names must not collide).
  void absorb(ParamSet other) {
    for (auto& [name, t] : other.items_) add(std::move(name), std::move(t));
  }

  template <typename U>
  friend class ParamSet;

 private:
  std::vector<std::pair<std::string, Tensor<T>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

// Parameters materialized on a tape, as leaves (trainable) or constants
// (frozen). Gradients are read back through the stored handles.
template <typename T>
class BoundParams {
 public:
  BoundParams() = default;
  BoundParams(ad::Tape<T>& tape, const ParamSet<T>& params, bool trainable) {
    for (size_t i = 0; i < params.size(); ++i) {
      const auto& [name, tensor] = params.item(i);
      ad::Var<T> v = trainable ? tape.leaf(tensor) : tape.constant(tensor);
      index_[name] = vars_.size();
      vars_.emplace_back(name, v);
    }
  }

  ad::Var<T> operator[](const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unbound parameter: " + name);
    return vars_[it->second].second;
  }

  size_t size() const { return vars_.size(); }
  const std::pair<std::string, ad::Var<T>>& item(size_t i) const { return vars_[i]; }

  // Absorb another bound set (e.g. frozen VAE + trainable denoiser).
  void absorb(const BoundParams& other) {
    for (const auto& [name, v] : other.vars_) {
      if (index_.count(name)) throw ArgumentError("duplicate bound parameter: " + name);
      index_[name] = vars_.size();
      vars_.emplace_back(name, v);
    }
  }

 private:
  std::vector<std::pair<std::string, ad::Var<T>>> vars_;
  std::unordered_map<std::string, size_t> index_;
};

namespace init {

// Kaiming-style fan-in scaled normal init, one derived stream per parameter
// name so layouts stay stable if unrelated parameters are added.
template <typename T>
Tensor<T> conv_weight(int64_t co, int64_t ci, int64_t k, uint64_t seed, const std::string& name) {
  Rng rng = Rng::derive(seed, name);
  double std = std::sqrt(2.0 / static_cast<double>(ci * k * k));
  return Tensor<T>::random_normal({co, ci, k, k}, rng, T(0), static_cast<T>(std));
}

template <typename T>
Tensor<T> linear_weight(int64_t din, int64_t dout, uint64_t seed, const std::string& name) {
  Rng rng = Rng::derive(seed, name);
  double std = std::sqrt(1.0 / static_cast<double>(din));
  return Tensor<T>::random_normal({din, dout}, rng, T(0), static_cast<T>(std));
}

template <typename T>
Tensor<T> embedding(int64_t rows, int64_t dim, uint64_t seed, const std::string& name) {
  Rng rng = Rng::derive(seed, name);
  return Tensor<T>::random_normal({rows, dim}, rng, T(0), T(0.02));
}

}  // namespace init

}  // namespace dove
