// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "rematch/autodiff.hpp"
#include "rematch/errors.hpp"
#include "rematch/tensor.hpp"

namespace rematch {

// Named trainable tensors in stable insertion order. The order defines the
// serialization layout and the deterministic reduction order of gradients.
template <class Real>
class ParamStoreT {
 public:
  TensorT<Real>& add(const std::string& name, TensorT<Real> t) {
    if (map_.count(name)) throw ContractError("duplicate parameter name: " + name);
    order_.push_back(name);
    return map_.emplace(name, std::move(t)).first->second;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  TensorT<Real>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  const TensorT<Real>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  std::int64_t total_elements() const {
    std::int64_t n = 0;
    for (const auto& name : order_) n += map_.at(name).numel();
    return n;
  }

  template <class R2>
  ParamStoreT<R2> cast() const {
    ParamStoreT<R2> out;
    for (const auto& name : order_) out.add(name, map_.at(name).template cast<R2>());
    return out;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, TensorT<Real>> map_;
};

// Gradients keyed by parameter name, in first-touch order.
template <class Real>
class GradientSetT {
 public:
  void accumulate(const std::string& name, const TensorT<Real>& g) {
    auto it = map_.find(name);
    if (it == map_.end()) {
      order_.push_back(name);
      map_.emplace(name, g);
      return;
    }
    TensorT<Real>& acc = it->second;
    if (!acc.same_shape(g)) throw ShapeError("gradient shape changed for " + name);
    for (std::int64_t i = 0; i < g.numel(); ++i) acc[i] += g[i];
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }

  const TensorT<Real>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw ContractError("no gradient for: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return order_; }
  bool empty() const { return order_.empty(); }

  void scale_all(Real c) {
    for (auto& [name, g] : map_) {
      (void)name;
      for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= c;
    }
  }

  void add_all(const GradientSetT& other) {
    for (const auto& name : other.order_) accumulate(name, other.map_.at(name));
  }

  double l2_norm() const {
    double s = 0.0;
    for (const auto& [name, g] : map_) {
      (void)name;
      for (std::int64_t i = 0; i < g.numel(); ++i) {
        s += static_cast<double>(g[i]) * static_cast<double>(g[i]);
      }
    }
    return std::sqrt(s);
  }

  bool all_finite() const {
    for (const auto& [name, g] : map_) {
      (void)name;
      if (!g.all_finite()) return false;
    }
    return true;
  }

 private:
  std::vector<std::string> order_;
  std::unordered_map<std::string, TensorT<Real>> map_;
};

// Binds parameters from a store onto one tape, lazily, one leaf per name.
// After backward, collect() reads the leaf gradients back out by name.
template <class Real>
class ParamSessionT {
 public:
  ParamSessionT(TapeT<Real>& tape, const ParamStoreT<Real>& store, bool trainable = true)
      : tape_(&tape), store_(&store), trainable_(trainable) {}

  ValueId operator[](const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    ValueId id = tape_->leaf(store_->at(name), trainable_);
    bound_.emplace(name, id);
    bound_order_.push_back(name);
    return id;
  }

  bool bound(const std::string& name) const { return bound_.count(name) != 0; }

  // Gradients of all bound parameters, in binding order, zeros skipped.
  GradientSetT<Real> collect() const {
    GradientSetT<Real> out;
    for (const auto& name : bound_order_) {
      TensorT<Real> g = tape_->grad(bound_.at(name));
      bool nonzero = false;
      for (std::int64_t i = 0; i < g.numel() && !nonzero; ++i) nonzero = g[i] != Real(0);
      if (nonzero) out.accumulate(name, g);
    }
    return out;
  }

  TapeT<Real>& tape() { return *tape_; }

 private:
  TapeT<Real>* tape_;
  const ParamStoreT<Real>* store_;
  bool trainable_;
  std::unordered_map<std::string, ValueId> bound_;
  std::vector<std::string> bound_order_;
};

}  // namespace rematch
