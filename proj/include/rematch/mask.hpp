// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rematch/errors.hpp"

namespace rematch {

// Boolean attention mask over a length-T sequence. allow(i, j) == true means
// position i (the attending row) may read position j (the attended column).
// Blocked pairs receive attention weight exactly 0, not a large-negative
// additive bias, so leakage probes can assert bit-exact invariance.
class AttentionMask {
 public:
  AttentionMask() = default;

  explicit AttentionMask(int t, bool allow_all = false)
      : t_(t), bits_(static_cast<std::size_t>(t) * t, allow_all ? 1 : 0) {
    if (t <= 0) throw ShapeError("attention mask length must be positive");
  }

  static AttentionMask causal(int t) {
    AttentionMask m(t);
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j <= i; ++j) m.set(i, j, true);
    }
    return m;
  }

  int size() const { return t_; }

  bool allow(int i, int j) const {
    return bits_[static_cast<std::size_t>(i) * t_ + j] != 0;
  }

  void set(int i, int j, bool v) {
    bits_[static_cast<std::size_t>(i) * t_ + j] = v ? 1 : 0;
  }

  // Every attending row must be able to read at least itself; otherwise the
  // attention distribution over the allowed set is empty.
  void validate() const {
    for (int i = 0; i < t_; ++i) {
      bool any = false;
      for (int j = 0; j < t_; ++j) {
        if (allow(i, j)) {
          any = true;
          break;
        }
      }
      if (!any) {
        throw ContractError("attention mask row " + std::to_string(i) +
                            " allows no columns");
      }
    }
  }

  bool operator==(const AttentionMask& o) const {
    return t_ == o.t_ && bits_ == o.bits_;
  }

 private:
  int t_ = 0;
  std::vector<std::uint8_t> bits_;
};

}  // namespace rematch
