// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suite: scratch directories on disk and
// structural comparison of mixed token/vector sequences.

#pragma once

#include <atomic>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <string>
#include <system_error>

#include "rematch/params.hpp"
#include "rematch/sequence.hpp"

namespace rematch_test {

// Per-test scratch directory under the system temp root, removed on scope
// exit. Names are stamped so concurrent test processes cannot collide.
struct TempDir {
  std::filesystem::path dir;

  TempDir() {
    static std::atomic<int> counter{0};
    const auto stamp = std::chrono::steady_clock::now().time_since_epoch().count();
    dir = std::filesystem::temp_directory_path() /
          ("rematch-test-" + std::to_string(stamp) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(dir);
  }

  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir, ec);
  }

  std::string path(const std::string& name) const { return (dir / name).string(); }
};

inline bool seq_equal(const rematch::TokenSequence& a, const rematch::TokenSequence& b) {
  if (a.elements.size() != b.elements.size()) return false;
  if (a.segments != b.segments || a.positions != b.positions) return false;
  for (std::size_t i = 0; i < a.elements.size(); ++i) {
    const auto& ea = a.elements[i];
    const auto& eb = b.elements[i];
    if (ea.token != eb.token || ea.vec.size() != eb.vec.size()) return false;
    if (!ea.vec.empty() &&
        std::memcmp(ea.vec.data(), eb.vec.data(), ea.vec.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

// Bitwise equality of two parameter stores (names, order, shapes, values).
template <class Real>
bool stores_equal_bits(const rematch::ParamStoreT<Real>& a,
                       const rematch::ParamStoreT<Real>& b) {
  if (a.names() != b.names()) return false;
  for (const auto& name : a.names()) {
    const auto& ta = a.at(name);
    const auto& tb = b.at(name);
    if (ta.shape() != tb.shape()) return false;
    if (std::memcmp(ta.data(), tb.data(),
                    static_cast<std::size_t>(ta.numel()) * sizeof(Real)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace rematch_test
