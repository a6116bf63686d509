// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rematch/errors.hpp"

namespace rematch {

// Reserved vocabulary layout. Ids 0-8 are structural; 9-11 wrap sequences in
// a chat template; 16+ are blocks claimed by the prompt builder and the
// synthetic task. Everything below kMinVocabSize must exist in any model
// that consumes these sequences.
enum SpecialToken : int {
  kTokQueryOpen = 0,
  kTokQueryClose = 1,
  kTokDocOpen = 2,
  kTokDocClose = 3,
  kTokFeatStart = 4,
  kTokFeatEnd = 5,
  kTokAnswerSlot = 6,
  kTokYes = 7,
  kTokNo = 8,
  kTokChatSystem = 9,
  kTokChatUser = 10,
  kTokChatAssistant = 11,
};

inline constexpr int kPromptTokenBase = 16;  // matcher instruction tokens
inline constexpr int kPromptTokenCount = 6;
inline constexpr int kTaskTokenBase = 24;    // task-instruction ids
inline constexpr int kTaskTokenCount = 8;
inline constexpr int kQueryBinBase = 32;     // quantization bins, query text
inline constexpr int kNumBins = 64;
inline constexpr int kDocBinBase = 96;       // quantization bins, document text
inline constexpr int kMinVocabSize = kDocBinBase + kNumBins;

// A mixed sequence of discrete tokens and continuous d_model-sized vectors.
// `positions` carries the absolute position id each element uses for the
// learned position embedding; by default they are consecutive from 0, but a
// subsequence extracted from a longer layout keeps its original ids so that
// attention computations match the full layout exactly.
struct TokenSequence {
  struct Element {
    int token = -1;            // >= 0 for a discrete token
    std::vector<float> vec;    // non-empty for a continuous element
    bool is_vec() const { return !vec.empty(); }
  };

  std::vector<Element> elements;
  std::vector<int> segments;   // parallel to elements; apportioning label
  std::vector<int> positions;  // parallel to elements; absolute position ids

  int length() const { return static_cast<int>(elements.size()); }

  void push_token(int token, int segment = 0) {
    if (token < 0) throw VocabError("negative token id");
    Element e;
    e.token = token;
    elements.push_back(std::move(e));
    segments.push_back(segment);
    positions.push_back(length() - 1);
  }

  void push_vec(std::vector<float> v, int segment = 0) {
    if (v.empty()) throw ContractError("continuous element must be non-empty");
    for (float x : v) {
      if (!std::isfinite(x)) throw ValidationError("non-finite value in continuous element");
    }
    Element e;
    e.vec = std::move(v);
    elements.push_back(std::move(e));
    segments.push_back(segment);
    positions.push_back(length() - 1);
  }

  // Re-assigns consecutive positions 0..n-1 (the default layout).
  void renumber_positions() {
    for (int i = 0; i < length(); ++i) positions[i] = i;
  }

  int max_token_id() const {
    int mx = -1;
    for (const Element& e : elements) {
      if (!e.is_vec()) mx = std::max(mx, e.token);
    }
    return mx;
  }

  void validate(int expect_vec_dim = -1) const {
    if (segments.size() != elements.size() || positions.size() != elements.size()) {
      throw ContractError("sequence parallel arrays out of sync");
    }
    for (const Element& e : elements) {
      if (e.is_vec()) {
        if (expect_vec_dim > 0 && static_cast<int>(e.vec.size()) != expect_vec_dim) {
          throw ShapeError("continuous element has dim " + std::to_string(e.vec.size()) +
                           ", expected " + std::to_string(expect_vec_dim));
        }
      } else if (e.token < 0) {
        throw VocabError("sequence element has negative token id");
      }
    }
  }
};

}  // namespace rematch
