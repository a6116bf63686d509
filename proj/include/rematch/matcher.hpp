// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "rematch/autodiff.hpp"
#include "rematch/backbone.hpp"
#include "rematch/contrastive.hpp"
#include "rematch/errors.hpp"
#include "rematch/mask.hpp"
#include "rematch/params.hpp"
#include "rematch/sequence.hpp"

namespace rematch {

// Query-document matching runs as an auxiliary generative task: one unified
// sequence carries the instruction prompt, both renderings of the query
// (raw tokens and projected feature), both candidate documents in two slots
// (again raw and feature renderings), and one answer position per
// (query view x document slot x document view) combination. A custom
// attention mask isolates the combinations so a single forward pass scores
// every view pair independently.

enum class MatchingMode { kFull, kFeatOnly, kOff };

inline const char* matching_mode_name(MatchingMode m) {
  switch (m) {
    case MatchingMode::kFull: return "full";
    case MatchingMode::kFeatOnly: return "feat_only";
    case MatchingMode::kOff: return "off";
  }
  return "?";
}

inline MatchingMode matching_mode_from_name(const std::string& s) {
  if (s == "full") return MatchingMode::kFull;
  if (s == "feat_only") return MatchingMode::kFeatOnly;
  if (s == "off") return MatchingMode::kOff;
  throw ValidationError("unknown matching mode: \"" + s + "\" (full|feat_only|off)");
}

// Segment ids inside a match layout. Answer slot a gets kSegAnswerBase + a.
enum MatchSegment : int {
  kSegPrompt = 0,
  kSegQueryRaw = 1,
  kSegQueryFeat = 2,
  kSegDoc1Raw = 3,
  kSegDoc1Feat = 4,
  kSegDoc2Raw = 5,
  kSegDoc2Feat = 6,
  kSegAnswerBase = 7,
};

// One scored combination: which query rendering, which document slot (1 or
// 2), which document rendering.
struct ViewPair {
  bool query_feat = false;
  int doc_slot = 1;
  bool doc_feat = false;

  int query_segment() const { return query_feat ? kSegQueryFeat : kSegQueryRaw; }
  int doc_segment() const {
    if (doc_slot == 1) return doc_feat ? kSegDoc1Feat : kSegDoc1Raw;
    return doc_feat ? kSegDoc2Feat : kSegDoc2Raw;
  }
};

// Canonical view enumeration. Full mode: index bits are
// (query_feat, doc_slot2, doc_feat), i.e. a = 4*qf + 2*slot2 + df, giving
// the slot pattern 1,1,2,2,1,1,2,2. Feature-only mode keeps the two
// feature-feature pairs, one per slot.
inline std::vector<ViewPair> matching_views(MatchingMode mode) {
  std::vector<ViewPair> v;
  switch (mode) {
    case MatchingMode::kFull:
      for (int a = 0; a < 8; ++a) {
        v.push_back(ViewPair{(a & 4) != 0, ((a & 2) != 0) ? 2 : 1, (a & 1) != 0});
      }
      break;
    case MatchingMode::kFeatOnly:
      v.push_back(ViewPair{true, 1, true});
      v.push_back(ViewPair{true, 2, true});
      break;
    case MatchingMode::kOff:
      break;
  }
  return v;
}

// One position of a planned match sequence.
struct MatchElement {
  enum class Kind { kToken, kConst, kFeat };
  Kind kind = Kind::kToken;
  int token = -1;               // kToken
  std::vector<float> vec;       // kConst (raw continuous payload)
  int feat_index = -1;          // kFeat: 0 = query, 1 = slot-1 doc, 2 = slot-2 doc
  int segment = kSegPrompt;
  int position = 0;             // absolute position id (preserved in sub-layouts)
};

// Fully planned unified sequence, before any tape is involved.
struct MatchLayout {
  std::vector<MatchElement> elements;
  MatchingMode mode = MatchingMode::kFull;
  bool positive_in_slot1 = true;
  std::vector<ViewPair> views;       // one per answer slot
  std::vector<int> labels;           // kTokYes / kTokNo per answer slot
  std::vector<int> answer_positions; // element index of each answer slot

  int length() const { return static_cast<int>(elements.size()); }
  int answers() const { return static_cast<int>(views.size()); }

  int segment_of(int i) const { return elements[static_cast<std::size_t>(i)].segment; }
};

// The fixed instruction prompt: opaque reserved tokens standing in for
// "decide whether each document matches the query; answer yes or no".
inline std::vector<int> match_prompt_tokens() {
  std::vector<int> t(static_cast<std::size_t>(kPromptTokenCount));
  for (int i = 0; i < kPromptTokenCount; ++i) t[static_cast<std::size_t>(i)] = kPromptTokenBase + i;
  return t;
}

// Plans the unified layout. `doc_slot1`/`doc_slot2` are the documents in
// presentation order; `positive_in_slot1` records which one is the match
// (labels derive from it). Raw content segments appear only in full mode.
inline MatchLayout plan_match_layout(const TokenSequence& query, const TokenSequence& doc_slot1,
                                     const TokenSequence& doc_slot2, MatchingMode mode,
                                     bool positive_in_slot1) {
  if (mode == MatchingMode::kOff) {
    throw ContractError("plan_match_layout called with matching disabled");
  }
  query.validate();
  doc_slot1.validate();
  doc_slot2.validate();

  MatchLayout out;
  out.mode = mode;
  out.positive_in_slot1 = positive_in_slot1;
  int pos = 0;

  auto put_token = [&](int token, int segment) {
    MatchElement e;
    e.kind = MatchElement::Kind::kToken;
    e.token = token;
    e.segment = segment;
    e.position = pos++;
    out.elements.push_back(std::move(e));
  };
  auto put_sequence = [&](const TokenSequence& seq, int segment) {
    for (const auto& el : seq.elements) {
      MatchElement e;
      if (el.is_vec()) {
        e.kind = MatchElement::Kind::kConst;
        e.vec = el.vec;
      } else {
        e.kind = MatchElement::Kind::kToken;
        e.token = el.token;
      }
      e.segment = segment;
      e.position = pos++;
      out.elements.push_back(std::move(e));
    }
  };
  auto put_feat = [&](int feat_index, int segment) {
    put_token(kTokFeatStart, segment);
    MatchElement e;
    e.kind = MatchElement::Kind::kFeat;
    e.feat_index = feat_index;
    e.segment = segment;
    e.position = pos++;
    out.elements.push_back(std::move(e));
    put_token(kTokFeatEnd, segment);
  };

  for (int tok : match_prompt_tokens()) put_token(tok, kSegPrompt);

  const bool with_raw = mode == MatchingMode::kFull;
  if (with_raw) {
    put_token(kTokQueryOpen, kSegQueryRaw);
    put_sequence(query, kSegQueryRaw);
    put_token(kTokQueryClose, kSegQueryRaw);
  }
  put_feat(0, kSegQueryFeat);
  if (with_raw) {
    put_token(kTokDocOpen, kSegDoc1Raw);
    put_sequence(doc_slot1, kSegDoc1Raw);
    put_token(kTokDocClose, kSegDoc1Raw);
  }
  put_feat(1, kSegDoc1Feat);
  if (with_raw) {
    put_token(kTokDocOpen, kSegDoc2Raw);
    put_sequence(doc_slot2, kSegDoc2Raw);
    put_token(kTokDocClose, kSegDoc2Raw);
  }
  put_feat(2, kSegDoc2Feat);

  out.views = matching_views(mode);
  for (std::size_t a = 0; a < out.views.size(); ++a) {
    out.answer_positions.push_back(static_cast<int>(out.elements.size()));
    put_token(kTokAnswerSlot, kSegAnswerBase + static_cast<int>(a));
    const bool slot1_view = out.views[a].doc_slot == 1;
    const bool is_match = slot1_view == positive_in_slot1;
    out.labels.push_back(is_match ? kTokYes : kTokNo);
  }
  return out;
}

// Attention rules of the unified sequence:
//   (a) the prompt is causal within itself;
//   (b) a content segment is causal within itself and additionally reads
//       the whole prompt; content segments never read each other;
//   (c) an answer slot reads the prompt, its own query view segment, its
//       own document view segment, and itself - nothing else, and nothing
//       reads an answer slot.
inline AttentionMask build_unified_mask(const MatchLayout& layout) {
  const int t = layout.length();
  AttentionMask mask(t);
  // Map answer segment id -> allowed content segments.
  std::vector<int> answer_q_seg(layout.views.size()), answer_d_seg(layout.views.size());
  for (std::size_t a = 0; a < layout.views.size(); ++a) {
    answer_q_seg[a] = layout.views[a].query_segment();
    answer_d_seg[a] = layout.views[a].doc_segment();
  }
  for (int i = 0; i < t; ++i) {
    const int si = layout.segment_of(i);
    for (int j = 0; j < t; ++j) {
      const int sj = layout.segment_of(j);
      bool allow = false;
      if (si == kSegPrompt) {
        allow = sj == kSegPrompt && j <= i;
      } else if (si < kSegAnswerBase) {
        allow = sj == kSegPrompt || (sj == si && j <= i);
      } else {
        const std::size_t a = static_cast<std::size_t>(si - kSegAnswerBase);
        allow = sj == kSegPrompt || sj == answer_q_seg[a] || sj == answer_d_seg[a] || j == i;
      }
      if (allow) mask.set(i, j, true);
    }
  }
  return mask;
}

// Structural audit of a mask against the rules above; returns human-readable
// violations (empty when clean). Used by tests and the mask-dump tool.
inline std::vector<std::string> audit_unified_mask(const MatchLayout& layout,
                                                   const AttentionMask& mask) {
  std::vector<std::string> bad;
  if (mask.size() != layout.length()) {
    bad.push_back("mask size != layout length");
    return bad;
  }
  const AttentionMask want = build_unified_mask(layout);
  for (int i = 0; i < mask.size(); ++i) {
    for (int j = 0; j < mask.size(); ++j) {
      if (mask.allow(i, j) != want.allow(i, j)) {
        bad.push_back("position " + std::to_string(i) + " -> " + std::to_string(j) +
                      (want.allow(i, j) ? " should be allowed" : " should be blocked") +
                      " (segments " + std::to_string(layout.segment_of(i)) + " -> " +
                      std::to_string(layout.segment_of(j)) + ")");
        if (bad.size() >= 32) return bad;
      }
    }
  }
  return bad;
}

// Extracts the single-view sub-layout for one answer slot: prompt, that
// answer's two content segments, and the answer element, in original order
// with original absolute positions. A forward pass over this sub-layout
// reproduces the unified pass exactly on the shared positions.
inline MatchLayout extract_view_layout(const MatchLayout& layout, int answer_index) {
  if (answer_index < 0 || answer_index >= layout.answers()) {
    throw ContractError("answer index out of range");
  }
  const ViewPair view = layout.views[static_cast<std::size_t>(answer_index)];
  const int keep_q = view.query_segment();
  const int keep_d = view.doc_segment();
  const int keep_a = kSegAnswerBase + answer_index;

  MatchLayout out;
  out.mode = layout.mode;
  out.positive_in_slot1 = layout.positive_in_slot1;
  out.views = {view};
  out.labels = {layout.labels[static_cast<std::size_t>(answer_index)]};
  for (const auto& e : layout.elements) {
    const int s = e.segment;
    if (s == kSegPrompt || s == keep_q || s == keep_d) {
      out.elements.push_back(e);
    } else if (s == keep_a) {
      MatchElement a = e;
      a.segment = kSegAnswerBase;  // single answer slot in the sub-layout
      out.answer_positions.push_back(static_cast<int>(out.elements.size()));
      out.elements.push_back(std::move(a));
    }
  }
  return out;
}

// Feature projector: a small MLP mapping a fused embedding into the
// backbone's input space, used for the feature renderings.
template <class Real>
class ProjectorT {
 public:
  explicit ProjectorT(int d_model) : d_(d_model) {}

  void init_params(ParamStoreT<Real>& store, std::uint64_t seed) const {
    auto gauss = [&](const std::string& name, std::vector<int> shape) {
      TensorT<Real> t(std::move(shape));
      Rng rng = Rng::keyed(seed, "init", {hash_tag(name)});
      t.fill_gaussian(rng, Real(0.02));
      store.add(name, std::move(t));
    };
    gauss("proj.w1", {d_, d_});
    store.add("proj.b1", TensorT<Real>({d_}));
    gauss("proj.w2", {d_, d_});
    store.add("proj.b2", TensorT<Real>({d_}));
  }

  // fused: rank-1 [d]; returns [1 x d] ready for injection as an input row.
  ValueId project(ParamSessionT<Real>& ps, TapeT<Real>& tape, ValueId fused) const {
    const auto& v = tape.value(fused);
    if (v.ndim() != 1 || v.dim(0) != d_) {
      throw ShapeError("projector input must be [" + std::to_string(d_) + "], got " +
                       v.shape_str());
    }
    ValueId x = tape.reshape(fused, {1, d_});
    ValueId h = tape.silu(tape.add_rowvec(tape.matmul(x, ps["proj.w1"]), ps["proj.b1"]));
    return tape.add_rowvec(tape.matmul(h, ps["proj.w2"]), ps["proj.b2"]);
  }

 private:
  int d_;
};

using Projector = ProjectorT<float>;

// Realizes a layout as model input on a tape. feat_q / feat_slot1 /
// feat_slot2 are [1 x d] projected feature rows (present as needed by the
// layout's feat elements).
template <class Real>
ModelInputT<Real> realize_match_input(const MatchLayout& layout, TapeT<Real>& tape,
                                      ValueId feat_q, ValueId feat_slot1, ValueId feat_slot2) {
  ModelInputT<Real> input;
  for (const auto& e : layout.elements) {
    switch (e.kind) {
      case MatchElement::Kind::kToken:
        input.add_token(e.token, e.position, e.segment);
        break;
      case MatchElement::Kind::kConst:
        input.add_const_row(e.vec, e.position, e.segment);
        break;
      case MatchElement::Kind::kFeat: {
        ValueId f = e.feat_index == 0 ? feat_q : (e.feat_index == 1 ? feat_slot1 : feat_slot2);
        input.add_ref(f, 1, {e.position}, e.segment);
        break;
      }
    }
  }
  return input;
}

// Cross-entropy of the Yes/No labels at the answer logits. `logits` is
// [answers x vocab]; the loss is the mean over answers of
// logsumexp(row) - row[label].
template <class Real>
ValueId matching_loss(TapeT<Real>& tape, ValueId logits, const std::vector<int>& labels) {
  const auto& lv = tape.value(logits);
  if (lv.ndim() != 2 || lv.dim(0) != static_cast<int>(labels.size())) {
    throw ShapeError("matching_loss: logits " + lv.shape_str() + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const int vocab = lv.dim(1);
  std::vector<ValueId> per_answer;
  per_answer.reserve(labels.size());
  for (std::size_t a = 0; a < labels.size(); ++a) {
    if (labels[a] < 0 || labels[a] >= vocab) {
      throw VocabError("label token " + std::to_string(labels[a]) + " outside vocab");
    }
    ValueId row = tape.row(logits, static_cast<int>(a));
    per_answer.push_back(tape.sub(tape.logsumexp(row), tape.pick(row, labels[a])));
  }
  return tape.mean_all(tape.stack_scalars(per_answer));
}

// Full matcher pass on one instance over an already-planned layout.
template <class Real>
struct MatchRun {
  ValueId loss;           // scalar
  ValueId answer_logits;  // [answers x vocab]
};

template <class Real>
MatchRun<Real> run_matcher(const BackboneT<Real>& backbone, ParamSessionT<Real>& ps,
                           TapeT<Real>& tape, const MatchLayout& layout, ValueId feat_q,
                           ValueId feat_slot1, ValueId feat_slot2) {
  if (layout.answers() == 0) throw ContractError("layout has no answer slots");
  ModelInputT<Real> input = realize_match_input(layout, tape, feat_q, feat_slot1, feat_slot2);
  const int t = input.length();
  if (t > backbone.config().max_seq_len) {
    throw CapacityError("match layout length " + std::to_string(t) + " exceeds max_seq_len " +
                        std::to_string(backbone.config().max_seq_len));
  }
  auto mask = std::make_shared<AttentionMask>(build_unified_mask(layout));
  ValueId hidden = backbone.forward(ps, tape, input, std::move(mask));
  std::vector<ValueId> answer_rows;
  answer_rows.reserve(static_cast<std::size_t>(layout.answers()));
  for (int p : layout.answer_positions) answer_rows.push_back(tape.slice_rows(hidden, p, p + 1));
  ValueId answers =
      answer_rows.size() == 1 ? answer_rows[0] : tape.concat_rows(answer_rows);
  MatchRun<Real> run;
  run.answer_logits = backbone.logits(ps, tape, answers);
  run.loss = matching_loss(tape, run.answer_logits, layout.labels);
  return run;
}

}  // namespace rematch
