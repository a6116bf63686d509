// Copyright 2026 The ReMatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "rematch/errors.hpp"
#include "rematch/mask.hpp"
#include "rematch/tensor.hpp"

namespace rematch {

// Handle into one tape. Ids are only meaningful on the tape that minted them.
struct ValueId {
  std::int32_t idx = -1;
  bool valid() const { return idx >= 0; }
  friend bool operator==(ValueId a, ValueId b) { return a.idx == b.idx; }
};

// Reverse-mode autodiff tape.
//
// Each primitive appends a node holding the output value plus two closures:
// `recompute` re-runs the forward kernel from the input nodes' current
// values (replay() invokes them in insertion order and must reproduce every
// value bit-for-bit), and `backprop` accumulates into the input nodes'
// gradient buffers from the output node's buffer. Gradients accumulate by
// addition; fan-out needs no special casing.
//
// Closures capture `this` and integer ids only, never node references, so
// the node vector may reallocate as the graph grows. The tape itself is
// pinned (no copy/move).
template <class Real>
class TapeT {
 public:
  using Tensor = TensorT<Real>;

  // `record` = false builds a forward-only tape: values are computed but no
  // closures are stored, so backward()/replay() are unavailable. Used for
  // loss-only evaluations (finite-difference probes, eval-time encoding).
  explicit TapeT(bool record = true) : record_(record) {}

  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

  // ---------------------------------------------------------------- leaves

  ValueId leaf(Tensor value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = "leaf";
    return push(std::move(n));
  }

  ValueId constant(Tensor value) { return leaf(std::move(value), false); }

  ValueId scalar_constant(Real v) { return constant(Tensor::scalar(v)); }

  // ------------------------------------------------------------ inspection

  const Tensor& value(ValueId id) const { return node(id).value; }

  bool requires_grad(ValueId id) const { return node(id).requires_grad; }

  // Gradient wrt a node; zeros if backward never touched it.
  Tensor grad(ValueId id) const {
    const Node& n = node(id);
    if (n.grad.empty() && n.value.numel() > 0) return Tensor::zeros(n.value.shape());
    return n.grad;
  }

  // Overwrite a leaf's value in place (shape must match); used by replay
  // tests and finite-difference probes on recorded tapes.
  void set_leaf_value(ValueId id, const Tensor& v) {
    Node& n = mut(id);
    if (n.backprop_set || n.recompute) throw ContractError("set_leaf_value on non-leaf node");
    if (!n.value.same_shape(v)) {
      throw ShapeError("set_leaf_value shape " + v.shape_str() + " != " + n.value.shape_str());
    }
    n.value = v;
  }

  // ---------------------------------------------------------------- engine

  // Recomputes every non-leaf value in insertion order from current leaf
  // values. With untouched leaves the result is bit-identical to the
  // original forward pass because it invokes the very same kernels.
  void replay() {
    require_recording("replay");
    for (Node& n : nodes_) {
      if (n.recompute) n.recompute();
    }
  }

  // Standard scalar backward: seeds d(loss)/d(loss) = 1 and sweeps. Leaf
  // gradients accumulate across calls; interior cotangents are consumed by
  // each sweep (see sweep()).
  void backward(ValueId loss) {
    require_recording("backward");
    const Node& n = node(loss);
    if (n.value.numel() != 1) {
      throw ContractError("backward target must be scalar, got " + n.value.shape_str());
    }
    grad_buf(loss)[0] += Real(1);
    sweep(loss.idx);
  }

  // Multi-output backward: accumulates explicit cotangent seeds on interior
  // nodes, then runs one reverse sweep. This is how upstream gradients from
  // a separate tape (the contrastive head) are injected into per-instance
  // encoder tapes.
  void backward_seeded(std::span<const std::pair<ValueId, Tensor>> seeds) {
    require_recording("backward_seeded");
    if (seeds.empty()) throw ContractError("backward_seeded requires at least one seed");
    std::int32_t top = -1;
    for (const auto& [id, seed] : seeds) {
      const Node& n = node(id);
      if (!n.value.same_shape(seed)) {
        throw ShapeError("seed shape " + seed.shape_str() + " != value shape " +
                         n.value.shape_str());
      }
      Tensor& g = grad_buf(id);
      for (std::int64_t i = 0; i < seed.numel(); ++i) g[i] += seed[i];
      top = std::max(top, id.idx);
    }
    sweep(top);
  }

  // Drops all gradient buffers (e.g. between repeated backward calls).
  void reset_grads() {
    for (Node& n : nodes_) n.grad = Tensor();
  }

  // ------------------------------------------------------------ primitives

  // C = op_a(A) * op_b(B); operands must be rank-2.
  ValueId matmul(ValueId a, ValueId b, bool trans_a = false, bool trans_b = false) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    if (av.ndim() != 2 || bv.ndim() != 2) {
      throw ShapeError("matmul needs rank-2 operands, got " + av.shape_str() + " and " +
                       bv.shape_str());
    }
    const int m = trans_a ? av.dim(1) : av.dim(0);
    const int ka = trans_a ? av.dim(0) : av.dim(1);
    const int kb = trans_b ? bv.dim(1) : bv.dim(0);
    const int nn = trans_b ? bv.dim(0) : bv.dim(1);
    if (ka != kb) {
      throw ShapeError("matmul inner dims disagree: " + av.shape_str() +
                       (trans_a ? "^T" : "") + " vs " + bv.shape_str() + (trans_b ? "^T" : ""));
    }
    Node n;
    n.op = "matmul";
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = Tensor::zeros({m, nn});
    ValueId out = push(std::move(n));
    auto fwd = [this, a, b, out, trans_a, trans_b] {
      const Tensor& A = node(a).value;
      const Tensor& B = node(b).value;
      Tensor& C = mut(out).value;
      auto MA = emap(A);
      auto MB = emap(B);
      auto MC = emap_mut(C);
      if (!trans_a && !trans_b) {
        MC.noalias() = MA * MB;
      } else if (trans_a && !trans_b) {
        MC.noalias() = MA.transpose() * MB;
      } else if (!trans_a && trans_b) {
        MC.noalias() = MA * MB.transpose();
      } else {
        MC.noalias() = MA.transpose() * MB.transpose();
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, b, out, trans_a, trans_b] {
        const Tensor& G = node(out).grad;
        const Tensor& A = node(a).value;
        const Tensor& B = node(b).value;
        auto MG = emap(G);
        auto MA = emap(A);
        auto MB = emap(B);
        if (node(a).requires_grad) {
          auto DA = emap_mut(grad_buf(a));
          if (!trans_a) {
            if (!trans_b) {
              DA.noalias() += MG * MB.transpose();
            } else {
              DA.noalias() += MG * MB;
            }
          } else {
            if (!trans_b) {
              DA.noalias() += MB * MG.transpose();
            } else {
              DA.noalias() += MB.transpose() * MG.transpose();
            }
          }
        }
        if (node(b).requires_grad) {
          auto DB = emap_mut(grad_buf(b));
          if (!trans_b) {
            if (!trans_a) {
              DB.noalias() += MA.transpose() * MG;
            } else {
              DB.noalias() += MA * MG;
            }
          } else {
            if (!trans_a) {
              DB.noalias() += MG.transpose() * MA;
            } else {
              DB.noalias() += MG.transpose() * MA.transpose();
            }
          }
        }
      });
    }
    return out;
  }

  ValueId add(ValueId a, ValueId b) { return binary_elementwise(a, b, "add"); }
  ValueId sub(ValueId a, ValueId b) { return binary_elementwise(a, b, "sub"); }
  ValueId mul(ValueId a, ValueId b) { return binary_elementwise(a, b, "mul"); }

  // x [R x C] + v [C] broadcast over rows.
  ValueId add_rowvec(ValueId a, ValueId v) {
    const Tensor& av = node(a).value;
    const Tensor& vv = node(v).value;
    if (vv.ndim() != 1 || av.cols() != vv.dim(0)) {
      throw ShapeError("add_rowvec: " + av.shape_str() + " + " + vv.shape_str());
    }
    Node n;
    n.op = "add_rowvec";
    n.requires_grad = node(a).requires_grad || node(v).requires_grad;
    n.value = Tensor::zeros(av.shape());
    ValueId out = push(std::move(n));
    auto fwd = [this, a, v, out] {
      const Tensor& A = node(a).value;
      const Tensor& V = node(v).value;
      Tensor& O = mut(out).value;
      const int rows = A.rows(), cols = A.cols();
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) O.at(r, c) = A.at(r, c) + V[c];
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, v, out] {
        const Tensor& G = node(out).grad;
        const int rows = G.rows(), cols = G.cols();
        if (node(a).requires_grad) {
          Tensor& da = grad_buf(a);
          for (std::int64_t i = 0; i < G.numel(); ++i) da[i] += G[i];
        }
        if (node(v).requires_grad) {
          Tensor& dv = grad_buf(v);
          for (int c = 0; c < cols; ++c) {
            double s = 0.0;
            for (int r = 0; r < rows; ++r) s += static_cast<double>(G.at(r, c));
            dv[c] += static_cast<Real>(s);
          }
        }
      });
    }
    return out;
  }

  ValueId scale(ValueId a, Real c) {
    return unary(a, "scale", [c](Real x) { return c * x; },
                 [c](Real, Real) { return c; });
  }

  ValueId add_scalar(ValueId a, Real c) {
    return unary(a, "add_scalar", [c](Real x) { return x + c; },
                 [](Real, Real) { return Real(1); });
  }

  ValueId exp_elem(ValueId a) {
    return unary(a, "exp", [](Real x) { return std::exp(x); },
                 [](Real, Real y) { return y; });
  }

  // Natural log; domain x > 0 enforced to keep gradients finite.
  ValueId log_elem(ValueId a) {
    return unary(a, "log",
                 [](Real x) {
                   if (!(x > Real(0))) throw NumericError("log of non-positive value");
                   return std::log(x);
                 },
                 [](Real x, Real) { return Real(1) / x; });
  }

  ValueId silu(ValueId a) {
    return unary(a, "silu",
                 [](Real x) {
                   const Real s = sigmoid(x);
                   return x * s;
                 },
                 [](Real x, Real) {
                   const Real s = sigmoid(x);
                   return s * (Real(1) + x * (Real(1) - s));
                 });
  }

  // Same data, new shape; numel must match.
  ValueId reshape(ValueId a, std::vector<int> shape) {
    const Tensor& av = node(a).value;
    Tensor probe = Tensor::zeros(shape);
    if (probe.numel() != av.numel()) {
      throw ShapeError("reshape " + av.shape_str() + " -> " + probe.shape_str());
    }
    Node n;
    n.op = "reshape";
    n.requires_grad = node(a).requires_grad;
    n.value = std::move(probe);
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out] {
      const Tensor& A = node(a).value;
      Tensor& O = mut(out).value;
      for (std::int64_t i = 0; i < A.numel(); ++i) O[i] = A[i];
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out] {
        if (!node(a).requires_grad) return;
        const Tensor& G = node(out).grad;
        Tensor& da = grad_buf(a);
        for (std::int64_t i = 0; i < G.numel(); ++i) da[i] += G[i];
      });
    }
    return out;
  }

  // Stacks rank-2 blocks with equal column counts along rows. Rank-1 inputs
  // count as single rows.
  ValueId concat_rows(std::vector<ValueId> parts) {
    if (parts.empty()) throw ContractError("concat_rows of zero parts");
    const int cols = node(parts[0]).value.cols();
    int rows = 0;
    bool req = false;
    for (ValueId p : parts) {
      const Tensor& v = node(p).value;
      if (v.ndim() > 2 || v.cols() != cols) {
        throw ShapeError("concat_rows: column mismatch at part with shape " + v.shape_str());
      }
      rows += v.rows();
      req = req || node(p).requires_grad;
    }
    Node n;
    n.op = "concat_rows";
    n.requires_grad = req;
    n.value = Tensor::zeros({rows, cols});
    ValueId out = push(std::move(n));
    auto fwd = [this, parts, out] {
      Tensor& O = mut(out).value;
      std::int64_t at = 0;
      for (ValueId p : parts) {
        const Tensor& v = node(p).value;
        for (std::int64_t i = 0; i < v.numel(); ++i) O[at + i] = v[i];
        at += v.numel();
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, parts, out] {
        const Tensor& G = node(out).grad;
        std::int64_t at = 0;
        for (ValueId p : parts) {
          const std::int64_t n_el = node(p).value.numel();
          if (node(p).requires_grad) {
            Tensor& dp = grad_buf(p);
            for (std::int64_t i = 0; i < n_el; ++i) dp[i] += G[at + i];
          }
          at += n_el;
        }
      });
    }
    return out;
  }

  // Row range [r0, r1) of a rank-2 tensor.
  ValueId slice_rows(ValueId a, int r0, int r1) {
    const Tensor& av = node(a).value;
    if (av.ndim() != 2) throw ShapeError("slice_rows needs rank-2, got " + av.shape_str());
    if (r0 < 0 || r1 > av.dim(0) || r0 >= r1) {
      throw ShapeError("slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                       ") out of " + av.shape_str());
    }
    const int cols = av.cols();
    Node n;
    n.op = "slice_rows";
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros({r1 - r0, cols});
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, r0, r1, cols] {
      const Tensor& A = node(a).value;
      Tensor& O = mut(out).value;
      for (int r = r0; r < r1; ++r) {
        for (int c = 0; c < cols; ++c) O.at(r - r0, c) = A.at(r, c);
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, r0, r1, cols] {
        if (!node(a).requires_grad) return;
        const Tensor& G = node(out).grad;
        Tensor& da = grad_buf(a);
        for (int r = r0; r < r1; ++r) {
          for (int c = 0; c < cols; ++c) da.at(r, c) += G.at(r - r0, c);
        }
      });
    }
    return out;
  }

  ValueId concat_cols(std::vector<ValueId> parts) {
    if (parts.empty()) throw ContractError("concat_cols of zero parts");
    const int rows = node(parts[0]).value.rows();
    int cols = 0;
    bool req = false;
    for (ValueId p : parts) {
      const Tensor& v = node(p).value;
      if (v.ndim() != 2 || v.rows() != rows) {
        throw ShapeError("concat_cols: row mismatch at part with shape " + v.shape_str());
      }
      cols += v.cols();
      req = req || node(p).requires_grad;
    }
    Node n;
    n.op = "concat_cols";
    n.requires_grad = req;
    n.value = Tensor::zeros({rows, cols});
    ValueId out = push(std::move(n));
    auto fwd = [this, parts, out, rows] {
      Tensor& O = mut(out).value;
      int c_at = 0;
      for (ValueId p : parts) {
        const Tensor& v = node(p).value;
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < v.cols(); ++c) O.at(r, c_at + c) = v.at(r, c);
        }
        c_at += v.cols();
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, parts, out, rows] {
        const Tensor& G = node(out).grad;
        int c_at = 0;
        for (ValueId p : parts) {
          const int pc = node(p).value.cols();
          if (node(p).requires_grad) {
            Tensor& dp = grad_buf(p);
            for (int r = 0; r < rows; ++r) {
              for (int c = 0; c < pc; ++c) dp.at(r, c) += G.at(r, c_at + c);
            }
          }
          c_at += pc;
        }
      });
    }
    return out;
  }

  ValueId slice_cols(ValueId a, int c0, int c1) {
    const Tensor& av = node(a).value;
    if (av.ndim() != 2) throw ShapeError("slice_cols needs rank-2, got " + av.shape_str());
    if (c0 < 0 || c1 > av.dim(1) || c0 >= c1) {
      throw ShapeError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                       ") out of " + av.shape_str());
    }
    const int rows = av.dim(0);
    Node n;
    n.op = "slice_cols";
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros({rows, c1 - c0});
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, c0, c1, rows] {
      const Tensor& A = node(a).value;
      Tensor& O = mut(out).value;
      for (int r = 0; r < rows; ++r) {
        for (int c = c0; c < c1; ++c) O.at(r, c - c0) = A.at(r, c);
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, c0, c1, rows] {
        if (!node(a).requires_grad) return;
        const Tensor& G = node(out).grad;
        Tensor& da = grad_buf(a);
        for (int r = 0; r < rows; ++r) {
          for (int c = c0; c < c1; ++c) da.at(r, c) += G.at(r, c - c0);
        }
      });
    }
    return out;
  }

  // out[r, :] = table[ids[r], :]. Duplicate ids accumulate gradient.
  ValueId gather_rows(ValueId table, std::vector<int> ids) {
    const Tensor& tv = node(table).value;
    if (tv.ndim() != 2) throw ShapeError("gather_rows needs rank-2 table");
    for (int id : ids) {
      if (id < 0 || id >= tv.dim(0)) {
        throw VocabError("row id " + std::to_string(id) + " outside table " + tv.shape_str());
      }
    }
    const int cols = tv.cols();
    Node n;
    n.op = "gather_rows";
    n.requires_grad = node(table).requires_grad;
    n.value = Tensor::zeros({static_cast<int>(ids.size()), cols});
    ValueId out = push(std::move(n));
    auto fwd = [this, table, out, ids, cols] {
      const Tensor& T = node(table).value;
      Tensor& O = mut(out).value;
      for (std::size_t r = 0; r < ids.size(); ++r) {
        for (int c = 0; c < cols; ++c) O.at(static_cast<int>(r), c) = T.at(ids[r], c);
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, table, out, ids, cols] {
        if (!node(table).requires_grad) return;
        const Tensor& G = node(out).grad;
        Tensor& dt = grad_buf(table);
        for (std::size_t r = 0; r < ids.size(); ++r) {
          for (int c = 0; c < cols; ++c) dt.at(ids[r], c) += G.at(static_cast<int>(r), c);
        }
      });
    }
    return out;
  }

  // Row-wise softmax over the full last dimension.
  ValueId softmax(ValueId a) { return softmax_impl(a, nullptr); }

  // Row-wise softmax restricted to mask-allowed columns. Blocked columns get
  // probability exactly 0; the distribution renormalizes over the allowed
  // set. Requires square scores matching the mask size.
  ValueId masked_softmax(ValueId scores, std::shared_ptr<const AttentionMask> mask) {
    if (!mask) throw ContractError("masked_softmax: null mask");
    const Tensor& sv = node(scores).value;
    if (sv.ndim() != 2 || sv.dim(0) != mask->size() || sv.dim(1) != mask->size()) {
      throw ShapeError("masked_softmax: scores " + sv.shape_str() + " vs mask size " +
                       std::to_string(mask->size()));
    }
    return softmax_impl(scores, std::move(mask));
  }

  // gain * (x - mean) / sqrt(var + eps) + bias, per row.
  ValueId layer_norm(ValueId x, ValueId gain, ValueId bias, Real eps) {
    const Tensor& xv = node(x).value;
    const Tensor& gv = node(gain).value;
    const Tensor& bv = node(bias).value;
    const int d = xv.cols();
    if (gv.ndim() != 1 || bv.ndim() != 1 || gv.dim(0) != d || bv.dim(0) != d) {
      throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
    }
    if (d < 2) throw ShapeError("layer_norm needs at least 2 features");
    Node n;
    n.op = "layer_norm";
    n.requires_grad =
        node(x).requires_grad || node(gain).requires_grad || node(bias).requires_grad;
    n.value = Tensor::zeros(xv.shape());
    ValueId out = push(std::move(n));
    auto fwd = [this, x, gain, bias, out, eps, d] {
      const Tensor& X = node(x).value;
      const Tensor& Gn = node(gain).value;
      const Tensor& B = node(bias).value;
      Tensor& O = mut(out).value;
      const int rows = X.rows();
      for (int r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (int c = 0; c < d; ++c) mean += static_cast<double>(X.at(r, c));
        mean /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
          const double t = static_cast<double>(X.at(r, c)) - mean;
          var += t * t;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        for (int c = 0; c < d; ++c) {
          const double xn = (static_cast<double>(X.at(r, c)) - mean) * inv;
          O.at(r, c) = static_cast<Real>(xn) * Gn[c] + B[c];
        }
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, x, gain, bias, out, eps, d] {
        const Tensor& X = node(x).value;
        const Tensor& Gn = node(gain).value;
        const Tensor& G = node(out).grad;
        const int rows = X.rows();
        const bool need_x = node(x).requires_grad;
        const bool need_g = node(gain).requires_grad;
        const bool need_b = node(bias).requires_grad;
        for (int r = 0; r < rows; ++r) {
          double mean = 0.0;
          for (int c = 0; c < d; ++c) mean += static_cast<double>(X.at(r, c));
          mean /= d;
          double var = 0.0;
          for (int c = 0; c < d; ++c) {
            const double t = static_cast<double>(X.at(r, c)) - mean;
            var += t * t;
          }
          var /= d;
          const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
          // dy/dxn then xn backward through the normalization.
          double sum_dxn = 0.0, sum_dxn_xn = 0.0;
          for (int c = 0; c < d; ++c) {
            const double xn = (static_cast<double>(X.at(r, c)) - mean) * inv;
            const double dxn = static_cast<double>(G.at(r, c)) * static_cast<double>(Gn[c]);
            sum_dxn += dxn;
            sum_dxn_xn += dxn * xn;
            if (need_g) grad_buf(gain)[c] += static_cast<Real>(static_cast<double>(G.at(r, c)) * xn);
            if (need_b) grad_buf(bias)[c] += G.at(r, c);
          }
          if (need_x) {
            Tensor& dx = grad_buf(x);
            for (int c = 0; c < d; ++c) {
              const double xn = (static_cast<double>(X.at(r, c)) - mean) * inv;
              const double dxn = static_cast<double>(G.at(r, c)) * static_cast<double>(Gn[c]);
              dx.at(r, c) +=
                  static_cast<Real>(inv * (dxn - sum_dxn / d - xn * sum_dxn_xn / d));
            }
          }
        }
      });
    }
    return out;
  }

  // Mean of all elements -> scalar.
  ValueId mean_all(ValueId a) {
    const std::int64_t n_el = node(a).value.numel();
    if (n_el == 0) throw ShapeError("mean_all of empty tensor");
    Node n;
    n.op = "mean_all";
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros({1});
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, n_el] {
      const Tensor& A = node(a).value;
      double s = 0.0;
      for (std::int64_t i = 0; i < n_el; ++i) s += static_cast<double>(A[i]);
      mut(out).value[0] = static_cast<Real>(s / static_cast<double>(n_el));
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, n_el] {
        if (!node(a).requires_grad) return;
        const Real g = node(out).grad[0] / static_cast<Real>(n_el);
        Tensor& da = grad_buf(a);
        for (std::int64_t i = 0; i < n_el; ++i) da[i] += g;
      });
    }
    return out;
  }

  // Column means of a rank-2 tensor -> rank-1 [cols]. This is the average
  // fusion of a multi-row embedding.
  ValueId mean_rows(ValueId a) {
    const Tensor& av = node(a).value;
    if (av.ndim() != 2 || av.dim(0) == 0) {
      throw ShapeError("mean_rows needs non-empty rank-2, got " + av.shape_str());
    }
    const int rows = av.dim(0), cols = av.dim(1);
    Node n;
    n.op = "mean_rows";
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros({cols});
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, rows, cols] {
      const Tensor& A = node(a).value;
      Tensor& O = mut(out).value;
      for (int c = 0; c < cols; ++c) {
        double s = 0.0;
        for (int r = 0; r < rows; ++r) s += static_cast<double>(A.at(r, c));
        O[c] = static_cast<Real>(s / rows);
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, rows, cols] {
        if (!node(a).requires_grad) return;
        const Tensor& G = node(out).grad;
        Tensor& da = grad_buf(a);
        for (int r = 0; r < rows; ++r) {
          for (int c = 0; c < cols; ++c) da.at(r, c) += G[c] / static_cast<Real>(rows);
        }
      });
    }
    return out;
  }

  // Rows scaled to unit L2 norm; rank-1 treated as one row. A row whose norm
  // underflows to zero has no defined direction.
  ValueId l2_normalize_rows(ValueId a) {
    const Tensor& av = node(a).value;
    if (av.ndim() < 1 || av.ndim() > 2) {
      throw ShapeError("l2_normalize_rows needs rank 1 or 2, got " + av.shape_str());
    }
    const int rows = av.rows(), cols = av.cols();
    Node n;
    n.op = "l2_normalize_rows";
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros(av.shape());
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, rows, cols] {
      const Tensor& A = node(a).value;
      Tensor& O = mut(out).value;
      for (int r = 0; r < rows; ++r) {
        const double nrm = row_norm(A, r, cols);
        if (nrm == 0.0) {
          throw DegenerateVectorError("l2_normalize_rows: row " + std::to_string(r) +
                                      " has zero norm");
        }
        for (int c = 0; c < cols; ++c) {
          O[static_cast<std::int64_t>(r) * cols + c] =
              static_cast<Real>(static_cast<double>(A[static_cast<std::int64_t>(r) * cols + c]) / nrm);
        }
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, rows, cols] {
        if (!node(a).requires_grad) return;
        const Tensor& A = node(a).value;
        const Tensor& Y = node(out).value;
        const Tensor& G = node(out).grad;
        Tensor& da = grad_buf(a);
        for (int r = 0; r < rows; ++r) {
          const double nrm = row_norm(A, r, cols);
          double ydotg = 0.0;
          for (int c = 0; c < cols; ++c) {
            const std::int64_t i = static_cast<std::int64_t>(r) * cols + c;
            ydotg += static_cast<double>(Y[i]) * static_cast<double>(G[i]);
          }
          for (int c = 0; c < cols; ++c) {
            const std::int64_t i = static_cast<std::int64_t>(r) * cols + c;
            da[i] += static_cast<Real>(
                (static_cast<double>(G[i]) - static_cast<double>(Y[i]) * ydotg) / nrm);
          }
        }
      });
    }
    return out;
  }

  // Cosine similarity of two equal-shape vectors -> scalar.
  ValueId cosine(ValueId a, ValueId b) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    if (!av.same_shape(bv)) {
      throw ShapeError("cosine: " + av.shape_str() + " vs " + bv.shape_str());
    }
    if (av.numel() == 0) throw ShapeError("cosine of empty vectors");
    const std::int64_t n_el = av.numel();
    Node n;
    n.op = "cosine";
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = Tensor::zeros({1});
    ValueId out = push(std::move(n));
    auto fwd = [this, a, b, out, n_el] {
      const Tensor& A = node(a).value;
      const Tensor& B = node(b).value;
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::int64_t i = 0; i < n_el; ++i) {
        dot += static_cast<double>(A[i]) * static_cast<double>(B[i]);
        na += static_cast<double>(A[i]) * static_cast<double>(A[i]);
        nb += static_cast<double>(B[i]) * static_cast<double>(B[i]);
      }
      if (na == 0.0 || nb == 0.0) {
        throw DegenerateVectorError("cosine of zero-norm vector");
      }
      mut(out).value[0] = static_cast<Real>(dot / (std::sqrt(na) * std::sqrt(nb)));
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, b, out, n_el] {
        const Tensor& A = node(a).value;
        const Tensor& B = node(b).value;
        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (std::int64_t i = 0; i < n_el; ++i) {
          dot += static_cast<double>(A[i]) * static_cast<double>(B[i]);
          na2 += static_cast<double>(A[i]) * static_cast<double>(A[i]);
          nb2 += static_cast<double>(B[i]) * static_cast<double>(B[i]);
        }
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        const double cosv = dot / (na * nb);
        const double g = static_cast<double>(node(out).grad[0]);
        if (node(a).requires_grad) {
          Tensor& da = grad_buf(a);
          for (std::int64_t i = 0; i < n_el; ++i) {
            da[i] += static_cast<Real>(g * (static_cast<double>(B[i]) / (na * nb) -
                                            cosv * static_cast<double>(A[i]) / na2));
          }
        }
        if (node(b).requires_grad) {
          Tensor& db = grad_buf(b);
          for (std::int64_t i = 0; i < n_el; ++i) {
            db[i] += static_cast<Real>(g * (static_cast<double>(A[i]) / (na * nb) -
                                            cosv * static_cast<double>(B[i]) / nb2));
          }
        }
      });
    }
    return out;
  }

  // log(sum_i exp(x_i)) of a rank-1 tensor, computed as
  //   m + log1p(sum_{i != imax} exp(x_i - m)),  m = max x.
  // The log1p form keeps full relative precision when one term dominates
  // (near-zero losses), where the naive max-shift form would round to 0.
  ValueId logsumexp(ValueId a) {
    const Tensor& av = node(a).value;
    if (av.ndim() != 1 || av.numel() == 0) {
      throw ShapeError("logsumexp needs non-empty rank-1, got " + av.shape_str());
    }
    const std::int64_t n_el = av.numel();
    Node n;
    n.op = "logsumexp";
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros({1});
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, n_el] {
      const Tensor& A = node(a).value;
      std::int64_t imax = 0;
      for (std::int64_t i = 1; i < n_el; ++i) {
        if (A[i] > A[imax]) imax = i;
      }
      const double m = static_cast<double>(A[imax]);
      double rest = 0.0;
      for (std::int64_t i = 0; i < n_el; ++i) {
        if (i != imax) rest += std::exp(static_cast<double>(A[i]) - m);
      }
      mut(out).value[0] = static_cast<Real>(m + std::log1p(rest));
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, n_el] {
        if (!node(a).requires_grad) return;
        const Tensor& A = node(a).value;
        const double lse = static_cast<double>(node(out).value[0]);
        const double g = static_cast<double>(node(out).grad[0]);
        Tensor& da = grad_buf(a);
        for (std::int64_t i = 0; i < n_el; ++i) {
          da[i] += static_cast<Real>(g * std::exp(static_cast<double>(A[i]) - lse));
        }
      });
    }
    return out;
  }

  // Packs scalar nodes into one rank-1 tensor.
  ValueId stack_scalars(std::vector<ValueId> parts) {
    if (parts.empty()) throw ContractError("stack_scalars of zero parts");
    bool req = false;
    for (ValueId p : parts) {
      if (node(p).value.numel() != 1) {
        throw ShapeError("stack_scalars: part is not scalar: " + node(p).value.shape_str());
      }
      req = req || node(p).requires_grad;
    }
    Node n;
    n.op = "stack_scalars";
    n.requires_grad = req;
    n.value = Tensor::zeros({static_cast<int>(parts.size())});
    ValueId out = push(std::move(n));
    auto fwd = [this, parts, out] {
      Tensor& O = mut(out).value;
      for (std::size_t i = 0; i < parts.size(); ++i) O[static_cast<std::int64_t>(i)] = node(parts[i]).value[0];
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, parts, out] {
        const Tensor& G = node(out).grad;
        for (std::size_t i = 0; i < parts.size(); ++i) {
          if (node(parts[i]).requires_grad) {
            grad_buf(parts[i])[0] += G[static_cast<std::int64_t>(i)];
          }
        }
      });
    }
    return out;
  }

  // Extracts one element by flat index -> scalar.
  ValueId pick(ValueId a, std::int64_t flat) {
    const Tensor& av = node(a).value;
    if (flat < 0 || flat >= av.numel()) {
      throw ContractError("pick index " + std::to_string(flat) + " outside " + av.shape_str());
    }
    Node n;
    n.op = "pick";
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros({1});
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, flat] { mut(out).value[0] = node(a).value[flat]; };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, flat] {
        if (!node(a).requires_grad) return;
        grad_buf(a)[flat] += node(out).grad[0];
      });
    }
    return out;
  }

  // Single row of a rank-2 tensor as a rank-1 vector (helper composition).
  ValueId row(ValueId a, int r) {
    const int cols = node(a).value.cols();
    return reshape(slice_rows(a, r, r + 1), {cols});
  }

  const char* op_name(ValueId id) const { return node(id).op; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until the reverse pass touches it
    std::function<void()> recompute;
    std::function<void()> backprop;
    bool requires_grad = false;
    bool backprop_set = false;
    const char* op = "";
  };

  using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  static Eigen::Map<const EMat> emap(const Tensor& t) {
    return Eigen::Map<const EMat>(t.data(), t.rows(), t.cols());
  }
  static Eigen::Map<EMat> emap_mut(Tensor& t) {
    return Eigen::Map<EMat>(t.data(), t.rows(), t.cols());
  }

  static Real sigmoid(Real x) {
    if (x >= Real(0)) {
      const Real e = std::exp(-x);
      return Real(1) / (Real(1) + e);
    }
    const Real e = std::exp(x);
    return e / (Real(1) + e);
  }

  static double row_norm(const Tensor& t, int r, int cols) {
    double s = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double x = static_cast<double>(t[static_cast<std::int64_t>(r) * cols + c]);
      s += x * x;
    }
    return std::sqrt(s);
  }

  ValueId push(Node n) {
    nodes_.push_back(std::move(n));
    return ValueId{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Node& node(ValueId id) const {
    if (!id.valid() || static_cast<std::size_t>(id.idx) >= nodes_.size()) {
      throw ContractError("value id does not belong to this tape");
    }
    return nodes_[static_cast<std::size_t>(id.idx)];
  }

  Node& mut(ValueId id) { return const_cast<Node&>(node(id)); }

  Tensor& grad_buf(ValueId id) {
    Node& n = mut(id);
    if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

  void set_backprop(ValueId id, std::function<void()> fn) {
    Node& n = mut(id);
    if (n.requires_grad) {
      n.backprop = std::move(fn);
      n.backprop_set = true;
    }
  }

  void require_recording(const char* what) const {
    if (!record_) {
      throw ContractError(std::string(what) + " unavailable on a forward-only tape");
    }
  }

  void sweep(std::int32_t from) {
    for (std::int32_t i = from; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.grad.empty() && n.backprop_set) {
        n.backprop();
        // Interior cotangents are consumed by the sweep so that repeated
        // backward calls on one tape never re-propagate stale contributions.
        // Only leaf gradients accumulate across calls.
        n.grad = Tensor();
      }
    }
  }

  template <class FwdFn, class DFn>
  ValueId unary(ValueId a, const char* opname, FwdFn f, DFn dfdx) {
    const Tensor& av = node(a).value;
    Node n;
    n.op = opname;
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros(av.shape());
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, f] {
      const Tensor& A = node(a).value;
      Tensor& O = mut(out).value;
      for (std::int64_t i = 0; i < A.numel(); ++i) O[i] = f(A[i]);
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, dfdx] {
        if (!node(a).requires_grad) return;
        const Tensor& A = node(a).value;
        const Tensor& Y = node(out).value;
        const Tensor& G = node(out).grad;
        Tensor& da = grad_buf(a);
        for (std::int64_t i = 0; i < A.numel(); ++i) da[i] += G[i] * dfdx(A[i], Y[i]);
      });
    }
    return out;
  }

  ValueId binary_elementwise(ValueId a, ValueId b, const char* opname) {
    const Tensor& av = node(a).value;
    const Tensor& bv = node(b).value;
    if (!av.same_shape(bv)) {
      throw ShapeError(std::string(opname) + ": " + av.shape_str() + " vs " + bv.shape_str());
    }
    const char kind = opname[0];  // 'a'dd, 's'ub, 'm'ul
    Node n;
    n.op = opname;
    n.requires_grad = node(a).requires_grad || node(b).requires_grad;
    n.value = Tensor::zeros(av.shape());
    ValueId out = push(std::move(n));
    auto fwd = [this, a, b, out, kind] {
      const Tensor& A = node(a).value;
      const Tensor& B = node(b).value;
      Tensor& O = mut(out).value;
      for (std::int64_t i = 0; i < A.numel(); ++i) {
        O[i] = kind == 'a' ? A[i] + B[i] : (kind == 's' ? A[i] - B[i] : A[i] * B[i]);
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, b, out, kind] {
        const Tensor& A = node(a).value;
        const Tensor& B = node(b).value;
        const Tensor& G = node(out).grad;
        if (node(a).requires_grad) {
          Tensor& da = grad_buf(a);
          for (std::int64_t i = 0; i < G.numel(); ++i) {
            da[i] += kind == 'm' ? G[i] * B[i] : G[i];
          }
        }
        if (node(b).requires_grad) {
          Tensor& db = grad_buf(b);
          for (std::int64_t i = 0; i < G.numel(); ++i) {
            db[i] += kind == 'm' ? G[i] * A[i] : (kind == 's' ? -G[i] : G[i]);
          }
        }
      });
    }
    return out;
  }

  ValueId softmax_impl(ValueId a, std::shared_ptr<const AttentionMask> mask) {
    const Tensor& av = node(a).value;
    if (av.ndim() != 2) throw ShapeError("softmax needs rank-2, got " + av.shape_str());
    const int rows = av.dim(0), cols = av.dim(1);
    Node n;
    n.op = mask ? "masked_softmax" : "softmax";
    n.requires_grad = node(a).requires_grad;
    n.value = Tensor::zeros(av.shape());
    // NOTE: push() may reallocate the node vector; `av` is dead past here.
    ValueId out = push(std::move(n));
    auto fwd = [this, a, out, mask, rows, cols] {
      const Tensor& A = node(a).value;
      Tensor& O = mut(out).value;
      for (int r = 0; r < rows; ++r) {
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < cols; ++c) {
          if (!mask || mask->allow(r, c)) m = std::max(m, static_cast<double>(A.at(r, c)));
        }
        if (!std::isfinite(m)) {
          throw ContractError("softmax row " + std::to_string(r) + " has no allowed column");
        }
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
          if (!mask || mask->allow(r, c)) {
            const double e = std::exp(static_cast<double>(A.at(r, c)) - m);
            O.at(r, c) = static_cast<Real>(e);
            z += e;
          } else {
            O.at(r, c) = Real(0);
          }
        }
        for (int c = 0; c < cols; ++c) {
          O.at(r, c) = static_cast<Real>(static_cast<double>(O.at(r, c)) / z);
        }
      }
    };
    fwd();
    if (record_) {
      mut(out).recompute = fwd;
      set_backprop(out, [this, a, out, rows, cols] {
        if (!node(a).requires_grad) return;
        const Tensor& P = node(out).value;
        const Tensor& G = node(out).grad;
        Tensor& da = grad_buf(a);
        // Blocked columns carry p == 0, so the same formula zeroes them.
        for (int r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (int c = 0; c < cols; ++c) {
            dot += static_cast<double>(P.at(r, c)) * static_cast<double>(G.at(r, c));
          }
          for (int c = 0; c < cols; ++c) {
            da.at(r, c) += static_cast<Real>(static_cast<double>(P.at(r, c)) *
                                             (static_cast<double>(G.at(r, c)) - dot));
          }
        }
      });
    }
    return out;
  }

  std::vector<Node> nodes_;
  bool record_;
};

using Tape = TapeT<float>;

}  // namespace rematch
