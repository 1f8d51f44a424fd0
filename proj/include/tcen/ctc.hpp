#pragma once

// Connectionist temporal classification: path collapse semantics, a
// brute-force legal-path enumerator, the differentiable log-space forward
// recursion, and frame-wise greedy decoding. The blank token id is always
// vocab_size (the last classifier row).

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "tcen/autodiff.hpp"
#include "tcen/common.hpp"
#include "tcen/tensor.hpp"

namespace tcen {

struct LabelSequence {
  std::vector<int> ids;  // over V_src, blank excluded
  bool operator==(const LabelSequence&) const = default;
};

struct CtcPath {
  std::vector<int> ids;  // over V_src + {blank}
  bool operator==(const CtcPath&) const = default;
};

// Interleaved blank-label sequence of length 2|y|+1; blanks at even slots.
struct ExtendedLabels {
  std::vector<int> ids;
};

inline ExtendedLabels extend_labels(const LabelSequence& y, int blank) {
  ExtendedLabels ext;
  ext.ids.reserve(2 * y.ids.size() + 1);
  ext.ids.push_back(blank);
  for (int id : y.ids) {
    ext.ids.push_back(id);
    ext.ids.push_back(blank);
  }
  return ext;
}

// The standard B(.) map: merge consecutive repeats, then drop blanks.
inline LabelSequence collapse(const CtcPath& path, int blank) {
  LabelSequence out;
  int prev = -1;
  for (int id : path.ids) {
    if (id != prev && id != blank) out.ids.push_back(id);
    prev = id;
  }
  return out;
}

// Shortest path length that can spell y: one frame per label plus a
// separating blank between adjacent equal labels.
inline int min_feasible_length(const LabelSequence& y) {
  int need = static_cast<int>(y.ids.size());
  for (std::size_t i = 1; i < y.ids.size(); ++i)
    if (y.ids[i] == y.ids[i - 1]) ++need;
  return need;
}

// All length-T paths over V + blank whose collapse equals y, by exhaustive
// enumeration. Deliberately brute force; this is the oracle the lattice
// recursion is checked against.
inline std::vector<CtcPath> enumerate_legal_paths(const LabelSequence& y, int T, int vocab_size) {
  if (T < 0) throw UsageError("enumerate_legal_paths: negative length");
  double total = std::pow(static_cast<double>(vocab_size + 1), static_cast<double>(T));
  if (total > 1e7)
    throw UsageError(cat("enumerate_legal_paths: (V+1)^T = ", total, " exceeds 1e7"));
  std::vector<CtcPath> out;
  CtcPath candidate;
  candidate.ids.assign(static_cast<std::size_t>(T), 0);
  int blank = vocab_size;
  while (true) {
    if (collapse(candidate, blank) == y) out.push_back(candidate);
    int pos = T - 1;
    while (pos >= 0 && candidate.ids[pos] == vocab_size) {
      candidate.ids[pos] = 0;
      --pos;
    }
    if (pos < 0) break;
    ++candidate.ids[pos];
  }
  return out;
}

struct CtcLossResult {
  Var loss;        // scalar -log P(y|x); +inf sentinel when infeasible
  bool feasible = true;
};

// Log-space forward recursion over the extended label lattice, built from
// differentiable primitives so the tape produces exact gradients. Rows of
// log_probs are assumed normalized (T x (vocab_size+1), blank last).
inline CtcLossResult ctc_loss(Var log_probs, const LabelSequence& y, int vocab_size) {
  Tape& tape = *log_probs.tape;
  const Tensor& lp = cvalue_of(log_probs);
  if (lp.shape.size() != 2 || lp.cols() != vocab_size + 1)
    throw DataError(cat("ctc_loss: log_probs must be Tx", vocab_size + 1, ", got ", lp.rows(),
                        "x", lp.cols()));
  if (y.ids.empty()) throw DataError("ctc_loss: empty label sequence");
  for (int id : y.ids)
    if (id < 0 || id >= vocab_size)
      throw DataError(cat("ctc_loss: label id ", id, " outside vocabulary of ", vocab_size));
  int T = lp.rows();
  int blank = vocab_size;
  if (T < min_feasible_length(y)) {
    // Infeasible target for this many frames; +inf sentinel, never NaN.
    return {tape.leaf(Tensor::scalar(std::numeric_limits<double>::infinity())), false};
  }

  ExtendedLabels ext = extend_labels(y, blank);
  int S = static_cast<int>(ext.ids.size());

  // skip transition s-2 -> s is legal only into a label differing from the
  // one two slots back
  Tensor skip_mask = Tensor::full({1, S}, kLogZero);
  bool any_skip = false;
  for (int s = 2; s < S; ++s) {
    if (ext.ids[s] != blank && ext.ids[s] != ext.ids[s - 2]) {
      skip_mask.at(0, s) = 0.0;
      any_skip = true;
    }
  }

  Tensor init_mask = Tensor::full({1, S}, kLogZero);
  init_mask.at(0, 0) = 0.0;
  if (S > 1) init_mask.at(0, 1) = 0.0;

  Var emit0 = gather(slice_rows(log_probs, 0, 1), ext.ids);
  Var alpha = add(emit0, tape.leaf(init_mask));

  Var pad1 = tape.leaf(Tensor::full({1, 1}, kLogZero));
  Var pad2 = tape.leaf(Tensor::full({1, 2}, kLogZero));
  Var skip_mask_v = any_skip ? tape.leaf(skip_mask) : Var{};

  for (int t = 1; t < T; ++t) {
    Var stay = alpha;
    Var step1 = concat(pad1, slice_cols(alpha, 0, S - 1), 1);
    Var combined = logaddexp(stay, step1);
    if (any_skip && S > 2) {
      Var step2 = concat(pad2, slice_cols(alpha, 0, S - 2), 1);
      combined = logaddexp(combined, add(step2, skip_mask_v));
    }
    Var emit = gather(slice_rows(log_probs, t, t + 1), ext.ids);
    alpha = add(combined, emit);
  }

  Var total = logsumexp(gather(alpha, {S - 2, S - 1}));
  return {scale(total, -1.0), true};
}

// Frame-wise argmax; ties go to the lowest token id.
inline CtcPath greedy_decode(const Tensor& log_probs) {
  CtcPath path;
  path.ids.reserve(static_cast<std::size_t>(log_probs.rows()));
  for (int t = 0; t < log_probs.rows(); ++t) {
    int best = 0;
    for (int c = 1; c < log_probs.cols(); ++c)
      if (log_probs.at(t, c) > log_probs.at(t, best)) best = c;
    path.ids.push_back(best);
  }
  return path;
}

}  // namespace tcen
