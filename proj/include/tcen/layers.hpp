#pragma once

// Recurrent building blocks shared by the translation model and the
// repetition noiser: gated cells, uni/bidirectional stacks, additive
// attention, and an attention decoder.

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "tcen/autodiff.hpp"
#include "tcen/tensor.hpp"

namespace tcen {

struct CallCounters {
  long speech_encode = 0;
  long text_encode = 0;
  long decode_step = 0;
};

// Per-forward context: one tape per batch, dropout only when training.
struct Fwd {
  Tape& tape;
  bool train = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
  CallCounters* counters = nullptr;

  Var maybe_dropout(Var x) const {
    if (!train || dropout <= 0.0) return x;
    if (rng == nullptr) throw UsageError("forward: dropout requires a seeded rng");
    return tcen::dropout(x, dropout, *rng);
  }
};

inline Parameter make_param(const std::string& name, int rows, int cols, std::mt19937_64& rng) {
  return Parameter(name, glorot_uniform(rows, cols, rng));
}

struct Linear {
  Parameter w;  // in x out
  Parameter b;  // 1 x out

  Linear() = default;
  Linear(const std::string& prefix, int in, int out, std::mt19937_64& rng)
      : w(make_param(prefix + ".w", in, out, rng)), b(prefix + ".b", Tensor::zeros({1, out})) {}

  Var apply(Fwd& f, Var x) { return add(matmul(x, f.tape.param(w)), f.tape.param(b)); }
  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Standard gated recurrent cell (input/forget/output gating with a tanh
// candidate). Gate order in the packed matrix: i, f, g, o. The forget
// bias starts at 1.
struct LstmCell {
  Parameter w;  // (in+hidden) x 4*hidden
  Parameter b;  // 1 x 4*hidden
  int hidden = 0;

  LstmCell() = default;
  LstmCell(const std::string& prefix, int in, int h, std::mt19937_64& rng)
      : w(make_param(prefix + ".w", in + h, 4 * h, rng)),
        b(prefix + ".b", Tensor::zeros({1, 4 * h})),
        hidden(h) {
    for (int c = h; c < 2 * h; ++c) b.value.at(0, c) = 1.0;
  }

  struct State {
    Var h, c;
  };

  State initial(Tape& t) const {
    Var z = t.leaf(Tensor::zeros({1, hidden}));
    return {z, z};
  }

  State step(Fwd& f, Var x, const State& prev) {
    Tape& t = f.tape;
    Var gates = add(matmul(concat(x, prev.h, 1), t.param(w)), t.param(b));
    Var i = sigmoid(slice_cols(gates, 0, hidden));
    Var fg = sigmoid(slice_cols(gates, hidden, 2 * hidden));
    Var g = tanh_op(slice_cols(gates, 2 * hidden, 3 * hidden));
    Var o = sigmoid(slice_cols(gates, 3 * hidden, 4 * hidden));
    Var c = add(mul(fg, prev.c), mul(i, g));
    return {mul(o, tanh_op(c)), c};
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// Unidirectional stack; dropout after every layer's output when training.
struct UniStack {
  std::vector<LstmCell> layers;

  UniStack() = default;
  UniStack(const std::string& prefix, int in, int hidden, int n_layers, std::mt19937_64& rng) {
    for (int l = 0; l < n_layers; ++l)
      layers.emplace_back(cat(prefix, ".l", l), l == 0 ? in : hidden, hidden, rng);
  }

  // seq: T x in, returns T x hidden (top layer states)
  Var run(Fwd& f, Var seq) {
    int T = cvalue_of(seq).rows();
    std::vector<Var> rows;
    rows.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) rows.push_back(slice_rows(seq, t, t + 1));
    for (LstmCell& cell : layers) {
      LstmCell::State s = cell.initial(f.tape);
      for (int t = 0; t < T; ++t) {
        s = cell.step(f, rows[static_cast<std::size_t>(t)], s);
        rows[static_cast<std::size_t>(t)] = f.maybe_dropout(s.h);
      }
    }
    return stack_rows(f.tape, rows);
  }

  void collect(std::vector<Parameter*>& out) {
    for (auto& c : layers) c.collect(out);
  }
};

// Bidirectional stack; each layer runs half-width cells both ways and
// concatenates, so the output width stays `hidden`.
struct BiStack {
  std::vector<std::pair<LstmCell, LstmCell>> layers;
  int hidden = 0;

  BiStack() = default;
  BiStack(const std::string& prefix, int in, int hidden_total, int n_layers,
          std::mt19937_64& rng)
      : hidden(hidden_total) {
    if (hidden_total % 2 != 0)
      throw UsageError("bidirectional stack needs an even hidden size");
    int h = hidden_total / 2;
    for (int l = 0; l < n_layers; ++l) {
      int layer_in = l == 0 ? in : hidden_total;
      layers.emplace_back(LstmCell(cat(prefix, ".l", l, ".fwd"), layer_in, h, rng),
                          LstmCell(cat(prefix, ".l", l, ".bwd"), layer_in, h, rng));
    }
  }

  Var run(Fwd& f, Var seq) {
    int T = cvalue_of(seq).rows();
    std::vector<Var> rows;
    rows.reserve(static_cast<std::size_t>(T));
    for (int t = 0; t < T; ++t) rows.push_back(slice_rows(seq, t, t + 1));
    for (auto& [fwd_cell, bwd_cell] : layers) {
      std::vector<Var> fwd_h(rows.size()), bwd_h(rows.size());
      LstmCell::State s = fwd_cell.initial(f.tape);
      for (int t = 0; t < T; ++t) {
        s = fwd_cell.step(f, rows[static_cast<std::size_t>(t)], s);
        fwd_h[static_cast<std::size_t>(t)] = s.h;
      }
      s = bwd_cell.initial(f.tape);
      for (int t = T - 1; t >= 0; --t) {
        s = bwd_cell.step(f, rows[static_cast<std::size_t>(t)], s);
        bwd_h[static_cast<std::size_t>(t)] = s.h;
      }
      for (int t = 0; t < T; ++t)
        rows[static_cast<std::size_t>(t)] = f.maybe_dropout(
            concat(fwd_h[static_cast<std::size_t>(t)], bwd_h[static_cast<std::size_t>(t)], 1));
    }
    return stack_rows(f.tape, rows);
  }

  void collect(std::vector<Parameter*>& out) {
    for (auto& [a, b] : layers) {
      a.collect(out);
      b.collect(out);
    }
  }
};

// Additive attention. Keys are projected once per sequence; weights over
// positions at or beyond the valid length are exactly zero.
struct AdditiveAttention {
  Parameter wq;  // d x a
  Parameter wk;  // d x a
  Parameter v;   // a x 1

  AdditiveAttention() = default;
  AdditiveAttention(const std::string& prefix, int d, int a, std::mt19937_64& rng)
      : wq(make_param(prefix + ".wq", d, a, rng)),
        wk(make_param(prefix + ".wk", d, a, rng)),
        v(make_param(prefix + ".v", a, 1, rng)) {}

  struct Prepared {
    Var keys;       // L x d, valid rows only
    Var keys_proj;  // L x a
    int full_len = 0;
    int valid_len = 0;
  };

  Prepared prepare(Fwd& f, Var keys, int valid_len = -1) {
    int full = cvalue_of(keys).rows();
    if (valid_len < 0) valid_len = full;
    if (valid_len == 0) throw DataError("attention: empty key sequence");
    Var used = valid_len == full ? keys : slice_rows(keys, 0, valid_len);
    return {used, matmul(used, f.tape.param(wk)), full, valid_len};
  }

  struct Result {
    Var context;     // 1 x d
    Var weights;     // 1 x valid_len
    Tensor full_weights;  // 1 x full_len, exact zeros on padding
  };

  Result step(Fwd& f, const Prepared& prep, Var query) {
    Var scores = transpose(matmul(
        tanh_op(add(prep.keys_proj, matmul(query, f.tape.param(wq)))), f.tape.param(v)));
    Var weights = exp_op(log_softmax(scores));
    Var ctx = matmul(weights, prep.keys);
    Tensor full = Tensor::zeros({1, prep.full_len});
    const Tensor& wv = cvalue_of(weights);
    for (int i = 0; i < prep.valid_len; ++i) full.at(0, i) = wv.at(0, i);
    return {ctx, weights, std::move(full)};
  }

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&wq);
    out.push_back(&wk);
    out.push_back(&v);
  }
};

// Recurrent decoder conditioned on an attention context; the embedding
// table is referenced, not owned, so it can be shared or tied elsewhere.
struct Decoder {
  std::vector<LstmCell> layers;
  Linear out;          // d x out_vocab
  Parameter* embed = nullptr;

  Decoder() = default;
  Decoder(const std::string& prefix, int d, int n_layers, int out_vocab, Parameter* embed_table,
          std::mt19937_64& rng)
      : out(prefix + ".out", d, out_vocab, rng), embed(embed_table) {
    for (int l = 0; l < n_layers; ++l)
      layers.emplace_back(cat(prefix, ".l", l), l == 0 ? 2 * d : d, d, rng);
  }

  struct State {
    std::vector<LstmCell::State> cells;
    Var top_h;  // z_{k-1}
  };

  State initial(Tape& t) {
    State s;
    for (LstmCell& c : layers) s.cells.push_back(c.initial(t));
    s.top_h = s.cells.back().h;
    return s;
  }

  void collect(std::vector<Parameter*>& out_params) {
    for (auto& c : layers) c.collect(out_params);
    out.collect(out_params);
  }
};

struct DecodeStepResult {
  Decoder::State state;
  Var log_dist;         // 1 x out_vocab
  Tensor att_weights;   // full-width, zero beyond the valid length
};

// One decoder step: context from attention on the previous top state, one
// pass through the cell stack, then a normalized output distribution.
inline DecodeStepResult decode_step(Fwd& f, Decoder& dec, AdditiveAttention& att,
                                    const AdditiveAttention::Prepared& henc,
                                    const Decoder::State& prev, int y_prev) {
  if (f.counters) ++f.counters->decode_step;
  auto att_out = att.step(f, henc, prev.top_h);
  Var emb = f.maybe_dropout(embedding(f.tape.param(*dec.embed), {y_prev}));
  Var x = concat(emb, att_out.context, 1);
  DecodeStepResult res;
  res.state.cells.reserve(dec.layers.size());
  Var h = x;
  for (std::size_t l = 0; l < dec.layers.size(); ++l) {
    LstmCell::State s = dec.layers[l].step(f, h, prev.cells[l]);
    res.state.cells.push_back(s);
    h = s.h;
  }
  res.state.top_h = h;
  res.log_dist = log_softmax(dec.out.apply(f, h));
  res.att_weights = std::move(att_out.full_weights);
  return res;
}

}  // namespace tcen
