#pragma once

// Length-consistency machinery: the reversible run-length transform S(.)
// between CTC paths and (unique tokens, repetition counts), the seq2seq
// noiser that predicts both streams, noisy-corpus construction, and the
// clean/noisy mixing sampler.

#include <random>
#include <vector>

#include "tcen/ctc.hpp"
#include "tcen/data.hpp"
#include "tcen/layers.hpp"
#include "tcen/model.hpp"
#include "tcen/optim.hpp"

namespace tcen {

struct RleSequence {
  std::vector<int> u;  // unique-run tokens, blanks allowed
  std::vector<int> l;  // repetition counts, all >= 1

  bool operator==(const RleSequence&) const = default;

  void validate() const {
    if (u.size() != l.size())
      throw DataError(cat("rle: ", u.size(), " tokens vs ", l.size(), " counts"));
    for (std::size_t i = 0; i < u.size(); ++i) {
      if (l[i] < 1) throw DataError(cat("rle: count ", l[i], " at run ", i, " is below 1"));
      if (i > 0 && u[i] == u[i - 1])
        throw DataError(cat("rle: consecutive equal tokens at run ", i,
                            " would break reversibility"));
    }
  }
};

// S(pi): maximal runs with counts.
inline RleSequence rle_encode(const CtcPath& path) {
  if (path.ids.empty()) throw DataError("rle_encode: empty path");
  RleSequence out;
  for (int id : path.ids) {
    if (!out.u.empty() && out.u.back() == id) {
      ++out.l.back();
    } else {
      out.u.push_back(id);
      out.l.push_back(1);
    }
  }
  return out;
}

// S^-1(u, l): expands runs; rle_encode(rle_decode(r)) == r.
inline CtcPath rle_decode(const RleSequence& r) {
  r.validate();
  CtcPath out;
  for (std::size_t i = 0; i < r.u.size(); ++i)
    out.ids.insert(out.ids.end(), static_cast<std::size_t>(r.l[i]), r.u[i]);
  return out;
}

struct PathRecord {
  std::vector<int> transcript;  // y^s
  RleSequence rle;              // S(greedy CTC path)
};
using PathDataset = std::vector<PathRecord>;

// Greedy-decodes every utterance through the (pre-trained) CTC head and
// stores the run-length form alongside the transcript.
inline PathDataset build_path_dataset(TcenModel& asr, const AsrCorpus& corpus) {
  if (corpus.empty()) throw DataError("build_path_dataset: empty corpus");
  PathDataset out;
  out.reserve(corpus.size());
  for (const AsrRecord& rec : corpus) {
    Tape tape;
    Fwd f{tape};
    Var lp = asr.ctc_head(f, asr.speech_encode(f, rec.frames));
    CtcPath path = greedy_decode(cvalue_of(lp));
    out.push_back(PathRecord{rec.transcript, rle_encode(path)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// The noiser: encoder over clean source tokens, decoder emitting the next
// run token and its repetition count from the same state.

struct NoiserConfig {
  int d_model = 32;
  int att_dim = 32;
  int l_max = 20;  // repetition counts are classes 1..l_max, clamped
  std::uint64_t init_seed = 1;

  void validate() const {
    if (d_model < 1 || att_dim < 1 || l_max < 1) throw UsageError("noiser: bad dimensions");
  }

  nlohmann::json to_json() const {
    return {{"d_model", d_model}, {"att_dim", att_dim}, {"l_max", l_max},
            {"init_seed", init_seed}};
  }
  static NoiserConfig from_json(const nlohmann::json& j) {
    NoiserConfig c;
    c.d_model = j.at("d_model").get<int>();
    c.att_dim = j.at("att_dim").get<int>();
    c.l_max = j.at("l_max").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
  }
};

class NoiserModel {
 public:
  NoiserConfig cfg;
  int src_vocab = 0;
  Parameter embed;  // (|Vs|+3) x d: tokens, blank, bos, eos
  UniStack encoder;
  AdditiveAttention att;
  LstmCell dec_cell;
  Linear tok_head;  // d -> |Vs|+3 (blank and eos are predictable; bos is not emitted)
  Linear rep_head;  // d -> l_max

  NoiserModel(const NoiserConfig& c, int src_vocab_size) : cfg(c), src_vocab(src_vocab_size) {
    cfg.validate();
    if (src_vocab < 1) throw UsageError("noiser: src vocab unset");
    std::mt19937_64 rng = stream_rng(cfg.init_seed, 0, Stream::kInit);
    int d = cfg.d_model;
    embed = Parameter("noiser.embed", glorot_uniform(src_vocab + 3, d, rng));
    encoder = UniStack("noiser.enc", d, d, 1, rng);
    att = AdditiveAttention("noiser.att", d, cfg.att_dim, rng);
    dec_cell = LstmCell("noiser.dec", 2 * d, d, rng);
    tok_head = Linear("noiser.tok", d, src_vocab + 3, rng);
    rep_head = Linear("noiser.rep", d, cfg.l_max, rng);
  }

  int blank_id() const { return src_vocab; }
  int bos_id() const { return src_vocab + 1; }
  int eos_id() const { return src_vocab + 2; }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out{&embed};
    encoder.collect(out);
    att.collect(out);
    dec_cell.collect(out);
    tok_head.collect(out);
    rep_head.collect(out);
    return out;
  }

  Var encode(Fwd& f, const std::vector<int>& transcript) {
    if (transcript.empty()) throw DataError("noiser: empty source sentence");
    return encoder.run(f, embedding(f.tape.param(embed), transcript));
  }

  struct Step {
    LstmCell::State state;
    Var tok_logp;  // 1 x (|Vs|+3)
    Var rep_logp;  // 1 x l_max, class c means count c+1
  };

  // Both heads read the same decoder state.
  Step decode_one(Fwd& f, const AdditiveAttention::Prepared& henc, const LstmCell::State& prev,
                  int prev_token) {
    auto att_out = att.step(f, henc, prev.h);
    Var x = concat(embedding(f.tape.param(embed), {prev_token}), att_out.context, 1);
    LstmCell::State s = dec_cell.step(f, x, prev);
    return {s, log_softmax(tok_head.apply(f, s.h)), log_softmax(rep_head.apply(f, s.h))};
  }
};

struct NoiserTrainConfig {
  long steps = 800;
  int batch_size = 16;
  double clip_norm = 5.0;
  ScheduleConfig schedule{1.0, 32, 100};
  std::uint64_t seed = 1;
};

// Teacher-forced joint cross-entropy: token stream (with eos) plus
// repetition stream (counts clamped to l_max), each averaged per step.
inline Var noiser_batch_loss(NoiserModel& m, const PathDataset& batch, Fwd& f) {
  std::vector<Var> tok_rows, rep_rows;
  std::vector<int> tok_golds, rep_golds;
  for (const PathRecord& rec : batch) {
    rec.rle.validate();
    Var henc = m.encode(f, rec.transcript);
    auto prep = m.att.prepare(f, henc);
    LstmCell::State state = m.dec_cell.initial(f.tape);
    int prev = m.bos_id();
    std::size_t runs = rec.rle.u.size();
    for (std::size_t k = 0; k <= runs; ++k) {
      NoiserModel::Step step = m.decode_one(f, prep, state, prev);
      int tok_gold = k < runs ? rec.rle.u[k] : m.eos_id();
      tok_rows.push_back(step.tok_logp);
      tok_golds.push_back(tok_gold);
      if (k < runs) {
        rep_rows.push_back(step.rep_logp);
        rep_golds.push_back(std::min(rec.rle.l[k], m.cfg.l_max) - 1);
      }
      state = std::move(step.state);
      prev = tok_gold;
    }
  }
  Var tok_nll = scale(sum(pick_per_row(stack_rows(f.tape, tok_rows), tok_golds)),
                      -1.0 / static_cast<double>(tok_golds.size()));
  Var rep_nll = scale(sum(pick_per_row(stack_rows(f.tape, rep_rows), rep_golds)),
                      -1.0 / static_cast<double>(rep_golds.size()));
  return add(tok_nll, rep_nll);
}

struct NoiserTrainLog {
  std::vector<double> losses;
};

inline NoiserTrainLog train_noiser(NoiserModel& m, const PathDataset& data,
                                   const NoiserTrainConfig& cfg) {
  if (data.empty()) throw DataError("train_noiser: empty path dataset");
  for (const PathRecord& r : data) r.rle.validate();
  AdamOptimizer opt(m.parameters());
  std::vector<Parameter*> params = m.parameters();
  NoiserTrainLog log;
  for (long n = 1; n <= cfg.steps; ++n) {
    std::mt19937_64 rng = stream_rng(cfg.seed, static_cast<std::uint64_t>(n), Stream::kBatch);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    PathDataset batch;
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(data[pick(rng)]);
    Tape tape;
    Fwd f{tape};
    Var loss = noiser_batch_loss(m, batch, f);
    double value = cvalue_of(loss).item();
    if (!std::isfinite(value)) throw NumericError(cat("train_noiser: non-finite loss at step ", n));
    opt.zero_grads();
    tape.backward(loss);
    clip_gradients(params, cfg.clip_norm);
    opt.step(lrate(n, cfg.schedule));
    log.losses.push_back(value);
  }
  return log;
}

struct NoisedPath {
  CtcPath path;
  bool truncated = false;
};

// Greedy (u, l) decode followed by S^-1. The previous token's logit is
// masked so the emitted run sequence always satisfies the RLE invariants;
// decoding stops at eos or a hard cap of 3*(2|y|+1) runs.
inline NoisedPath apply_noiser(NoiserModel& m, const std::vector<int>& sentence,
                               bool sample = false, std::mt19937_64* rng = nullptr) {
  if (sample && rng == nullptr) throw UsageError("apply_noiser: sampling needs an rng");
  Tape tape;
  Fwd f{tape};
  Var henc = m.encode(f, sentence);
  auto prep = m.att.prepare(f, henc);
  LstmCell::State state = m.dec_cell.initial(tape);
  int prev = m.bos_id();
  RleSequence rle;
  NoisedPath out;
  long cap = 3 * (2 * static_cast<long>(sentence.size()) + 1);
  for (long k = 0; k < cap; ++k) {
    NoiserModel::Step step = m.decode_one(f, prep, state, prev);
    const Tensor& tok = cvalue_of(step.tok_logp);
    int banned_prev = rle.u.empty() ? -1 : rle.u.back();
    int choice = -1;
    if (sample) {
      // renormalized draw over the unbanned tokens
      double total = 0.0;
      std::vector<double> probs(static_cast<std::size_t>(tok.cols()), 0.0);
      for (int c = 0; c < tok.cols(); ++c) {
        if (c == banned_prev || c == m.bos_id()) continue;
        probs[static_cast<std::size_t>(c)] = std::exp(tok.at(0, c));
        total += probs[static_cast<std::size_t>(c)];
      }
      std::uniform_real_distribution<double> dist(0.0, 1.0);
      double u = dist(*rng) * total;
      double acc = 0.0;
      for (int c = 0; c < tok.cols(); ++c) {
        acc += probs[static_cast<std::size_t>(c)];
        if (u < acc) {
          choice = c;
          break;
        }
      }
      if (choice < 0) choice = m.eos_id();
    } else {
      for (int c = 0; c < tok.cols(); ++c) {
        if (c == banned_prev || c == m.bos_id()) continue;
        if (choice < 0 || tok.at(0, c) > tok.at(0, choice)) choice = c;
      }
    }
    if (choice == m.eos_id()) break;
    const Tensor& rep = cvalue_of(step.rep_logp);
    int rep_class = 0;
    for (int c = 1; c < rep.cols(); ++c)
      if (rep.at(0, c) > rep.at(0, rep_class)) rep_class = c;
    rle.u.push_back(choice);
    rle.l.push_back(rep_class + 1);
    state = std::move(step.state);
    prev = choice;
    if (k == cap - 1) out.truncated = true;
  }
  if (rle.u.empty()) {
    // degenerate eos-first decode; fall back to a single blank frame
    rle.u.push_back(m.blank_id());
    rle.l.push_back(1);
  }
  out.path = rle_decode(rle);
  return out;
}

// M' of the method: every clean source sentence replaced by a generated
// CTC-path-format sentence (blanks included), targets untouched.
inline MtCorpus noise_corpus(NoiserModel& m, const MtCorpus& clean) {
  MtCorpus out;
  out.reserve(clean.size());
  for (const MtRecord& rec : clean) {
    NoisedPath noised = apply_noiser(m, rec.source);
    out.push_back(MtRecord{noised.path.ids, rec.target});
  }
  return out;
}

struct NoiseMixConfig {
  double k = 0.3;  // probability a drawn pair is noisy

  void validate() const {
    if (k < 0.0 || k > 1.0) throw UsageError(cat("noise mix: k=", k, " outside [0,1]"));
  }
};

// Uniform-within-corpus sampler; each draw is noisy with probability k.
class MixSampler {
 public:
  MixSampler(const MtCorpus* clean, const MtCorpus* noisy, NoiseMixConfig cfg)
      : clean_(clean), noisy_(noisy), cfg_(cfg) {}

  const MtRecord& draw(std::mt19937_64& rng, bool* was_noisy = nullptr) const {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    bool noisy = cfg_.k > 0.0 && dist(rng) < cfg_.k;
    const MtCorpus& pool = noisy ? *noisy_ : *clean_;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    if (was_noisy) *was_noisy = noisy;
    return pool[pick(rng)];
  }

 private:
  const MtCorpus* clean_;
  const MtCorpus* noisy_;
  NoiseMixConfig cfg_;
};

inline MixSampler mix_corpora(const MtCorpus& clean, const MtCorpus* noisy, NoiseMixConfig cfg) {
  cfg.validate();
  if (cfg.k > 0.0 && (noisy == nullptr || noisy->empty()))
    throw DataError("mix_corpora: k > 0 needs a nonempty noisy corpus");
  if (cfg.k < 1.0 && clean.empty())
    throw DataError("mix_corpora: k < 1 needs a nonempty clean corpus");
  return MixSampler(&clean, noisy, cfg);
}

}  // namespace tcen
