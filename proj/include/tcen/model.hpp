#pragma once

// The tandem network: a downsampling speech encoder feeding a text encoder
// feeding an attention decoder, with the CTC classifier sharing storage
// with the source embedding table. Baseline wirings (vanilla ST and the
// many-to-many multi-task setup) are built from the same parts by config.

#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tcen/ctc.hpp"
#include "tcen/data.hpp"
#include "tcen/layers.hpp"

namespace tcen {

enum class Arch { kTcen, kVanilla, kMtl };

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::kTcen: return "tcen";
    case Arch::kVanilla: return "vanilla";
    case Arch::kMtl: return "mtl";
  }
  return "?";
}

inline Arch parse_arch(const std::string& s) {
  if (s == "tcen") return Arch::kTcen;
  if (s == "vanilla") return Arch::kVanilla;
  if (s == "mtl") return Arch::kMtl;
  throw UsageError(cat("unknown architecture '", s, "'"));
}

struct ModelConfig {
  Arch arch = Arch::kTcen;
  bool tie_weights = true;
  int d_model = 64;
  int att_dim = 64;
  int feature_dim = 16;
  int enc_body_layers = 2;
  int enc_t_layers = 2;
  int dec_layers = 2;
  int downsample = 4;
  int src_vocab = 0;  // base sizes, excluding blank/specials
  int trg_vocab = 0;
  std::uint64_t init_seed = 1;

  void validate() const {
    if (d_model < 2 || d_model % 2 != 0) throw UsageError("model: d_model must be even and >= 2");
    if (att_dim < 1 || feature_dim < 1 || downsample < 1)
      throw UsageError("model: dims must be positive");
    if (enc_body_layers < 1 || dec_layers < 1) throw UsageError("model: layer counts must be >= 1");
    if (arch != Arch::kVanilla && enc_t_layers < 1)
      throw UsageError("model: enc_t needs at least one layer");
    if (src_vocab < 1 && arch != Arch::kVanilla) throw UsageError("model: src_vocab unset");
    if (trg_vocab < 1) throw UsageError("model: trg_vocab unset");
  }

  nlohmann::json to_json() const {
    return {{"arch", arch_name(arch)},
            {"tie_weights", tie_weights},
            {"d_model", d_model},
            {"att_dim", att_dim},
            {"feature_dim", feature_dim},
            {"enc_body_layers", enc_body_layers},
            {"enc_t_layers", enc_t_layers},
            {"dec_layers", dec_layers},
            {"downsample", downsample},
            {"src_vocab", src_vocab},
            {"trg_vocab", trg_vocab},
            {"init_seed", init_seed}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.arch = parse_arch(j.at("arch").get<std::string>());
    c.tie_weights = j.at("tie_weights").get<bool>();
    c.d_model = j.at("d_model").get<int>();
    c.att_dim = j.at("att_dim").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.enc_body_layers = j.at("enc_body_layers").get<int>();
    c.enc_t_layers = j.at("enc_t_layers").get<int>();
    c.dec_layers = j.at("dec_layers").get<int>();
    c.downsample = j.at("downsample").get<int>();
    c.src_vocab = j.at("src_vocab").get<int>();
    c.trg_vocab = j.at("trg_vocab").get<int>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// Stacks `k` consecutive frames into one row, zero-padding the tail, so a
// following affine map realizes the k-fold downsampling front-end.
inline Tensor stack_frames(const Tensor& frames, int k) {
  if (frames.rows() == 0) throw DataError("enc_pre: empty frame sequence");
  int T = frames.rows(), D = frames.cols();
  int To = (T + k - 1) / k;
  Tensor out = Tensor::zeros({To, k * D});
  // flat layout: global frame t occupies columns (t%k)*D of output row t/k
  for (int t = 0; t < T; ++t)
    for (int c = 0; c < D; ++c)
      out.data[static_cast<std::size_t>(t) * D + c] = frames.at(t, c);
  return out;
}

class TcenModel {
 public:
  ModelConfig cfg;
  Linear enc_pre;
  BiStack enc_body;
  UniStack enc_t;
  AdditiveAttention att;  // decoder attention (MT attention under mtl)
  Decoder dec;
  Parameter src_embed;  // tcen: (|Vs|+1) x d, the tied storage; mtl: (|Vs|+3) x d
  Parameter w_ctc;      // only allocated when untied: a clone of src_embed at init
  Parameter trg_embed;  // (|Vt|+3) x d
  AdditiveAttention att_st;  // mtl: task-specific ST attention
  Decoder dec_src;           // mtl: ASR decoder with its own attention
  AdditiveAttention att_asr;
  mutable CallCounters counters;

  explicit TcenModel(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    std::mt19937_64 rng = stream_rng(cfg.init_seed, 0, Stream::kInit);
    int d = cfg.d_model;
    enc_pre = Linear("enc_s.pre", cfg.downsample * cfg.feature_dim, d, rng);
    enc_body = BiStack("enc_s.body", d, d, cfg.enc_body_layers, rng);
    if (cfg.arch == Arch::kTcen) {
      src_embed = Parameter("src_embed", glorot_uniform(cfg.src_vocab + 1, d, rng));
      if (!cfg.tie_weights) {
        w_ctc = Parameter("w_ctc", src_embed.value);  // same starting point, then unshared
      }
    } else if (cfg.arch == Arch::kMtl) {
      src_embed = Parameter("src_embed", glorot_uniform(cfg.src_vocab + 3, d, rng));
    }
    if (cfg.arch != Arch::kVanilla) enc_t = UniStack("enc_t", d, d, cfg.enc_t_layers, rng);
    att = AdditiveAttention("dec.att", d, cfg.att_dim, rng);
    trg_embed = Parameter("trg_embed", glorot_uniform(cfg.trg_vocab + 3, d, rng));
    dec = Decoder("dec", d, cfg.dec_layers, cfg.trg_vocab + 3, &trg_embed, rng);
    if (cfg.arch == Arch::kMtl) {
      att_st = AdditiveAttention("att_st", d, cfg.att_dim, rng);
      att_asr = AdditiveAttention("dec_src.att", d, cfg.att_dim, rng);
      dec_src = Decoder("dec_src", d, cfg.dec_layers, cfg.src_vocab + 3, &src_embed, rng);
    }
  }

  // Stable registration order; checkpointing and the optimizer key off it.
  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    enc_pre.collect(out);
    enc_body.collect(out);
    if (cfg.arch != Arch::kVanilla) {
      out.push_back(&src_embed);
      if (cfg.arch == Arch::kTcen && !cfg.tie_weights) out.push_back(&w_ctc);
      enc_t.collect(out);
    }
    att.collect(out);
    dec.collect(out);
    out.push_back(&trg_embed);
    if (cfg.arch == Arch::kMtl) {
      att_st.collect(out);
      att_asr.collect(out);
      dec_src.collect(out);
    }
    return out;
  }

  int blank_id() const { return cfg.src_vocab; }
  int trg_bos_id() const { return cfg.trg_vocab; }
  int trg_eos_id() const { return cfg.trg_vocab + 1; }
  int src_bos_id() const { return cfg.src_vocab + 1; }  // mtl ASR decoder rows
  int src_eos_id() const { return cfg.src_vocab + 2; }

  // The classifier matrix of the CTC head: literally the embedding storage
  // when tied, the cloned copy when the ablation unshares them.
  Parameter& ctc_matrix() {
    if (cfg.arch != Arch::kTcen) throw UsageError("ctc_matrix: CTC head is tcen-only");
    return cfg.tie_weights ? src_embed : w_ctc;
  }

  // frames (T x D) -> downsampled states (ceil(T/4) x d)
  Var speech_encode(Fwd& f, const Tensor& frames) {
    if (f.counters) ++f.counters->speech_encode;
    Var x = f.tape.leaf(stack_frames(frames, cfg.downsample));
    Var pre = f.maybe_dropout(tanh_op(enc_pre.apply(f, x)));
    return enc_body.run(f, pre);
  }

  // Shared by the MT path (embedded tokens) and the ST path (speech
  // encoder states); one implementation, counted for the role test.
  Var text_encode(Fwd& f, Var seq) {
    if (cfg.arch == Arch::kVanilla) throw UsageError("text_encode: vanilla has no text encoder");
    if (f.counters) ++f.counters->text_encode;
    if (cvalue_of(seq).cols() != cfg.d_model)
      throw DataError(cat("text_encode: input width ", cvalue_of(seq).cols(), " != d_model ",
                          cfg.d_model));
    return enc_t.run(f, seq);
  }

  // Source token embedding; under tcen the blank id maps to the extra row
  // of the tied matrix, so CTC-path-format sentences embed directly.
  Var embed_src(Fwd& f, const std::vector<int>& ids) {
    if (cfg.arch == Arch::kVanilla) throw UsageError("embed_src: vanilla has no source side");
    return f.maybe_dropout(embedding(f.tape.param(src_embed), ids));
  }

  // log_softmax(h^s . W^T) over V_src + blank via the (possibly tied) matrix.
  Var ctc_head(Fwd& f, Var hs) {
    return log_softmax(matmul_nt(hs, f.tape.param(ctc_matrix())));
  }
};

struct SeqLoss {
  Var nll_sum;   // sum over predicted positions of -log p(gold)
  long tokens = 0;
  long correct = 0;  // teacher-forced argmax hits, ties to the lowest id
};

// Teacher-forced decode of `target` + eos. Also reports argmax hits so
// validation accuracy reuses the exact decode path.
inline SeqLoss decode_teacher_forced(Fwd& f, Decoder& dec, AdditiveAttention& att, Var henc,
                                     const std::vector<int>& target, int bos, int eos) {
  auto prep = att.prepare(f, henc);
  Decoder::State state = dec.initial(f.tape);
  std::vector<Var> rows;
  std::vector<int> golds;
  int prev = bos;
  for (std::size_t k = 0; k <= target.size(); ++k) {
    DecodeStepResult step = decode_step(f, dec, att, prep, state, prev);
    int gold = k < target.size() ? target[k] : eos;
    rows.push_back(step.log_dist);
    golds.push_back(gold);
    state = std::move(step.state);
    prev = gold;
  }
  SeqLoss out;
  Var mat = stack_rows(f.tape, rows);
  out.nll_sum = scale(sum(pick_per_row(mat, golds)), -1.0);
  out.tokens = static_cast<long>(golds.size());
  const Tensor& dists = cvalue_of(mat);
  for (int r = 0; r < dists.rows(); ++r) {
    int best = 0;
    for (int c = 1; c < dists.cols(); ++c)
      if (dists.at(r, c) > dists.at(r, best)) best = c;
    if (best == golds[static_cast<std::size_t>(r)]) ++out.correct;
  }
  return out;
}

struct TaskLossResult {
  Var loss;          // batch loss: CTC mean per example, CE mean per token
  long tokens = 0;
  long correct = 0;
  bool skipped = false;  // an ASR example was infeasible for its frame count
};

inline TaskLossResult task_loss(TcenModel& m, Task task, const Batch& batch, Fwd& f) {
  if (batch.size < 1) throw DataError("task_loss: empty batch");
  auto require = [&](bool ok, const char* what) {
    if (!ok)
      throw DataError(cat("task_loss: ", task_name(task), " batch is missing ", what));
  };
  TaskLossResult out;
  switch (task) {
    case Task::kAsr: {
      require(batch.frames.numel() > 0, "frames");
      require(!batch.src_tokens.empty(), "transcripts");
      if (m.cfg.arch == Arch::kVanilla) throw UsageError("task_loss: vanilla has no ASR task");
      std::vector<Var> losses;
      for (int i = 0; i < batch.size; ++i) {
        Var hs = m.speech_encode(f, batch.frames_of(i));
        std::vector<int> y = batch.src_of(i);
        if (m.cfg.arch == Arch::kTcen) {
          auto res = ctc_loss(m.ctc_head(f, hs), LabelSequence{y}, m.cfg.src_vocab);
          if (!res.feasible) {
            out.skipped = true;
            return out;
          }
          losses.push_back(res.loss);
          out.tokens += static_cast<long>(y.size());
        } else {
          SeqLoss s = decode_teacher_forced(f, m.dec_src, m.att_asr, hs, y, m.src_bos_id(),
                                            m.src_eos_id());
          losses.push_back(s.nll_sum);
          out.tokens += s.tokens;
          out.correct += s.correct;
        }
      }
      Var total = losses[0];
      for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
      double denom = m.cfg.arch == Arch::kTcen ? static_cast<double>(batch.size)
                                               : static_cast<double>(out.tokens);
      out.loss = scale(total, 1.0 / denom);
      return out;
    }
    case Task::kMt: {
      require(!batch.src_tokens.empty(), "source tokens");
      require(!batch.trg_tokens.empty(), "target tokens");
      if (m.cfg.arch == Arch::kVanilla) throw UsageError("task_loss: vanilla has no MT task");
      std::vector<Var> losses;
      for (int i = 0; i < batch.size; ++i) {
        Var es = m.embed_src(f, batch.src_of(i));
        Var ht = m.text_encode(f, es);
        SeqLoss s = decode_teacher_forced(f, m.dec, m.att, ht, batch.trg_of(i), m.trg_bos_id(),
                                          m.trg_eos_id());
        losses.push_back(s.nll_sum);
        out.tokens += s.tokens;
        out.correct += s.correct;
      }
      Var total = losses[0];
      for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
      out.loss = scale(total, 1.0 / static_cast<double>(out.tokens));
      return out;
    }
    case Task::kSt: {
      require(batch.frames.numel() > 0, "frames");
      require(!batch.trg_tokens.empty(), "target tokens");
      std::vector<Var> losses;
      for (int i = 0; i < batch.size; ++i) {
        Var hs = m.speech_encode(f, batch.frames_of(i));
        SeqLoss s;
        if (m.cfg.arch == Arch::kTcen) {
          Var ht = m.text_encode(f, hs);
          s = decode_teacher_forced(f, m.dec, m.att, ht, batch.trg_of(i), m.trg_bos_id(),
                                    m.trg_eos_id());
        } else if (m.cfg.arch == Arch::kVanilla) {
          s = decode_teacher_forced(f, m.dec, m.att, hs, batch.trg_of(i), m.trg_bos_id(),
                                    m.trg_eos_id());
        } else {
          s = decode_teacher_forced(f, m.dec, m.att_st, hs, batch.trg_of(i), m.trg_bos_id(),
                                    m.trg_eos_id());
        }
        losses.push_back(s.nll_sum);
        out.tokens += s.tokens;
        out.correct += s.correct;
      }
      Var total = losses[0];
      for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
      out.loss = scale(total, 1.0 / static_cast<double>(out.tokens));
      return out;
    }
  }
  throw UsageError("task_loss: unknown task");
}

}  // namespace tcen
