#pragma once

// Inference and scoring: beam search over the decoder, corpus BLEU with
// brevity penalty, teacher-forced token accuracy, and learning-curve CSVs.

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tcen/model.hpp"

namespace tcen {

struct BeamConfig {
  int beam = 10;
  double length_weight = 0.2;
  int max_len = 64;
  bool divisive_norm = false;  // score / len^w instead of score + w*len

  void validate() const {
    if (beam < 1) throw UsageError("beam config: beam must be >= 1");
    if (max_len < 1) throw UsageError("beam config: max_len must be >= 1");
  }
};

struct Hypothesis {
  std::vector<int> tokens;  // eos excluded
  double logprob = 0.0;     // summed token log-probs, eos included when finished
  double score = 0.0;       // logprob with the length bonus applied
  bool truncated = false;
};

namespace detail {

inline double final_score(double logprob, std::size_t len, const BeamConfig& cfg) {
  if (cfg.divisive_norm)
    return len == 0 ? logprob : logprob / std::pow(static_cast<double>(len), cfg.length_weight);
  return logprob + cfg.length_weight * static_cast<double>(len);
}

}  // namespace detail

// Standard beam search over decode_step for the ST direction. Hypotheses
// are compared by final score, ties broken by earlier finish then
// lexicographically smaller token sequence.
inline Hypothesis beam_search(TcenModel& m, const Tensor& frames, const BeamConfig& cfg) {
  cfg.validate();
  Tape tape;
  Fwd f{tape};
  f.counters = &m.counters;
  Var hs = m.speech_encode(f, frames);
  AdditiveAttention* att = &m.att;
  Var henc = hs;
  if (m.cfg.arch == Arch::kTcen) {
    henc = m.text_encode(f, hs);
  } else if (m.cfg.arch == Arch::kMtl) {
    att = &m.att_st;
  }
  auto prep = att->prepare(f, henc);

  struct Item {
    Decoder::State state;
    std::vector<int> tokens;
    double logprob = 0.0;
    int prev = 0;
  };
  struct Finished {
    std::vector<int> tokens;
    double logprob = 0.0;
    double score = 0.0;
    int finish_step = 0;
    bool truncated = false;
  };

  std::vector<Item> alive;
  alive.push_back(Item{m.dec.initial(tape), {}, 0.0, m.trg_bos_id()});
  std::vector<Finished> finished;
  const int eos = m.trg_eos_id();

  for (int step = 1; step <= cfg.max_len && !alive.empty(); ++step) {
    struct Cand {
      std::size_t item;
      int token;
      double logprob;
    };
    std::vector<Cand> cands;
    std::vector<Decoder::State> next_states(alive.size());
    for (std::size_t i = 0; i < alive.size(); ++i) {
      DecodeStepResult out = decode_step(f, m.dec, *att, prep, alive[i].state, alive[i].prev);
      next_states[i] = std::move(out.state);
      const Tensor& dist = cvalue_of(out.log_dist);
      for (int c = 0; c < dist.cols(); ++c)
        cands.push_back(Cand{i, c, alive[i].logprob + dist.at(0, c)});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      if (a.item != b.item) return a.item < b.item;
      return a.token < b.token;
    });
    // top `beam` candidates take the slots; an eos candidate retires its
    // hypothesis into the finished pool
    std::vector<Item> next_alive;
    int used = 0;
    for (const Cand& c : cands) {
      if (used >= cfg.beam) break;
      ++used;
      const Item& src = alive[c.item];
      if (c.token == eos) {
        Finished fin;
        fin.tokens = src.tokens;
        fin.logprob = c.logprob;
        fin.score = detail::final_score(c.logprob, fin.tokens.size(), cfg);
        fin.finish_step = step;
        finished.push_back(std::move(fin));
        continue;
      }
      Item it;
      it.state = next_states[c.item];
      it.tokens = src.tokens;
      it.tokens.push_back(c.token);
      it.logprob = c.logprob;
      it.prev = c.token;
      next_alive.push_back(std::move(it));
    }
    alive = std::move(next_alive);
  }

  for (const Item& it : alive) {
    Finished fin;
    fin.tokens = it.tokens;
    fin.logprob = it.logprob;
    fin.score = detail::final_score(it.logprob, it.tokens.size(), cfg);
    fin.finish_step = cfg.max_len + 1;
    fin.truncated = true;
    finished.push_back(std::move(fin));
  }
  if (finished.empty()) throw NumericError("beam_search: no hypotheses produced");
  const Finished* best = &finished[0];
  for (const Finished& cand : finished) {
    if (cand.score > best->score ||
        (cand.score == best->score &&
         (cand.finish_step < best->finish_step ||
          (cand.finish_step == best->finish_step && cand.tokens < best->tokens))))
      best = &cand;
  }
  return Hypothesis{best->tokens, best->logprob, best->score, best->truncated};
}

// ---------------------------------------------------------------------------
// Corpus BLEU.

struct BleuReport {
  double score = 0.0;  // 0..100
  std::array<double, 4> precisions{};
  double brevity_penalty = 1.0;
  long hyp_len = 0;
  long ref_len = 0;

  nlohmann::json to_json() const {
    return {{"bleu", score},
            {"precisions", precisions},
            {"brevity_penalty", brevity_penalty},
            {"hyp_len", hyp_len},
            {"ref_len", ref_len}};
  }
};

namespace detail {

inline std::string fold_case(const std::string& s) {
  std::string out = s;
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::map<std::vector<std::string>, long> ngram_counts(const std::vector<std::string>& toks,
                                                             int n) {
  std::map<std::vector<std::string>, long> counts;
  if (static_cast<int>(toks.size()) >= n)
    for (std::size_t i = 0; i + n <= toks.size(); ++i)
      ++counts[std::vector<std::string>(toks.begin() + static_cast<long>(i),
                                        toks.begin() + static_cast<long>(i) + n)];
  return counts;
}

}  // namespace detail

// Corpus-level 4-gram BLEU, case-insensitive token match, no smoothing:
// any zero n-gram precision zeroes the score.
inline BleuReport bleu(const std::vector<std::vector<std::string>>& hypotheses,
                       const std::vector<std::vector<std::string>>& references) {
  if (hypotheses.size() != references.size())
    throw DataError(cat("bleu: ", hypotheses.size(), " hypotheses vs ", references.size(),
                        " references"));
  if (hypotheses.empty()) throw DataError("bleu: empty corpus");
  BleuReport rep;
  std::array<long, 4> clipped{}, total{};
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    std::vector<std::string> hyp, ref;
    for (const auto& t : hypotheses[i]) hyp.push_back(detail::fold_case(t));
    for (const auto& t : references[i]) ref.push_back(detail::fold_case(t));
    rep.hyp_len += static_cast<long>(hyp.size());
    rep.ref_len += static_cast<long>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      auto h = detail::ngram_counts(hyp, n);
      auto r = detail::ngram_counts(ref, n);
      for (const auto& [gram, count] : h) {
        auto it = r.find(gram);
        clipped[static_cast<std::size_t>(n - 1)] += std::min(count, it == r.end() ? 0 : it->second);
        total[static_cast<std::size_t>(n - 1)] += count;
      }
    }
  }
  double log_p_sum = 0.0;
  bool any_zero = false;
  for (int n = 0; n < 4; ++n) {
    double p = total[static_cast<std::size_t>(n)] == 0
                   ? 0.0
                   : static_cast<double>(clipped[static_cast<std::size_t>(n)]) /
                         static_cast<double>(total[static_cast<std::size_t>(n)]);
    rep.precisions[static_cast<std::size_t>(n)] = p;
    if (p == 0.0)
      any_zero = true;
    else
      log_p_sum += std::log(p);
  }
  rep.brevity_penalty =
      rep.hyp_len == 0 || rep.hyp_len >= rep.ref_len
          ? (rep.hyp_len == 0 ? 0.0 : 1.0)
          : std::exp(1.0 - static_cast<double>(rep.ref_len) / static_cast<double>(rep.hyp_len));
  rep.score = (any_zero || rep.hyp_len == 0)
                  ? 0.0
                  : rep.brevity_penalty * std::exp(log_p_sum / 4.0) * 100.0;
  return rep;
}

// Teacher-forced next-token top-1 accuracy on the ST direction, all
// non-pad target positions (the end token counts as a position).
inline double token_accuracy(TcenModel& m, const StCorpus& dev) {
  if (dev.empty()) throw DataError("token_accuracy: empty dev set");
  long tokens = 0, correct = 0;
  for (const StRecord& rec : dev) {
    Tape tape;
    Fwd f{tape};
    f.counters = &m.counters;
    Var hs = m.speech_encode(f, rec.frames);
    SeqLoss s;
    if (m.cfg.arch == Arch::kTcen) {
      s = decode_teacher_forced(f, m.dec, m.att, m.text_encode(f, hs), rec.target, m.trg_bos_id(),
                                m.trg_eos_id());
    } else if (m.cfg.arch == Arch::kVanilla) {
      s = decode_teacher_forced(f, m.dec, m.att, hs, rec.target, m.trg_bos_id(), m.trg_eos_id());
    } else {
      s = decode_teacher_forced(f, m.dec, m.att_st, hs, rec.target, m.trg_bos_id(),
                                m.trg_eos_id());
    }
    tokens += s.tokens;
    correct += s.correct;
  }
  return static_cast<double>(correct) / static_cast<double>(tokens);
}

// ---------------------------------------------------------------------------
// Learning-curve emission: wide CSV, one accuracy column per run.

struct CurveSeries {
  std::string label;
  std::vector<std::pair<long, double>> points;  // (step, accuracy)
};

inline void emit_curves(const std::vector<CurveSeries>& series, const std::string& path) {
  if (series.empty()) throw UsageError("emit_curves: no series");
  for (std::size_t i = 1; i < series.size(); ++i) {
    if (series[i].points.size() != series[0].points.size())
      throw DataError(cat("emit_curves: series '", series[i].label, "' has ",
                          series[i].points.size(), " rows, expected ", series[0].points.size()));
    for (std::size_t r = 0; r < series[i].points.size(); ++r)
      if (series[i].points[r].first != series[0].points[r].first)
        throw DataError(cat("emit_curves: step mismatch at row ", r, " between '",
                            series[0].label, "' and '", series[i].label, "'"));
  }
  std::ofstream out(path);
  if (!out) throw DataError(cat("emit_curves: cannot write ", path));
  out << "step";
  for (const CurveSeries& s : series) out << "," << s.label;
  out << "\n";
  char buf[32];
  for (std::size_t r = 0; r < series[0].points.size(); ++r) {
    out << series[0].points[r].first;
    for (const CurveSeries& s : series) {
      std::snprintf(buf, sizeof buf, "%.17g", s.points[r].second);
      out << "," << buf;
    }
    out << "\n";
  }
}

}  // namespace tcen
