#pragma once

// Synthetic corpora standing in for the ASR/MT/ST datasets, vocabulary
// handling, the JSONL on-disk format, and length-bucketed batching.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tcen/common.hpp"
#include "tcen/tensor.hpp"

namespace tcen {

inline constexpr const char* kBlankToken = "-";
inline constexpr const char* kBosToken = "<s>";
inline constexpr const char* kEosToken = "</s>";
inline constexpr const char* kPadToken = "<pad>";
inline constexpr int kMaxFrames = 3000;

// Token <-> id map. Base tokens get dense ids from 0; the source side
// reserves the blank "-" at id |V|, the target side appends bos/eos/pad.
class Vocabulary {
 public:
  enum class Side { kSource, kTarget };

  Vocabulary() = default;
  Vocabulary(Side side, std::vector<std::string> tokens)
      : side_(side), tokens_(std::move(tokens)) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      const std::string& tok = tokens_[i];
      if (tok == kBlankToken || tok == kBosToken || tok == kEosToken || tok == kPadToken)
        throw DataError(cat("vocabulary: token ", i, " uses the reserved string '", tok, "'"));
      if (!index_.emplace(tok, static_cast<int>(i)).second)
        throw DataError(cat("vocabulary: duplicate token '", tok, "'"));
    }
  }

  Side side() const { return side_; }
  int size() const { return static_cast<int>(tokens_.size()); }
  int full_size() const { return size() + (side_ == Side::kSource ? 1 : 3); }

  int blank_id() const {
    if (side_ != Side::kSource) throw UsageError("vocabulary: blank is source-side only");
    return size();
  }
  int bos_id() const { return target_special(0); }
  int eos_id() const { return target_special(1); }
  int pad_id() const { return target_special(2); }

  int id_of(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it != index_.end()) return it->second;
    if (side_ == Side::kSource && tok == kBlankToken) return blank_id();
    if (side_ == Side::kTarget) {
      if (tok == kBosToken) return bos_id();
      if (tok == kEosToken) return eos_id();
      if (tok == kPadToken) return pad_id();
    }
    throw DataError(cat("vocabulary: unknown token '", tok, "'"));
  }

  const std::string& token_of(int id) const {
    if (id >= 0 && id < size()) return tokens_[static_cast<std::size_t>(id)];
    static const std::string blank = kBlankToken, bos = kBosToken, eos = kEosToken,
                             pad = kPadToken;
    if (side_ == Side::kSource && id == blank_id()) return blank;
    if (side_ == Side::kTarget) {
      if (id == bos_id()) return bos;
      if (id == eos_id()) return eos;
      if (id == pad_id()) return pad;
    }
    throw DataError(cat("vocabulary: id ", id, " out of range"));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError(cat("vocabulary: cannot write ", path));
    for (int id = 0; id < full_size(); ++id) out << token_of(id) << "\n";
  }

  static Vocabulary load(const std::string& path, Side side) {
    std::ifstream in(path);
    if (!in) throw DataError(cat("vocabulary: cannot read ", path));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    int reserved = side == Side::kSource ? 1 : 3;
    if (static_cast<int>(lines.size()) < reserved)
      throw DataError(cat("vocabulary: ", path, " is missing its reserved rows"));
    std::vector<std::string> base(lines.begin(), lines.end() - reserved);
    Vocabulary v(side, std::move(base));
    for (int i = 0; i < reserved; ++i) {
      int id = v.size() + i;
      if (lines[static_cast<std::size_t>(id)] != v.token_of(id))
        throw DataError(cat("vocabulary: ", path, " row ", id, " should be '", v.token_of(id),
                            "', got '", lines[static_cast<std::size_t>(id)], "'"));
    }
    return v;
  }

 private:
  int target_special(int k) const {
    if (side_ != Side::kTarget) throw UsageError("vocabulary: specials are target-side only");
    return size() + k;
  }

  Side side_ = Side::kSource;
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

struct AsrRecord {
  Tensor frames;               // T x D
  std::vector<int> transcript;  // source token ids, no blank
};
struct MtRecord {
  std::vector<int> source;  // may include blank when noised
  std::vector<int> target;
};
struct StRecord {
  Tensor frames;
  std::vector<int> target;
};

using AsrCorpus = std::vector<AsrRecord>;
using MtCorpus = std::vector<MtRecord>;
using StCorpus = std::vector<StRecord>;

struct SyntheticTaskSpec {
  int vocab_size_src = 30;
  int vocab_size_trg = 30;
  int feature_dim = 16;
  int frames_per_token_lo = 5;
  int frames_per_token_hi = 9;
  double noise_sigma = 0.3;
  bool reorder = true;  // swap adjacent token pairs in the target mapping
  int len_lo = 3;
  int len_hi = 8;
  int asr_size = 2000;
  int mt_size = 5000;
  int st_size = 500;
  int dev_size = 64;
  int test_size = 64;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size_src < 1 || vocab_size_trg < 1 || feature_dim < 1)
      throw DataError("synthetic spec: sizes must be positive");
    if (vocab_size_trg < vocab_size_src)
      throw DataError(cat("synthetic spec: target vocab ", vocab_size_trg,
                          " too small for a disjoint mapping of ", vocab_size_src,
                          " source tokens"));
    if (frames_per_token_lo < 1 || frames_per_token_hi < frames_per_token_lo)
      throw DataError("synthetic spec: bad frames_per_token range");
    if (len_lo < 1 || len_hi < len_lo) throw DataError("synthetic spec: bad length range");
    if (noise_sigma < 0) throw DataError("synthetic spec: negative noise_sigma");
    if (asr_size < 1 || mt_size < 1 || st_size < 1 || dev_size < 1 || test_size < 1)
      throw DataError("synthetic spec: corpus sizes must be positive");
    if (mt_size < st_size)
      throw DataError("synthetic spec: the MT corpus must be at least as large as ST");
    if (static_cast<long>(len_hi) * frames_per_token_hi > kMaxFrames)
      throw DataError("synthetic spec: utterances would exceed the frame cap");
  }
};

struct SyntheticData {
  AsrCorpus asr;
  MtCorpus mt;
  StCorpus st_train;
  StCorpus st_dev;
  StCorpus st_test;
  Vocabulary vocab_src;
  Vocabulary vocab_trg;
};

// Fixed per-token "pronunciations" plus Gaussian noise; the target side is
// a dictionary map of the source with optional adjacent-pair swaps. The
// A/M/S/dev/test pools are sentence-disjoint.
inline SyntheticData gen_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng = stream_rng(spec.seed, 0, Stream::kData);

  std::vector<std::string> src_tokens, trg_tokens;
  for (int i = 0; i < spec.vocab_size_src; ++i) src_tokens.push_back(cat("s", i));
  for (int i = 0; i < spec.vocab_size_trg; ++i) trg_tokens.push_back(cat("t", i));
  SyntheticData out;
  out.vocab_src = Vocabulary(Vocabulary::Side::kSource, src_tokens);
  out.vocab_trg = Vocabulary(Vocabulary::Side::kTarget, trg_tokens);

  // codebook: each source token owns a fixed block of frames
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> fpt(spec.frames_per_token_lo, spec.frames_per_token_hi);
  std::vector<Tensor> codebook;
  for (int tok = 0; tok < spec.vocab_size_src; ++tok) {
    Tensor block = Tensor::zeros({fpt(rng), spec.feature_dim});
    for (double& v : block.data) v = gauss(rng);
    codebook.push_back(std::move(block));
  }

  // injective dictionary map source token -> target token
  std::vector<int> mapping(static_cast<std::size_t>(spec.vocab_size_trg));
  std::iota(mapping.begin(), mapping.end(), 0);
  std::shuffle(mapping.begin(), mapping.end(), rng);
  mapping.resize(static_cast<std::size_t>(spec.vocab_size_src));

  // disjoint sentence pools
  long needed = static_cast<long>(spec.asr_size) + spec.mt_size + spec.st_size + spec.dev_size +
                spec.test_size;
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> pool;
  std::uniform_int_distribution<int> len_dist(spec.len_lo, spec.len_hi);
  std::uniform_int_distribution<int> tok_dist(0, spec.vocab_size_src - 1);
  long attempts = 0;
  while (static_cast<long>(pool.size()) < needed) {
    if (++attempts > 200 * needed)
      throw DataError("gen_synthetic: sentence space too small for disjoint pools");
    std::vector<int> sent(static_cast<std::size_t>(len_dist(rng)));
    for (int& t : sent) t = tok_dist(rng);
    if (seen.insert(sent).second) pool.push_back(std::move(sent));
  }

  auto translate = [&](const std::vector<int>& sent) {
    std::vector<int> trg;
    trg.reserve(sent.size());
    for (int t : sent) trg.push_back(mapping[static_cast<std::size_t>(t)]);
    if (spec.reorder)
      for (std::size_t i = 0; i + 1 < trg.size(); i += 2) std::swap(trg[i], trg[i + 1]);
    return trg;
  };
  auto speak = [&](const std::vector<int>& sent) {
    int total = 0;
    for (int t : sent) total += codebook[static_cast<std::size_t>(t)].rows();
    Tensor frames = Tensor::zeros({total, spec.feature_dim});
    int at = 0;
    for (int t : sent) {
      const Tensor& block = codebook[static_cast<std::size_t>(t)];
      for (int r = 0; r < block.rows(); ++r, ++at)
        for (int c = 0; c < spec.feature_dim; ++c) frames.at(at, c) = block.at(r, c);
    }
    if (spec.noise_sigma > 0)
      for (double& v : frames.data) v += spec.noise_sigma * gauss(rng);
    return frames;
  };

  std::size_t cursor = 0;
  for (int i = 0; i < spec.asr_size; ++i) {
    const auto& sent = pool[cursor++];
    out.asr.push_back(AsrRecord{speak(sent), sent});
  }
  for (int i = 0; i < spec.mt_size; ++i) {
    const auto& sent = pool[cursor++];
    out.mt.push_back(MtRecord{sent, translate(sent)});
  }
  auto fill_st = [&](StCorpus& c, int n) {
    for (int i = 0; i < n; ++i) {
      const auto& sent = pool[cursor++];
      c.push_back(StRecord{speak(sent), translate(sent)});
    }
  };
  fill_st(out.st_train, spec.st_size);
  fill_st(out.st_dev, spec.dev_size);
  fill_st(out.st_test, spec.test_size);
  return out;
}

// ---------------------------------------------------------------------------
// JSONL corpus IO. One record per line; floats printed with 17 significant
// digits so the round trip is exact.

namespace detail {

inline void json_escape(const std::string& s, std::string& out) {
  out.push_back('"');
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
}

inline void append_tokens(const std::vector<int>& ids, const Vocabulary& vocab,
                          std::string& out) {
  out.push_back('[');
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(',');
    json_escape(vocab.token_of(ids[i]), out);
  }
  out.push_back(']');
}

inline void append_frames(const Tensor& frames, std::string& out) {
  char buf[40];
  out.push_back('[');
  for (int r = 0; r < frames.rows(); ++r) {
    if (r) out.push_back(',');
    out.push_back('[');
    for (int c = 0; c < frames.cols(); ++c) {
      if (c) out.push_back(',');
      double v = frames.at(r, c);
      if (!std::isfinite(v)) throw DataError("write_corpus: non-finite frame value");
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += buf;
    }
    out.push_back(']');
  }
  out.push_back(']');
}

inline std::vector<int> parse_tokens(const nlohmann::json& arr, const Vocabulary& vocab,
                                     long line_no) {
  if (!arr.is_array()) throw DataError(cat("corpus line ", line_no, ": tokens must be an array"));
  std::vector<int> ids;
  ids.reserve(arr.size());
  for (const auto& item : arr) {
    if (!item.is_string())
      throw DataError(cat("corpus line ", line_no, ": token entries must be strings"));
    ids.push_back(vocab.id_of(item.get<std::string>()));
  }
  return ids;
}

inline Tensor parse_frames(const nlohmann::json& arr, long line_no) {
  if (!arr.is_array() || arr.empty())
    throw DataError(cat("corpus line ", line_no, ": frames must be a nonempty array"));
  if (static_cast<int>(arr.size()) > kMaxFrames)
    throw DataError(cat("corpus line ", line_no, ": ", arr.size(), " frames exceeds the cap of ",
                        kMaxFrames));
  int T = static_cast<int>(arr.size());
  int D = -1;
  std::vector<double> data;
  for (const auto& row : arr) {
    if (!row.is_array()) throw DataError(cat("corpus line ", line_no, ": frame rows must be arrays"));
    if (D < 0) {
      D = static_cast<int>(row.size());
      if (D == 0) throw DataError(cat("corpus line ", line_no, ": empty frame row"));
      data.reserve(static_cast<std::size_t>(T) * D);
    } else if (static_cast<int>(row.size()) != D) {
      throw DataError(cat("corpus line ", line_no, ": ragged frame rows"));
    }
    for (const auto& v : row) {
      if (!v.is_number()) throw DataError(cat("corpus line ", line_no, ": non-numeric frame value"));
      data.push_back(v.get<double>());
    }
  }
  return Tensor({T, D}, std::move(data));
}

inline void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> keys,
                       long line_no) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : keys) known = known || it.key() == k;
    if (!known) throw DataError(cat("corpus line ", line_no, ": unknown field '", it.key(), "'"));
  }
  for (const char* k : keys)
    if (!obj.contains(k)) throw DataError(cat("corpus line ", line_no, ": missing field '", k, "'"));
}

inline nlohmann::json parse_line(const std::string& line, long line_no) {
  nlohmann::json obj = nlohmann::json::parse(line, nullptr, false);
  if (obj.is_discarded() || !obj.is_object())
    throw DataError(cat("corpus line ", line_no, ": malformed JSON"));
  return obj;
}

template <typename WriteFn>
void write_jsonl(const std::string& path, std::size_t count, WriteFn&& fn) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(cat("write_corpus: cannot open ", path));
  std::string line;
  for (std::size_t i = 0; i < count; ++i) {
    line.clear();
    fn(i, line);
    line.push_back('\n');
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
  }
  if (!out) throw DataError(cat("write_corpus: failed writing ", path));
}

template <typename ParseFn>
void read_jsonl(const std::string& path, ParseFn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(cat("read_corpus: cannot open ", path));
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    fn(parse_line(line, line_no), line_no);
  }
}

}  // namespace detail

inline void write_corpus(const AsrCorpus& corpus, const Vocabulary& vocab_src,
                         const std::string& path) {
  detail::write_jsonl(path, corpus.size(), [&](std::size_t i, std::string& line) {
    line += "{\"frames\":";
    detail::append_frames(corpus[i].frames, line);
    line += ",\"transcript\":";
    detail::append_tokens(corpus[i].transcript, vocab_src, line);
    line.push_back('}');
  });
}

inline void write_corpus(const MtCorpus& corpus, const Vocabulary& vocab_src,
                         const Vocabulary& vocab_trg, const std::string& path) {
  detail::write_jsonl(path, corpus.size(), [&](std::size_t i, std::string& line) {
    line += "{\"source\":";
    detail::append_tokens(corpus[i].source, vocab_src, line);
    line += ",\"target\":";
    detail::append_tokens(corpus[i].target, vocab_trg, line);
    line.push_back('}');
  });
}

inline void write_corpus(const StCorpus& corpus, const Vocabulary& vocab_trg,
                         const std::string& path) {
  detail::write_jsonl(path, corpus.size(), [&](std::size_t i, std::string& line) {
    line += "{\"frames\":";
    detail::append_frames(corpus[i].frames, line);
    line += ",\"target\":";
    detail::append_tokens(corpus[i].target, vocab_trg, line);
    line.push_back('}');
  });
}

inline AsrCorpus read_asr_corpus(const std::string& path, const Vocabulary& vocab_src) {
  AsrCorpus corpus;
  detail::read_jsonl(path, [&](const nlohmann::json& obj, long line_no) {
    detail::check_keys(obj, {"frames", "transcript"}, line_no);
    AsrRecord rec;
    rec.frames = detail::parse_frames(obj["frames"], line_no);
    rec.transcript = detail::parse_tokens(obj["transcript"], vocab_src, line_no);
    corpus.push_back(std::move(rec));
  });
  return corpus;
}

inline MtCorpus read_mt_corpus(const std::string& path, const Vocabulary& vocab_src,
                               const Vocabulary& vocab_trg) {
  MtCorpus corpus;
  detail::read_jsonl(path, [&](const nlohmann::json& obj, long line_no) {
    detail::check_keys(obj, {"source", "target"}, line_no);
    MtRecord rec;
    rec.source = detail::parse_tokens(obj["source"], vocab_src, line_no);
    rec.target = detail::parse_tokens(obj["target"], vocab_trg, line_no);
    corpus.push_back(std::move(rec));
  });
  return corpus;
}

inline StCorpus read_st_corpus(const std::string& path, const Vocabulary& vocab_trg) {
  StCorpus corpus;
  detail::read_jsonl(path, [&](const nlohmann::json& obj, long line_no) {
    detail::check_keys(obj, {"frames", "target"}, line_no);
    StRecord rec;
    rec.frames = detail::parse_frames(obj["frames"], line_no);
    rec.target = detail::parse_tokens(obj["target"], vocab_trg, line_no);
    corpus.push_back(std::move(rec));
  });
  return corpus;
}

// ---------------------------------------------------------------------------
// Batching.

enum class Task { kAsr, kMt, kSt };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::kAsr: return "asr";
    case Task::kMt: return "mt";
    case Task::kSt: return "st";
  }
  return "?";
}

// Padded batch with per-example lengths and 0/1 masks. Padded token slots
// hold -1; padded frames hold zeros.
struct Batch {
  Task task = Task::kSt;
  int size = 0;

  Tensor frames;  // size x Tmax x D, flattened {size, Tmax, D}
  std::vector<int> frame_len;
  Tensor frame_mask;  // size x Tmax

  std::vector<std::vector<int>> src_tokens;  // padded with -1
  std::vector<int> src_len;
  Tensor src_mask;

  std::vector<std::vector<int>> trg_tokens;  // padded with -1
  std::vector<int> trg_len;
  Tensor trg_mask;

  Tensor frames_of(int i) const {
    int T = frame_len[static_cast<std::size_t>(i)];
    int D = frames.shape[2];
    Tensor out = Tensor::zeros({T, D});
    std::size_t base = static_cast<std::size_t>(i) * frames.shape[1] * D;
    std::copy(frames.data.begin() + base, frames.data.begin() + base + static_cast<std::size_t>(T) * D,
              out.data.begin());
    return out;
  }
  std::vector<int> src_of(int i) const {
    const auto& row = src_tokens[static_cast<std::size_t>(i)];
    return std::vector<int>(row.begin(), row.begin() + src_len[static_cast<std::size_t>(i)]);
  }
  std::vector<int> trg_of(int i) const {
    const auto& row = trg_tokens[static_cast<std::size_t>(i)];
    return std::vector<int>(row.begin(), row.begin() + trg_len[static_cast<std::size_t>(i)]);
  }
};

namespace detail {

// Sort by length, shuffle inside buckets of 4*batch_size, then cut batches.
inline std::vector<std::vector<int>> bucketed_order(const std::vector<int>& lengths,
                                                    int batch_size, std::mt19937_64& rng) {
  if (batch_size < 1) throw UsageError("batchify: batch_size must be >= 1");
  std::vector<int> idx(lengths.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    return std::pair(lengths[static_cast<std::size_t>(a)], a) <
           std::pair(lengths[static_cast<std::size_t>(b)], b);
  });
  std::size_t bucket = static_cast<std::size_t>(batch_size) * 4;
  for (std::size_t start = 0; start < idx.size(); start += bucket) {
    std::size_t end = std::min(start + bucket, idx.size());
    std::shuffle(idx.begin() + static_cast<long>(start), idx.begin() + static_cast<long>(end), rng);
  }
  std::vector<std::vector<int>> batches;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(start + static_cast<std::size_t>(batch_size), idx.size());
    batches.emplace_back(idx.begin() + static_cast<long>(start), idx.begin() + static_cast<long>(end));
  }
  return batches;
}

inline void pack_frames(Batch& b, const std::vector<const Tensor*>& frames) {
  int n = static_cast<int>(frames.size());
  int tmax = 0, D = frames[0]->cols();
  for (const Tensor* f : frames) tmax = std::max(tmax, f->rows());
  b.frames = Tensor::zeros({n, tmax, D});
  b.frame_mask = Tensor::zeros({n, tmax});
  for (int i = 0; i < n; ++i) {
    const Tensor& f = *frames[static_cast<std::size_t>(i)];
    b.frame_len.push_back(f.rows());
    for (int t = 0; t < f.rows(); ++t) {
      b.frame_mask.data[static_cast<std::size_t>(i) * tmax + t] = 1.0;
      for (int c = 0; c < D; ++c)
        b.frames.data[(static_cast<std::size_t>(i) * tmax + t) * D + c] = f.at(t, c);
    }
  }
}

inline void pack_tokens(std::vector<std::vector<int>>& rows, std::vector<int>& lens, Tensor& mask,
                        const std::vector<const std::vector<int>*>& tokens) {
  int n = static_cast<int>(tokens.size());
  int lmax = 0;
  for (const auto* t : tokens) lmax = std::max(lmax, static_cast<int>(t->size()));
  mask = Tensor::zeros({n, lmax});
  for (int i = 0; i < n; ++i) {
    const auto& src = *tokens[static_cast<std::size_t>(i)];
    std::vector<int> row(static_cast<std::size_t>(lmax), -1);
    std::copy(src.begin(), src.end(), row.begin());
    for (std::size_t j = 0; j < src.size(); ++j)
      mask.data[static_cast<std::size_t>(i) * lmax + j] = 1.0;
    rows.push_back(std::move(row));
    lens.push_back(static_cast<int>(src.size()));
  }
}

}  // namespace detail

inline std::vector<Batch> batchify(const AsrCorpus& corpus, int batch_size, std::mt19937_64& rng) {
  std::vector<int> lengths;
  for (const auto& r : corpus) lengths.push_back(r.frames.rows());
  std::vector<Batch> out;
  for (const auto& group : detail::bucketed_order(lengths, batch_size, rng)) {
    Batch b;
    b.task = Task::kAsr;
    b.size = static_cast<int>(group.size());
    std::vector<const Tensor*> frames;
    std::vector<const std::vector<int>*> tokens;
    for (int i : group) {
      frames.push_back(&corpus[static_cast<std::size_t>(i)].frames);
      tokens.push_back(&corpus[static_cast<std::size_t>(i)].transcript);
    }
    detail::pack_frames(b, frames);
    detail::pack_tokens(b.src_tokens, b.src_len, b.src_mask, tokens);
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<Batch> batchify(const MtCorpus& corpus, int batch_size, std::mt19937_64& rng) {
  std::vector<int> lengths;
  for (const auto& r : corpus) lengths.push_back(static_cast<int>(r.source.size()));
  std::vector<Batch> out;
  for (const auto& group : detail::bucketed_order(lengths, batch_size, rng)) {
    Batch b;
    b.task = Task::kMt;
    b.size = static_cast<int>(group.size());
    std::vector<const std::vector<int>*> src, trg;
    for (int i : group) {
      src.push_back(&corpus[static_cast<std::size_t>(i)].source);
      trg.push_back(&corpus[static_cast<std::size_t>(i)].target);
    }
    detail::pack_tokens(b.src_tokens, b.src_len, b.src_mask, src);
    detail::pack_tokens(b.trg_tokens, b.trg_len, b.trg_mask, trg);
    out.push_back(std::move(b));
  }
  return out;
}

inline std::vector<Batch> batchify(const StCorpus& corpus, int batch_size, std::mt19937_64& rng) {
  std::vector<int> lengths;
  for (const auto& r : corpus) lengths.push_back(r.frames.rows());
  std::vector<Batch> out;
  for (const auto& group : detail::bucketed_order(lengths, batch_size, rng)) {
    Batch b;
    b.task = Task::kSt;
    b.size = static_cast<int>(group.size());
    std::vector<const Tensor*> frames;
    std::vector<const std::vector<int>*> tokens;
    for (int i : group) {
      frames.push_back(&corpus[static_cast<std::size_t>(i)].frames);
      tokens.push_back(&corpus[static_cast<std::size_t>(i)].target);
    }
    detail::pack_frames(b, frames);
    detail::pack_tokens(b.trg_tokens, b.trg_len, b.trg_mask, tokens);
    out.push_back(std::move(b));
  }
  return out;
}

// Batch assembled directly from MT pairs drawn by a sampler.
inline Batch make_mt_batch(const std::vector<const MtRecord*>& records) {
  Batch b;
  b.task = Task::kMt;
  b.size = static_cast<int>(records.size());
  std::vector<const std::vector<int>*> src, trg;
  for (const MtRecord* r : records) {
    src.push_back(&r->source);
    trg.push_back(&r->target);
  }
  detail::pack_tokens(b.src_tokens, b.src_len, b.src_mask, src);
  detail::pack_tokens(b.trg_tokens, b.trg_len, b.trg_mask, trg);
  return b;
}

}  // namespace tcen
