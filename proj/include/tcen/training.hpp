#pragma once

// Two-stage training: probabilistic task switching, per-step losses,
// clipping, Adam updates under the warmup schedule, validation-accuracy
// logging, and bit-exact checkpoint/resume.
//
// All randomness is derived statelessly from (stage seed, step, stream),
// so resuming from a step counter reproduces an uninterrupted run bit for
// bit.

#include <bit>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tcen/data.hpp"
#include "tcen/eval.hpp"
#include "tcen/model.hpp"
#include "tcen/optim.hpp"
#include "tcen/transforms.hpp"

namespace tcen {

enum class Stage { kPretrain, kFinetune };

inline const char* stage_name(Stage s) { return s == Stage::kPretrain ? "pretrain" : "finetune"; }
inline Stage parse_stage(const std::string& s) {
  if (s == "pretrain") return Stage::kPretrain;
  if (s == "finetune") return Stage::kFinetune;
  throw UsageError(cat("unknown stage '", s, "'"));
}

struct StageConfig {
  Stage stage = Stage::kFinetune;
  TaskRatios ratios;
  long steps = 3000;
  int batch_size = 16;
  double clip_norm = 5.0;
  double dropout = 0.2;
  std::uint64_t seed = 1;
  ScheduleConfig schedule;
  long eval_interval = 100;
  double noise_k = 0.0;  // probability an MT draw comes from the noisy corpus

  void validate() const {
    ratios.validate();
    for (const auto& [task, a] : ratios.alpha) {
      if (stage == Stage::kPretrain && task == Task::kSt && a > 0)
        throw UsageError("stage config: pre-training covers ASR and MT only");
    }
    if (steps < 0) throw UsageError("stage config: negative step count");
    if (batch_size < 1) throw UsageError("stage config: batch_size must be >= 1");
    if (clip_norm <= 0) throw UsageError("stage config: clip_norm must be positive");
    if (dropout < 0 || dropout >= 1) throw UsageError("stage config: dropout outside [0,1)");
    if (eval_interval < 1) throw UsageError("stage config: eval_interval must be >= 1");
    if (noise_k < 0 || noise_k > 1) throw UsageError("stage config: noise_k outside [0,1]");
    schedule.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json alpha;
    for (const auto& [task, a] : ratios.alpha) alpha[task_name(task)] = a;
    return {{"stage", stage_name(stage)},
            {"ratios", alpha},
            {"steps", steps},
            {"batch_size", batch_size},
            {"clip_norm", clip_norm},
            {"dropout", dropout},
            {"seed", seed},
            {"eval_interval", eval_interval},
            {"noise_k", noise_k},
            {"schedule",
             {{"scale_k", schedule.scale_k},
              {"d_model", schedule.d_model},
              {"warmup_n", schedule.warmup_n}}}};
  }

  static StageConfig from_json(const nlohmann::json& j) {
    StageConfig c;
    c.stage = parse_stage(j.at("stage").get<std::string>());
    for (const auto& [key, value] : j.at("ratios").items()) {
      Task t;
      if (key == "asr") t = Task::kAsr;
      else if (key == "mt") t = Task::kMt;
      else if (key == "st") t = Task::kSt;
      else throw UsageError(cat("stage config: unknown task '", key, "'"));
      c.ratios.alpha[t] = value.get<double>();
    }
    c.steps = j.at("steps").get<long>();
    c.batch_size = j.at("batch_size").get<int>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.dropout = j.at("dropout").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.eval_interval = j.at("eval_interval").get<long>();
    c.noise_k = j.at("noise_k").get<double>();
    const auto& s = j.at("schedule");
    c.schedule.scale_k = s.at("scale_k").get<double>();
    c.schedule.d_model = s.at("d_model").get<int>();
    c.schedule.warmup_n = s.at("warmup_n").get<long>();
    return c;
  }
};

struct TrainRow {
  long step = 0;
  Task task = Task::kSt;
  double loss = 0.0;
  double lr = 0.0;
  bool skipped = false;
};
struct EvalRow {
  long step = 0;
  double accuracy = 0.0;
};

struct TrainingLog {
  std::string label;
  std::vector<TrainRow> rows;
  std::vector<EvalRow> evals;

  CurveSeries curve() const {
    CurveSeries s;
    s.label = label;
    for (const EvalRow& e : evals) s.points.emplace_back(e.step, e.accuracy);
    return s;
  }

  void append_csv(std::ostream& out) const {
    char buf[64];
    for (const TrainRow& r : rows) {
      if (r.skipped) {
        out << r.step << "," << task_name(r.task) << ",skipped,\n";
        continue;
      }
      std::snprintf(buf, sizeof buf, "%.17g", r.loss);
      out << r.step << "," << task_name(r.task) << "," << buf << ",";
      std::snprintf(buf, sizeof buf, "%.17g", r.lr);
      out << buf << "\n";
    }
  }
  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError(cat("training log: cannot write ", path));
    out << "step,task,loss,lrate\n";
    char buf[64];
    // interleave train and eval rows in step order; eval rows use task "eval"
    std::size_t e = 0;
    auto flush_evals = [&](long upto) {
      while (e < evals.size() && evals[e].step <= upto) {
        std::snprintf(buf, sizeof buf, "%.17g", evals[e].accuracy);
        out << evals[e].step << ",eval," << buf << ",\n";
        ++e;
      }
    };
    for (const TrainRow& r : rows) {
      flush_evals(r.step - 1);
      if (r.skipped) {
        out << r.step << "," << task_name(r.task) << ",skipped,\n";
      } else {
        std::snprintf(buf, sizeof buf, "%.17g", r.loss);
        out << r.step << "," << task_name(r.task) << "," << buf << ",";
        std::snprintf(buf, sizeof buf, "%.17g", r.lr);
        out << buf << "\n";
      }
      flush_evals(r.step);
    }
    flush_evals(std::numeric_limits<long>::max());
  }
};

struct TrainingData {
  const AsrCorpus* asr = nullptr;
  const MtCorpus* mt = nullptr;
  const MtCorpus* mt_noisy = nullptr;
  const StCorpus* st = nullptr;
  const StCorpus* dev = nullptr;  // ST dev set for accuracy rows
};

struct TaskCursor {
  long epoch = 0;
  long next = 0;
};

// Everything beyond model parameters needed to resume a stage exactly.
struct TrainState {
  AdamOptimizer opt;
  long step = 0;
  TaskCursor asr_cursor, st_cursor;

  explicit TrainState(TcenModel& m) : opt(m.parameters()) {}
};

namespace detail {

// Epoch batch order is a pure function of (seed, task, epoch); the in-memory
// cache is reconstructed on demand so resume stays exact.
struct EpochStream {
  long cached_epoch = -1;
  std::vector<std::vector<int>> groups;

  template <typename Corpus>
  const std::vector<int>& next(const Corpus& corpus, int batch_size, std::uint64_t seed,
                               std::uint64_t task_tag, TaskCursor& cur) {
    if (cur.epoch != cached_epoch || groups.empty()) {
      std::vector<int> lengths;
      lengths.reserve(corpus.size());
      for (const auto& r : corpus) lengths.push_back(record_length(r));
      std::mt19937_64 rng = stream_rng(hash_combine(seed, task_tag),
                                       static_cast<std::uint64_t>(cur.epoch), Stream::kEpoch);
      groups = bucketed_order(lengths, batch_size, rng);
      cached_epoch = cur.epoch;
    }
    const std::vector<int>& g = groups[static_cast<std::size_t>(cur.next)];
    if (++cur.next >= static_cast<long>(groups.size())) {
      cur.next = 0;
      ++cur.epoch;
    }
    return g;
  }

  static int record_length(const AsrRecord& r) { return r.frames.rows(); }
  static int record_length(const StRecord& r) { return r.frames.rows(); }
};

inline Batch assemble_asr(const AsrCorpus& corpus, const std::vector<int>& idx) {
  Batch b;
  b.task = Task::kAsr;
  b.size = static_cast<int>(idx.size());
  std::vector<const Tensor*> frames;
  std::vector<const std::vector<int>*> tokens;
  for (int i : idx) {
    frames.push_back(&corpus[static_cast<std::size_t>(i)].frames);
    tokens.push_back(&corpus[static_cast<std::size_t>(i)].transcript);
  }
  pack_frames(b, frames);
  pack_tokens(b.src_tokens, b.src_len, b.src_mask, tokens);
  return b;
}

inline Batch assemble_st(const StCorpus& corpus, const std::vector<int>& idx) {
  Batch b;
  b.task = Task::kSt;
  b.size = static_cast<int>(idx.size());
  std::vector<const Tensor*> frames;
  std::vector<const std::vector<int>*> tokens;
  for (int i : idx) {
    frames.push_back(&corpus[static_cast<std::size_t>(i)].frames);
    tokens.push_back(&corpus[static_cast<std::size_t>(i)].target);
  }
  pack_frames(b, frames);
  pack_tokens(b.trg_tokens, b.trg_len, b.trg_mask, tokens);
  return b;
}

}  // namespace detail

// Runs (or resumes) one stage. Per step: sample a task, draw its batch,
// loss, backward, clip, Adam update at lrate(n). Infeasible ASR batches
// are skipped with a flag and no update.
inline TrainingLog train_stage(TcenModel& m, const TrainingData& data, const StageConfig& cfg,
                               TrainState& state, const std::string& label = "") {
  cfg.validate();
  auto active = [&](Task t) {
    auto it = cfg.ratios.alpha.find(t);
    return it != cfg.ratios.alpha.end() && it->second > 0;
  };
  if (active(Task::kAsr) && (data.asr == nullptr || data.asr->empty()))
    throw DataError("train_stage: ASR task sampled but no ASR corpus given");
  if (active(Task::kMt) && (data.mt == nullptr || data.mt->empty()))
    throw DataError("train_stage: MT task sampled but no MT corpus given");
  if (active(Task::kSt) && (data.st == nullptr || data.st->empty()))
    throw DataError("train_stage: ST task sampled but no ST corpus given");

  std::optional<MixSampler> mt_sampler;
  if (active(Task::kMt))
    mt_sampler = mix_corpora(*data.mt, data.mt_noisy, NoiseMixConfig{cfg.noise_k});

  detail::EpochStream asr_stream, st_stream;
  TrainingLog log;
  log.label = label;

  if (state.step == 0 && cfg.steps > 0 && data.dev != nullptr)
    log.evals.push_back(EvalRow{0, token_accuracy(m, *data.dev)});

  for (long n = state.step + 1; n <= cfg.steps; ++n) {
    std::mt19937_64 task_rng = stream_rng(cfg.seed, static_cast<std::uint64_t>(n), Stream::kTask);
    Task task = sample_task(cfg.ratios, task_rng);

    Batch batch;
    switch (task) {
      case Task::kAsr:
        batch = detail::assemble_asr(
            *data.asr, asr_stream.next(*data.asr, cfg.batch_size, cfg.seed, 1, state.asr_cursor));
        break;
      case Task::kSt:
        batch = detail::assemble_st(
            *data.st, st_stream.next(*data.st, cfg.batch_size, cfg.seed, 3, state.st_cursor));
        break;
      case Task::kMt: {
        std::mt19937_64 draw_rng =
            stream_rng(cfg.seed, static_cast<std::uint64_t>(n), Stream::kBatch);
        std::vector<const MtRecord*> recs;
        for (int b = 0; b < cfg.batch_size; ++b) recs.push_back(&mt_sampler->draw(draw_rng));
        batch = make_mt_batch(recs);
        break;
      }
    }

    double lr = lrate(n, cfg.schedule);
    Tape tape;
    std::mt19937_64 drop_rng = stream_rng(cfg.seed, static_cast<std::uint64_t>(n), Stream::kDropout);
    Fwd f{tape, true, cfg.dropout, &drop_rng, &m.counters};
    TaskLossResult res = task_loss(m, task, batch, f);
    if (res.skipped) {
      log.rows.push_back(TrainRow{n, task, std::numeric_limits<double>::infinity(), lr, true});
      state.step = n;
      continue;
    }
    double loss_value = cvalue_of(res.loss).item();
    if (!std::isfinite(loss_value))
      throw NumericError(cat("train_stage: non-finite ", task_name(task), " loss at step ", n));
    state.opt.zero_grads();
    tape.backward(res.loss);
    clip_gradients(state.opt.params(), cfg.clip_norm);
    state.opt.step(lr);
    log.rows.push_back(TrainRow{n, task, loss_value, lr, false});
    if (data.dev != nullptr && n % cfg.eval_interval == 0)
      log.evals.push_back(EvalRow{n, token_accuracy(m, *data.dev)});
    state.step = n;
  }
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, a JSON meta block (config + counters), then
// named parameter tensors and optional Adam moments, all little-endian.

inline constexpr char kCkptMagic[8] = {'T', 'C', 'E', 'N', 'C', 'K', 'P', '1'};
inline constexpr std::uint32_t kCkptVersion = 1;

struct CheckpointData {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> params;
  bool has_moments = false;
  std::vector<Tensor> m, v;
  long adam_updates = 0;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}
inline void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw DataError("checkpoint: truncated file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw DataError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

inline void put_tensor_data(std::ostream& out, const Tensor& t) {
  for (double d : t.data) put_f64(out, d);
}
inline void get_tensor_data(std::istream& in, Tensor& t) {
  for (double& d : t.data) d = get_f64(in);
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const CheckpointData& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(cat("checkpoint: cannot write ", path));
  out.write(kCkptMagic, 8);
  detail::put_u32(out, kCkptVersion);
  std::string meta = ckpt.meta.dump();
  detail::put_u64(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, tensor] : ckpt.params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(tensor.shape.size()));
    for (int d : tensor.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    detail::put_tensor_data(out, tensor);
  }
  out.put(ckpt.has_moments ? 1 : 0);
  if (ckpt.has_moments) {
    detail::put_u64(out, static_cast<std::uint64_t>(ckpt.adam_updates));
    for (const Tensor& t : ckpt.m) detail::put_tensor_data(out, t);
    for (const Tensor& t : ckpt.v) detail::put_tensor_data(out, t);
  }
  if (!out) throw DataError(cat("checkpoint: failed writing ", path));
}

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(cat("checkpoint: cannot read ", path));
  char magic[8];
  in.read(magic, 8);
  if (!in || std::string(magic, 8) != std::string(kCkptMagic, 8))
    throw DataError(cat("checkpoint: ", path, " is not a checkpoint file"));
  std::uint32_t version = detail::get_u32(in);
  if (version != kCkptVersion)
    throw DataError(cat("checkpoint: version ", version, " unsupported (want ", kCkptVersion, ")"));
  CheckpointData ckpt;
  std::uint64_t meta_len = detail::get_u64(in);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw DataError("checkpoint: truncated file");
  ckpt.meta = nlohmann::json::parse(meta, nullptr, false);
  if (ckpt.meta.is_discarded()) throw DataError("checkpoint: corrupt meta block");
  std::uint32_t n_params = detail::get_u32(in);
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::uint32_t name_len = detail::get_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    if (!in) throw DataError("checkpoint: truncated file");
    std::uint32_t ndims = detail::get_u32(in);
    std::vector<int> shape;
    for (std::uint32_t d = 0; d < ndims; ++d)
      shape.push_back(static_cast<int>(detail::get_u32(in)));
    Tensor t = Tensor::zeros(shape);
    detail::get_tensor_data(in, t);
    ckpt.params.emplace_back(std::move(name), std::move(t));
  }
  int flag = in.get();
  if (flag == EOF) throw DataError("checkpoint: truncated file");
  ckpt.has_moments = flag != 0;
  if (ckpt.has_moments) {
    ckpt.adam_updates = static_cast<long>(detail::get_u64(in));
    for (const auto& [name, t] : ckpt.params) {
      Tensor mt = Tensor::zeros(t.shape);
      detail::get_tensor_data(in, mt);
      ckpt.m.push_back(std::move(mt));
    }
    for (const auto& [name, t] : ckpt.params) {
      Tensor vt = Tensor::zeros(t.shape);
      detail::get_tensor_data(in, vt);
      ckpt.v.push_back(std::move(vt));
    }
  }
  if (in.peek() != EOF) throw DataError(cat("checkpoint: trailing bytes in ", path));
  return ckpt;
}

// Model checkpoint: parameters plus, when a train state is given, the
// optimizer moments, step counter, cursors, and the stage seed (the RNG
// state in this counter-derived scheme).
inline void save_checkpoint(const std::string& path, TcenModel& model, TrainState* state,
                            const StageConfig* stage_cfg) {
  CheckpointData ckpt;
  ckpt.meta["kind"] = "tcen";
  ckpt.meta["model"] = model.cfg.to_json();
  if (state != nullptr) {
    ckpt.meta["step"] = state->step;
    ckpt.meta["cursors"] = {{"asr_epoch", state->asr_cursor.epoch},
                            {"asr_next", state->asr_cursor.next},
                            {"st_epoch", state->st_cursor.epoch},
                            {"st_next", state->st_cursor.next}};
  }
  if (stage_cfg != nullptr) ckpt.meta["stage"] = stage_cfg->to_json();
  for (Parameter* p : model.parameters()) ckpt.params.emplace_back(p->name, p->value);
  if (state != nullptr) {
    ckpt.has_moments = true;
    ckpt.adam_updates = state->opt.updates();
    ckpt.m = state->opt.moments_m();
    ckpt.v = state->opt.moments_v();
  }
  write_checkpoint(path, ckpt);
}

inline void load_parameters(const CheckpointData& ckpt, std::vector<Parameter*> params) {
  if (ckpt.params.size() != params.size())
    throw DataError(cat("checkpoint: has ", ckpt.params.size(), " parameters, model wants ",
                        params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, tensor] = ckpt.params[i];
    if (name != params[i]->name)
      throw DataError(cat("checkpoint: unknown parameter name '", name, "', expected '",
                          params[i]->name, "'"));
    if (tensor.shape != params[i]->value.shape)
      throw DataError(cat("checkpoint: shape mismatch for '", name, "'"));
    params[i]->value = tensor;
  }
}

// Rebuild a model (and optionally its train state) from a checkpoint.
inline TcenModel model_from_checkpoint(const CheckpointData& ckpt) {
  if (ckpt.meta.value("kind", "") != "tcen")
    throw DataError("checkpoint: not a model checkpoint");
  TcenModel model(ModelConfig::from_json(ckpt.meta.at("model")));
  load_parameters(ckpt, model.parameters());
  return model;
}

inline void restore_train_state(const CheckpointData& ckpt, TrainState& state) {
  if (!ckpt.has_moments) throw DataError("checkpoint: no optimizer state to resume from");
  state.step = ckpt.meta.at("step").get<long>();
  const auto& cur = ckpt.meta.at("cursors");
  state.asr_cursor = {cur.at("asr_epoch").get<long>(), cur.at("asr_next").get<long>()};
  state.st_cursor = {cur.at("st_epoch").get<long>(), cur.at("st_next").get<long>()};
  if (ckpt.m.size() != state.opt.moments_m().size())
    throw DataError("checkpoint: optimizer moment count mismatch");
  state.opt.set_updates(ckpt.adam_updates);
  for (std::size_t i = 0; i < ckpt.m.size(); ++i) {
    if (ckpt.m[i].shape != state.opt.moments_m()[i].shape)
      throw DataError("checkpoint: optimizer moment shape mismatch");
    state.opt.moments_m()[i] = ckpt.m[i];
    state.opt.moments_v()[i] = ckpt.v[i];
  }
}

// Noiser checkpoints share the container format.
inline void save_noiser_checkpoint(const std::string& path, NoiserModel& noiser) {
  CheckpointData ckpt;
  ckpt.meta["kind"] = "noiser";
  ckpt.meta["noiser"] = noiser.cfg.to_json();
  ckpt.meta["src_vocab"] = noiser.src_vocab;
  for (Parameter* p : noiser.parameters()) ckpt.params.emplace_back(p->name, p->value);
  write_checkpoint(path, ckpt);
}

inline NoiserModel noiser_from_checkpoint(const CheckpointData& ckpt) {
  if (ckpt.meta.value("kind", "") != "noiser")
    throw DataError("checkpoint: not a noiser checkpoint");
  NoiserModel noiser(NoiserConfig::from_json(ckpt.meta.at("noiser")),
                     ckpt.meta.at("src_vocab").get<int>());
  std::vector<Parameter*> params = noiser.parameters();
  load_parameters(ckpt, params);
  return noiser;
}

}  // namespace tcen
