#pragma once

// Task-ratio sampling, the warmup/decay learning-rate schedule, global
// gradient clipping, and the Adam-style optimizer used for every run.

#include <cmath>
#include <map>
#include <random>
#include <span>
#include <vector>

#include "tcen/common.hpp"
#include "tcen/data.hpp"
#include "tcen/tensor.hpp"

namespace tcen {

struct TaskRatios {
  std::map<Task, double> alpha;  // ordered: asr < mt < st

  void validate() const {
    double total = 0.0;
    for (const auto& [task, a] : alpha) {
      if (a < 0) throw UsageError(cat("task ratios: negative weight for ", task_name(task)));
      total += a;
    }
    if (total <= 0) throw UsageError("task ratios: need at least one positive weight");
  }

  double total() const {
    double t = 0.0;
    for (const auto& [task, a] : alpha) t += a;
    return t;
  }
};

// Draws task i with probability alpha_i / sum(alpha), independently per call.
inline Task sample_task(const TaskRatios& ratios, std::mt19937_64& rng) {
  ratios.validate();
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  double u = dist(rng) * ratios.total();
  double acc = 0.0;
  Task last = Task::kAsr;
  for (const auto& [task, a] : ratios.alpha) {
    if (a <= 0) continue;
    acc += a;
    last = task;
    if (u < acc) return task;
  }
  return last;  // u == total edge
}

struct ScheduleConfig {
  double scale_k = 1.0;
  int d_model = 64;
  long warmup_n = 400;

  void validate() const {
    if (scale_k <= 0 || d_model <= 0 || warmup_n <= 0)
      throw UsageError("schedule: all fields must be positive");
  }
};

// k * d_model^-0.5 * min(n^-0.5, n * warmup^-1.5)
inline double lrate(long n, const ScheduleConfig& cfg) {
  cfg.validate();
  if (n < 1) throw UsageError(cat("lrate: step must be >= 1, got ", n));
  double decay = std::pow(static_cast<double>(n), -0.5);
  double warm = static_cast<double>(n) * std::pow(static_cast<double>(cfg.warmup_n), -1.5);
  return cfg.scale_k * std::pow(static_cast<double>(cfg.d_model), -0.5) * std::min(decay, warm);
}

// Scales all grads by max_norm/g when the global L2 norm g exceeds
// max_norm; returns the applied scaling.
inline double clip_gradients(std::span<Parameter* const> params, double max_norm) {
  if (max_norm <= 0) throw UsageError("clip_gradients: max_norm must be positive");
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.data) {
      if (!std::isfinite(g))
        throw NumericError(cat("clip_gradients: non-finite gradient in ", p->name));
      sq += g * g;
    }
  }
  double norm = std::sqrt(sq);
  if (norm == 0.0 || norm <= max_norm) return 1.0;
  double scaling = max_norm / norm;
  for (Parameter* p : params)
    for (double& g : p->grad.data) g *= scaling;
  return scaling;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<Parameter*> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    for (Parameter* p : params_) {
      m_.push_back(Tensor::zeros(p->value.shape));
      v_.push_back(Tensor::zeros(p->value.shape));
    }
  }

  void zero_grads() {
    for (Parameter* p : params_) p->zero_grad();
  }

  // One bias-corrected moment update; lr 0 leaves parameters unchanged.
  void step(double lr) {
    ++t_;
    double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter& p = *params_[i];
      for (std::size_t j = 0; j < p.value.data.size(); ++j) {
        double g = p.grad.data[j];
        double& m = m_[i].data[j];
        double& v = v_[i].data[j];
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g * g;
        p.value.data[j] -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
      }
    }
  }

  const std::vector<Parameter*>& params() const { return params_; }
  long updates() const { return t_; }
  void set_updates(long t) { t_ = t; }
  std::vector<Tensor>& moments_m() { return m_; }
  std::vector<Tensor>& moments_v() { return v_; }

 private:
  std::vector<Parameter*> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace tcen
