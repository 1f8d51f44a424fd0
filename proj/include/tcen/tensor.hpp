#pragma once

// Dense row-major double tensors and named parameters. Plain value types;
// tape tracking lives in autodiff.hpp.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tcen/common.hpp"

namespace tcen {

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw DataError(cat("tensor: shape/data mismatch, shape wants ", numel_of(shape),
                          " values, got ", data.size()));
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw DataError("tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor full(std::vector<int> s, double v) {
    std::size_t n = numel_of(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }

  std::size_t numel() const { return data.size(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  bool is_scalar() const { return numel() == 1; }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

  double item() const {
    if (!is_scalar()) throw DataError("tensor: item() on non-scalar");
    return data[0];
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) { std::fill(data.begin(), data.end(), v); }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

// Glorot-uniform init in +-sqrt(6/(fan_in+fan_out)), seed-deterministic.
inline Tensor glorot_uniform(int rows, int cols, std::mt19937_64& rng) {
  double bound = std::sqrt(6.0 / (rows + cols));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = dist(rng);
  return t;
}

// A learned tensor with its gradient accumulator. Names are unique per
// model and stable across save/load; they key the checkpoint format.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor::zeros(value.shape);
  }

  void zero_grad() { grad.fill(0.0); }
};

}  // namespace tcen
