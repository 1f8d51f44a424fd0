#pragma once

#include <random>
#include <vector>

#include "tcen/autodiff.hpp"
#include "tcen/tensor.hpp"

namespace tt {

inline tcen::Tensor row(std::vector<double> v) {
  int n = static_cast<int>(v.size());
  return tcen::Tensor({1, n}, std::move(v));
}

inline tcen::Tensor mat(int r, int c, std::vector<double> v) {
  return tcen::Tensor({r, c}, std::move(v));
}

inline tcen::Tensor rand_mat(int r, int c, std::mt19937_64& rng, double lo = -1.0,
                             double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  tcen::Tensor t = tcen::Tensor::zeros({r, c});
  for (double& x : t.data) x = dist(rng);
  return t;
}

}  // namespace tt
