#pragma once

// Reverse-mode differentiation over a per-batch tape (define-by-run).
// Nodes are appended in execution order, so reverse id order is a valid
// topological order; backward() walks it once and accumulates into
// Parameter.grad at parameter leaves.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <unordered_map>
#include <vector>

#include "tcen/common.hpp"
#include "tcen/tensor.hpp"

namespace tcen {

enum class OpKind {
  kLeaf,
  kParam,
  kMatmul,
  kMatmulNT,
  kAdd,
  kMul,
  kScale,
  kShift,
  kConcat,
  kSlice,
  kStackRows,
  kTranspose,
  kTanh,
  kSigmoid,
  kRelu,
  kExp,
  kLog,
  kLogSoftmax,
  kLogSumExp,
  kLogAddExp,
  kEmbedding,
  kDropout,
  kSum,
  kMean,
  kGather,
  kPickPerRow,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kParam: return "param";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kMatmulNT: return "matmul_nt";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kShift: return "shift";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kStackRows: return "stack_rows";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kRelu: return "relu";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kLogSumExp: return "logsumexp";
    case OpKind::kLogAddExp: return "logaddexp";
    case OpKind::kEmbedding: return "embedding_lookup";
    case OpKind::kDropout: return "dropout_mask";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kGather: return "gather";
    case OpKind::kPickPerRow: return "pick_per_row";
  }
  return "?";
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

struct Node {
  OpKind kind = OpKind::kLeaf;
  std::vector<int> inputs;
  Tensor value;
  Tensor grad;
  bool has_grad = false;
  std::function<void(Tape&, Node&)> back;
  Parameter* param = nullptr;
};

class Tape {
 public:
  Tape() { nodes_.reserve(256); }

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  int size() const { return static_cast<int>(nodes_.size()); }
  const std::vector<Node>& nodes() const { return nodes_; }

  Var leaf(Tensor t) {
    Node n;
    n.kind = OpKind::kLeaf;
    n.value = std::move(t);
    return push(std::move(n));
  }

  // Leases a parameter onto the tape. Repeated leases return the same
  // node, so a tied matrix read through two roles is one storage here too.
  Var param(Parameter& p) {
    auto it = leases_.find(&p);
    if (it != leases_.end()) return Var{this, it->second};
    Node n;
    n.kind = OpKind::kParam;
    n.value = p.value;
    n.param = &p;
    Var v = push(std::move(n));
    leases_.emplace(&p, v.id);
    return v;
  }

  Var push(Node n) {
    for (int in : n.inputs)
      if (in < 0 || in >= size()) throw NumericError("tape: input handle out of order");
    nodes_.push_back(std::move(n));
    return Var{this, size() - 1};
  }

  Tensor& grad_buf(int id) {
    Node& n = node(id);
    if (!n.has_grad) {
      n.grad = Tensor::zeros(n.value.shape);
      n.has_grad = true;
    }
    return n.grad;
  }

  // Accumulates d(loss)/d(param.value) into each leased Parameter's grad.
  // Interior node grads are recomputed from scratch per call, so calling
  // twice on the same loss exactly doubles the parameter grads.
  void backward(const Var& loss) {
    if (!loss.valid() || loss.tape != this || loss.id >= size())
      throw NumericError("backward: loss is detached from this tape");
    if (!node(loss.id).value.is_scalar())
      throw NumericError(cat("backward: loss must be scalar, got ",
                             node(loss.id).value.rows(), "x", node(loss.id).value.cols()));
    for (Node& n : nodes_) {
      n.has_grad = false;
    }
    grad_buf(loss.id).data[0] = 1.0;
    backward_visits_ = 0;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = node(id);
      ++backward_visits_;
      if (!n.has_grad) continue;
      if (n.back) n.back(*this, n);
      if (n.param != nullptr) {
        for (std::size_t i = 0; i < n.grad.data.size(); ++i) n.param->grad.data[i] += n.grad.data[i];
      }
    }
  }

  int backward_visits() const { return backward_visits_; }

 private:
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> leases_;
  int backward_visits_ = 0;
};

namespace detail {

// C += A(MxK) * B(KxN), row-major.
inline void mm_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const double* a = A + static_cast<std::size_t>(m) * K;
    double* c = C + static_cast<std::size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

// C += A(MxK) * B(NxK)^T -> MxN.
inline void mm_nt_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const double* a = A + static_cast<std::size_t>(m) * K;
    double* c = C + static_cast<std::size_t>(m) * N;
    for (int n = 0; n < N; ++n) {
      const double* b = B + static_cast<std::size_t>(n) * K;
      double s = 0.0;
      for (int k = 0; k < K; ++k) s += a[k] * b[k];
      c[n] += s;
    }
  }
}

// C += A(KxM)^T * B(KxN) -> MxN.
inline void mm_tn_acc(const double* A, const double* B, double* C, int M, int K, int N) {
  for (int k = 0; k < K; ++k) {
    const double* a = A + static_cast<std::size_t>(k) * M;
    const double* b = B + static_cast<std::size_t>(k) * N;
    for (int m = 0; m < M; ++m) {
      double av = a[m];
      if (av == 0.0) continue;
      double* c = C + static_cast<std::size_t>(m) * N;
      for (int n = 0; n < N; ++n) c[n] += av * b[n];
    }
  }
}

inline const Tensor& val(Tape& t, int id) { return t.node(id).value; }

[[noreturn]] inline void shape_error(OpKind k, const Tensor& a, const Tensor& b) {
  throw DataError(cat(op_name(k), ": shape mismatch ", a.rows(), "x", a.cols(), " vs ",
                      b.rows(), "x", b.cols()));
}

inline void require_rank2(OpKind k, const Tensor& t) {
  if (t.shape.size() != 2)
    throw DataError(cat(op_name(k), ": expected a rank-2 tensor, got rank ", t.shape.size()));
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  const Tensor& B = detail::val(t, b.id);
  detail::require_rank2(OpKind::kMatmul, A);
  detail::require_rank2(OpKind::kMatmul, B);
  if (A.cols() != B.rows()) detail::shape_error(OpKind::kMatmul, A, B);
  int M = A.rows(), K = A.cols(), N = B.cols();
  Node n;
  n.kind = OpKind::kMatmul;
  n.inputs = {a.id, b.id};
  n.value = Tensor::zeros({M, N});
  detail::mm_acc(A.data.data(), B.data.data(), n.value.data.data(), M, K, N);
  n.back = [M, K, N](Tape& tp, Node& self) {
    int ia = self.inputs[0], ib = self.inputs[1];
    const Tensor& A2 = detail::val(tp, ia);
    const Tensor& B2 = detail::val(tp, ib);
    // dA += dY * B^T ; dB += A^T * dY
    detail::mm_nt_acc(self.grad.data.data(), B2.data.data(), tp.grad_buf(ia).data.data(), M, N, K);
    detail::mm_tn_acc(A2.data.data(), self.grad.data.data(), tp.grad_buf(ib).data.data(), K, M, N);
  };
  return t.push(std::move(n));
}

// a * b^T; used by the tied CTC head so the embedding matrix is read
// directly in (vocab x d) layout.
inline Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  const Tensor& B = detail::val(t, b.id);
  detail::require_rank2(OpKind::kMatmulNT, A);
  detail::require_rank2(OpKind::kMatmulNT, B);
  if (A.cols() != B.cols()) detail::shape_error(OpKind::kMatmulNT, A, B);
  int M = A.rows(), K = A.cols(), N = B.rows();
  Node n;
  n.kind = OpKind::kMatmulNT;
  n.inputs = {a.id, b.id};
  n.value = Tensor::zeros({M, N});
  detail::mm_nt_acc(A.data.data(), B.data.data(), n.value.data.data(), M, K, N);
  n.back = [M, K, N](Tape& tp, Node& self) {
    int ia = self.inputs[0], ib = self.inputs[1];
    const Tensor& A2 = detail::val(tp, ia);
    const Tensor& B2 = detail::val(tp, ib);
    // dA += dY * B ; dB += dY^T * A
    detail::mm_acc(self.grad.data.data(), B2.data.data(), tp.grad_buf(ia).data.data(), M, N, K);
    detail::mm_tn_acc(self.grad.data.data(), A2.data.data(), tp.grad_buf(ib).data.data(), N, M, K);
  };
  return t.push(std::move(n));
}

// Same shape, or b a 1xC row broadcast over a's rows.
inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  const Tensor& B = detail::val(t, b.id);
  bool bcast = !same_shape(A, B);
  if (bcast && !(B.rows() == 1 && A.cols() == B.cols())) detail::shape_error(OpKind::kAdd, A, B);
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a.id, b.id};
  n.value = A;
  for (int r = 0; r < A.rows(); ++r)
    for (int c = 0; c < A.cols(); ++c) n.value.at(r, c) += bcast ? B.at(0, c) : B.at(r, c);
  n.back = [bcast](Tape& tp, Node& self) {
    Tensor& da = tp.grad_buf(self.inputs[0]);
    Tensor& db = tp.grad_buf(self.inputs[1]);
    for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += self.grad.data[i];
    if (bcast) {
      for (int r = 0; r < self.grad.rows(); ++r)
        for (int c = 0; c < self.grad.cols(); ++c) db.at(0, c) += self.grad.at(r, c);
    } else {
      for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] += self.grad.data[i];
    }
  };
  return t.push(std::move(n));
}

inline Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  const Tensor& B = detail::val(t, b.id);
  if (!same_shape(A, B)) detail::shape_error(OpKind::kMul, A, B);
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a.id, b.id};
  n.value = A;
  for (std::size_t i = 0; i < n.value.data.size(); ++i) n.value.data[i] *= B.data[i];
  n.back = [](Tape& tp, Node& self) {
    const Tensor& A2 = detail::val(tp, self.inputs[0]);
    const Tensor& B2 = detail::val(tp, self.inputs[1]);
    Tensor& da = tp.grad_buf(self.inputs[0]);
    Tensor& db = tp.grad_buf(self.inputs[1]);
    for (std::size_t i = 0; i < da.data.size(); ++i) {
      da.data[i] += self.grad.data[i] * B2.data[i];
      db.data[i] += self.grad.data[i] * A2.data[i];
    }
  };
  return t.push(std::move(n));
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape;
  Node n;
  n.kind = OpKind::kScale;
  n.inputs = {a.id};
  n.value = detail::val(t, a.id);
  for (double& v : n.value.data) v *= c;
  n.back = [c](Tape& tp, Node& self) {
    Tensor& da = tp.grad_buf(self.inputs[0]);
    for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += c * self.grad.data[i];
  };
  return t.push(std::move(n));
}

inline Var shift(Var a, double c) {
  Tape& t = *a.tape;
  Node n;
  n.kind = OpKind::kShift;
  n.inputs = {a.id};
  n.value = detail::val(t, a.id);
  for (double& v : n.value.data) v += c;
  n.back = [](Tape& tp, Node& self) {
    Tensor& da = tp.grad_buf(self.inputs[0]);
    for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += self.grad.data[i];
  };
  return t.push(std::move(n));
}

inline Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

// axis 0 stacks rows, axis 1 joins columns.
inline Var concat(Var a, Var b, int axis) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  const Tensor& B = detail::val(t, b.id);
  detail::require_rank2(OpKind::kConcat, A);
  detail::require_rank2(OpKind::kConcat, B);
  Node n;
  n.kind = OpKind::kConcat;
  n.inputs = {a.id, b.id};
  if (axis == 0) {
    if (A.cols() != B.cols()) detail::shape_error(OpKind::kConcat, A, B);
    n.value = Tensor::zeros({A.rows() + B.rows(), A.cols()});
    std::copy(A.data.begin(), A.data.end(), n.value.data.begin());
    std::copy(B.data.begin(), B.data.end(), n.value.data.begin() + A.data.size());
    std::size_t split = A.data.size();
    n.back = [split](Tape& tp, Node& self) {
      Tensor& da = tp.grad_buf(self.inputs[0]);
      Tensor& db = tp.grad_buf(self.inputs[1]);
      for (std::size_t i = 0; i < split; ++i) da.data[i] += self.grad.data[i];
      for (std::size_t i = 0; i < db.data.size(); ++i) db.data[i] += self.grad.data[split + i];
    };
  } else if (axis == 1) {
    if (A.rows() != B.rows()) detail::shape_error(OpKind::kConcat, A, B);
    int R = A.rows(), Ca = A.cols(), Cb = B.cols();
    n.value = Tensor::zeros({R, Ca + Cb});
    for (int r = 0; r < R; ++r) {
      for (int c = 0; c < Ca; ++c) n.value.at(r, c) = A.at(r, c);
      for (int c = 0; c < Cb; ++c) n.value.at(r, Ca + c) = B.at(r, c);
    }
    n.back = [R, Ca, Cb](Tape& tp, Node& self) {
      Tensor& da = tp.grad_buf(self.inputs[0]);
      Tensor& db = tp.grad_buf(self.inputs[1]);
      for (int r = 0; r < R; ++r) {
        for (int c = 0; c < Ca; ++c) da.at(r, c) += self.grad.at(r, c);
        for (int c = 0; c < Cb; ++c) db.at(r, c) += self.grad.at(r, Ca + c);
      }
    };
  } else {
    throw UsageError(cat("concat: axis must be 0 or 1, got ", axis));
  }
  return t.push(std::move(n));
}

inline Var stack_rows(Tape& t, const std::vector<Var>& rows) {
  if (rows.empty()) throw DataError("stack_rows: no rows");
  int C = detail::val(t, rows[0].id).cols();
  Node n;
  n.kind = OpKind::kStackRows;
  n.value = Tensor::zeros({static_cast<int>(rows.size()), C});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Tensor& R = detail::val(t, rows[r].id);
    if (R.rows() != 1 || R.cols() != C)
      throw DataError(cat("stack_rows: row ", r, " has shape ", R.rows(), "x", R.cols(),
                          ", want 1x", C));
    n.inputs.push_back(rows[r].id);
    std::copy(R.data.begin(), R.data.end(), n.value.data.begin() + r * C);
  }
  n.back = [C](Tape& tp, Node& self) {
    for (std::size_t r = 0; r < self.inputs.size(); ++r) {
      Tensor& d = tp.grad_buf(self.inputs[r]);
      for (int c = 0; c < C; ++c) d.data[c] += self.grad.data[r * C + c];
    }
  };
  return t.push(std::move(n));
}

inline Var slice(Var a, int axis, int from, int to) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  detail::require_rank2(OpKind::kSlice, A);
  int limit = axis == 0 ? A.rows() : A.cols();
  if (axis != 0 && axis != 1) throw UsageError(cat("slice: axis must be 0 or 1, got ", axis));
  if (from < 0 || to > limit || from >= to)
    throw DataError(cat("slice: range [", from, ",", to, ") invalid for extent ", limit));
  Node n;
  n.kind = OpKind::kSlice;
  n.inputs = {a.id};
  if (axis == 0) {
    n.value = Tensor::zeros({to - from, A.cols()});
    std::copy(A.data.begin() + static_cast<std::size_t>(from) * A.cols(),
              A.data.begin() + static_cast<std::size_t>(to) * A.cols(), n.value.data.begin());
    int C = A.cols();
    n.back = [from, C](Tape& tp, Node& self) {
      Tensor& da = tp.grad_buf(self.inputs[0]);
      for (std::size_t i = 0; i < self.grad.data.size(); ++i)
        da.data[static_cast<std::size_t>(from) * C + i] += self.grad.data[i];
    };
  } else {
    n.value = Tensor::zeros({A.rows(), to - from});
    for (int r = 0; r < A.rows(); ++r)
      for (int c = from; c < to; ++c) n.value.at(r, c - from) = A.at(r, c);
    n.back = [from](Tape& tp, Node& self) {
      Tensor& da = tp.grad_buf(self.inputs[0]);
      for (int r = 0; r < self.grad.rows(); ++r)
        for (int c = 0; c < self.grad.cols(); ++c) da.at(r, from + c) += self.grad.at(r, c);
    };
  }
  return t.push(std::move(n));
}

inline Var slice_rows(Var a, int from, int to) { return slice(a, 0, from, to); }
inline Var slice_cols(Var a, int from, int to) { return slice(a, 1, from, to); }

inline Var transpose(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  detail::require_rank2(OpKind::kTranspose, A);
  Node n;
  n.kind = OpKind::kTranspose;
  n.inputs = {a.id};
  n.value = Tensor::zeros({A.cols(), A.rows()});
  for (int r = 0; r < A.rows(); ++r)
    for (int c = 0; c < A.cols(); ++c) n.value.at(c, r) = A.at(r, c);
  n.back = [](Tape& tp, Node& self) {
    Tensor& da = tp.grad_buf(self.inputs[0]);
    for (int r = 0; r < self.grad.rows(); ++r)
      for (int c = 0; c < self.grad.cols(); ++c) da.at(c, r) += self.grad.at(r, c);
  };
  return t.push(std::move(n));
}

namespace detail {

template <typename Fwd, typename Bwd>
Var unary(Var a, OpKind kind, Fwd fwd, Bwd bwd) {
  Tape& t = *a.tape;
  Node n;
  n.kind = kind;
  n.inputs = {a.id};
  n.value = val(t, a.id);
  for (double& v : n.value.data) v = fwd(v);
  n.back = [bwd](Tape& tp, Node& self) {
    const Tensor& x = val(tp, self.inputs[0]);
    Tensor& dx = tp.grad_buf(self.inputs[0]);
    for (std::size_t i = 0; i < dx.data.size(); ++i)
      dx.data[i] += self.grad.data[i] * bwd(x.data[i], self.value.data[i]);
  };
  return t.push(std::move(n));
}

}  // namespace detail

inline Var tanh_op(Var a) {
  return detail::unary(a, OpKind::kTanh, [](double x) { return std::tanh(x); },
                       [](double, double y) { return 1.0 - y * y; });
}
inline Var sigmoid(Var a) {
  return detail::unary(a, OpKind::kSigmoid,
                       [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                                    : std::exp(x) / (1.0 + std::exp(x)); },
                       [](double, double y) { return y * (1.0 - y); });
}
inline Var relu(Var a) {
  return detail::unary(a, OpKind::kRelu, [](double x) { return x > 0 ? x : 0.0; },
                       [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Var exp_op(Var a) {
  return detail::unary(a, OpKind::kExp, [](double x) { return std::exp(x); },
                       [](double, double y) { return y; });
}

// Inputs below exp(kLogFloor) are clamped to the floor so finite inputs
// always give finite outputs.
inline Var log_op(Var a) {
  const double floor_x = std::exp(kLogFloor);
  return detail::unary(a, OpKind::kLog,
                       [floor_x](double x) { return std::log(x < floor_x ? floor_x : x); },
                       [floor_x](double x, double) { return 1.0 / (x < floor_x ? floor_x : x); });
}

inline Var log_softmax(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  detail::require_rank2(OpKind::kLogSoftmax, A);
  Node n;
  n.kind = OpKind::kLogSoftmax;
  n.inputs = {a.id};
  n.value = A;
  int R = A.rows(), C = A.cols();
  for (int r = 0; r < R; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < C; ++c) mx = std::max(mx, A.at(r, c));
    double s = 0.0;
    for (int c = 0; c < C; ++c) s += std::exp(A.at(r, c) - mx);
    double lse = mx + std::log(s);
    for (int c = 0; c < C; ++c) n.value.at(r, c) = A.at(r, c) - lse;
  }
  n.back = [R, C](Tape& tp, Node& self) {
    Tensor& dx = tp.grad_buf(self.inputs[0]);
    for (int r = 0; r < R; ++r) {
      double gsum = 0.0;
      for (int c = 0; c < C; ++c) gsum += self.grad.at(r, c);
      for (int c = 0; c < C; ++c)
        dx.at(r, c) += self.grad.at(r, c) - std::exp(self.value.at(r, c)) * gsum;
    }
  };
  return t.push(std::move(n));
}

// log(sum(exp(x))) over all entries, shift-stabilized. All-sentinel input
// stays at the sentinel with zero gradient.
inline Var logsumexp(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  Node n;
  n.kind = OpKind::kLogSumExp;
  n.inputs = {a.id};
  double mx = kLogZero;
  for (double v : A.data) mx = std::max(mx, v);
  double out;
  if (is_log_zero(mx)) {
    out = kLogZero;
  } else {
    double s = 0.0;
    for (double v : A.data) s += std::exp(v - mx);
    out = mx + std::log(s);
  }
  n.value = Tensor::scalar(out);
  n.back = [out](Tape& tp, Node& self) {
    if (is_log_zero(out)) return;
    const Tensor& x = detail::val(tp, self.inputs[0]);
    Tensor& dx = tp.grad_buf(self.inputs[0]);
    double g = self.grad.data[0];
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += g * std::exp(x.data[i] - out);
  };
  return t.push(std::move(n));
}

// Elementwise log(exp(a)+exp(b)); the CTC lattice builds its recursion
// from this. Sentinel cells pass through without creating NaN.
inline Var logaddexp(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  const Tensor& B = detail::val(t, b.id);
  if (!same_shape(A, B)) detail::shape_error(OpKind::kLogAddExp, A, B);
  Node n;
  n.kind = OpKind::kLogAddExp;
  n.inputs = {a.id, b.id};
  n.value = A;
  for (std::size_t i = 0; i < n.value.data.size(); ++i) {
    double x = A.data[i], y = B.data[i];
    double mx = std::max(x, y);
    n.value.data[i] = is_log_zero(mx) ? kLogZero
                                      : mx + std::log1p(std::exp(std::min(x, y) - mx));
  }
  n.back = [](Tape& tp, Node& self) {
    const Tensor& A2 = detail::val(tp, self.inputs[0]);
    const Tensor& B2 = detail::val(tp, self.inputs[1]);
    Tensor& da = tp.grad_buf(self.inputs[0]);
    Tensor& db = tp.grad_buf(self.inputs[1]);
    for (std::size_t i = 0; i < da.data.size(); ++i) {
      double out = self.value.data[i];
      if (is_log_zero(out)) continue;
      double g = self.grad.data[i];
      da.data[i] += g * std::exp(A2.data[i] - out);
      db.data[i] += g * std::exp(B2.data[i] - out);
    }
  };
  return t.push(std::move(n));
}

inline Var embedding(Var table, const std::vector<int>& ids) {
  Tape& t = *table.tape;
  const Tensor& T = detail::val(t, table.id);
  detail::require_rank2(OpKind::kEmbedding, T);
  if (ids.empty()) throw DataError("embedding_lookup: empty id list");
  int V = T.rows(), D = T.cols();
  for (int id : ids)
    if (id < 0 || id >= V)
      throw DataError(cat("embedding_lookup: id ", id, " outside table with ", V, " rows"));
  Node n;
  n.kind = OpKind::kEmbedding;
  n.inputs = {table.id};
  n.value = Tensor::zeros({static_cast<int>(ids.size()), D});
  for (std::size_t r = 0; r < ids.size(); ++r)
    for (int c = 0; c < D; ++c) n.value.at(static_cast<int>(r), c) = T.at(ids[r], c);
  n.back = [ids, D](Tape& tp, Node& self) {
    Tensor& dt = tp.grad_buf(self.inputs[0]);
    for (std::size_t r = 0; r < ids.size(); ++r)
      for (int c = 0; c < D; ++c) dt.at(ids[r], c) += self.grad.at(static_cast<int>(r), c);
  };
  return t.push(std::move(n));
}

// Inverted-scaling dropout: kept entries are scaled by 1/(1-p) at train
// time so eval is the identity. The mask depends only on the engine state,
// not on the values.
inline Var dropout(Var a, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw UsageError(cat("dropout_mask: rate ", p, " outside [0,1)"));
  if (p == 0.0) return a;
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> mask(A.numel());
  double inv = 1.0 / (1.0 - p);
  for (double& m : mask) m = keep(rng) ? inv : 0.0;
  Node n;
  n.kind = OpKind::kDropout;
  n.inputs = {a.id};
  n.value = A;
  for (std::size_t i = 0; i < mask.size(); ++i) n.value.data[i] *= mask[i];
  n.back = [mask = std::move(mask)](Tape& tp, Node& self) {
    Tensor& da = tp.grad_buf(self.inputs[0]);
    for (std::size_t i = 0; i < da.data.size(); ++i) da.data[i] += self.grad.data[i] * mask[i];
  };
  return t.push(std::move(n));
}

inline Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  double s = 0.0;
  for (double v : A.data) s += v;
  Node n;
  n.kind = OpKind::kSum;
  n.inputs = {a.id};
  n.value = Tensor::scalar(s);
  n.back = [](Tape& tp, Node& self) {
    Tensor& da = tp.grad_buf(self.inputs[0]);
    double g = self.grad.data[0];
    for (double& v : da.data) v += g;
  };
  return t.push(std::move(n));
}

inline Var mean(Var a) {
  Tape& t = *a.tape;
  std::size_t n_elems = detail::val(t, a.id).numel();
  if (n_elems == 0) throw DataError("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n_elems));
}

// Picks columns of a 1xN row: out[i] = a[0, ids[i]].
inline Var gather(Var a, const std::vector<int>& ids) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  if (A.rows() != 1) throw DataError(cat("gather: expected a 1xN row, got ", A.rows(), " rows"));
  if (ids.empty()) throw DataError("gather: empty id list");
  for (int id : ids)
    if (id < 0 || id >= A.cols())
      throw DataError(cat("gather: index ", id, " outside row of width ", A.cols()));
  Node n;
  n.kind = OpKind::kGather;
  n.inputs = {a.id};
  n.value = Tensor::zeros({1, static_cast<int>(ids.size())});
  for (std::size_t i = 0; i < ids.size(); ++i) n.value.data[i] = A.data[ids[i]];
  n.back = [ids](Tape& tp, Node& self) {
    Tensor& da = tp.grad_buf(self.inputs[0]);
    for (std::size_t i = 0; i < ids.size(); ++i) da.data[ids[i]] += self.grad.data[i];
  };
  return t.push(std::move(n));
}

// out[r] = a[r, ids[r]] as an Rx1 column; the token-level cross-entropy
// picker.
inline Var pick_per_row(Var a, const std::vector<int>& ids) {
  Tape& t = *a.tape;
  const Tensor& A = detail::val(t, a.id);
  detail::require_rank2(OpKind::kPickPerRow, A);
  if (static_cast<int>(ids.size()) != A.rows())
    throw DataError(cat("pick_per_row: ", ids.size(), " indices for ", A.rows(), " rows"));
  for (int id : ids)
    if (id < 0 || id >= A.cols())
      throw DataError(cat("pick_per_row: index ", id, " outside row of width ", A.cols()));
  Node n;
  n.kind = OpKind::kPickPerRow;
  n.inputs = {a.id};
  n.value = Tensor::zeros({A.rows(), 1});
  for (int r = 0; r < A.rows(); ++r) n.value.data[r] = A.at(r, ids[r]);
  n.back = [ids](Tape& tp, Node& self) {
    Tensor& da = tp.grad_buf(self.inputs[0]);
    for (std::size_t r = 0; r < ids.size(); ++r)
      da.at(static_cast<int>(r), ids[r]) += self.grad.data[r];
  };
  return t.push(std::move(n));
}

inline Tensor& value_of(Var v) { return v.tape->node(v.id).value; }
inline const Tensor& cvalue_of(const Var& v) { return v.tape->node(v.id).value; }

// ---------------------------------------------------------------------------
// Catalog dispatcher: a uniform entry point over the primitive set, mainly
// for contract tests. Model code calls the typed functions directly.

struct OpAttrs {
  int axis = 0;
  int from = 0;
  int to = 0;
  std::vector<int> ids;
  double p = 0.0;
  double c = 0.0;
  std::uint64_t seed = 0;
};

inline Var apply(OpKind kind, const std::vector<Var>& in, const OpAttrs& attrs = {}) {
  auto want = [&](std::size_t n) {
    if (in.size() != n)
      throw UsageError(cat(op_name(kind), ": expected ", n, " inputs, got ", in.size()));
  };
  switch (kind) {
    case OpKind::kMatmul: want(2); return matmul(in[0], in[1]);
    case OpKind::kMatmulNT: want(2); return matmul_nt(in[0], in[1]);
    case OpKind::kAdd: want(2); return add(in[0], in[1]);
    case OpKind::kMul: want(2); return mul(in[0], in[1]);
    case OpKind::kScale: want(1); return scale(in[0], attrs.c);
    case OpKind::kShift: want(1); return shift(in[0], attrs.c);
    case OpKind::kConcat: want(2); return concat(in[0], in[1], attrs.axis);
    case OpKind::kSlice: want(1); return slice(in[0], attrs.axis, attrs.from, attrs.to);
    case OpKind::kStackRows:
      if (in.empty()) throw UsageError("stack_rows: no inputs");
      return stack_rows(*in[0].tape, in);
    case OpKind::kTranspose: want(1); return transpose(in[0]);
    case OpKind::kTanh: want(1); return tanh_op(in[0]);
    case OpKind::kSigmoid: want(1); return sigmoid(in[0]);
    case OpKind::kRelu: want(1); return relu(in[0]);
    case OpKind::kExp: want(1); return exp_op(in[0]);
    case OpKind::kLog: want(1); return log_op(in[0]);
    case OpKind::kLogSoftmax: want(1); return log_softmax(in[0]);
    case OpKind::kLogSumExp: want(1); return logsumexp(in[0]);
    case OpKind::kLogAddExp: want(2); return logaddexp(in[0], in[1]);
    case OpKind::kEmbedding: want(1); return embedding(in[0], attrs.ids);
    case OpKind::kDropout: {
      want(1);
      std::mt19937_64 rng(attrs.seed);
      return dropout(in[0], attrs.p, rng);
    }
    case OpKind::kSum: want(1); return sum(in[0]);
    case OpKind::kMean: want(1); return mean(in[0]);
    case OpKind::kGather: want(1); return gather(in[0], attrs.ids);
    case OpKind::kPickPerRow: want(1); return pick_per_row(in[0], attrs.ids);
    case OpKind::kLeaf:
    case OpKind::kParam:
      break;
  }
  throw UsageError(cat("apply: unknown primitive kind ", static_cast<int>(kind)));
}

// ---------------------------------------------------------------------------
// Central-difference gradient check against the tape.

// Returns max over entries of |analytic - cd| / max(|analytic|, |cd|, 1e-8).
// build must be deterministic across calls (fix any dropout seeds).
inline double grad_check(const std::function<Var(Tape&)>& build, Parameter& p,
                         double step = 1e-5) {
  if (step <= 0.0) throw UsageError("grad_check: step must be positive");
  p.zero_grad();
  {
    Tape t;
    Var loss = build(t);
    t.backward(loss);
  }
  Tensor analytic = p.grad;
  auto eval = [&]() {
    Tape t;
    Var loss = build(t);
    return cvalue_of(loss).item();
  };
  double max_rel = 0.0;
  for (std::size_t i = 0; i < p.value.data.size(); ++i) {
    double saved = p.value.data[i];
    p.value.data[i] = saved + step;
    double f_plus = eval();
    p.value.data[i] = saved - step;
    double f_minus = eval();
    p.value.data[i] = saved;
    if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
      throw NumericError(cat("grad_check: non-finite loss perturbing ", p.name, "[", i, "]"));
    double cd = (f_plus - f_minus) / (2.0 * step);
    double a = analytic.data[i];
    double rel = std::abs(a - cd) / std::max({std::abs(a), std::abs(cd), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  p.grad = analytic;
  return max_rel;
}

inline double grad_check_all(const std::function<Var(Tape&)>& build,
                             std::span<Parameter* const> params, double step = 1e-5) {
  double worst = 0.0;
  for (Parameter* p : params) worst = std::max(worst, grad_check(build, *p, step));
  return worst;
}

}  // namespace tcen
