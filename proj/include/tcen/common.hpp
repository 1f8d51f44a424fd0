#pragma once

// Shared error types, seeded RNG streams, and small utilities.

#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tcen {

// Error taxonomy maps onto CLI exit codes: usage=1, data=2, numeric=3.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};
struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error(msg) {}
};
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Log-space sentinel for "probability zero" lattice cells. Chosen large
// enough that exp(kLogZero - x) underflows to 0 for any finite x, but far
// from -inf so additions never produce NaN.
inline constexpr double kLogZero = -1e300;

// Floor for log of clamped probabilities: exp(-745) is the smallest double
// that exp() maps to a nonzero value.
inline constexpr double kLogFloor = -745.0;

inline bool is_log_zero(double x) { return x <= kLogZero * 0.5; }

// splitmix64 finalizer, used to derive independent RNG streams from
// (seed, step, stream) tuples. Stateless derivation makes checkpoint
// resume exact: the stream for step n never depends on history.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ mix64(b));
}

enum class Stream : std::uint64_t {
  kTask = 1,
  kBatch = 2,
  kDropout = 3,
  kEpoch = 4,
  kInit = 5,
  kData = 6,
  kNoise = 7,
};

inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t step, Stream s) {
  return std::mt19937_64(hash_combine(hash_combine(seed, step), static_cast<std::uint64_t>(s)));
}

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace tcen
