#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vsemb {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad user input: malformed config, inconsistent dataset, unknown keys.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Corrupt or mismatched on-disk artifacts (VSEF / VSECK files).
struct FormatError : Error {
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

struct TrainError : Error {
  explicit TrainError(const std::string& msg) : Error(msg) {}
};

struct EvalError : Error {
  explicit EvalError(const std::string& msg) : Error(msg) {}
};

// ---------------------------------------------------------------------------
// Seeded, splittable randomness.
//
// Every random draw in the project descends from one named seed. Child
// streams are derived by hashing (state, label), so module-level seeds are
// stable no matter how many draws other modules make.
// ---------------------------------------------------------------------------
class SplitRng {
 public:
  explicit SplitRng(std::uint64_t seed) : state_(mix(seed ^ kGolden)) {}

  SplitRng derive(std::uint64_t label) const {
    return SplitRng(mix(state_ ^ mix(label + kGolden)), Tag{});
  }

  SplitRng derive(const std::string& label) const {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : label) {
      h ^= c;
      h *= 1099511628211ull;
    }
    return derive(h);
  }

  std::uint64_t next_u64() {
    state_ += kGolden;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 bits of resolution.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Box-Muller; draws two uniforms per sample, no cache.
  double normal() {
    double u1 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    const double u2 = next_double();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  std::size_t next_index(std::size_t n) { return std::size_t(next_u64() % n); }

  // Fisher-Yates over [0, n).
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      std::size_t j = next_index(i);
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  struct Tag {};
  SplitRng(std::uint64_t raw, Tag) : state_(raw) {}

  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xbf58476d1ce4e5b9ull;
    z ^= z >> 27;
    z *= 0x94d049bb133111ebull;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Deterministic parallelism. Work is split into fixed-size chunks that do not
// depend on the thread count, so any reduction done chunk-by-chunk in index
// order yields bit-identical results for every value of `threads`.
// ---------------------------------------------------------------------------
inline constexpr std::size_t kParallelChunk = 32;

inline void parallel_for(std::size_t n, int threads,
                         const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  if (threads <= 1 || n < 2 * kParallelChunk) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t n_chunks = (n + kParallelChunk - 1) / kParallelChunk;
  // Static chunk assignment: worker w handles chunks w, w+T, w+2T, ...
  const std::size_t t = std::size_t(threads);
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (std::size_t w = 0; w < t; ++w) {
    pool.emplace_back([&, w]() {
      for (std::size_t c = w; c < n_chunks; c += t) {
        const std::size_t lo = c * kParallelChunk;
        const std::size_t hi = std::min(n, lo + kParallelChunk);
        for (std::size_t i = lo; i < hi; ++i) fn(i);
      }
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace vsemb
