#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace batsel {

/// Failure classes. The numeric values double as CLI exit codes.
enum class ErrorCode : int {
  kInput = 1,      // malformed or inconsistent input data
  kNumerical = 2,  // non-finite values, divergence, singular systems
  kConfig = 3,     // invalid configuration or unsupported request
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& what) : Error(ErrorCode::kInput, what) {}
};

class NumericalError : public Error {
 public:
  explicit NumericalError(const std::string& what)
      : Error(ErrorCode::kNumerical, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorCode::kConfig, what) {}
};

/// Raised when a training loop produces a non-finite loss.
class TrainingError : public NumericalError {
 public:
  TrainingError(int step, const std::string& what)
      : NumericalError("step " + std::to_string(step) + ": " + what), step_(step) {}

  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// Dense paths refuse models above this many parameters.
class SizeError : public ConfigError {
 public:
  explicit SizeError(const std::string& what) : ConfigError(what) {}
};

/// Re-throws `e` with a stage tag prefixed, keeping its failure class.
[[noreturn]] inline void rethrow_with_stage(std::string_view stage, const Error& e) {
  throw Error(e.code(), "[" + std::string(stage) + "] " + e.what());
}

using Rng = std::mt19937_64;

/// One standard normal draw. A fresh distribution per call keeps the stream
/// consumption independent of how draws are grouped (no cached pair value).
inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  return nd(rng);
}

/// Shortest round-trip decimal form; stable across runs, used for reports.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Seed split scheme: every stage draws from derive_seed(seed, stage-tag) so
/// stages are reproducible independently of each other.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return splitmix64(seed ^ splitmix64(fnv1a(tag)));
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag,
                                 std::string_view subtag) {
  return derive_seed(derive_seed(seed, tag), subtag);
}

/// Worker count: hardware concurrency capped by BATSEL_THREADS when set.
inline unsigned thread_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("BATSEL_THREADS")) {
    char* end = nullptr;
    long cap = std::strtol(env, &end, 10);
    if (end != env && cap >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(cap));
  }
  return n;
}

/// Runs fn(i) for i in [0, n) over up to `threads` workers. The first
/// exception thrown by any worker is rethrown on the caller's thread.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  std::exception_ptr first_error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> workers;
    workers.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < n; i += threads) fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace batsel
