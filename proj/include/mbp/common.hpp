#pragma once

#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mbp {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration or malformed user input (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

// A caller broke an operation's precondition.
struct ContractError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

namespace detail {
inline std::atomic<int>& thread_count() {
  static std::atomic<int> n = [] {
    if (const char* env = std::getenv("MBP_DETERMINISTIC"); env && env[0] == '1') return 1;
    if (const char* env = std::getenv("MBP_THREADS"); env && *env) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw ? static_cast<int>(hw) : 1;
  }();
  return n;
}
}  // namespace detail

inline int num_threads() { return detail::thread_count().load(); }
inline void set_num_threads(int n) { detail::thread_count().store(n < 1 ? 1 : n); }

inline bool deterministic_env() {
  const char* env = std::getenv("MBP_DETERMINISTIC");
  return env && env[0] == '1';
}

// Static range split over [0, n). Each index is processed by exactly one
// thread, so results are bitwise independent of the thread count as long as
// the per-index work never splits a floating-point reduction.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
  const int threads = num_threads();
  if (threads <= 1 || n < 2) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const int used = static_cast<int>(std::min<int64_t>(threads, n));
  std::vector<std::thread> pool;
  pool.reserve(used - 1);
  const int64_t chunk = (n + used - 1) / used;
  for (int t = 1; t < used; ++t) {
    const int64_t lo = t * chunk;
    const int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] {
      for (int64_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (int64_t i = 0; i < std::min(n, chunk); ++i) fn(i);
  for (auto& th : pool) th.join();
}

}  // namespace mbp
