#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace splitnas {

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError (and subclasses) -> 2, DataError -> 3, everything else -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ParseError : ConfigError {
  using ConfigError::ConfigError;
};
struct StructureError : ConfigError {
  using ConfigError::ConfigError;
};
struct DataError : Error {
  using Error::Error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct UsageError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};

// splitmix64: used to derive independent sub-seeds from one master seed so
// that components (dataset, init, dropout, search) stay decoupled.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, uint64_t stream, uint64_t index = 0) {
  return mix64(master ^ mix64(stream ^ mix64(index)));
}

namespace detail {
inline int& thread_budget() {
  static int n = [] {
    if (const char* env = std::getenv("SPLITNAS_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw > 8 ? 8 : hw);
  }();
  return n;
}
}  // namespace detail

inline int num_threads() { return detail::thread_budget(); }
inline void set_num_threads(int n) { detail::thread_budget() = n < 1 ? 1 : n; }

// Fork-join over [0, n). Each index is processed by exactly one thread, so
// results are bit-identical for any thread count. `grain` gates the spawn:
// small loops run inline.
inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body,
                         int64_t grain = 4096) {
  int t = num_threads();
  if (t <= 1 || n < grain) {
    body(0, n);
    return;
  }
  int workers = static_cast<int>(t < n ? t : n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * chunk;
    int64_t hi = lo + chunk < n ? lo + chunk : n;
    if (lo >= hi) break;
    pool.emplace_back([&body, lo, hi] { body(lo, hi); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace splitnas
