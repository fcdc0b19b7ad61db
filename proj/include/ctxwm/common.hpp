#pragma once

// Shared plumbing: error type, seeded RNG streams, small parallel-for.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ctxwm {

inline constexpr double kPi = 3.14159265358979323846;

// ---- errors ----------------------------------------------------------------

enum class Errc {
  dimension,      // shape/size mismatch
  config,         // bad configuration value
  contract,       // API misuse (e.g. backward twice)
  numeric,        // NaN/Inf or failed numerical tolerance
  domain,         // value outside the domain of an operation
  registry,       // unknown name/id lookup
  io,             // file format / filesystem problems
  startup,        // unusable top-level configuration
  empty_dataset,  // dataset with no usable rows
};

inline const char* errc_name(Errc k) {
  switch (k) {
    case Errc::dimension: return "dimension";
    case Errc::config: return "config";
    case Errc::contract: return "contract";
    case Errc::numeric: return "numeric";
    case Errc::domain: return "domain";
    case Errc::registry: return "registry";
    case Errc::io: return "io";
    case Errc::startup: return "startup";
    case Errc::empty_dataset: return "empty_dataset";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc kind, const std::string& msg)
      : std::runtime_error(std::string(errc_name(kind)) + " error: " + msg), kind_(kind) {}
  Errc kind() const { return kind_; }

 private:
  Errc kind_;
};

[[noreturn]] inline void fail(Errc kind, const std::string& msg) { throw Error(kind, msg); }

inline void check(bool cond, Errc kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

// ---- rng -------------------------------------------------------------------

// splitmix64: used to derive independent child seeds from (seed, stream) pairs
// so that adding a consumer somewhere never shifts the draws of another.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

  // independent child stream, derived from the construction seed (not the
  // draw position), so fork order and draw order never interact
  Rng fork(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

  uint64_t bits() { return gen_(); }

  // uniform in [0,1); 53-bit resolution, identical on every platform
  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // integer in [0, n)
  int64_t uniform_int(int64_t n) {
    check(n > 0, Errc::domain, "uniform_int needs n > 0");
    // modulo bias is ~n/2^64, irrelevant for the tiny n used here
    return int64_t(gen_() % uint64_t(n));
  }

  // Box-Muller; one value per call, deterministic draw order
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  double gumbel() {
    double u = uniform();
    if (u < 0x1.0p-53) u = 0x1.0p-53;
    return -std::log(-std::log(u));
  }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
};

// Counter-based per-step stream: lets dataset replay re-derive the exact
// randomness used at (task, episode, step) without storing it.
inline Rng step_rng(uint64_t seed, uint64_t task, uint64_t episode, uint64_t t) {
  uint64_t s = mix_seed(mix_seed(mix_seed(seed, task), episode), t);
  return Rng(s);
}

// ---- parallel for ----------------------------------------------------------

inline int worker_threads() {
  if (const char* env = std::getenv("CTXWM_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  int n = hw == 0 ? 1 : int(hw);
  return n > 8 ? 8 : n;
}

// Each index writes only its own outputs, so results are identical for any
// thread count.
template <class Fn>
void parallel_for(int64_t n, Fn&& fn) {
  int threads = worker_threads();
  if (threads <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      int64_t i = next.fetch_add(1);
      if (i >= n) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  int spawn = int(threads < n ? threads : n);
  pool.reserve(size_t(spawn));
  for (int t = 0; t < spawn; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

}  // namespace ctxwm
