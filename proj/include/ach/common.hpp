#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace ach {

// Raised for malformed layer/architecture configuration (bad widths, bad spec
// files). Argument and state misuse goes through std::invalid_argument and
// std::logic_error directly.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void require(bool cond, const char* msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_state(bool cond, const char* msg) {
  if (!cond) throw std::logic_error(msg);
}

}  // namespace detail

// Global toggle for the finiteness sweep that runs after every recorded
// tensor op. On by default; benchmarks may switch it off.
inline bool& finite_checks() {
  static bool on = true;
  return on;
}

// Deterministic seeded RNG. Uniforms and normals are derived from raw
// mt19937_64 output, so sequences are identical across standard libraries.
// Each consumer gets its own stream id, which keeps draws independent of
// the order modules are constructed in.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{seed, stream};
    gen_.seed(seq);
  }

  std::uint64_t next_u64() { return gen_(); }

  // Strictly inside (0, 1).
  double next_uniform() {
    return (static_cast<double>(gen_() >> 11) + 0.5) * 0x1.0p-53;
  }

  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_uniform();
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).
  std::int64_t next_index(std::int64_t n) {
    detail::require(n > 0, "next_index: n must be positive");
    const auto un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<std::int64_t>(x % un);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// FNV-1a over raw bytes; used for output checksums.
inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace ach
