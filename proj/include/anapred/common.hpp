#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include <Eigen/Core>

namespace anapred {

using Vec3 = Eigen::Vector3d;

// Spatial grid dimensions, x-fastest storage order throughout.
struct Grid3 {
  int x = 1, y = 1, z = 1;

  std::int64_t count() const { return std::int64_t(x) * y * z; }
  bool operator==(const Grid3&) const = default;

  std::int64_t flat(int ix, int iy, int iz) const {
    return ix + std::int64_t(x) * (iy + std::int64_t(y) * iz);
  }
  std::string str() const {
    return std::to_string(x) + "x" + std::to_string(y) + "x" + std::to_string(z);
  }
};

// Error categories map to CLI exit codes: config 2, missing input 3, numerical 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingInputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Counter-based deterministic RNG (splitmix64 core). Used everywhere a seed
// appears so sequences are identical across platforms and standard-library
// versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    return std::uint64_t((static_cast<unsigned __int128>(next()) * n) >> 64);
  }

  // inclusive range
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + std::int64_t(uniform_int(std::uint64_t(hi - lo + 1)));
  }

  // Box-Muller, no cached spare so the draw count is predictable.
  double normal() {
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Stable sub-stream derivation, e.g. per-case seeds from a master seed.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
    Rng r(seed ^ (0x6a09e667f3bcc909ULL + stream * 0x9e3779b97f4a7c15ULL));
    return r.next();
  }

 private:
  std::uint64_t state_;
};

// Verbosity from ANAPRED_LOG: 0 quiet (default), 1 info, 2 debug.
inline int log_level() {
  static int level = [] {
    const char* v = std::getenv("ANAPRED_LOG");
    return v ? std::atoi(v) : 0;
  }();
  return level;
}

void log_info(const std::string& msg);
void log_debug(const std::string& msg);

}  // namespace anapred
