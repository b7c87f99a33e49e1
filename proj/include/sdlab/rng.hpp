#pragma once

#include <cmath>
#include <cstdint>

#include <Eigen/Dense>

// Self-contained RNG so that sampled bytes depend only on (seed, stream, index),
// never on the standard library's distribution implementations. Streams are
// derived by key, so per-sample results are independent of batch partitioning
// and thread count.

namespace sdlab {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Well-known stream tags. Distinct tags guarantee e.g. dataset draws never
// perturb trajectory noise streams under the same seed.
enum class Stream : std::uint64_t {
  trajectory = 1,
  dataset = 2,
  reference = 3,
  instance = 4,
  probe = 5,
};

// xoshiro256++ with Box-Muller normals.
class RngStream {
 public:
  RngStream(std::uint64_t seed, Stream stream, std::uint64_t index) {
    std::uint64_t key = seed;
    splitmix64(key);
    key ^= 0xA24BAED4963EE407ull * (static_cast<std::uint64_t>(stream) + 1);
    splitmix64(key);
    key ^= 0x9FB21C651E98DF25ull * (index + 1);
    for (auto& word : state_) word = splitmix64(key);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // Box-Muller; u1 shifted into (0, 1] so the log argument never vanishes.
    const double u1 = 1.0 - next_double();
    const double u2 = next_double();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 6.283185307179586476925286766559 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  Eigen::VectorXd next_normal_vec(Eigen::Index dim) {
    Eigen::VectorXd out(dim);
    for (Eigen::Index i = 0; i < dim; ++i) out[i] = next_normal();
    return out;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sdlab
