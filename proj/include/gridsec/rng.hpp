#pragma once

// Counter-based random streams.
//
// Algorithm (fixed so that other implementations can reproduce trajectories):
//   mix64(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9;
//             z ^= z >> 27; z *= 0x94D049BB133111EB; z ^= z >> 31
//   key(seed, stream) = mix64(seed ^ mix64(stream + 0x9E3779B97F4A7C15))
//   draw i (i = 0, 1, ...) = mix64(key + (i + 1) * 0x9E3779B97F4A7C15)
//   uniform [0,1)  = (draw >> 11) * 2^-53
//   uniform (0,1]  = ((draw >> 11) + 1) * 2^-53
//   normal         = Box-Muller on (u1 in (0,1], u2 in [0,1)), returning
//                    r*cos(2 pi u2) first and caching r*sin(2 pi u2)
//   below(n)       = high 64 bits of draw * n
//
// Every draw consumes exactly one counter value, so a stream's state is a
// single integer and streams never overlap.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace gridsec {

constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ULL;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBULL;
  z ^= z >> 31;
  return z;
}

// Purpose-specific stream ids. Order and values are part of the
// reproducibility contract.
enum class Stream : std::uint64_t {
  Initialization = 0,
  ProcessNoise = 1,
  MeasurementNoise = 2,
  Attack = 3,
  MinerAssignment = 4,
  KeyGeneration = 5,
  Misbehavior = 6,
};

class RandomStream {
 public:
  RandomStream(std::uint64_t seed, std::uint64_t stream_id) noexcept
      : key_(mix64(seed ^ mix64(stream_id + kGoldenGamma))) {}
  RandomStream(std::uint64_t seed, Stream stream) noexcept
      : RandomStream(seed, static_cast<std::uint64_t>(stream)) {}

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(key_ + counter_ * kGoldenGamma);
  }

  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform_open_low() noexcept {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) noexcept {
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = uniform_open_low();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(angle);
    has_spare_ = true;
    return r * std::cos(angle);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace gridsec
