#pragma once

// Counter-based random numbers (Philox4x32-10).
//
// Every draw is a pure function of (seed, stream, counter), so work can be
// split across threads or resumed mid-run without changing any output.

#include <array>
#include <cstdint>
#include <initializer_list>

namespace dvrp {

using Philox4x32Counter = std::array<std::uint32_t, 4>;
using Philox4x32Key = std::array<std::uint32_t, 2>;

namespace detail {

inline void mulhilo32(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(product >> 32);
  lo = static_cast<std::uint32_t>(product);
}

}  // namespace detail

/// One Philox4x32 block with 10 rounds.
inline Philox4x32Counter philox4x32(Philox4x32Counter ctr, Philox4x32Key key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += kWeyl0;
      key[1] += kWeyl1;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    detail::mulhilo32(kMul0, ctr[0], hi0, lo0);
    detail::mulhilo32(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
  }
  return ctr;
}

/// Folds a path of integers into a child seed. Distinct paths give
/// statistically independent streams.
inline std::uint64_t deriveSeed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t state = seed;
  std::uint32_t depth = 0;
  for (std::uint64_t part : path) {
    const auto out = philox4x32(
        {static_cast<std::uint32_t>(part), static_cast<std::uint32_t>(part >> 32), ++depth, 0x5eed5eedu},
        {static_cast<std::uint32_t>(state), static_cast<std::uint32_t>(state >> 32)});
    state = (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
  }
  return state;
}

/// Stateless-per-draw generator: the i-th value of a (seed, stream) pair is
/// available directly through the *At accessors; the sequential API walks i.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t position() const { return next_; }

  /// Two 64-bit words per Philox block; index selects one of them.
  std::uint64_t u64At(std::uint64_t index) const {
    const auto block = blockAt(index >> 1);
    return (index & 1) ? (static_cast<std::uint64_t>(block[3]) << 32) | block[2]
                       : (static_cast<std::uint64_t>(block[1]) << 32) | block[0];
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniformAt(std::uint64_t index) const {
    return static_cast<double>(u64At(index) >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; indices 2j and 2j+1 share one block.
  double normalAt(std::uint64_t index) const {
    const auto pair = normalPairAt(index >> 1);
    return pair[index & 1];
  }

  /// normalAt(2j) and normalAt(2j + 1). Defined out of line so every caller
  /// runs the same compiled sin/cos code and gets bit-identical values.
  std::array<double, 2> normalPairAt(std::uint64_t j) const;

  std::uint64_t nextU64() { return u64At(next_++); }
  double uniform() { return uniformAt(next_++); }
  double normal() { return normalAt(next_++); }
  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n) by rejection; n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    for (;;) {
      const std::uint64_t x = nextU64();
      if (x < limit) return x % n;
    }
  }

 private:
  Philox4x32Counter blockAt(std::uint64_t counter) const {
    return philox4x32({static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32),
                       static_cast<std::uint32_t>(stream_), static_cast<std::uint32_t>(stream_ >> 32)},
                      {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)});
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t next_ = 0;
};

}  // namespace dvrp
