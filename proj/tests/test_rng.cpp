#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dvrp/rng.hpp"

using namespace dvrp;

// Known-answer vectors of the reference Philox4x32-10 implementation.
TEST(Philox, KnownAnswers) {
  EXPECT_EQ(philox4x32({0, 0, 0, 0}, {0, 0}),
            (Philox4x32Counter{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(philox4x32({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
            (Philox4x32Counter{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(philox4x32({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (Philox4x32Counter{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(CounterRng, SequentialMatchesIndexed) {
  CounterRng a(42, 7);
  const CounterRng b(42, 7);
  for (std::uint64_t i = 0; i < 64; ++i) EXPECT_EQ(a.uniform(), b.uniformAt(i));
  EXPECT_EQ(a.position(), 64u);
}

TEST(CounterRng, NormalPairsMatchSingleDraws) {
  const CounterRng r(9, 1);
  for (std::uint64_t j = 0; j < 200; ++j) {
    const auto pair = r.normalPairAt(j);
    EXPECT_EQ(pair[0], r.normalAt(2 * j));
    EXPECT_EQ(pair[1], r.normalAt(2 * j + 1));
    EXPECT_TRUE(std::isfinite(pair[0]) && std::isfinite(pair[1]));
  }
}

TEST(CounterRng, UniformRangeAndMoments) {
  const CounterRng r(123);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniformAt(i);
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  const double mean = sum / n;
  // 1/12 variance, so the standard error of the mean is ~0.00065.
  EXPECT_NEAR(mean, 0.5, 5 * std::sqrt(1.0 / 12.0 / n));
  EXPECT_NEAR(sq / n - mean * mean, 1.0 / 12.0, 0.002);
}

TEST(CounterRng, NormalMoments) {
  const CounterRng r(77);
  const int n = 200000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double z = r.normalAt(i);
    sum += z;
    sq += z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 5.0 / std::sqrt(n));
  EXPECT_NEAR(sq / n, 1.0, 5.0 * std::sqrt(2.0 / n));
}

TEST(CounterRng, BelowStaysInRangeAndCoversIt) {
  CounterRng r(5);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto x = r.below(7);
    ASSERT_LT(x, 7u);
    ++hits[x];
  }
  // Binomial(7000, 1/7): mean 1000, sd ~29.
  for (int h : hits) EXPECT_NEAR(h, 1000, 5 * 29.3);
}

TEST(DeriveSeed, PathsAreDistinctAndStable) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 20; ++a) {
    for (std::uint64_t b = 0; b < 20; ++b) seen.insert(deriveSeed(1, {a, b}));
  }
  EXPECT_EQ(seen.size(), 400u);
  EXPECT_EQ(deriveSeed(1, {3, 4}), deriveSeed(1, {3, 4}));
  EXPECT_NE(deriveSeed(1, {3, 4}), deriveSeed(1, {4, 3}));
  EXPECT_NE(deriveSeed(1, {3}), deriveSeed(1, {3, 0}));
  EXPECT_NE(deriveSeed(1, {3}), deriveSeed(2, {3}));
  EXPECT_EQ(deriveSeed(99, {}), 99u);
}
