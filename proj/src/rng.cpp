#include "dvrp/rng.hpp"

#include <cmath>
#include <numbers>

namespace dvrp {

std::array<double, 2> CounterRng::normalPairAt(std::uint64_t j) const {
  const auto block = blockAt(j);
  const std::uint64_t a = (static_cast<std::uint64_t>(block[1]) << 32) | block[0];
  const std::uint64_t b = (static_cast<std::uint64_t>(block[3]) << 32) | block[2];
  const double u1 = 1.0 - static_cast<double>(a >> 11) * 0x1.0p-53;  // (0, 1]
  const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  return {radius * std::cos(angle), radius * std::sin(angle)};
}

}  // namespace dvrp
