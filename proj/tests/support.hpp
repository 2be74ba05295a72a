#pragma once

// Hand-rolled generators for the property tests. Each case draws from its own
// counter stream so a failing case can be replayed from (seed, case index).

#include <cmath>
#include <cstdint>
#include <vector>

#include "dvrp/objective.hpp"
#include "dvrp/policy.hpp"
#include "dvrp/rng.hpp"
#include "dvrp/views.hpp"

namespace dvrp::testing {

class Gen {
 public:
  explicit Gen(std::uint64_t seed, std::uint64_t stream = 0) : rng_(seed, stream) {}

  double uniform(double lo, double hi) { return lo + (hi - lo) * rng_.uniform(); }
  double normal() { return rng_.normal(); }
  std::uint64_t below(std::uint64_t n) { return rng_.below(n); }
  std::uint32_t intIn(std::uint32_t lo, std::uint32_t hi) { return lo + static_cast<std::uint32_t>(below(hi - lo + 1)); }
  bool coin() { return below(2) == 1; }

  std::vector<double> normals(std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = scale * normal();
    return v;
  }

  /// Random probability vector; some draws are peaked, some near uniform.
  std::vector<double> simplex(std::size_t n) {
    const double temp = uniform(0.2, 4.0);
    std::vector<double> p(n);
    double s = 0.0;
    for (auto& x : p) s += (x = std::exp(normal() * temp));
    for (auto& x : p) x /= s;
    return p;
  }

  ImageGrid image(std::uint32_t h, std::uint32_t w, std::uint32_t c) {
    ImageGrid g(h, w, c);
    for (auto& x : g.data) x = static_cast<float>(rng_.uniform());
    return g;
  }

 private:
  CounterRng rng_;
};

/// Small policy used where gradients are checked coordinate by coordinate.
inline PolicySpec tinySpec() {
  PolicySpec s;
  s.embedDim = 4;
  s.hiddenDim = 6;
  s.patchSize = 4;
  s.channels = 1;
  s.maxTokens = 2;
  s.vocabSize = tokens::kVocabSize;
  return s;
}

/// A scored group sampled from `behaviour` on a random image; rewards are
/// forced to a mix of 0 and 1 so the advantages are non-zero.
inline GroupRollout randomGroup(const Policy& policy, const grad::ParamVector& behaviour, Gen& gen, std::size_t members) {
  const auto& s = policy.spec();
  GroupRollout g;
  g.image = gen.image(2 * s.patchSize, 2 * s.patchSize, s.channels);
  g.query = {tokens::kQueryCount, tokens::difficulty(gen.intIn(0, 2))};
  g.answer = {tokens::digit(gen.intIn(1, 6))};
  for (std::size_t m = 0; m < members; ++m) {
    g.trajectories.push_back(policy.sampleTrajectory(behaviour, &g.image, g.query, {1.0, 1.0, 0}, gen.below(1u << 30)));
  }
  for (std::size_t m = 0; m < members; ++m) g.trajectories[m].reward = (m % 2 == 0) ? 1.0 : 0.0;
  g.advantages = groupAdvantages(g.rewards(), 1e-6);
  return g;
}

/// params + scale * N(0, 1) noise.
inline grad::ParamVector jitter(const grad::ParamVector& params, Gen& gen, double scale) {
  grad::ParamVector out = params;
  for (auto& v : out.values()) v += scale * gen.normal();
  return out;
}

}  // namespace dvrp::testing
