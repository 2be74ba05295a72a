#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <memory>

#include "dvrp/objective.hpp"
#include "support.hpp"

using namespace dvrp;
using dvrp::testing::Gen;
using dvrp::testing::jitter;
using dvrp::testing::randomGroup;
using dvrp::testing::tinySpec;

namespace {

Distribution dist(std::vector<double> p) { return Distribution{std::move(p)}; }

std::vector<double> logitsOf(const std::vector<double>& p) {
  std::vector<double> z(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) z[i] = std::log(p[i]) + 0.7;  // arbitrary shift
  return z;
}

}  // namespace

TEST(Reward, AnswerSegmentRules) {
  using namespace tokens;
  EXPECT_EQ(answerSegment(TokenSeq{digit(3)}), (TokenSeq{digit(3)}));
  EXPECT_EQ(answerSegment(TokenSeq{digit(1), kSep, digit(3), kEos, digit(5)}), (TokenSeq{digit(3)}));
  EXPECT_EQ(answerSegment(TokenSeq{kSep, digit(1), kSep, digit(2)}), (TokenSeq{digit(2)}));
  EXPECT_EQ(answerSegment(TokenSeq{kEos}), TokenSeq{});
  const TokenSeq truth{digit(4)};
  EXPECT_EQ(accuracyReward(TokenSeq{digit(4)}, truth), 1.0);
  EXPECT_EQ(accuracyReward(TokenSeq{digit(4), kEos}, truth), 1.0);
  EXPECT_EQ(accuracyReward(TokenSeq{digit(4), digit(4)}, truth), 0.0);
  EXPECT_EQ(accuracyReward(TokenSeq{digit(5)}, truth), 0.0);
  EXPECT_EQ(accuracyReward(TokenSeq{}, truth), 0.0);
}

// Advantages against direct arithmetic on random groups.
TEST(Advantages, MatchDirectArithmetic) {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Gen gen(51, s);
    const std::size_t n = gen.intIn(1, 16);
    std::vector<double> r(n);
    for (auto& x : r) x = gen.coin() ? gen.uniform(-3, 3) : static_cast<double>(gen.intIn(0, 1));
    const double eps = gen.coin() ? 1e-6 : gen.uniform(0, 0.1);
    const auto a = groupAdvantages(r, eps);
    double mean = 0;
    for (double x : r) mean += x;
    mean /= n;
    double var = 0;
    for (double x : r) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / n);
    const bool allEqual = std::all_of(r.begin(), r.end(), [&](double x) { return x == r[0]; });
    for (std::size_t i = 0; i < n; ++i) {
      if (allEqual) {
        EXPECT_EQ(a[i], 0.0);
      } else {
        EXPECT_NEAR(a[i], (r[i] - mean) / (sd + eps), 1e-12);
      }
    }
  }
}

TEST(Advantages, EqualRewardsGiveExactZeros) {
  for (double v : {0.0, 1.0, 0.1, -7.25}) {
    const std::vector<double> r(5, v);
    for (double a : groupAdvantages(r, 1e-6)) EXPECT_EQ(std::bit_cast<std::uint64_t>(a), 0u);
  }
  EXPECT_THROW(groupAdvantages(std::vector<double>{}, 1e-6), std::invalid_argument);
}

TEST(Surrogate, ScalarForm) {
  EXPECT_EQ(clippedSurrogate(1.5, 2.0, 0.2, 0.2), 2.4);
  EXPECT_EQ(clippedSurrogate(0.5, 2.0, 0.2, 0.2), 1.0);
  EXPECT_EQ(clippedSurrogate(0.5, -2.0, 0.2, 0.2), -1.6);
  EXPECT_EQ(clippedSurrogate(1.5, -2.0, 0.2, 0.2), -3.0);
  EXPECT_DOUBLE_EQ(clippedSurrogate(1.5, 1.0, 0.2, 0.28), 1.28);
}

// The surrogate's gradient vanishes exactly where the clip is active.
TEST(Surrogate, ClipDeadZoneHasZeroGradient) {
  for (std::uint64_t s = 0; s < 500; ++s) {
    Gen gen(52, s);
    const double clipLow = gen.uniform(0.05, 0.5), clipHigh = gen.uniform(0.05, 0.5);
    const bool positive = gen.coin();
    const double adv = positive ? gen.uniform(0.01, 3) : -gen.uniform(0.01, 3);
    const double rho = positive ? (1 + clipHigh) * gen.uniform(1.001, 3) : (1 - clipLow) * gen.uniform(0.01, 0.999);
    auto g = std::make_shared<grad::Graph>(1);
    const grad::Ref root = clippedSurrogate(*g, g->exp(g->param(0, 1)), adv, clipLow, clipHigh);
    grad::ParamVector p({{"x", 0, 1}}, {std::log(rho)});
    const auto grad = grad::evalGradient({g, root}, p);
    EXPECT_EQ(grad[0], 0.0) << "rho " << rho << " adv " << adv;
    EXPECT_NEAR(grad::evalForward({g, root}, p), clippedSurrogate(rho, adv, clipLow, clipHigh), 1e-12);
  }
}

TEST(Surrogate, GradientPassesInsideTheTrustRegion) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    Gen gen(53, s);
    const double adv = gen.uniform(-2, 2);
    const double rho = gen.uniform(0.81, 1.19);
    auto g = std::make_shared<grad::Graph>(1);
    const grad::Ref root = clippedSurrogate(*g, g->exp(g->param(0, 1)), adv, 0.2, 0.2);
    grad::ParamVector p({{"x", 0, 1}}, {std::log(rho)});
    EXPECT_NEAR(grad::evalGradient({g, root}, p)[0], adv * rho, 1e-12);
  }
}

// KL and entropy against brute-force sums over the vocabulary.
TEST(TokenKL, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 1000; ++s) {
    Gen gen(54, s);
    const std::size_t vocab = gen.intIn(2, 32), len = gen.intIn(1, 16);
    std::vector<Distribution> a, b;
    double kl = 0, ent = 0;
    for (std::size_t t = 0; t < len; ++t) {
      a.push_back(dist(gen.simplex(vocab)));
      b.push_back(dist(gen.simplex(vocab)));
      for (std::size_t v = 0; v < vocab; ++v) {
        kl += a[t].probs[v] * std::log(a[t].probs[v] / b[t].probs[v]);
        ent += -a[t].probs[v] * std::log(a[t].probs[v]);
      }
    }
    EXPECT_NEAR(tokenKL(a, b), kl, 1e-10);
    EXPECT_NEAR(tokenEntropy(a), ent / len, 1e-10);
    EXPECT_NEAR(tokenKL(a, a), 0.0, 1e-12);
    EXPECT_GE(tokenKL(a, b), -1e-12);
  }
}

TEST(TokenKL, GraphFormsMatchScalarForms) {
  for (std::uint64_t s = 0; s < 100; ++s) {
    Gen gen(55, s);
    const std::size_t vocab = gen.intIn(2, 32), len = gen.intIn(1, 16);
    std::vector<Distribution> a, b;
    std::vector<double> flat;
    for (std::size_t t = 0; t < len; ++t) {
      a.push_back(dist(gen.simplex(vocab)));
      b.push_back(dist(gen.simplex(vocab)));
    }
    auto g = std::make_shared<grad::Graph>(0);
    std::vector<grad::Ref> za, zb;
    for (std::size_t t = 0; t < len; ++t) {
      za.push_back(g->constant(logitsOf(a[t].probs)));
      zb.push_back(g->constant(logitsOf(b[t].probs)));
    }
    const grad::Ref kl = tokenKL(*g, za, zb);
    const grad::Ref ent = tokenEntropy(*g, za);
    const grad::Evaluation eval(*g, {});
    EXPECT_NEAR(eval.scalar(kl), tokenKL(a, b), 1e-10);
    EXPECT_NEAR(eval.scalar(ent), tokenEntropy(a), 1e-10);
  }
}

TEST(TokenKL, LengthMismatchThrows) {
  std::vector<Distribution> a{dist({0.5, 0.5})}, b;
  EXPECT_THROW(tokenKL(a, b), LengthMismatch);
  std::vector<Distribution> c{dist({0.2, 0.3, 0.5})};
  EXPECT_THROW(tokenKL(a, c), LengthMismatch);
  EXPECT_EQ(tokenEntropy(b), 0.0);
}

TEST(Groups, ScoringAndFiltering) {
  GroupRollout g;
  g.answer = {tokens::digit(2)};
  g.trajectories = {{{tokens::digit(2)}, {-1.0}, 0}, {{tokens::digit(3)}, {-1.0}, 0}};
  scoreGroup(g, 1e-6);
  EXPECT_EQ(g.rewards(), (std::vector<double>{1.0, 0.0}));
  EXPECT_FALSE(g.zeroVariance());
  GroupRollout flat = g;
  flat.trajectories[1].tokens = {tokens::digit(2)};
  scoreGroup(flat, 1e-6);
  EXPECT_TRUE(flat.zeroVariance());
  const auto kept = dapoFilterGroups({g, flat, g});
  EXPECT_EQ(kept.size(), 2u);
}

TEST(Config, AlgoDefaults) {
  EXPECT_EQ(DvrpConfig::forAlgo(Algo::GRPO).clipHigh, 0.2);
  EXPECT_EQ(DvrpConfig::forAlgo(Algo::DAPO).clipHigh, 0.28);
  EXPECT_EQ(DvrpConfig::forAlgo(Algo::DVRP_D).clipHigh, 0.28);
  const DvrpConfig d;
  EXPECT_EQ(d.lambdaNec, 0.01);
  EXPECT_EQ(d.lambdaRob, 0.01);
  EXPECT_EQ(d.lambdaEnt, 0.05);
  EXPECT_EQ(d.groupSize, 5u);
  EXPECT_FALSE(d.klCap.has_value());
  EXPECT_EQ(parseAlgo("DVRP_G"), Algo::DVRP_G);
  EXPECT_THROW(parseAlgo("PPO"), std::invalid_argument);
  DvrpConfig bad;
  bad.lambdaEnt = -1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

class ObjectiveTest : public ::testing::Test {
 protected:
  Policy policy{tinySpec()};
};

// Full objective: analytic gradient against central differences.
TEST_F(ObjectiveTest, GradientMatchesFiniteDifferences) {
  ASSERT_LT(policy.paramCount(), 2000u);
  for (std::uint64_t s = 0; s < 4; ++s) {
    Gen gen(56, s);
    const auto params = policy.initParams(s);
    const auto behaviour = jitter(params, gen, 0.05);
    const GroupRollout group = randomGroup(policy, behaviour, gen, 3);
    const ViewTriplet view = makeTriplet(group.image, {.pMask = 0.5, .patchSize = 4}, 2, 10, s);
    DvrpConfig cfg;
    cfg.lambdaNec = cfg.lambdaRob = 0.3;  // larger than default so every term shows up
    const ObjectiveGraph obj = dvrpObjective(group, std::span(&view, 1), policy, cfg);
    const auto analytic = grad::evalGradient(obj.expr, params);
    const auto fd = grad::finiteDifferenceGradient(
        [&](const grad::ParamVector& p) { return grad::evalForward(obj.expr, p); }, params, 1e-5);
    EXPECT_LE(grad::maxGradientError(analytic, fd, 1e-4, 1e-8), 1e-4);
  }
}

TEST_F(ObjectiveTest, BreakdownMatchesScalarOracles) {
  Gen gen(57);
  const auto params = policy.initParams(1);
  const GroupRollout group = randomGroup(policy, jitter(params, gen, 0.1), gen, 4);
  const ViewTriplet view = makeTriplet(group.image, {.pMask = 0.5, .patchSize = 4}, 0, 10, 3);
  const DvrpConfig cfg;
  const LossBreakdown b = evaluateBreakdown(dvrpObjective(group, std::span(&view, 1), policy, cfg), params);

  double j = 0, klM = 0, klN = 0, hM = 0, hN = 0;
  for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
    const auto& tr = group.trajectories[i];
    const auto lp = policy.logprobTrajectory(params, &group.image, group.query, tr.tokens);
    std::vector<Distribution> o, m, n;
    for (std::size_t t = 0; t < tr.tokens.size(); ++t) {
      const TokenSpan prefix(tr.tokens.data(), t);
      o.push_back(policy.stepDistribution(params, &group.image, group.query, prefix));
      m.push_back(policy.stepDistribution(params, &view.masked, group.query, prefix));
      n.push_back(policy.stepDistribution(params, &view.noised, group.query, prefix));
      j += clippedSurrogate(std::exp(lp[t] - tr.logProbs[t]), group.advantages[i], 0.2, 0.2);
    }
    klM += tokenKL(o, m);
    klN += tokenKL(o, n);
    hM += tokenEntropy(m);
    hN += tokenEntropy(n);
  }
  const double G = static_cast<double>(group.trajectories.size());
  EXPECT_NEAR(b.jGrpo, j / G, 1e-12);
  EXPECT_NEAR(b.klMask, klM / G, 1e-12);
  EXPECT_NEAR(b.klNoise, klN / G, 1e-12);
  EXPECT_NEAR(b.entropyMask, hM / G, 1e-12);
  EXPECT_NEAR(b.entropyNoise, hN / G, 1e-12);
  EXPECT_NEAR(b.total, b.jGrpo + 0.01 * b.klMask - 0.01 * b.klNoise - 0.05 * (b.entropyMask + b.entropyNoise), 1e-12);
}

TEST_F(ObjectiveTest, ZeroLambdasRebuildGrpoBitwise) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    Gen gen(58, s);
    const auto params = policy.initParams(s);
    const GroupRollout group = randomGroup(policy, jitter(params, gen, 0.05), gen, 5);
    const ViewTriplet view = makeTriplet(group.image, {.pMask = 0.6, .patchSize = 4}, 1, 10, s);
    DvrpConfig cfg;
    cfg.lambdaNec = cfg.lambdaRob = cfg.lambdaEnt = 0.0;
    const ObjectiveGraph dv = dvrpObjective(group, std::span(&view, 1), policy, cfg);
    const grad::ScalarExpr gr = grpoObjective(group, policy, cfg);
    const double a = grad::evalForward(dv.expr, params), b = grad::evalForward(gr, params);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(a), std::bit_cast<std::uint64_t>(b));
    const auto ga = grad::evalGradient(dv.expr, params), gb = grad::evalGradient(gr, params);
    ASSERT_EQ(ga.size(), gb.size());
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ASSERT_EQ(std::bit_cast<std::uint64_t>(ga[i]), std::bit_cast<std::uint64_t>(gb[i])) << "coordinate " << i;
    }
  }
}

TEST_F(ObjectiveTest, KlCapClampsTheMaskTerm) {
  Gen gen(59);
  const auto params = policy.initParams(2);
  const GroupRollout group = randomGroup(policy, params, gen, 3);
  const ViewTriplet view = makeTriplet(group.image, {.pMask = 1.0, .patchSize = 4, .maskFill = 5.0f}, 0, 10, 1);
  DvrpConfig cfg;
  const double uncapped = evaluateBreakdown(dvrpObjective(group, std::span(&view, 1), policy, cfg), params).klMask;
  ASSERT_GT(uncapped, 0.0);
  cfg.klCap = uncapped / 4;
  const ObjectiveGraph capped = dvrpObjective(group, std::span(&view, 1), policy, cfg);
  EXPECT_LE(evaluateBreakdown(capped, params).klMask, uncapped / 4 + 1e-15);
  cfg.klCap = 0.0;
  cfg.lambdaRob = cfg.lambdaEnt = 0.0;
  DvrpConfig plain = cfg;
  plain.lambdaNec = 0.0;
  // With a zero cap the mask term is constant, so it adds nothing to the gradient.
  const auto a = grad::evalGradient(dvrpObjective(group, std::span(&view, 1), policy, cfg).expr, params);
  const auto b = grad::evalGradient(grpoObjective(group, policy, plain), params);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST_F(ObjectiveTest, StopGradOriLeavesValuesAndChangesGradients) {
  Gen gen(60);
  const auto params = policy.initParams(3);
  const GroupRollout group = randomGroup(policy, params, gen, 3);
  const ViewTriplet view = makeTriplet(group.image, {.pMask = 0.5, .patchSize = 4}, 0, 10, 2);
  DvrpConfig cfg;
  cfg.lambdaNec = 1.0;
  const auto on = dvrpObjective(group, std::span(&view, 1), policy, cfg);
  cfg.stopGradOri = true;
  const auto off = dvrpObjective(group, std::span(&view, 1), policy, cfg);
  EXPECT_EQ(grad::evalForward(on.expr, params), grad::evalForward(off.expr, params));
  EXPECT_NE(grad::evalGradient(on.expr, params), grad::evalGradient(off.expr, params));
}

TEST_F(ObjectiveTest, PerMemberViewsAreAccepted) {
  Gen gen(61);
  const auto params = policy.initParams(4);
  const GroupRollout group = randomGroup(policy, params, gen, 3);
  const auto views = makeGroupTriplets(group.image, {.pMask = 0.5, .patchSize = 4}, 0, 10, 2, 3);
  EXPECT_NO_THROW(dvrpObjective(group, views, policy, DvrpConfig{}));
  EXPECT_THROW(dvrpObjective(group, std::span(views.data(), 2), policy, DvrpConfig{}), std::invalid_argument);
}

// One ascent step on -lambda_ent * H alone lowers the perturbed-view entropy.
TEST_F(ObjectiveTest, EntropyPenaltyStepLowersEntropy) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    Gen gen(62, s);
    auto params = policy.initParams(100 + s);
    const GroupRollout group = randomGroup(policy, params, gen, 5);
    const ViewTriplet view = makeTriplet(group.image, {.pMask = 0.6, .patchSize = 4}, 0, 10, s);
    const ObjectiveGraph obj = dvrpObjective(group, std::span(&view, 1), policy, DvrpConfig{});
    const grad::Evaluation eval(*obj.expr.graph, params.values());
    std::vector<double> grad(params.size(), 0.0);
    eval.accumulateGradient(obj.entropyMask, grad, -0.05);
    eval.accumulateGradient(obj.entropyNoise, grad, -0.05);
    const double before = eval.scalar(obj.entropyMask) + eval.scalar(obj.entropyNoise);
    for (std::size_t i = 0; i < grad.size(); ++i) params.values()[i] += 1e-3 * grad[i];
    const LossBreakdown after = evaluateBreakdown(obj, params);
    EXPECT_LT(after.entropyMask + after.entropyNoise, before);
  }
}
