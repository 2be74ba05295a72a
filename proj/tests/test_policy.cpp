#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <memory>

#include "dvrp/policy.hpp"
#include "support.hpp"

using namespace dvrp;
using dvrp::testing::Gen;
using dvrp::testing::tinySpec;

TEST(Nucleus, MatchesSortedPrefixOracle) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    Gen gen(41, s);
    const std::size_t n = gen.intIn(2, 12);
    const auto logits = gen.normals(n, 2.0);
    const double temp = gen.uniform(0.3, 2.0);
    const double topP = gen.uniform(0.05, 1.0);
    const auto out = nucleusDistribution(logits, temp, topP);

    // Oracle: softmax(logits / temp), keep the most probable tokens until the
    // kept mass reaches topP, renormalise.
    std::vector<double> p(n);
    double z = 0.0;
    const double mx = *std::max_element(logits.begin(), logits.end());
    for (std::size_t i = 0; i < n; ++i) z += (p[i] = std::exp((logits[i] - mx) / temp));
    for (auto& v : p) v /= z;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] > p[b]; });
    std::vector<double> want(n, 0.0);
    double mass = 0.0;
    for (auto i : idx) {
      want[i] = p[i];
      mass += p[i];
      if (mass >= topP) break;
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(out[i], want[i] / mass, 1e-12);
      total += out[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Nucleus, TopPOneKeepsEverything) {
  const std::vector<double> logits{0.0, 1.0, -1.0};
  const auto out = nucleusDistribution(logits, 1.0, 1.0);
  EXPECT_TRUE(std::all_of(out.begin(), out.end(), [](double v) { return v > 0.0; }));
}

TEST(Policy, LayoutOrderAndSize) {
  const Policy policy(tinySpec());
  const auto& l = policy.layout();
  const std::vector<std::string> names{"patch.W", "patch.b", "image.null", "query.E", "token.E", "rnn.W",
                                       "rnn.U",   "rnn.b",   "hidden.W",   "hidden.b", "head.W", "head.b"};
  ASSERT_EQ(l.size(), names.size());
  std::size_t off = 0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    EXPECT_EQ(l[i].name, names[i]);
    EXPECT_EQ(l[i].offset, off);
    off += l[i].length;
  }
  const std::size_t e = 4, h = 6, v = tokens::kVocabSize, p = 16;
  EXPECT_EQ(off, e * p + e + e + v * e + v * e + e * e + e * e + e + h * 3 * e + h + v * h + v);
  EXPECT_EQ(policy.paramCount(), off);
}

TEST(Policy, InitIsSeededAndBounded) {
  const Policy policy(tinySpec());
  const auto a = policy.initParams(3);
  EXPECT_TRUE(a.bitwiseEqual(policy.initParams(3)));
  EXPECT_FALSE(a.bitwiseEqual(policy.initParams(4)));
  const double s = 1.0 / std::sqrt(16.0);
  for (double v : a.blockValues("patch.W")) EXPECT_LT(std::abs(v), s);
}

TEST(Policy, ImageFeaturesAreCentred) {
  const Policy policy(tinySpec());
  ImageGrid grey(8, 8, 1, 0.5f);
  for (double v : policy.imageFeatures(grey)) EXPECT_EQ(v, 0.0);
  ImageGrid white(8, 8, 1, 1.0f);
  for (double v : policy.imageFeatures(white)) EXPECT_EQ(v, 1.0);
}

TEST(Policy, RejectsBadInputs) {
  const Policy policy(tinySpec());
  const auto params = policy.initParams(1);
  ImageGrid rgb(8, 8, 3);
  const TokenSeq q{tokens::kQueryCount};
  EXPECT_THROW(policy.encode(params, &rgb, q), std::invalid_argument);
  const TokenSeq bad{tokens::kVocabSize};
  EXPECT_THROW(policy.encode(params, nullptr, bad), std::invalid_argument);
  grad::ParamVector wrong({{"x", 0, 3}}, {0, 0, 0});
  EXPECT_THROW(policy.encode(wrong, nullptr, q), std::invalid_argument);
  EXPECT_THROW(PolicySpec{.maxTokens = 0}.validate(), std::invalid_argument);
}

// The graph form of the policy must agree with the direct forward pass.
TEST(Policy, GraphMatchesDirectForward) {
  const Policy policy(tinySpec());
  for (std::uint64_t s = 0; s < 20; ++s) {
    Gen gen(43, s);
    const auto params = policy.initParams(s);
    const ImageGrid img = gen.image(8, 8, 1);
    const bool withImage = gen.coin();
    const TokenSeq query{tokens::kQueryCount, tokens::difficulty(gen.intIn(0, 2))};
    const TokenSeq out{static_cast<TokenId>(gen.intIn(2, 24)), static_cast<TokenId>(gen.intIn(0, 24))};

    auto g = std::make_shared<grad::Graph>(policy.paramCount());
    PolicyGraph pg(*g, policy);
    const grad::Ref image = withImage ? pg.imageEmbedding(&img) : pg.nullImage();
    const grad::Ref q = pg.queryEmbedding(query);
    const auto states = pg.prefixStates(out);
    const auto logps = pg.tokenLogProbs(image, q, states, out);
    const grad::Evaluation eval(*g, params.values());

    const auto direct = policy.logprobTrajectory(params, withImage ? &img : nullptr, query, out);
    ASSERT_EQ(direct.size(), logps.size());
    for (std::size_t t = 0; t < direct.size(); ++t) EXPECT_NEAR(eval.scalar(logps[t]), direct[t], 1e-12);

    const auto d0 = policy.stepDistribution(params, withImage ? &img : nullptr, query, {});
    EXPECT_NEAR(std::log(d0.probs[out[0]]), direct[0], 1e-12);
  }
}

TEST(Policy, SamplingIsDeterministicAndConsistent) {
  const Policy policy(tinySpec());
  const auto params = policy.initParams(2);
  Gen gen(44);
  const ImageGrid img = gen.image(8, 8, 1);
  const TokenSeq query{tokens::kQueryCount, tokens::difficulty(0)};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto a = policy.sampleTrajectory(params, &img, query, SamplingConfig::training(), seed);
    const auto b = policy.sampleTrajectory(params, &img, query, SamplingConfig::training(), seed);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.logProbs, b.logProbs);
    ASSERT_GE(a.tokens.size(), 1u);
    ASSERT_LE(a.tokens.size(), 2u);
    // Recorded log-probabilities are the untruncated temperature-1 ones.
    const auto lp = policy.logprobTrajectory(params, &img, query, a.tokens);
    for (std::size_t t = 0; t < lp.size(); ++t) EXPECT_NEAR(lp[t], a.logProbs[t], 1e-12);
    // Generation stops at the end-of-sequence token.
    for (std::size_t t = 0; t + 1 < a.tokens.size(); ++t) EXPECT_NE(a.tokens[t], tokens::kEos);
  }
}

TEST(Policy, SamplingFollowsTheDistribution) {
  const Policy policy(tinySpec());
  auto params = policy.initParams(6);
  const TokenSeq query{tokens::kQueryCount};
  const auto d = policy.stepDistribution(params, nullptr, query, {});
  SamplingConfig one{1.0, 1.0, 1};
  std::vector<int> hits(tokens::kVocabSize, 0);
  const int n = 20000;
  for (int i = 0; i < n; ++i) ++hits[policy.sampleTrajectory(params, nullptr, query, one, i).tokens[0]];
  for (std::size_t v = 0; v < hits.size(); ++v) {
    const double p = d.probs[v];
    EXPECT_NEAR(hits[v], n * p, 5 * std::sqrt(n * p * (1 - p)) + 1) << "token " << v;
  }
}

TEST(Policy, GreedyLimitViaTinyTopP) {
  const Policy policy(tinySpec());
  const auto params = policy.initParams(8);
  const TokenSeq query{tokens::kQueryCount};
  const auto d = policy.stepDistribution(params, nullptr, query, {});
  SamplingConfig greedy{1.0, 1e-9, 1};
  for (int i = 0; i < 20; ++i) EXPECT_EQ(policy.sampleTrajectory(params, nullptr, query, greedy, i).tokens[0], d.argmax());
}

TEST(Tokens, Names) {
  EXPECT_EQ(tokens::render(TokenSeq{tokens::kQueryCount, tokens::difficulty(1), tokens::digit(4), tokens::kEos}),
            "<count> <d1> 4 <eos>");
  EXPECT_EQ(tokens::name(tokens::kLeft), "left");
}
