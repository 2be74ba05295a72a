#include "dvrp/objective.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <fmt/format.h>

namespace dvrp {

std::string algoName(Algo algo) {
  switch (algo) {
    case Algo::GRPO: return "GRPO";
    case Algo::DAPO: return "DAPO";
    case Algo::DVRP_G: return "DVRP_G";
    case Algo::DVRP_D: return "DVRP_D";
  }
  return "?";
}

Algo parseAlgo(std::string_view name) {
  for (Algo a : {Algo::GRPO, Algo::DAPO, Algo::DVRP_G, Algo::DVRP_D}) {
    if (algoName(a) == name) return a;
  }
  throw std::invalid_argument(fmt::format("unknown algorithm '{}'", name));
}

void DvrpConfig::validate() const {
  if (lambdaNec < 0 || lambdaRob < 0 || lambdaEnt < 0) throw std::invalid_argument("lambdas must be >= 0");
  if (!(epsAdv >= 0)) throw std::invalid_argument("epsAdv must be >= 0");
  if (!(clipLow > 0 && clipLow < 1 && clipHigh > 0 && clipHigh < 1)) {
    throw std::invalid_argument("clip bounds must lie in (0, 1)");
  }
  if (groupSize < 1) throw std::invalid_argument("groupSize must be >= 1");
  if (klCap && !(*klCap >= 0)) throw std::invalid_argument("klCap must be >= 0");
}

DvrpConfig DvrpConfig::forAlgo(Algo algo) {
  DvrpConfig c;
  c.algo = algo;
  if (usesDapo(algo)) c.clipHigh = 0.28;
  return c;
}

// ---------------------------------------------------------------------------

TokenSeq answerSegment(TokenSpan output) {
  auto end = std::find(output.begin(), output.end(), tokens::kEos);
  auto begin = output.begin();
  for (auto it = output.begin(); it != end; ++it) {
    if (*it == tokens::kSep) begin = it + 1;
  }
  return TokenSeq(begin, end);
}

double accuracyReward(TokenSpan output, TokenSpan groundTruth) {
  const TokenSeq answer = answerSegment(output);
  return std::equal(answer.begin(), answer.end(), groundTruth.begin(), groundTruth.end()) ? 1.0 : 0.0;
}

std::vector<double> groupAdvantages(std::span<const double> rewards, double epsAdv) {
  if (rewards.empty()) throw std::invalid_argument("groupAdvantages needs at least one reward");
  std::vector<double> out(rewards.size(), 0.0);
  if (std::all_of(rewards.begin(), rewards.end(), [&](double r) { return r == rewards[0]; })) return out;
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double stddev = std::sqrt(var / n);
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / (stddev + epsAdv);
  return out;
}

double clippedSurrogate(double rho, double adv, double clipLow, double clipHigh) {
  const double clipped = std::clamp(rho, 1.0 - clipLow, 1.0 + clipHigh);
  return std::min(rho * adv, clipped * adv);
}

grad::Ref clippedSurrogate(grad::Graph& g, grad::Ref rho, double adv, double clipLow, double clipHigh) {
  const grad::Ref a = g.constant(adv);
  const grad::Ref unclipped = g.mul(rho, a);
  const grad::Ref clipped = g.mul(g.clamp(rho, 1.0 - clipLow, 1.0 + clipHigh), a);
  return g.minimum(unclipped, clipped);
}

double tokenKL(std::span<const Distribution> seqA, std::span<const Distribution> seqB) {
  if (seqA.size() != seqB.size()) {
    throw LengthMismatch(fmt::format("KL over {} vs {} steps", seqA.size(), seqB.size()));
  }
  double total = 0.0;
  for (std::size_t t = 0; t < seqA.size(); ++t) {
    const auto& a = seqA[t].probs;
    const auto& b = seqB[t].probs;
    if (a.size() != b.size()) throw LengthMismatch("KL over distributions of different vocabulary sizes");
    double step = 0.0;
    for (std::size_t v = 0; v < a.size(); ++v) {
      if (a[v] > 0.0) step += a[v] * (std::log(a[v]) - std::log(b[v]));
    }
    total += step;
  }
  return total;
}

double tokenEntropy(std::span<const Distribution> seq) {
  if (seq.empty()) return 0.0;
  double total = 0.0;
  for (const auto& d : seq) {
    double h = 0.0;
    for (double p : d.probs) {
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h;
  }
  return total / static_cast<double>(seq.size());
}

namespace {

grad::Ref stepKL(grad::Graph& g, grad::Ref logitsA, grad::Ref logitsB, bool stopGradA) {
  const grad::Ref a = stopGradA ? g.stopGradient(logitsA) : logitsA;
  return g.dot(g.softmax(a), g.sub(g.logSoftmax(a), g.logSoftmax(logitsB)));
}

grad::Ref stepEntropy(grad::Graph& g, grad::Ref logits) {
  return g.neg(g.dot(g.softmax(logits), g.logSoftmax(logits)));
}

}  // namespace

grad::Ref tokenKL(grad::Graph& g, std::span<const grad::Ref> logitsA, std::span<const grad::Ref> logitsB,
                  bool stopGradA) {
  if (logitsA.size() != logitsB.size() || logitsA.empty()) {
    throw LengthMismatch(fmt::format("KL over {} vs {} steps", logitsA.size(), logitsB.size()));
  }
  std::vector<grad::Ref> steps;
  steps.reserve(logitsA.size());
  for (std::size_t t = 0; t < logitsA.size(); ++t) steps.push_back(stepKL(g, logitsA[t], logitsB[t], stopGradA));
  return g.sumOf(steps);
}

grad::Ref tokenEntropy(grad::Graph& g, std::span<const grad::Ref> logits) {
  if (logits.empty()) throw std::invalid_argument("entropy of an empty sequence");
  std::vector<grad::Ref> steps;
  steps.reserve(logits.size());
  for (grad::Ref z : logits) steps.push_back(stepEntropy(g, z));
  return g.scale(g.sumOf(steps), 1.0 / static_cast<double>(logits.size()));
}

// ---------------------------------------------------------------------------

std::vector<double> GroupRollout::rewards() const {
  std::vector<double> out;
  out.reserve(trajectories.size());
  for (const auto& t : trajectories) out.push_back(t.reward);
  return out;
}

bool GroupRollout::zeroVariance() const {
  return std::all_of(trajectories.begin(), trajectories.end(),
                     [&](const Trajectory& t) { return t.reward == trajectories.front().reward; });
}

void scoreGroup(GroupRollout& group, double epsAdv) {
  for (auto& t : group.trajectories) t.reward = accuracyReward(t.tokens, group.answer);
  group.advantages = groupAdvantages(group.rewards(), epsAdv);
}

std::vector<GroupRollout> dapoFilterGroups(std::vector<GroupRollout> groups) {
  std::erase_if(groups, [](const GroupRollout& g) { return g.zeroVariance(); });
  return groups;
}

namespace {

/// GRPO part shared by grpoObjective and dvrpObjective. Built first so that
/// its nodes keep the same relative order in both graphs.
struct GrpoPart {
  grad::Ref jGrpo;
  grad::Ref query;
  std::vector<std::vector<grad::Ref>> states;     // [member][t]
  std::vector<std::vector<grad::Ref>> oriLogits;  // [member][t]
};

GrpoPart buildGrpo(PolicyGraph& pg, const GroupRollout& group, const DvrpConfig& cfg) {
  grad::Graph& g = pg.graph();
  const std::size_t members = group.trajectories.size();
  if (members == 0) throw std::invalid_argument("group has no trajectories");
  if (group.advantages.size() != members) throw std::invalid_argument("group advantages not computed");

  GrpoPart part;
  const grad::Ref image = pg.imageEmbedding(&group.image);
  part.query = pg.queryEmbedding(group.query);
  std::vector<grad::Ref> surrogates;
  for (std::size_t i = 0; i < members; ++i) {
    const auto& traj = group.trajectories[i];
    if (traj.tokens.empty() || traj.logProbs.size() != traj.tokens.size()) {
      throw std::invalid_argument("trajectory tokens and log-probabilities disagree");
    }
    part.states.push_back(pg.prefixStates(traj.tokens));
    auto& logits = part.oriLogits.emplace_back();
    for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
      const grad::Ref z = pg.logits(image, part.query, part.states.back()[t]);
      logits.push_back(z);
      const grad::Ref logp = g.element(g.logSoftmax(z), traj.tokens[t]);
      const grad::Ref rho = g.exp(g.sub(logp, g.constant(traj.logProbs[t])));
      surrogates.push_back(clippedSurrogate(g, rho, group.advantages[i], cfg.clipLow, cfg.clipHigh));
    }
  }
  part.jGrpo = g.scale(g.sumOf(surrogates), 1.0 / static_cast<double>(members));
  return part;
}

}  // namespace

grad::ScalarExpr grpoObjective(const GroupRollout& group, const Policy& policy, const DvrpConfig& cfg) {
  auto graph = std::make_shared<grad::Graph>(policy.paramCount());
  PolicyGraph pg(*graph, policy);
  const GrpoPart part = buildGrpo(pg, group, cfg);
  return {graph, part.jGrpo};
}

ObjectiveGraph dvrpObjective(const GroupRollout& group, std::span<const ViewTriplet> views, const Policy& policy,
                             const DvrpConfig& cfg) {
  const std::size_t members = group.trajectories.size();
  if (views.size() != 1 && views.size() != members) {
    throw std::invalid_argument(fmt::format("{} view triplets for a group of {}", views.size(), members));
  }
  auto graph = std::make_shared<grad::Graph>(policy.paramCount());
  grad::Graph& g = *graph;
  PolicyGraph pg(g, policy);
  const GrpoPart part = buildGrpo(pg, group, cfg);

  std::vector<grad::Ref> klMaskTerms, klNoiseTerms, entMaskTerms, entNoiseTerms;
  grad::Ref maskImage;
  grad::Ref noiseImage;
  const ImageGrid* lastMasked = nullptr;
  for (std::size_t i = 0; i < members; ++i) {
    const ViewTriplet& view = views[views.size() == 1 ? 0 : i];
    if (!lastMasked || !view.masked.bitwiseEqual(*lastMasked)) {
      maskImage = pg.imageEmbedding(&view.masked);
      lastMasked = &view.masked;
    }
    if (views.size() != 1 || i == 0) noiseImage = pg.imageEmbedding(&view.noised);

    std::vector<grad::Ref> maskLogits, noiseLogits;
    for (grad::Ref state : part.states[i]) {
      maskLogits.push_back(pg.logits(maskImage, part.query, state));
      noiseLogits.push_back(pg.logits(noiseImage, part.query, state));
    }
    grad::Ref klMask = tokenKL(g, part.oriLogits[i], maskLogits, cfg.stopGradOri);
    if (cfg.klCap) klMask = g.minimum(klMask, g.constant(*cfg.klCap));
    klMaskTerms.push_back(klMask);
    klNoiseTerms.push_back(tokenKL(g, part.oriLogits[i], noiseLogits, cfg.stopGradOri));
    entMaskTerms.push_back(tokenEntropy(g, maskLogits));
    entNoiseTerms.push_back(tokenEntropy(g, noiseLogits));
  }

  const double invG = 1.0 / static_cast<double>(members);
  ObjectiveGraph out;
  out.jGrpo = part.jGrpo;
  out.klMask = g.scale(g.sumOf(klMaskTerms), invG);
  out.klNoise = g.scale(g.sumOf(klNoiseTerms), invG);
  out.entropyMask = g.scale(g.sumOf(entMaskTerms), invG);
  out.entropyNoise = g.scale(g.sumOf(entNoiseTerms), invG);

  std::vector<grad::Ref> terms{part.jGrpo};
  if (cfg.lambdaNec != 0.0) terms.push_back(g.scale(out.klMask, cfg.lambdaNec));
  if (cfg.lambdaRob != 0.0) terms.push_back(g.scale(out.klNoise, -cfg.lambdaRob));
  if (cfg.lambdaEnt != 0.0) terms.push_back(g.scale(g.add(out.entropyMask, out.entropyNoise), -cfg.lambdaEnt));
  const grad::Ref total = terms.size() == 1 ? part.jGrpo : g.sumOf(terms);
  out.expr = {graph, total};
  return out;
}

LossBreakdown ObjectiveGraph::breakdown(const grad::Evaluation& eval) const {
  LossBreakdown b;
  b.jGrpo = eval.scalar(jGrpo);
  b.klMask = eval.scalar(klMask);
  b.klNoise = eval.scalar(klNoise);
  b.entropyMask = eval.scalar(entropyMask);
  b.entropyNoise = eval.scalar(entropyNoise);
  b.total = eval.scalar(expr.root);
  return b;
}

LossBreakdown evaluateBreakdown(const ObjectiveGraph& objective, const grad::ParamVector& params) {
  grad::Evaluation eval(*objective.expr.graph, params.values());
  return objective.breakdown(eval);
}

}  // namespace dvrp
