#pragma once

// Policy-optimisation objectives: verifiable rewards, group-normalised
// advantages, the clipped surrogate, token-level KL / entropy, and the
// triplet-view objective that adds a sensitivity term (KL to the masked view,
// maximised), a robustness term (KL to the noised view, minimised) and an
// entropy penalty on both perturbed views.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvrp/gradcore.hpp"
#include "dvrp/policy.hpp"
#include "dvrp/tokens.hpp"
#include "dvrp/views.hpp"

namespace dvrp {

enum class Algo { GRPO, DAPO, DVRP_G, DVRP_D };

std::string algoName(Algo algo);
Algo parseAlgo(std::string_view name);
/// DAPO-style batches: zero-variance group filtering and asymmetric clipping.
inline bool usesDapo(Algo a) { return a == Algo::DAPO || a == Algo::DVRP_D; }
/// Whether the triplet-view terms are part of the objective.
inline bool usesTriplet(Algo a) { return a == Algo::DVRP_G || a == Algo::DVRP_D; }

struct DvrpConfig {
  double lambdaNec = 0.01;
  double lambdaRob = 0.01;
  double lambdaEnt = 0.05;
  double epsAdv = 1e-6;
  double clipLow = 0.2;
  double clipHigh = 0.2;
  std::uint32_t groupSize = 5;
  /// Block gradients through the original-view distribution inside KL terms.
  bool stopGradOri = false;
  /// Per-trajectory cap on KL(ori || mask), applied before weighting.
  std::optional<double> klCap;
  Algo algo = Algo::DVRP_G;

  void validate() const;
  /// Applies the algorithm's defaults: DAPO variants get clipHigh 0.28.
  static DvrpConfig forAlgo(Algo algo);
};

struct LossBreakdown {
  double jGrpo = 0.0;
  double klMask = 0.0;
  double klNoise = 0.0;
  double entropyMask = 0.0;
  double entropyNoise = 0.0;
  double total = 0.0;
};

class LengthMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Scalar building blocks

/// Tokens after the last separator, up to (excluding) the first end-of-sequence
/// token; the whole sequence when there is no separator.
TokenSeq answerSegment(TokenSpan output);

/// 1.0 iff answerSegment(output) equals groundTruth exactly.
double accuracyReward(TokenSpan output, TokenSpan groundTruth);

/// (R_i - mean) / (populationStd + epsAdv).
std::vector<double> groupAdvantages(std::span<const double> rewards, double epsAdv);

/// min(rho * adv, clip(rho, 1 - clipLow, 1 + clipHigh) * adv).
double clippedSurrogate(double rho, double adv, double clipLow, double clipHigh);
grad::Ref clippedSurrogate(grad::Graph& g, grad::Ref rho, double adv, double clipLow, double clipHigh);

/// sum_t sum_v A_t(v) ln(A_t(v) / B_t(v)).
double tokenKL(std::span<const Distribution> seqA, std::span<const Distribution> seqB);
/// mean_t of -sum_v p_t(v) ln p_t(v).
double tokenEntropy(std::span<const Distribution> seq);

/// Graph forms over per-step logits. The optional stop-gradient applies to
/// the first argument's distribution.
grad::Ref tokenKL(grad::Graph& g, std::span<const grad::Ref> logitsA, std::span<const grad::Ref> logitsB,
                  bool stopGradA = false);
grad::Ref tokenEntropy(grad::Graph& g, std::span<const grad::Ref> logits);

// ---------------------------------------------------------------------------
// Groups

/// G trajectories sampled on the original view of one task.
struct GroupRollout {
  std::uint64_t taskId = 0;
  ImageGrid image;
  TokenSeq query;
  TokenSeq answer;
  /// trajectories[i].logProbs are the behaviour-policy (old) log-probabilities.
  std::vector<Trajectory> trajectories;
  std::vector<double> advantages;

  std::vector<double> rewards() const;
  /// True when every reward equals the first one.
  bool zeroVariance() const;
};

/// Sets trajectory rewards from the answer and recomputes advantages.
void scoreGroup(GroupRollout& group, double epsAdv);

/// Drops groups whose rewards are all identical.
std::vector<GroupRollout> dapoFilterGroups(std::vector<GroupRollout> groups);

/// An objective graph plus handles to each term of the breakdown.
struct ObjectiveGraph {
  grad::ScalarExpr expr;
  grad::Ref jGrpo;
  grad::Ref klMask;
  grad::Ref klNoise;
  grad::Ref entropyMask;
  grad::Ref entropyNoise;

  LossBreakdown breakdown(const grad::Evaluation& eval) const;
};

/// (1/G) sum_i sum_t clippedSurrogate(rho_it, A_i); no reference-model KL.
grad::ScalarExpr grpoObjective(const GroupRollout& group, const Policy& policy, const DvrpConfig& cfg);

/// Full triplet objective. `views` holds one triplet shared by all members or
/// one per member. Zero-weight terms are left out of the total, so all-zero
/// lambdas rebuild exactly the GRPO expression; their values are still
/// reported in the breakdown.
ObjectiveGraph dvrpObjective(const GroupRollout& group, std::span<const ViewTriplet> views, const Policy& policy,
                             const DvrpConfig& cfg);

/// Evaluates dvrpObjective at params and returns its breakdown.
LossBreakdown evaluateBreakdown(const ObjectiveGraph& objective, const grad::ParamVector& params);

}  // namespace dvrp
