#pragma once

// Rollout / update loop for GRPO, DAPO and the triplet-view variants.
//
// Schedule: every rollout draws `rolloutBatch` fresh tasks, snapshots the
// behaviour policy and samples G trajectories per task. It is followed by
// epochs * ceil(rolloutBatch / globalBatch) optimizer steps over consecutive
// minibatches of `globalBatch` groups. Steps are numbered k = 0 .. K-1 and the
// noise intensity at step k is annealedBeta(k, K). Each task gets one triplet
// per step, shared by its G trajectories, rebuilt from the step's own seed.
//
// All randomness is derived from cfg.seed:
//   task j of rollout r     deriveSeed(seed, {1, r, j})
//   trajectory m of task j  deriveSeed(seed, {2, r, j, m})
//   views of task j, step k deriveSeed(seed, {3, k, j})
//   initial parameters      deriveSeed(seed, {4})
//
// Output directory layout:
//   config.json          the TrainConfig
//   metrics.jsonl        one record per step (see StepMetrics::toJson)
//   step_NNNNNN.ckpt     training state after N completed steps
//   final.ckpt           policy parameters only
//   nonfinite_dump.json  written before aborting on a non-finite loss

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvrp/checkpoint.hpp"
#include "dvrp/env.hpp"
#include "dvrp/gradcore.hpp"
#include "dvrp/objective.hpp"
#include "dvrp/policy.hpp"
#include "dvrp/views.hpp"
#include "json.hpp"

namespace dvrp {

class EmptyBatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteLoss : public std::runtime_error {
 public:
  explicit NonFiniteLoss(const std::string& what, std::optional<LossBreakdown> loss = std::nullopt)
      : std::runtime_error(what), loss(loss) {}
  /// Terms of the offending objective when it could be evaluated.
  std::optional<LossBreakdown> loss;
};

struct TrainConfig {
  DvrpConfig dvrp;
  PerturbConfig perturb;
  PolicySpec policy;
  double learningRate = 1e-6;
  std::uint32_t rolloutBatch = 384;
  std::uint32_t globalBatch = 128;
  std::uint32_t epochs = 3;
  std::uint64_t totalSteps = 100;
  std::uint64_t seed = 0;
  double samplingTemperature = 1.0;
  double samplingTopP = 0.99;
  std::uint32_t maxTokens = 2;

  double adamBeta1 = 0.9;
  double adamBeta2 = 0.999;
  double adamEps = 1e-8;
  double weightDecay = 0.0;

  std::string generator = "COUNT";
  std::uint32_t difficulty = 0;
  TaskGeometry geometry;

  std::uint32_t checkpointEvery = 50;
  /// Deterministic mode: ordered gradient reduction and no wall-clock fields.
  bool deterministic = true;
  std::uint32_t threads = 1;

  /// totalSteps may be 0: training then returns the initial parameters.
  void validate() const;
  std::uint32_t minibatchesPerEpoch() const { return (rolloutBatch + globalBatch - 1) / globalBatch; }
  std::uint64_t stepsPerRollout() const { return static_cast<std::uint64_t>(epochs) * minibatchesPerEpoch(); }
  SamplingConfig sampling() const { return {samplingTemperature, samplingTopP, maxTokens}; }

  nlohmann::json toJson() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static TrainConfig fromJson(const nlohmann::json& j);
  /// Desk-scale preset used by the acceptance run and the CLI defaults.
  static TrainConfig deskPreset(Algo algo, std::uint64_t seed);
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

struct StepMetrics {
  std::uint64_t step = 0;
  bool skipped = false;
  std::uint32_t groups = 0;
  double meanReward = 0.0;
  LossBreakdown loss;
  double gradNorm = 0.0;
  double timestep = 0.0;
  double beta = 0.0;
  std::optional<double> wallTime;

  /// Flat record: step, skipped, groups, meanReward, jGrpo, klMask, klNoise,
  /// entropyMask, entropyNoise, total, gradNorm, timestep, beta and, outside
  /// deterministic mode, wallTime (seconds).
  nlohmann::json toJson() const;
  static StepMetrics fromJson(const nlohmann::json& j);
};

/// Samples G trajectories per task on the original image and scores them.
/// `rollout` selects the sampling seeds; tasks must carry images.
std::vector<GroupRollout> rolloutBatch(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                                       const TrainConfig& cfg, std::uint64_t rollout);

/// Tasks of rollout r.
std::vector<Task> rolloutTasks(const TrainConfig& cfg, std::uint64_t rollout);

/// Batch objective (mean over groups) and its gradient at params.
struct BatchGradient {
  std::vector<double> gradient;
  LossBreakdown loss;
  std::uint32_t groups = 0;
};
BatchGradient batchGradient(const Policy& policy, const grad::ParamVector& params, std::span<const GroupRollout> groups,
                            const TrainConfig& cfg, std::uint64_t step);

/// One Adam ascent step on the configured objective at optimizer step `step`.
/// Throws EmptyBatch when DAPO filtering leaves nothing, NonFiniteLoss on a
/// non-finite objective or gradient (params are then unchanged).
StepMetrics trainStep(const Policy& policy, grad::ParamVector& params, AdamState& adam,
                      std::span<const GroupRollout> groups, const TrainConfig& cfg, std::uint64_t step);

/// Applies one Adam ascent update with the given gradient.
void adamAscent(std::span<double> params, std::span<const double> gradient, AdamState& adam, const TrainConfig& cfg);

struct TrainOptions {
  /// Empty: nothing is written to disk.
  std::filesystem::path outDir;
  std::optional<std::filesystem::path> resumeFrom;
  /// Called after every step.
  std::function<void(const StepMetrics&)> onStep;
};

struct TrainResult {
  grad::ParamVector params;
  std::vector<StepMetrics> metrics;
  std::uint64_t skippedSteps = 0;
};

TrainResult train(const TrainConfig& cfg, const TrainOptions& options = {});

// Checkpoint helpers. Policy checkpoints carry the spec as fields
// (vocab, embed, hidden, patch, channels, max_tokens) plus "step".
Checkpoint policyCheckpoint(const Policy& policy, const grad::ParamVector& params, std::uint64_t step);
PolicySpec specFromCheckpoint(const Checkpoint& ckpt);
/// The policy blocks of a policy or training-state checkpoint.
grad::ParamVector policyParams(const Policy& policy, const Checkpoint& ckpt);

std::filesystem::path stepCheckpointPath(const std::filesystem::path& outDir, std::uint64_t completedSteps);

struct EvalResult {
  double accuracy = 0.0;
  /// Standard error of the mean over per-task avg@k scores.
  double stderr_ = 0.0;
  std::size_t tasks = 0;
};

/// Mean of verify() over k samples per task. Sample seeds depend only on
/// (seed, task index, repeat), so evaluations under different modes or
/// perturbations are paired. The With form evaluates transform(task, index).
using TaskTransform = std::function<Task(const Task&, std::size_t)>;
EvalResult evalAvgAtKWith(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                          std::uint32_t k, const TaskTransform& transform, const SamplingConfig& sampling,
                          std::uint64_t seed);
EvalResult evalAvgAtKDetailed(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                              std::uint32_t k, BlindMode mode, const SamplingConfig& sampling, std::uint64_t seed);
double evalAvgAtK(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks, std::uint32_t k,
                  BlindMode mode, const SamplingConfig& sampling, std::uint64_t seed);

}  // namespace dvrp
