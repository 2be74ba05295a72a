#pragma once

// Evaluation protocols: blind experiments (image replaced by a black or white
// frame, or removed), robustness sweeps over fixed noise / mask levels, and
// perturbation-parameter ablations that train one run per grid cell.
//
// Every report is emitted three ways: JSON lines (one record per row, each
// carrying the settings and seeds needed to reproduce it), an aligned text
// table, and plot data. Plot data is one block per curve:
//   # <curve name>
//   <x> <y> <stderr>
//   ...
// with a blank line between curves.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dvrp/env.hpp"
#include "dvrp/policy.hpp"
#include "dvrp/trainloop.hpp"
#include "json.hpp"

namespace dvrp {

struct EvalSettings {
  std::uint32_t k = 8;
  SamplingConfig sampling = SamplingConfig::evaluation();
  std::uint64_t seed = 0;

  nlohmann::json toJson() const;
};

struct ModeResult {
  BlindMode mode = BlindMode::Original;
  double accuracy = 0.0;
  double stderr_ = 0.0;
  /// accuracy - accuracy(ORIGINAL).
  double delta = 0.0;
};

struct BlindReport {
  /// ORIGINAL, BLACK, WHITE, TEXT_ONLY in that order.
  std::vector<ModeResult> modes;
  std::size_t tasks = 0;
  EvalSettings settings;
  std::string source;

  const ModeResult& at(BlindMode mode) const;
  double blackWhiteMean() const;
  /// Mean of BLACK, WHITE and TEXT_ONLY.
  double blindMean() const;
  /// ORIGINAL minus blindMean().
  double blindDrop() const;

  std::vector<nlohmann::json> records() const;
  std::string table() const;
  std::string plotData() const;
};

BlindReport blindExperiment(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                            const EvalSettings& settings);
BlindReport blindExperiment(const std::filesystem::path& checkpoint, std::span<const Task> tasks,
                            const EvalSettings& settings);

struct SweepCell {
  /// "baseline", "beta" or "pMask".
  std::string kind;
  double beta = 0.0;
  double pMask = 0.0;
  std::uint32_t patchSize = 0;
  float maskFill = 0.0f;
  /// Perturbation seeds are deriveSeed(perturbSeed, {task index}).
  std::uint64_t perturbSeed = 0;
  double accuracy = 0.0;
  double stderr_ = 0.0;
};

struct SweepReport {
  /// Baseline first, then the beta cells, then the pMask cells, in input order.
  std::vector<SweepCell> cells;
  std::size_t tasks = 0;
  EvalSettings settings;
  std::string source;

  std::vector<nlohmann::json> records() const;
  std::string table() const;
  std::string plotData() const;
};

/// Fixed-level perturbations with the same noise draws, mask uniforms and
/// sampling seeds in every cell, so cells differ only in the level.
/// `base` supplies patch size and mask fill.
SweepReport robustnessSweep(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                            std::span<const double> betas, std::span<const double> pMasks, const EvalSettings& settings,
                            const PerturbConfig& base = {});
SweepReport robustnessSweep(const std::filesystem::path& checkpoint, std::span<const Task> tasks,
                            std::span<const double> betas, std::span<const double> pMasks, const EvalSettings& settings,
                            const PerturbConfig& base = {});

struct AblationRow {
  double pMask = 0.0;
  std::uint32_t tInit = 0;
  std::uint64_t trainSeed = 0;
  std::string algo;
  EvalResult result;
  std::uint64_t evalSeed = 0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::size_t tasks = 0;
  EvalSettings settings;
  std::vector<nlohmann::json> configs;

  std::vector<nlohmann::json> records() const;
  std::string table() const;
  std::string plotData() const;
};

/// pMask in {0.2, 0.4, 0.6} x tInit in {100, 300, 500} applied to base.
std::vector<TrainConfig> defaultAblationGrid(const TrainConfig& base);

/// Trains each config (in `outDir/cell_NN` when outDir is set) and evaluates
/// the final policy on ORIGINAL evalTasks with shared evaluation seeds.
AblationReport ablationSweep(std::span<const TrainConfig> grid, std::span<const Task> evalTasks,
                             const EvalSettings& settings, const std::filesystem::path& outDir = {});

/// Loads a policy checkpoint; returns the policy and its parameters.
std::pair<Policy, grad::ParamVector> loadPolicy(const std::filesystem::path& checkpoint);

void writeRecords(const std::filesystem::path& path, std::span<const nlohmann::json> records);

}  // namespace dvrp
