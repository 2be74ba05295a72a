#include "dvrp/evalharness.hpp"

#include <algorithm>
#include <array>
#include <fstream>

#include <fmt/format.h>

#include "dvrp/rng.hpp"

namespace dvrp {

using nlohmann::json;

namespace {

/// Column-aligned text table: first row is the header.
std::string alignTable(const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return {};
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::string out;
  auto line = [&](const std::vector<std::string>& r) {
    std::string s;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c > 0) s += "  ";
      // Left-align the first column, right-align numbers.
      s += c == 0 ? fmt::format("{:<{}}", r[c], width[c]) : fmt::format("{:>{}}", r[c], width[c]);
    }
    while (!s.empty() && s.back() == ' ') s.pop_back();
    out += s + '\n';
  };
  line(rows.front());
  std::size_t total = 0;
  for (std::size_t w : width) total += w;
  out += std::string(total + 2 * (width.size() - 1), '-') + '\n';
  for (std::size_t i = 1; i < rows.size(); ++i) line(rows[i]);
  return out;
}

std::string pct(double x) { return fmt::format("{:.2f}", 100.0 * x); }
std::string signedPct(double x) { return fmt::format("{:+.2f}", 100.0 * x); }

struct Curve {
  std::string name;
  std::vector<std::array<double, 3>> points;
};

std::string renderCurves(const std::vector<Curve>& curves) {
  std::string out;
  for (std::size_t i = 0; i < curves.size(); ++i) {
    if (i > 0) out += '\n';
    out += "# " + curves[i].name + '\n';
    for (const auto& p : curves[i].points) out += fmt::format("{} {} {}\n", p[0], p[1], p[2]);
  }
  return out;
}

}  // namespace

json EvalSettings::toJson() const {
  return {{"k", k},
          {"evalSeed", seed},
          {"temperature", sampling.temperature},
          {"topP", sampling.topP},
          {"maxTokens", sampling.maxTokens}};
}

std::pair<Policy, grad::ParamVector> loadPolicy(const std::filesystem::path& checkpoint) {
  const Checkpoint ckpt = readCheckpoint(checkpoint);
  Policy policy(specFromCheckpoint(ckpt));
  grad::ParamVector params = policyParams(policy, ckpt);
  return {std::move(policy), std::move(params)};
}

void writeRecords(const std::filesystem::path& path, std::span<const json> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << r.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Blind experiment

const ModeResult& BlindReport::at(BlindMode mode) const {
  for (const auto& m : modes) {
    if (m.mode == mode) return m;
  }
  throw std::out_of_range("blind report lacks mode " + blindModeName(mode));
}

double BlindReport::blackWhiteMean() const { return (at(BlindMode::Black).accuracy + at(BlindMode::White).accuracy) / 2.0; }

double BlindReport::blindMean() const {
  return (at(BlindMode::Black).accuracy + at(BlindMode::White).accuracy + at(BlindMode::TextOnly).accuracy) / 3.0;
}

double BlindReport::blindDrop() const { return at(BlindMode::Original).accuracy - blindMean(); }

std::vector<json> BlindReport::records() const {
  std::vector<json> out;
  for (const auto& m : modes) {
    json r = {{"report", "blind"},       {"mode", blindModeName(m.mode)}, {"accuracy", m.accuracy},
              {"stderr", m.stderr_},     {"delta", m.delta},               {"tasks", tasks},
              {"source", source}};
    r.update(settings.toJson());
    out.push_back(std::move(r));
  }
  json s = {{"report", "blind-summary"}, {"blackWhiteMean", blackWhiteMean()}, {"blindMean", blindMean()},
            {"blindDrop", blindDrop()},  {"tasks", tasks},                     {"source", source}};
  s.update(settings.toJson());
  out.push_back(std::move(s));
  return out;
}

std::string BlindReport::table() const {
  std::vector<std::vector<std::string>> rows = {{"mode", "acc%", "stderr%", "delta%"}};
  for (const auto& m : modes) rows.push_back({blindModeName(m.mode), pct(m.accuracy), pct(m.stderr_), signedPct(m.delta)});
  std::string out = alignTable(rows);
  out += fmt::format("BLACK/WHITE mean {}%, blind mean {}%, blind drop {}% ({} tasks, avg@{}, seed {})\n",
                     pct(blackWhiteMean()), pct(blindMean()), signedPct(blindDrop()), tasks, settings.k, settings.seed);
  return out;
}

std::string BlindReport::plotData() const {
  Curve c{"blind accuracy by mode (0=ORIGINAL 1=BLACK 2=WHITE 3=TEXT_ONLY)", {}};
  for (std::size_t i = 0; i < modes.size(); ++i) c.points.push_back({static_cast<double>(i), modes[i].accuracy, modes[i].stderr_});
  return renderCurves({c});
}

BlindReport blindExperiment(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                            const EvalSettings& settings) {
  BlindReport report;
  report.tasks = tasks.size();
  report.settings = settings;
  for (BlindMode mode : kAllBlindModes) {
    const EvalResult r = evalAvgAtKDetailed(policy, params, tasks, settings.k, mode, settings.sampling, settings.seed);
    report.modes.push_back({mode, r.accuracy, r.stderr_, 0.0});
  }
  const double base = report.modes.front().accuracy;
  for (auto& m : report.modes) m.delta = m.accuracy - base;
  return report;
}

BlindReport blindExperiment(const std::filesystem::path& checkpoint, std::span<const Task> tasks,
                            const EvalSettings& settings) {
  const auto [policy, params] = loadPolicy(checkpoint);
  BlindReport report = blindExperiment(policy, params, tasks, settings);
  report.source = checkpoint.string();
  return report;
}

// ---------------------------------------------------------------------------
// Robustness sweep

namespace {

constexpr std::uint64_t kNoiseTag = 11;
constexpr std::uint64_t kMaskTag = 12;

SweepCell runCell(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                  const EvalSettings& settings, SweepCell cell) {
  PerturbConfig pc;
  pc.pMask = cell.pMask;
  pc.patchSize = cell.patchSize;
  pc.maskFill = cell.maskFill;
  const TaskTransform transform = [&](const Task& t, std::size_t i) {
    Task out = t;
    if (!out.image || cell.kind == "baseline") return out;
    const std::uint64_t seed = deriveSeed(cell.perturbSeed, {i});
    if (cell.kind == "beta") {
      out.image = diffuseNoise(*out.image, cell.beta, seed);
    } else {
      out.image = maskPatches(*out.image, pc, seed).image;
    }
    return out;
  };
  const EvalResult r = evalAvgAtKWith(policy, params, tasks, settings.k, transform, settings.sampling, settings.seed);
  cell.accuracy = r.accuracy;
  cell.stderr_ = r.stderr_;
  return cell;
}

}  // namespace

std::vector<json> SweepReport::records() const {
  std::vector<json> out;
  for (const auto& c : cells) {
    json r = {{"report", "sweep"},  {"kind", c.kind},          {"beta", c.beta},     {"pMask", c.pMask},
              {"patchSize", c.patchSize}, {"maskFill", c.maskFill}, {"perturbSeed", c.perturbSeed},
              {"accuracy", c.accuracy},   {"stderr", c.stderr_},    {"tasks", tasks}, {"source", source}};
    r.update(settings.toJson());
    out.push_back(std::move(r));
  }
  return out;
}

std::string SweepReport::table() const {
  std::vector<std::vector<std::string>> rows = {{"cell", "beta", "pMask", "acc%", "stderr%", "delta%"}};
  const double base = cells.empty() ? 0.0 : cells.front().accuracy;
  for (const auto& c : cells) {
    rows.push_back({c.kind, fmt::format("{:g}", c.beta), fmt::format("{:g}", c.pMask), pct(c.accuracy), pct(c.stderr_),
                    signedPct(c.accuracy - base)});
  }
  return alignTable(rows) + fmt::format("{} tasks, avg@{}, seed {}\n", tasks, settings.k, settings.seed);
}

std::string SweepReport::plotData() const {
  Curve beta{"accuracy vs beta", {}};
  Curve mask{"accuracy vs pMask", {}};
  for (const auto& c : cells) {
    if (c.kind == "baseline") {
      beta.points.push_back({0.0, c.accuracy, c.stderr_});
      mask.points.push_back({0.0, c.accuracy, c.stderr_});
    } else if (c.kind == "beta") {
      beta.points.push_back({c.beta, c.accuracy, c.stderr_});
    } else {
      mask.points.push_back({c.pMask, c.accuracy, c.stderr_});
    }
  }
  return renderCurves({beta, mask});
}

SweepReport robustnessSweep(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                            std::span<const double> betas, std::span<const double> pMasks, const EvalSettings& settings,
                            const PerturbConfig& base) {
  if (betas.empty() && pMasks.empty()) throw std::invalid_argument("robustness sweep needs beta or pMask levels");
  for (double b : betas) {
    if (!(b >= 0.0 && b <= 1.0)) throw InvalidBeta(fmt::format("beta {} outside [0, 1]", b));
  }
  for (double p : pMasks) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(fmt::format("pMask {} outside [0, 1]", p));
  }
  SweepReport report;
  report.tasks = tasks.size();
  report.settings = settings;
  SweepCell proto;
  proto.patchSize = base.patchSize;
  proto.maskFill = base.maskFill;

  SweepCell baseline = proto;
  baseline.kind = "baseline";
  report.cells.push_back(runCell(policy, params, tasks, settings, baseline));
  for (double b : betas) {
    SweepCell c = proto;
    c.kind = "beta";
    c.beta = b;
    c.perturbSeed = deriveSeed(settings.seed, {kNoiseTag});
    report.cells.push_back(runCell(policy, params, tasks, settings, c));
  }
  for (double p : pMasks) {
    SweepCell c = proto;
    c.kind = "pMask";
    c.pMask = p;
    c.perturbSeed = deriveSeed(settings.seed, {kMaskTag});
    report.cells.push_back(runCell(policy, params, tasks, settings, c));
  }
  return report;
}

SweepReport robustnessSweep(const std::filesystem::path& checkpoint, std::span<const Task> tasks,
                            std::span<const double> betas, std::span<const double> pMasks, const EvalSettings& settings,
                            const PerturbConfig& base) {
  const auto [policy, params] = loadPolicy(checkpoint);
  PerturbConfig b = base;
  b.patchSize = policy.spec().patchSize;
  SweepReport report = robustnessSweep(policy, params, tasks, betas, pMasks, settings, b);
  report.source = checkpoint.string();
  return report;
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<TrainConfig> defaultAblationGrid(const TrainConfig& base) {
  std::vector<TrainConfig> grid;
  for (double p : {0.2, 0.4, 0.6}) {
    for (std::uint32_t t : {100u, 300u, 500u}) {
      TrainConfig c = base;
      c.perturb.pMask = p;
      c.perturb.tInit = t;
      grid.push_back(c);
    }
  }
  return grid;
}

std::vector<json> AblationReport::records() const {
  std::vector<json> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    json j = {{"report", "ablation"},  {"cell", i},
              {"pMask", r.pMask},      {"tInit", r.tInit},
              {"trainSeed", r.trainSeed}, {"algo", r.algo},
              {"accuracy", r.result.accuracy}, {"stderr", r.result.stderr_},
              {"tasks", r.result.tasks}};
    j.update(settings.toJson());
    if (i < configs.size()) j["config"] = configs[i];
    out.push_back(std::move(j));
  }
  return out;
}

std::string AblationReport::table() const {
  std::vector<std::vector<std::string>> t = {{"cell", "algo", "pMask", "tInit", "acc%", "stderr%"}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    t.push_back({std::to_string(i), r.algo, fmt::format("{:g}", r.pMask), std::to_string(r.tInit), pct(r.result.accuracy),
                 pct(r.result.stderr_)});
  }
  return alignTable(t) + fmt::format("{} tasks, avg@{}, eval seed {}\n", tasks, settings.k, settings.seed);
}

std::string AblationReport::plotData() const {
  std::vector<Curve> curves;
  for (const auto& r : rows) {
    const std::string name = fmt::format("accuracy vs pMask, tInit={}", r.tInit);
    auto it = std::find_if(curves.begin(), curves.end(), [&](const Curve& c) { return c.name == name; });
    if (it == curves.end()) it = curves.insert(curves.end(), Curve{name, {}});
    it->points.push_back({r.pMask, r.result.accuracy, r.result.stderr_});
  }
  return renderCurves(curves);
}

AblationReport ablationSweep(std::span<const TrainConfig> grid, std::span<const Task> evalTasks,
                             const EvalSettings& settings, const std::filesystem::path& outDir) {
  if (grid.empty()) throw std::invalid_argument("ablation grid is empty");
  AblationReport report;
  report.tasks = evalTasks.size();
  report.settings = settings;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const TrainConfig& cfg = grid[i];
    TrainOptions opts;
    if (!outDir.empty()) opts.outDir = outDir / fmt::format("cell_{:02}", i);
    const TrainResult trained = train(cfg, opts);
    const Policy policy(cfg.policy);
    AblationRow row;
    row.pMask = cfg.perturb.pMask;
    row.tInit = cfg.perturb.tInit;
    row.trainSeed = cfg.seed;
    row.algo = algoName(cfg.dvrp.algo);
    row.evalSeed = settings.seed;
    row.result = evalAvgAtKDetailed(policy, trained.params, evalTasks, settings.k, BlindMode::Original,
                                    settings.sampling, settings.seed);
    report.rows.push_back(row);
    report.configs.push_back(cfg.toJson());
  }
  return report;
}

}  // namespace dvrp
