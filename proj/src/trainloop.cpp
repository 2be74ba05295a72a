#include "dvrp/trainloop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "dvrp/rng.hpp"

namespace dvrp {

using nlohmann::json;

namespace {

constexpr std::uint64_t kTaskTag = 1;
constexpr std::uint64_t kSampleTag = 2;
constexpr std::uint64_t kViewTag = 3;
constexpr std::uint64_t kInitTag = 4;

constexpr const char* kOptimM = "optim.m";
constexpr const char* kOptimV = "optim.v";
constexpr const char* kRolloutParams = "rollout.params";

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
void parallelFor(std::size_t n, std::uint32_t threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max<std::uint32_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

template <class T>
void readKey(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

double l2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

bool allFinite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

bool finite(const LossBreakdown& b) {
  return std::isfinite(b.jGrpo) && std::isfinite(b.klMask) && std::isfinite(b.klNoise) &&
         std::isfinite(b.entropyMask) && std::isfinite(b.entropyNoise) && std::isfinite(b.total);
}

void addSpecFields(Checkpoint& ckpt, const PolicySpec& spec) {
  ckpt.setField("vocab", spec.vocabSize);
  ckpt.setField("embed", spec.embedDim);
  ckpt.setField("hidden", spec.hiddenDim);
  ckpt.setField("patch", spec.patchSize);
  ckpt.setField("channels", spec.channels);
  ckpt.setField("max_tokens", spec.maxTokens);
}

std::uint32_t stepField(std::uint64_t step) {
  if (step > UINT32_MAX) throw std::invalid_argument("step count does not fit a checkpoint field");
  return static_cast<std::uint32_t>(step);
}

Checkpoint trainingCheckpoint(const Policy& policy, const grad::ParamVector& params, const AdamState& adam,
                              const grad::ParamVector& rolloutParams, std::uint64_t completed) {
  Checkpoint ckpt;
  std::vector<grad::ParamBlock> blocks = policy.layout();
  std::vector<double> values(params.values().begin(), params.values().end());
  const std::size_t n = policy.paramCount();
  auto append = [&](const char* name, std::span<const double> v) {
    blocks.push_back({name, values.size(), n});
    values.insert(values.end(), v.begin(), v.end());
  };
  const std::vector<double> zeros(adam.m.empty() ? n : 0, 0.0);
  append(kOptimM, adam.m.empty() ? zeros : adam.m);
  append(kOptimV, adam.v.empty() ? zeros : adam.v);
  append(kRolloutParams, rolloutParams.values());
  ckpt.params = grad::ParamVector(std::move(blocks), std::move(values));
  addSpecFields(ckpt, policy.spec());
  ckpt.setField("step", stepField(completed));
  ckpt.setField("adam_t", stepField(adam.t));
  return ckpt;
}

grad::ParamVector copyBlock(const Policy& policy, const Checkpoint& ckpt, const char* name) {
  const auto v = ckpt.params.blockValues(name);
  if (v.size() != policy.paramCount()) throw std::runtime_error(fmt::format("checkpoint block '{}' has wrong size", name));
  return grad::ParamVector(policy.layout(), std::vector<double>(v.begin(), v.end()));
}

void writeDump(const std::filesystem::path& outDir, const TrainConfig& cfg, const Policy& policy,
               const grad::ParamVector& params, std::uint64_t step, const std::string& reason,
               const std::optional<LossBreakdown>& loss) {
  if (outDir.empty()) return;
  json j;
  j["step"] = step;
  j["reason"] = reason;
  j["config"] = cfg.toJson();
  j["paramsFinite"] = params.allFinite();
  if (loss) {
    auto num = [](double x) { return std::isfinite(x) ? json(x) : json(fmt::format("{}", x)); };
    j["loss"] = {{"jGrpo", num(loss->jGrpo)},           {"klMask", num(loss->klMask)},
                 {"klNoise", num(loss->klNoise)},       {"entropyMask", num(loss->entropyMask)},
                 {"entropyNoise", num(loss->entropyNoise)}, {"total", num(loss->total)}};
  }
  std::ofstream(outDir / "nonfinite_dump.json") << j.dump(2) << '\n';
  writeCheckpoint(outDir / "nonfinite_params.ckpt", policyCheckpoint(policy, params, step));
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void TrainConfig::validate() const {
  dvrp.validate();
  perturb.validate();
  policy.validate();
  if (!(learningRate >= 0.0) || !std::isfinite(learningRate)) throw std::invalid_argument("learningRate must be >= 0");
  if (globalBatch < 1 || rolloutBatch < globalBatch) {
    throw std::invalid_argument("need rolloutBatch >= globalBatch >= 1");
  }
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  sampling().validate();
  if (!(adamBeta1 >= 0 && adamBeta1 < 1 && adamBeta2 >= 0 && adamBeta2 < 1 && adamEps > 0)) {
    throw std::invalid_argument("invalid Adam hyperparameters");
  }
  if (!(weightDecay >= 0)) throw std::invalid_argument("weightDecay must be >= 0");
  if (geometry.channels != policy.channels) throw std::invalid_argument("task channels differ from policy channels");
  if (perturb.patchSize != policy.patchSize) throw std::invalid_argument("perturbation and policy patch sizes differ");
  parseGenerator(generator);
}

json TrainConfig::toJson() const {
  json d = {{"lambdaNec", dvrp.lambdaNec}, {"lambdaRob", dvrp.lambdaRob},   {"lambdaEnt", dvrp.lambdaEnt},
            {"epsAdv", dvrp.epsAdv},       {"clipLow", dvrp.clipLow},       {"clipHigh", dvrp.clipHigh},
            {"groupSize", dvrp.groupSize}, {"stopGradOri", dvrp.stopGradOri}, {"algo", algoName(dvrp.algo)}};
  d["klCap"] = dvrp.klCap ? json(*dvrp.klCap) : json(nullptr);
  json p = {{"pMask", perturb.pMask}, {"patchSize", perturb.patchSize}, {"tInit", perturb.tInit},
            {"tMax", perturb.tMax},   {"gamma", perturb.gamma},         {"maskFill", perturb.maskFill}};
  json s = {{"vocabSize", policy.vocabSize}, {"embedDim", policy.embedDim}, {"hiddenDim", policy.hiddenDim},
            {"patchSize", policy.patchSize}, {"channels", policy.channels}, {"maxTokens", policy.maxTokens}};
  return {{"dvrp", d},
          {"perturb", p},
          {"policy", s},
          {"learningRate", learningRate},
          {"rolloutBatch", rolloutBatch},
          {"globalBatch", globalBatch},
          {"epochs", epochs},
          {"totalSteps", totalSteps},
          {"seed", seed},
          {"samplingTemperature", samplingTemperature},
          {"samplingTopP", samplingTopP},
          {"maxTokens", maxTokens},
          {"adamBeta1", adamBeta1},
          {"adamBeta2", adamBeta2},
          {"adamEps", adamEps},
          {"weightDecay", weightDecay},
          {"generator", generator},
          {"difficulty", difficulty},
          {"geometry", {{"height", geometry.height}, {"width", geometry.width}, {"channels", geometry.channels}}},
          {"checkpointEvery", checkpointEvery},
          {"deterministic", deterministic},
          {"threads", threads}};
}

TrainConfig TrainConfig::fromJson(const json& j) {
  static const std::set<std::string> known = {
      "dvrp",        "perturb",   "policy",    "learningRate", "rolloutBatch", "globalBatch",
      "epochs",      "totalSteps", "seed",     "samplingTemperature", "samplingTopP", "maxTokens",
      "adamBeta1",   "adamBeta2", "adamEps",   "weightDecay",  "generator",    "difficulty",
      "geometry",    "checkpointEvery", "deterministic", "threads"};
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown train config key '" + key + "'");
  }
  TrainConfig c;
  try {
    if (j.contains("dvrp")) {
      const json& d = j.at("dvrp");
      // The algorithm sets clip defaults, explicit keys override them.
      if (d.contains("algo")) c.dvrp = DvrpConfig::forAlgo(parseAlgo(d.at("algo").get<std::string>()));
      readKey(d, "lambdaNec", c.dvrp.lambdaNec);
      readKey(d, "lambdaRob", c.dvrp.lambdaRob);
      readKey(d, "lambdaEnt", c.dvrp.lambdaEnt);
      readKey(d, "epsAdv", c.dvrp.epsAdv);
      readKey(d, "clipLow", c.dvrp.clipLow);
      readKey(d, "clipHigh", c.dvrp.clipHigh);
      readKey(d, "groupSize", c.dvrp.groupSize);
      readKey(d, "stopGradOri", c.dvrp.stopGradOri);
      if (d.contains("klCap") && !d.at("klCap").is_null()) c.dvrp.klCap = d.at("klCap").get<double>();
    }
    if (j.contains("perturb")) {
      const json& p = j.at("perturb");
      readKey(p, "pMask", c.perturb.pMask);
      readKey(p, "patchSize", c.perturb.patchSize);
      readKey(p, "tInit", c.perturb.tInit);
      readKey(p, "tMax", c.perturb.tMax);
      readKey(p, "gamma", c.perturb.gamma);
      readKey(p, "maskFill", c.perturb.maskFill);
    }
    if (j.contains("policy")) {
      const json& s = j.at("policy");
      readKey(s, "vocabSize", c.policy.vocabSize);
      readKey(s, "embedDim", c.policy.embedDim);
      readKey(s, "hiddenDim", c.policy.hiddenDim);
      readKey(s, "patchSize", c.policy.patchSize);
      readKey(s, "channels", c.policy.channels);
      readKey(s, "maxTokens", c.policy.maxTokens);
    }
    readKey(j, "learningRate", c.learningRate);
    readKey(j, "rolloutBatch", c.rolloutBatch);
    readKey(j, "globalBatch", c.globalBatch);
    readKey(j, "epochs", c.epochs);
    readKey(j, "totalSteps", c.totalSteps);
    readKey(j, "seed", c.seed);
    readKey(j, "samplingTemperature", c.samplingTemperature);
    readKey(j, "samplingTopP", c.samplingTopP);
    readKey(j, "maxTokens", c.maxTokens);
    readKey(j, "adamBeta1", c.adamBeta1);
    readKey(j, "adamBeta2", c.adamBeta2);
    readKey(j, "adamEps", c.adamEps);
    readKey(j, "weightDecay", c.weightDecay);
    readKey(j, "generator", c.generator);
    readKey(j, "difficulty", c.difficulty);
    if (j.contains("geometry")) {
      const json& g = j.at("geometry");
      readKey(g, "height", c.geometry.height);
      readKey(g, "width", c.geometry.width);
      readKey(g, "channels", c.geometry.channels);
    }
    readKey(j, "checkpointEvery", c.checkpointEvery);
    readKey(j, "deterministic", c.deterministic);
    readKey(j, "threads", c.threads);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("train config: ") + e.what());
  }
  return c;
}

TrainConfig TrainConfig::deskPreset(Algo algo, std::uint64_t seed) {
  TrainConfig c;
  c.dvrp = DvrpConfig::forAlgo(algo);
  c.policy.maxTokens = 1;
  c.maxTokens = 1;
  c.dvrp.klCap = 1.0;
  c.learningRate = 1e-3;
  c.rolloutBatch = 64;
  c.globalBatch = 32;
  c.epochs = 1;
  c.totalSteps = 5000;
  c.seed = seed;
  c.checkpointEvery = 0;
  return c;
}

// ---------------------------------------------------------------------------
// StepMetrics

json StepMetrics::toJson() const {
  json j = {{"step", step},
            {"skipped", skipped},
            {"groups", groups},
            {"meanReward", meanReward},
            {"jGrpo", loss.jGrpo},
            {"klMask", loss.klMask},
            {"klNoise", loss.klNoise},
            {"entropyMask", loss.entropyMask},
            {"entropyNoise", loss.entropyNoise},
            {"total", loss.total},
            {"gradNorm", gradNorm},
            {"timestep", timestep},
            {"beta", beta}};
  if (wallTime) j["wallTime"] = *wallTime;
  return j;
}

StepMetrics StepMetrics::fromJson(const json& j) {
  StepMetrics m;
  m.step = j.at("step").get<std::uint64_t>();
  m.skipped = j.at("skipped").get<bool>();
  m.groups = j.at("groups").get<std::uint32_t>();
  m.meanReward = j.at("meanReward").get<double>();
  m.loss.jGrpo = j.at("jGrpo").get<double>();
  m.loss.klMask = j.at("klMask").get<double>();
  m.loss.klNoise = j.at("klNoise").get<double>();
  m.loss.entropyMask = j.at("entropyMask").get<double>();
  m.loss.entropyNoise = j.at("entropyNoise").get<double>();
  m.loss.total = j.at("total").get<double>();
  m.gradNorm = j.at("gradNorm").get<double>();
  m.timestep = j.at("timestep").get<double>();
  m.beta = j.at("beta").get<double>();
  if (j.contains("wallTime")) m.wallTime = j.at("wallTime").get<double>();
  return m;
}

// ---------------------------------------------------------------------------
// Rollouts and steps

std::vector<Task> rolloutTasks(const TrainConfig& cfg, std::uint64_t rollout) {
  std::vector<Task> tasks;
  tasks.reserve(cfg.rolloutBatch);
  for (std::uint32_t j = 0; j < cfg.rolloutBatch; ++j) {
    tasks.push_back(genTask(cfg.generator, deriveSeed(cfg.seed, {kTaskTag, rollout, j}), cfg.difficulty, cfg.geometry));
  }
  return tasks;
}

std::vector<GroupRollout> rolloutBatch(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                                       const TrainConfig& cfg, std::uint64_t rollout) {
  if (tasks.empty()) throw std::invalid_argument("rolloutBatch needs at least one task");
  const SamplingConfig sampling = cfg.sampling();
  std::vector<GroupRollout> groups(tasks.size());
  parallelFor(tasks.size(), cfg.threads, [&](std::size_t j) {
    const Task& task = tasks[j];
    if (!task.image) throw std::invalid_argument("training tasks need an image");
    GroupRollout& g = groups[j];
    g.taskId = j;
    g.image = *task.image;
    g.query = task.query;
    g.answer = task.answer;
    const Policy::Context ctx = policy.encode(params, &g.image, g.query);
    for (std::uint32_t m = 0; m < cfg.dvrp.groupSize; ++m) {
      g.trajectories.push_back(policy.sampleTrajectory(params, ctx, sampling, deriveSeed(cfg.seed, {kSampleTag, rollout, j, m})));
    }
    scoreGroup(g, cfg.dvrp.epsAdv);
  });
  return groups;
}

BatchGradient batchGradient(const Policy& policy, const grad::ParamVector& params, std::span<const GroupRollout> groups,
                            const TrainConfig& cfg, std::uint64_t step) {
  std::vector<const GroupRollout*> kept;
  for (const auto& g : groups) {
    if (!usesDapo(cfg.dvrp.algo) || !g.zeroVariance()) kept.push_back(&g);
  }
  if (kept.empty()) throw EmptyBatch(fmt::format("step {}: every group was filtered out", step));

  const std::size_t n = kept.size();
  const double weight = 1.0 / static_cast<double>(n);
  const grad::ReductionMode mode = cfg.deterministic ? grad::ReductionMode::Deterministic : grad::ReductionMode::Fast;
  grad::GradientAccumulator acc(policy.paramCount(), n, mode);
  std::vector<LossBreakdown> losses(n);
  const bool triplet = usesTriplet(cfg.dvrp.algo);

  parallelFor(n, cfg.threads, [&](std::size_t i) {
    const GroupRollout& group = *kept[i];
    std::vector<double> grad(policy.paramCount(), 0.0);
    if (triplet) {
      const ViewTriplet view =
          makeTriplet(group.image, cfg.perturb, step, cfg.totalSteps, deriveSeed(cfg.seed, {kViewTag, step, group.taskId}));
      const ObjectiveGraph obj = dvrpObjective(group, std::span(&view, 1), policy, cfg.dvrp);
      const grad::Evaluation eval(*obj.expr.graph, params.values());
      losses[i] = obj.breakdown(eval);
      eval.accumulateGradient(obj.expr.root, grad, weight);
    } else {
      const grad::ScalarExpr expr = grpoObjective(group, policy, cfg.dvrp);
      const grad::Evaluation eval(*expr.graph, params.values());
      losses[i].jGrpo = losses[i].total = eval.scalar(expr.root);
      eval.accumulateGradient(expr.root, grad, weight);
    }
    acc.add(i, grad);
  });

  BatchGradient out;
  out.gradient = acc.reduce();
  out.groups = static_cast<std::uint32_t>(n);
  for (const auto& l : losses) {
    out.loss.jGrpo += l.jGrpo * weight;
    out.loss.klMask += l.klMask * weight;
    out.loss.klNoise += l.klNoise * weight;
    out.loss.entropyMask += l.entropyMask * weight;
    out.loss.entropyNoise += l.entropyNoise * weight;
    out.loss.total += l.total * weight;
  }
  return out;
}

void adamAscent(std::span<double> params, std::span<const double> gradient, AdamState& adam, const TrainConfig& cfg) {
  if (gradient.size() != params.size()) throw std::invalid_argument("gradient size mismatch");
  if (adam.m.empty()) {
    adam.m.assign(params.size(), 0.0);
    adam.v.assign(params.size(), 0.0);
  }
  ++adam.t;
  const double b1 = cfg.adamBeta1, b2 = cfg.adamBeta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * gradient[i];
    adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * gradient[i] * gradient[i];
  }
  if (cfg.learningRate == 0.0) return;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double mHat = adam.m[i] / c1;
    const double vHat = adam.v[i] / c2;
    // Decoupled weight decay, then ascent on the objective.
    if (cfg.weightDecay != 0.0) params[i] -= cfg.learningRate * cfg.weightDecay * params[i];
    params[i] += cfg.learningRate * mHat / (std::sqrt(vHat) + cfg.adamEps);
  }
}

StepMetrics trainStep(const Policy& policy, grad::ParamVector& params, AdamState& adam,
                      std::span<const GroupRollout> groups, const TrainConfig& cfg, std::uint64_t step) {
  StepMetrics m;
  m.step = step;
  m.timestep = scheduleTimestep(step, cfg.totalSteps, cfg.perturb.tInit, cfg.perturb.gamma);
  m.beta = betaFromTimestep(m.timestep, cfg.perturb.tMax);
  double reward = 0.0;
  std::size_t samples = 0;
  for (const auto& g : groups) {
    for (const auto& t : g.trajectories) {
      reward += t.reward;
      ++samples;
    }
  }
  m.meanReward = samples ? reward / static_cast<double>(samples) : 0.0;

  BatchGradient bg;
  try {
    bg = batchGradient(policy, params, groups, cfg, step);
  } catch (const grad::DomainError& e) {
    throw NonFiniteLoss(fmt::format("step {}: {}", step, e.what()));
  }
  m.groups = bg.groups;
  m.loss = bg.loss;
  m.gradNorm = l2(bg.gradient);
  if (!finite(bg.loss) || !allFinite(bg.gradient)) {
    throw NonFiniteLoss(fmt::format("step {}: non-finite objective {} or gradient norm {}", step, bg.loss.total,
                                    m.gradNorm),
                        bg.loss);
  }
  adamAscent(params.values(), bg.gradient, adam, cfg);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

Checkpoint policyCheckpoint(const Policy& policy, const grad::ParamVector& params, std::uint64_t step) {
  policy.checkLayout(params);
  Checkpoint ckpt;
  ckpt.params = params;
  addSpecFields(ckpt, policy.spec());
  ckpt.setField("step", stepField(step));
  return ckpt;
}

PolicySpec specFromCheckpoint(const Checkpoint& ckpt) {
  auto get = [&](const char* name) {
    const auto v = ckpt.field(name);
    if (!v) throw std::runtime_error(fmt::format("checkpoint lacks field '{}'", name));
    return *v;
  };
  PolicySpec spec;
  spec.vocabSize = get("vocab");
  spec.embedDim = get("embed");
  spec.hiddenDim = get("hidden");
  spec.patchSize = get("patch");
  spec.channels = get("channels");
  spec.maxTokens = get("max_tokens");
  spec.validate();
  return spec;
}

grad::ParamVector policyParams(const Policy& policy, const Checkpoint& ckpt) {
  if (ckpt.params.size() < policy.paramCount()) throw std::runtime_error("checkpoint too small for policy");
  const auto values = ckpt.params.values().first(policy.paramCount());
  grad::ParamVector out(policy.layout(), std::vector<double>(values.begin(), values.end()));
  for (std::size_t b = 0; b < policy.layout().size(); ++b) {
    if (!(ckpt.params.blocks()[b] == policy.layout()[b])) {
      throw std::runtime_error(fmt::format("checkpoint block {} does not match the policy layout", b));
    }
  }
  return out;
}

std::filesystem::path stepCheckpointPath(const std::filesystem::path& outDir, std::uint64_t completedSteps) {
  return outDir / fmt::format("step_{:06}.ckpt", completedSteps);
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  const Policy policy(cfg.policy);
  const bool writeFiles = !options.outDir.empty();
  if (writeFiles) std::filesystem::create_directories(options.outDir);

  TrainResult result;
  result.params = policy.initParams(deriveSeed(cfg.seed, {kInitTag}));
  AdamState adam;
  grad::ParamVector rolloutParams = result.params;
  std::uint64_t start = 0;

  if (options.resumeFrom) {
    const Checkpoint ckpt = readCheckpoint(*options.resumeFrom);
    if (!(specFromCheckpoint(ckpt) == cfg.policy)) throw std::runtime_error("checkpoint policy spec differs from config");
    start = ckpt.field("step").value_or(0);
    if (start > cfg.totalSteps) throw std::runtime_error("checkpoint is past the configured total steps");
    result.params = policyParams(policy, ckpt);
    rolloutParams = result.params;
    if (ckpt.params.hasBlock(kOptimM)) {
      const grad::ParamVector m = copyBlock(policy, ckpt, kOptimM);
      const grad::ParamVector v = copyBlock(policy, ckpt, kOptimV);
      adam.t = ckpt.field("adam_t").value_or(0);
      // Moments are stored as zeros before the first update.
      if (adam.t > 0) {
        adam.m.assign(m.values().begin(), m.values().end());
        adam.v.assign(v.values().begin(), v.values().end());
      }
      rolloutParams = copyBlock(policy, ckpt, kRolloutParams);
    }
  }

  const auto metricsPath = options.outDir / "metrics.jsonl";
  std::ofstream metricsOut;
  if (writeFiles) {
    std::ofstream(options.outDir / "config.json", std::ios::trunc) << cfg.toJson().dump(2) << '\n';
    // On resume keep the records of the steps already completed.
    std::vector<std::string> keep;
    if (start > 0 && std::filesystem::exists(metricsPath)) {
      std::ifstream in(metricsPath);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (json::parse(line).at("step").get<std::uint64_t>() < start) keep.push_back(line);
      }
    }
    metricsOut.open(metricsPath, std::ios::binary | std::ios::trunc);
    if (!metricsOut) throw std::runtime_error("cannot open " + metricsPath.string());
    for (const auto& line : keep) metricsOut << line << '\n';
    metricsOut.flush();
  }

  const std::uint64_t perRollout = cfg.stepsPerRollout();
  const std::uint32_t minibatches = cfg.minibatchesPerEpoch();
  std::vector<GroupRollout> groups;
  std::uint64_t groupsRollout = UINT64_MAX;
  const auto t0 = std::chrono::steady_clock::now();

  for (std::uint64_t k = start; k < cfg.totalSteps; ++k) {
    const std::uint64_t r = k / perRollout;
    if (k % perRollout == 0) rolloutParams = result.params;
    if (groupsRollout != r) {
      groups = rolloutBatch(policy, rolloutParams, rolloutTasks(cfg, r), cfg, r);
      groupsRollout = r;
    }
    const auto b = static_cast<std::uint32_t>((k % perRollout) % minibatches);
    const std::size_t lo = static_cast<std::size_t>(b) * cfg.globalBatch;
    const std::size_t hi = std::min<std::size_t>(lo + cfg.globalBatch, groups.size());
    const std::span<const GroupRollout> mini(groups.data() + lo, hi - lo);

    StepMetrics m;
    try {
      m = trainStep(policy, result.params, adam, mini, cfg, k);
    } catch (const EmptyBatch&) {
      m.step = k;
      m.skipped = true;
      m.timestep = scheduleTimestep(k, cfg.totalSteps, cfg.perturb.tInit, cfg.perturb.gamma);
      m.beta = betaFromTimestep(m.timestep, cfg.perturb.tMax);
      double reward = 0.0;
      std::size_t samples = 0;
      for (const auto& g : mini) {
        for (const auto& t : g.trajectories) reward += t.reward, ++samples;
      }
      m.meanReward = samples ? reward / static_cast<double>(samples) : 0.0;
      ++result.skippedSteps;
    } catch (const NonFiniteLoss& e) {
      if (writeFiles) writeDump(options.outDir, cfg, policy, result.params, k, e.what(), e.loss);
      throw;
    }
    if (!cfg.deterministic) {
      m.wallTime = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.metrics.push_back(m);
    if (writeFiles) {
      metricsOut << m.toJson().dump() << '\n';
      metricsOut.flush();
      const std::uint64_t completed = k + 1;
      if (cfg.checkpointEvery > 0 && completed % cfg.checkpointEvery == 0) {
        writeCheckpoint(stepCheckpointPath(options.outDir, completed),
                        trainingCheckpoint(policy, result.params, adam, rolloutParams, completed));
      }
    }
    if (options.onStep) options.onStep(m);
  }

  if (writeFiles) writeCheckpoint(options.outDir / "final.ckpt", policyCheckpoint(policy, result.params, cfg.totalSteps));
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalResult evalAvgAtKWith(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                          std::uint32_t k, const TaskTransform& transform, const SamplingConfig& sampling,
                          std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("avg@k needs k >= 1");
  EvalResult out;
  out.tasks = tasks.size();
  if (tasks.empty()) return out;
  std::vector<double> perTask(tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const Task view = transform(tasks[i], i);
    const Policy::Context ctx = policy.encode(params, view.imagePtr(), view.query);
    std::uint32_t hits = 0;
    for (std::uint32_t j = 0; j < k; ++j) {
      const Trajectory t = policy.sampleTrajectory(params, ctx, sampling, deriveSeed(seed, {i, j}));
      hits += verify(t.tokens, view) ? 1 : 0;
    }
    perTask[i] = static_cast<double>(hits) / k;
  }
  double sum = 0.0;
  for (double x : perTask) sum += x;
  const double n = static_cast<double>(perTask.size());
  out.accuracy = sum / n;
  if (perTask.size() > 1) {
    double ss = 0.0;
    for (double x : perTask) ss += (x - out.accuracy) * (x - out.accuracy);
    out.stderr_ = std::sqrt(ss / (n - 1.0) / n);
  }
  return out;
}

EvalResult evalAvgAtKDetailed(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks,
                              std::uint32_t k, BlindMode mode, const SamplingConfig& sampling, std::uint64_t seed) {
  return evalAvgAtKWith(
      policy, params, tasks, k, [mode](const Task& t, std::size_t) { return blindVariant(t, mode); }, sampling, seed);
}

double evalAvgAtK(const Policy& policy, const grad::ParamVector& params, std::span<const Task> tasks, std::uint32_t k,
                  BlindMode mode, const SamplingConfig& sampling, std::uint64_t seed) {
  return evalAvgAtKDetailed(policy, params, tasks, k, mode, sampling, seed).accuracy;
}

}  // namespace dvrp
