// dvrp: command-line front end.
//
//   dvrp perturb       build the masked / noised views of one image
//   dvrp gen-data      write N procedural tasks to <dir>/tasks.jsonl
//   dvrp train         run one training job
//   dvrp blind-eval    ORIGINAL / BLACK / WHITE / TEXT_ONLY evaluation of a checkpoint
//   dvrp robust-sweep  accuracy under fixed noise and mask levels
//   dvrp ablate        pMask x tInit training grid
//
// Reports go to stdout as aligned tables; --records writes JSON lines and
// --plot-data writes (x, y, stderr) triples.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "CLI11.hpp"
#include "dvrp/env.hpp"
#include "dvrp/evalharness.hpp"
#include "dvrp/rng.hpp"
#include "dvrp/trainloop.hpp"
#include "dvrp/views.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dvrp;

namespace {

struct DataOptions {
  std::string data;
  std::string generator = "COUNT";
  std::size_t tasks = 2000;
  std::uint64_t seed = 1000;
  std::uint32_t difficulty = 0;
  std::uint32_t height = 56, width = 56;

  void add(CLI::App* app) {
    app->add_option("--data", data, "tasks.jsonl to evaluate on (otherwise tasks are generated)");
    app->add_option("--generator", generator, "generator for generated tasks")->capture_default_str();
    app->add_option("--tasks", tasks, "number of generated tasks")->capture_default_str();
    app->add_option("--data-seed", seed, "seed of generated tasks")->capture_default_str();
    app->add_option("--difficulty", difficulty, "difficulty of generated tasks")->capture_default_str();
    app->add_option("--height", height)->capture_default_str();
    app->add_option("--width", width)->capture_default_str();
  }

  std::vector<Task> load(std::uint32_t channels) const {
    if (!data.empty()) return readDataset(data);
    return generateTasks(generator, seed, tasks, difficulty, {height, width, channels});
  }
};

struct EvalOptions {
  std::uint32_t k = 8;
  double temperature = 1.0;
  double topP = 0.9;
  std::uint64_t seed = 7;

  void add(CLI::App* app) {
    app->add_option("-k,--repeats", k, "samples per task (avg@k)")->capture_default_str();
    app->add_option("--temperature", temperature)->capture_default_str();
    app->add_option("--top-p", topP)->capture_default_str();
    app->add_option("--eval-seed", seed)->capture_default_str();
  }

  EvalSettings settings() const { return {k, {temperature, topP, 0}, seed}; }
};

struct OutputOptions {
  std::string records;
  std::string plotData;

  void add(CLI::App* app) {
    app->add_option("--records", records, "write JSON-lines records here");
    app->add_option("--plot-data", plotData, "write (x, y, stderr) plot triples here");
  }

  template <class Report>
  void emit(const Report& report) const {
    std::cout << report.table();
    if (!records.empty()) writeRecords(records, report.records());
    if (!plotData.empty()) {
      std::ofstream out(plotData, std::ios::trunc);
      if (!out) throw std::runtime_error("cannot open " + plotData);
      out << report.plotData();
    }
  }
};

std::vector<double> parseList(const std::string& text) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (!item.empty()) out.push_back(std::stod(item));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

TrainConfig loadTrainConfig(const std::string& path, const std::string& preset, const std::string& algo,
                            std::uint64_t seed) {
  TrainConfig cfg = preset == "desk" ? TrainConfig::deskPreset(parseAlgo(algo), seed) : TrainConfig{};
  if (preset != "desk" && preset != "default") throw std::invalid_argument("unknown preset '" + preset + "'");
  if (preset == "default") {
    cfg.dvrp = DvrpConfig::forAlgo(parseAlgo(algo));
    cfg.seed = seed;
  }
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    nlohmann::json j = cfg.toJson();
    j.merge_patch(nlohmann::json::parse(in));
    cfg = TrainConfig::fromJson(j);
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Triplet-view policy optimisation lab"};
  app.require_subcommand(1);

  // perturb ------------------------------------------------------------------
  auto* perturb = app.add_subcommand("perturb", "write masked and noised views of an image");
  std::string pImage, pOut = "views";
  std::uint64_t pSeed = 0, pStep = 0, pTotal = 1;
  std::optional<double> pBeta;
  PerturbConfig pc;
  perturb->add_option("--image", pImage, "input .grid (default: a generated COUNT image)");
  perturb->add_option("--out-dir", pOut)->capture_default_str();
  perturb->add_option("--seed", pSeed)->capture_default_str();
  perturb->add_option("--p-mask", pc.pMask)->capture_default_str();
  perturb->add_option("--patch", pc.patchSize)->capture_default_str();
  perturb->add_option("--t-init", pc.tInit)->capture_default_str();
  perturb->add_option("--t-max", pc.tMax)->capture_default_str();
  perturb->add_option("--gamma", pc.gamma)->capture_default_str();
  perturb->add_option("--mask-fill", pc.maskFill)->capture_default_str();
  perturb->add_option("--step", pStep, "optimizer step k")->capture_default_str();
  perturb->add_option("--total", pTotal, "total steps K")->capture_default_str();
  perturb->add_option("--beta", pBeta, "fixed noise level (overrides the schedule)");

  // gen-data -----------------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "write procedural tasks as JSON lines");
  std::string gOut = "data";
  DataOptions gData;
  gData.seed = 0;
  gen->add_option("--out-dir", gOut)->capture_default_str();
  gen->add_option("--generator", gData.generator)->capture_default_str();
  gen->add_option("-n,--count", gData.tasks)->capture_default_str();
  gen->add_option("--seed", gData.seed)->capture_default_str();
  gen->add_option("--difficulty", gData.difficulty)->capture_default_str();
  gen->add_option("--height", gData.height)->capture_default_str();
  gen->add_option("--width", gData.width)->capture_default_str();

  // train --------------------------------------------------------------------
  auto* trainCmd = app.add_subcommand("train", "train a policy");
  std::string tConfig, tPreset = "desk", tAlgo = "DVRP_G", tOut = "run", tResume;
  std::uint64_t tSeed = 0;
  std::optional<std::uint64_t> tSteps;
  std::optional<double> tLr;
  std::uint32_t tLogEvery = 100;
  trainCmd->add_option("--config", tConfig, "JSON config; keys override the preset");
  trainCmd->add_option("--preset", tPreset, "desk or default")->capture_default_str();
  trainCmd->add_option("--algo", tAlgo, "GRPO, DAPO, DVRP_G or DVRP_D")->capture_default_str();
  trainCmd->add_option("--seed", tSeed)->capture_default_str();
  trainCmd->add_option("--steps", tSteps, "total optimizer steps");
  trainCmd->add_option("--lr", tLr, "learning rate");
  trainCmd->add_option("--out-dir", tOut)->capture_default_str();
  trainCmd->add_option("--resume", tResume, "training checkpoint to resume from");
  trainCmd->add_option("--log-every", tLogEvery)->capture_default_str();

  // blind-eval ---------------------------------------------------------------
  auto* blind = app.add_subcommand("blind-eval", "evaluate a checkpoint with the image blanked or removed");
  std::string bCkpt;
  DataOptions bData;
  EvalOptions bEval;
  OutputOptions bOut;
  blind->add_option("--checkpoint", bCkpt)->required();
  bData.add(blind);
  bEval.add(blind);
  bOut.add(blind);

  // robust-sweep -------------------------------------------------------------
  auto* sweep = app.add_subcommand("robust-sweep", "evaluate a checkpoint under fixed perturbation levels");
  std::string sCkpt, sBetas = "0,0.1,0.3,0.5,0.7,0.9", sMasks = "0,0.2,0.4,0.6,0.8,1";
  DataOptions sData;
  EvalOptions sEval;
  OutputOptions sOut;
  sweep->add_option("--checkpoint", sCkpt)->required();
  sweep->add_option("--betas", sBetas, "comma-separated noise levels")->capture_default_str();
  sweep->add_option("--p-masks", sMasks, "comma-separated mask probabilities")->capture_default_str();
  sData.add(sweep);
  sEval.add(sweep);
  sOut.add(sweep);

  // ablate -------------------------------------------------------------------
  auto* ablate = app.add_subcommand("ablate", "train and evaluate a pMask x tInit grid");
  std::string aConfig, aPreset = "desk", aAlgo = "DVRP_G", aOut = "ablation", aMasks = "0.2,0.4,0.6",
                       aTInits = "100,300,500";
  std::uint64_t aSeed = 0;
  std::optional<std::uint64_t> aSteps;
  DataOptions aData;
  EvalOptions aEval;
  OutputOptions aOutput;
  ablate->add_option("--config", aConfig, "JSON config; keys override the preset");
  ablate->add_option("--preset", aPreset)->capture_default_str();
  ablate->add_option("--algo", aAlgo)->capture_default_str();
  ablate->add_option("--seed", aSeed)->capture_default_str();
  ablate->add_option("--steps", aSteps, "total optimizer steps per cell");
  ablate->add_option("--out-dir", aOut)->capture_default_str();
  ablate->add_option("--p-masks", aMasks)->capture_default_str();
  ablate->add_option("--t-inits", aTInits)->capture_default_str();
  aData.add(ablate);
  aEval.add(ablate);
  aOutput.add(ablate);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*perturb) {
      ImageGrid image = pImage.empty() ? *genTask("COUNT", pSeed, 0).image : readGrid(pImage);
      pc.validate();
      for (const auto& w : pc.warnings()) std::cerr << "warning: " << w << '\n';
      fs::create_directories(pOut);
      const MaskResult masked = maskPatches(image, pc, deriveSeed(pSeed, {1}));
      const double beta = pBeta ? *pBeta : annealedBeta(pStep, pTotal, pc);
      const ImageGrid noised = diffuseNoise(image, beta, deriveSeed(pSeed, {2, 0}));
      writeGrid(fs::path(pOut) / "original.grid", image);
      writeGrid(fs::path(pOut) / "masked.grid", masked.image);
      writeGrid(fs::path(pOut) / "noised.grid", noised);
      std::ofstream(fs::path(pOut) / "mask.txt", std::ios::trunc) << masked.bitmap.toText();
      std::cout << fmt::format("beta {} ({} of {} patches masked) -> {}\n", beta, masked.bitmap.maskedCount(),
                               masked.bitmap.masked.size(), pOut);
    } else if (*gen) {
      fs::create_directories(gOut);
      const auto tasks = generateTasks(gData.generator, gData.seed, gData.tasks, gData.difficulty,
                                       {gData.height, gData.width, 3});
      writeDataset(fs::path(gOut) / "tasks.jsonl", tasks);
      std::cout << fmt::format("{} {} tasks -> {}\n", tasks.size(), gData.generator, (fs::path(gOut) / "tasks.jsonl").string());
    } else if (*trainCmd) {
      TrainConfig cfg = loadTrainConfig(tConfig, tPreset, tAlgo, tSeed);
      if (tSteps) cfg.totalSteps = *tSteps;
      if (tLr) cfg.learningRate = *tLr;
      TrainOptions opts;
      opts.outDir = tOut;
      if (!tResume.empty()) opts.resumeFrom = tResume;
      opts.onStep = [&](const StepMetrics& m) {
        if (tLogEvery > 0 && (m.step + 1) % tLogEvery == 0) {
          std::cerr << fmt::format("step {:>6}  reward {:.3f}  J {:+.4f}  klMask {:.4f}  klNoise {:.4f}  beta {:.4f}\n",
                                   m.step + 1, m.meanReward, m.loss.total, m.loss.klMask, m.loss.klNoise, m.beta);
        }
      };
      const TrainResult r = train(cfg, opts);
      std::cout << fmt::format("{} steps ({} skipped) -> {}\n", r.metrics.size(), r.skippedSteps, tOut);
    } else if (*blind) {
      const auto [policy, params] = loadPolicy(bCkpt);
      const auto tasks = bData.load(policy.spec().channels);
      BlindReport report = blindExperiment(policy, params, tasks, bEval.settings());
      report.source = bCkpt;
      bOut.emit(report);
    } else if (*sweep) {
      const auto [policy, params] = loadPolicy(sCkpt);
      const auto tasks = sData.load(policy.spec().channels);
      PerturbConfig base;
      base.patchSize = policy.spec().patchSize;
      const auto betas = parseList(sBetas);
      const auto masks = parseList(sMasks);
      SweepReport report = robustnessSweep(policy, params, tasks, betas, masks, sEval.settings(), base);
      report.source = sCkpt;
      sOut.emit(report);
    } else if (*ablate) {
      TrainConfig base = loadTrainConfig(aConfig, aPreset, aAlgo, aSeed);
      if (aSteps) base.totalSteps = *aSteps;
      std::vector<TrainConfig> grid;
      for (double p : parseList(aMasks)) {
        for (double t : parseList(aTInits)) {
          TrainConfig c = base;
          c.perturb.pMask = p;
          c.perturb.tInit = static_cast<std::uint32_t>(t);
          grid.push_back(c);
        }
      }
      const auto tasks = aData.load(base.policy.channels);
      aOutput.emit(ablationSweep(grid, tasks, aEval.settings(), aOut));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
