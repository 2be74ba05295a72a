#include "dvrp/env.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "dvrp/objective.hpp"
#include "dvrp/rng.hpp"
#include "json.hpp"

namespace dvrp {

namespace {

using nlohmann::json;

constexpr std::uint32_t kCountMin = 1;
constexpr std::uint32_t kCountMax = 6;
constexpr std::uint32_t kCompareMax = 4;
constexpr std::uint32_t kMajorityMin = 3;
constexpr std::uint32_t kMajorityMax = 5;
constexpr int kPlacementTries = 2000;
// Smallest side that always fits six blobs, or four per half for COMPARE.
constexpr std::uint32_t kMinSide = 16;

constexpr std::array<std::array<float, 3>, 4> kPalette = {{
    {1.0f, 0.0f, 0.0f},  // red
    {0.0f, 1.0f, 0.0f},  // green
    {0.0f, 0.0f, 1.0f},  // blue
    {1.0f, 1.0f, 0.0f},  // yellow
}};

struct Blob {
  std::uint32_t y = 0, x = 0, size = 0, color = 0;
};

struct Region {
  std::uint32_t y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // half-open
};

std::uint32_t baseBlobSize(const TaskGeometry& g) { return std::max<std::uint32_t>(2, std::min(g.height, g.width) / 5); }

bool overlaps(const Blob& a, const Blob& b) {
  // One pixel of background is kept between blobs so they stay separable.
  return a.x < b.x + b.size + 1 && b.x < a.x + a.size + 1 && a.y < b.y + b.size + 1 && b.y < a.y + a.size + 1;
}

class Layout {
 public:
  Layout(const TaskGeometry& g, std::uint32_t difficulty, CounterRng& rng) : g_(g), difficulty_(difficulty), rng_(rng) {}

  std::uint32_t drawSize() {
    const std::uint32_t s = baseBlobSize(g_);
    if (difficulty_ < 2) return s;
    const std::uint32_t lo = std::max<std::uint32_t>(1, s / 2);
    return lo + static_cast<std::uint32_t>(rng_.below(s - lo + 1));
  }

  /// Places one blob inside region; false when no free spot was found.
  bool place(const Region& r, std::uint32_t color) {
    const std::uint32_t size = drawSize();
    if (r.y1 - r.y0 < size || r.x1 - r.x0 < size) return false;
    for (int attempt = 0; attempt < kPlacementTries; ++attempt) {
      Blob b;
      b.size = size;
      b.color = color;
      b.y = r.y0 + static_cast<std::uint32_t>(rng_.below(r.y1 - r.y0 - size + 1));
      b.x = r.x0 + static_cast<std::uint32_t>(rng_.below(r.x1 - r.x0 - size + 1));
      if (std::none_of(blobs_.begin(), blobs_.end(), [&](const Blob& o) { return overlaps(b, o); })) {
        blobs_.push_back(b);
        return true;
      }
    }
    return false;
  }

  ImageGrid render() const {
    ImageGrid img(g_.height, g_.width, g_.channels, kBackground);
    for (const Blob& b : blobs_) {
      for (std::uint32_t y = b.y; y < b.y + b.size; ++y) {
        for (std::uint32_t x = b.x; x < b.x + b.size; ++x) {
          for (std::uint32_t c = 0; c < g_.channels; ++c) img.at(y, x, c) = kPalette[b.color][c % 3];
        }
      }
    }
    return img;
  }

  Region full() const { return {0, 0, g_.height, g_.width}; }
  Region leftHalf() const { return {0, 0, g_.height, g_.width / 2}; }
  Region rightHalf() const { return {0, g_.width / 2 + 1, g_.height, g_.width}; }

 private:
  TaskGeometry g_;
  std::uint32_t difficulty_;
  CounterRng& rng_;
  std::vector<Blob> blobs_;
};

std::uint32_t generatorIndex(Generator g) { return static_cast<std::uint32_t>(g); }

/// Colour of the i-th COUNT blob: fixed red, one colour per task, or mixed.
struct CountColors {
  std::uint32_t difficulty;
  std::uint32_t taskColor;
  std::uint32_t next(CounterRng& rng) const {
    if (difficulty == 0) return 0;
    if (difficulty == 1) return taskColor;
    return static_cast<std::uint32_t>(rng.below(kPalette.size()));
  }
};

Task buildTask(Generator gen, std::uint64_t seed, std::uint32_t difficulty, const TaskGeometry& geometry) {
  Task task;
  task.meta.generator = generatorName(gen);
  task.meta.seed = seed;
  task.meta.difficulty = difficulty;
  task.meta.geometry = geometry;

  // A layout that does not fit is redrawn from a fresh stream, so the answer
  // law is unchanged for any geometry where it fits with high probability.
  for (std::uint64_t stream = 0;; ++stream) {
    if (stream > 1000) throw std::invalid_argument("genTask: image too small for the generator's blobs");
    CounterRng rng(deriveSeed(seed, {generatorIndex(gen), difficulty}), stream);
    Layout layout(geometry, difficulty, rng);
    bool ok = true;
    switch (gen) {
      case Generator::Count:
      case Generator::Shortcut: {
        const auto count = kCountMin + static_cast<std::uint32_t>(rng.below(kCountMax - kCountMin + 1));
        const CountColors colors{difficulty, static_cast<std::uint32_t>(rng.below(kPalette.size()))};
        for (std::uint32_t i = 0; i < count && ok; ++i) ok = layout.place(layout.full(), colors.next(rng));
        task.query = {gen == Generator::Count ? tokens::kQueryCount : tokens::kQueryShortcut,
                      tokens::difficulty(difficulty)};
        if (gen == Generator::Shortcut) task.query.push_back(tokens::digit(count));
        task.answer = {tokens::digit(count)};
        break;
      }
      case Generator::Majority: {
        const auto majority = static_cast<std::uint32_t>(rng.below(kPalette.size()));
        const auto m = kMajorityMin + static_cast<std::uint32_t>(rng.below(kMajorityMax - kMajorityMin + 1));
        const std::uint32_t others = difficulty == 0 ? 1 : 2;
        std::vector<std::uint32_t> pool;
        for (std::uint32_t c = 0; c < kPalette.size(); ++c) {
          if (c != majority) pool.push_back(c);
        }
        std::vector<std::pair<std::uint32_t, std::uint32_t>> plan = {{majority, m}};
        for (std::uint32_t j = 0; j < others; ++j) {
          const auto pick = static_cast<std::size_t>(rng.below(pool.size()));
          const std::uint32_t c = pool[pick];
          pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
          plan.push_back({c, 1 + static_cast<std::uint32_t>(rng.below(m - 1))});
        }
        for (auto [color, n] : plan) {
          for (std::uint32_t i = 0; i < n && ok; ++i) ok = layout.place(layout.full(), color);
        }
        task.query = {tokens::kQueryMajority, tokens::difficulty(difficulty)};
        task.answer = {tokens::color(majority)};
        break;
      }
      case Generator::Compare: {
        const bool leftWins = rng.below(2) == 0;
        const auto more = 2 + static_cast<std::uint32_t>(rng.below(kCompareMax - 1));
        const auto fewer = 1 + static_cast<std::uint32_t>(rng.below(more - 1));
        const CountColors colors{difficulty, static_cast<std::uint32_t>(rng.below(kPalette.size()))};
        const std::uint32_t nLeft = leftWins ? more : fewer;
        const std::uint32_t nRight = leftWins ? fewer : more;
        for (std::uint32_t i = 0; i < nLeft && ok; ++i) ok = layout.place(layout.leftHalf(), colors.next(rng));
        for (std::uint32_t i = 0; i < nRight && ok; ++i) ok = layout.place(layout.rightHalf(), colors.next(rng));
        task.query = {tokens::kQueryCompare, tokens::difficulty(difficulty)};
        task.answer = {leftWins ? tokens::kLeft : tokens::kRight};
        break;
      }
    }
    if (ok) {
      task.image = layout.render();
      return task;
    }
  }
}

std::string toHex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 15]);
  }
  return out;
}

int hexValue(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  throw std::invalid_argument("dataset record: bad hex digit");
}

std::vector<std::uint8_t> fromHex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw std::invalid_argument("dataset record: odd-length hex image");
  std::vector<std::uint8_t> out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(hexValue(hex[2 * i]) << 4 | hexValue(hex[2 * i + 1]));
  }
  return out;
}

}  // namespace

std::string generatorName(Generator g) {
  switch (g) {
    case Generator::Count: return "COUNT";
    case Generator::Majority: return "MAJORITY";
    case Generator::Compare: return "COMPARE";
    case Generator::Shortcut: return "SHORTCUT";
  }
  return "?";
}

Generator parseGenerator(std::string_view name) {
  for (Generator g : {Generator::Count, Generator::Majority, Generator::Compare, Generator::Shortcut}) {
    if (name == generatorName(g)) return g;
  }
  throw UnknownGenerator("unknown generator: " + std::string(name));
}

std::string blindModeName(BlindMode m) {
  switch (m) {
    case BlindMode::Original: return "ORIGINAL";
    case BlindMode::Black: return "BLACK";
    case BlindMode::White: return "WHITE";
    case BlindMode::TextOnly: return "TEXT_ONLY";
  }
  return "?";
}

BlindMode parseBlindMode(std::string_view name) {
  for (BlindMode m : kAllBlindModes) {
    if (name == blindModeName(m)) return m;
  }
  throw std::invalid_argument("unknown blind mode: " + std::string(name));
}

Task genTask(std::string_view generator, std::uint64_t seed, std::uint32_t difficulty, const TaskGeometry& geometry) {
  const Generator gen = parseGenerator(generator);
  if (difficulty >= tokens::kDifficultyLevels) throw std::invalid_argument("genTask: difficulty must be 0, 1 or 2");
  if (geometry.height < kMinSide || geometry.width < kMinSide || geometry.channels == 0) {
    throw std::invalid_argument(fmt::format("genTask: images need at least {0}x{0} pixels and one channel", kMinSide));
  }
  return buildTask(gen, seed, difficulty, geometry);
}

Task blindVariant(const Task& task, BlindMode mode) {
  Task out = task;
  const TaskGeometry& g = task.meta.geometry;
  switch (mode) {
    case BlindMode::Original: break;
    case BlindMode::Black: out.image = ImageGrid(g.height, g.width, g.channels, 0.0f); break;
    case BlindMode::White: out.image = ImageGrid(g.height, g.width, g.channels, 1.0f); break;
    case BlindMode::TextOnly: out.image.reset(); break;
  }
  if (mode != BlindMode::Original) out.meta.blind = mode;
  return out;
}

bool verify(TokenSpan modelOutput, const Task& task) { return accuracyReward(modelOutput, task.answer) == 1.0; }

std::vector<std::pair<TokenId, double>> answerPrior(Generator generator, std::uint32_t difficulty) {
  (void)difficulty;  // the laws do not depend on difficulty
  std::vector<std::pair<TokenId, double>> prior;
  switch (generator) {
    case Generator::Count:
    case Generator::Shortcut:
      for (std::uint32_t c = kCountMin; c <= kCountMax; ++c) {
        prior.push_back({tokens::digit(c), 1.0 / (kCountMax - kCountMin + 1)});
      }
      break;
    case Generator::Majority:
      for (std::uint32_t c = 0; c < kPalette.size(); ++c) prior.push_back({tokens::color(c), 1.0 / kPalette.size()});
      break;
    case Generator::Compare:
      prior = {{tokens::kLeft, 0.5}, {tokens::kRight, 0.5}};
      break;
  }
  return prior;
}

double bestBlindAccuracy(std::span<const Task> tasks) {
  if (tasks.empty()) return 0.0;
  std::map<TokenSeq, std::map<TokenSeq, std::size_t>> table;
  for (const Task& t : tasks) ++table[t.query][t.answer];
  std::size_t hits = 0;
  for (const auto& [query, answers] : table) {
    std::size_t best = 0;
    for (const auto& [answer, n] : answers) best = std::max(best, n);
    hits += best;
  }
  return static_cast<double>(hits) / static_cast<double>(tasks.size());
}

std::string encodeTaskRecord(const Task& task) {
  json j;
  j["image"] = task.image ? json(toHex(encodeGrid(*task.image))) : json(nullptr);
  j["query"] = task.query;
  j["answer"] = task.answer;
  j["generator"] = task.meta.generator;
  j["seed"] = task.meta.seed;
  j["difficulty"] = task.meta.difficulty;
  j["height"] = task.meta.geometry.height;
  j["width"] = task.meta.geometry.width;
  j["channels"] = task.meta.geometry.channels;
  j["blind"] = blindModeName(task.meta.blind);
  return j.dump();
}

Task decodeTaskRecord(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("dataset record: ") + e.what());
  }
  try {
    Task t;
    if (!j.at("image").is_null()) t.image = decodeGrid(fromHex(j.at("image").get<std::string>()));
    t.query = j.at("query").get<TokenSeq>();
    t.answer = j.at("answer").get<TokenSeq>();
    t.meta.generator = j.at("generator").get<std::string>();
    t.meta.seed = j.at("seed").get<std::uint64_t>();
    t.meta.difficulty = j.at("difficulty").get<std::uint32_t>();
    t.meta.geometry.height = j.at("height").get<std::uint32_t>();
    t.meta.geometry.width = j.at("width").get<std::uint32_t>();
    t.meta.geometry.channels = j.at("channels").get<std::uint32_t>();
    t.meta.blind = parseBlindMode(j.at("blind").get<std::string>());
    if (t.answer.empty()) throw std::invalid_argument("dataset record: empty answer");
    return t;
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("dataset record: ") + e.what());
  }
}

void writeDataset(const std::filesystem::path& path, std::span<const Task> tasks) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const Task& t : tasks) out << encodeTaskRecord(t) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<Task> readDataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<Task> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) tasks.push_back(decodeTaskRecord(line));
  }
  return tasks;
}

std::vector<Task> generateTasks(std::string_view generator, std::uint64_t seed, std::size_t count,
                                std::uint32_t difficulty, const TaskGeometry& geometry) {
  std::vector<Task> tasks;
  tasks.reserve(count);
  for (std::size_t i = 0; i < count; ++i) tasks.push_back(genTask(generator, deriveSeed(seed, {i}), difficulty, geometry));
  return tasks;
}

}  // namespace dvrp
