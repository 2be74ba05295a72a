#pragma once

// Procedural vision-grounded tasks. Each image shows non-overlapping square
// blobs on a grey background; the answer can only be read off the image
// (except for the SHORTCUT control, which leaks it into the query).
//
// Generators and their answer laws:
//   COUNT     count of blobs, uniform on 1..6           answer: digit
//   MAJORITY  most frequent blob colour, uniform on 4   answer: colour token
//   COMPARE   half with more blobs, uniform on 2        answer: left/right
//   SHORTCUT  COUNT with the answer digit appended to the query
// Difficulty 0 draws equal-size red COUNT blobs, 1 picks one colour per task,
// 2 mixes colours within an image and varies blob size between half and full.
// MAJORITY uses one distractor colour at difficulty 0 and two above it.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dvrp/tokens.hpp"
#include "dvrp/views.hpp"

namespace dvrp {

class UnknownGenerator : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Generator { Count, Majority, Compare, Shortcut };
std::string generatorName(Generator g);
Generator parseGenerator(std::string_view name);

enum class BlindMode { Original, Black, White, TextOnly };
std::string blindModeName(BlindMode m);
BlindMode parseBlindMode(std::string_view name);
inline constexpr BlindMode kAllBlindModes[] = {BlindMode::Original, BlindMode::Black, BlindMode::White,
                                               BlindMode::TextOnly};

struct TaskGeometry {
  std::uint32_t height = 56;
  std::uint32_t width = 56;
  std::uint32_t channels = 3;
  bool operator==(const TaskGeometry&) const = default;
};

struct TaskMeta {
  std::string generator;
  std::uint64_t seed = 0;
  std::uint32_t difficulty = 0;
  TaskGeometry geometry;
  BlindMode blind = BlindMode::Original;
};

struct Task {
  /// Absent for text-only input.
  std::optional<ImageGrid> image;
  TokenSeq query;
  TokenSeq answer;
  TaskMeta meta;

  const ImageGrid* imagePtr() const { return image ? &*image : nullptr; }
};

inline constexpr float kBackground = 0.5f;

/// Throws std::invalid_argument for images smaller than 16x16.
Task genTask(std::string_view generator, std::uint64_t seed, std::uint32_t difficulty,
             const TaskGeometry& geometry = {});

/// BLACK / WHITE replace the image by a constant 0 / 1 frame of the same
/// shape, TEXT_ONLY drops it. Query and answer are unchanged.
Task blindVariant(const Task& task, BlindMode mode);

bool verify(TokenSpan modelOutput, const Task& task);

/// Answer law of a generator given only its query: (answer token, probability).
/// For SHORTCUT the query determines the answer, so the law per query is a
/// point mass; the returned list is the marginal.
std::vector<std::pair<TokenId, double>> answerPrior(Generator generator, std::uint32_t difficulty);

/// Accuracy of the best predictor that sees only the query: for each distinct
/// query, predict the most frequent answer among `tasks` with that query.
double bestBlindAccuracy(std::span<const Task> tasks);

// Dataset records: one JSON object per line with keys image (hex of the .grid
// bytes, or null when absent), query, answer, generator, seed, difficulty,
// height, width, channels, blind.
std::string encodeTaskRecord(const Task& task);
Task decodeTaskRecord(std::string_view line);
void writeDataset(const std::filesystem::path& path, std::span<const Task> tasks);
std::vector<Task> readDataset(const std::filesystem::path& path);

/// count tasks with seeds derived from `seed`; task i uses deriveSeed(seed, {i}).
std::vector<Task> generateTasks(std::string_view generator, std::uint64_t seed, std::size_t count,
                                std::uint32_t difficulty, const TaskGeometry& geometry = {});

}  // namespace dvrp
