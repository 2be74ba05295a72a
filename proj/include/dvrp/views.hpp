#pragma once

// Image grids and the three-view construction: the untouched image, a
// patch-masked copy, and a variance-preserving noised copy whose intensity
// follows a sigmoid annealing schedule over training.

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dvrp {

/// Dense H x W x C image, row-major in (row, column, channel) order.
struct ImageGrid {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<float> data;

  ImageGrid() = default;
  ImageGrid(std::uint32_t h, std::uint32_t w, std::uint32_t c, float fill = 0.0f)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t index(std::uint32_t y, std::uint32_t x, std::uint32_t c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(std::uint32_t y, std::uint32_t x, std::uint32_t c) { return data[index(y, x, c)]; }
  float at(std::uint32_t y, std::uint32_t x, std::uint32_t c) const { return data[index(y, x, c)]; }

  bool sameShape(const ImageGrid& o) const { return height == o.height && width == o.width && channels == o.channels; }
  bool bitwiseEqual(const ImageGrid& o) const;
  /// Throws std::invalid_argument on a size mismatch or non-finite value.
  void validate() const;
};

// ".grid" file: "DVRPGRID" | u32 version | u32 H | u32 W | u32 C | H*W*C f32, all little-endian.
inline constexpr std::uint32_t kGridVersion = 1;
std::vector<std::uint8_t> encodeGrid(const ImageGrid& image);
ImageGrid decodeGrid(std::span<const std::uint8_t> bytes);
void writeGrid(const std::filesystem::path& path, const ImageGrid& image);
ImageGrid readGrid(const std::filesystem::path& path);

class InvalidBeta : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct PerturbConfig {
  double pMask = 0.6;
  std::uint32_t patchSize = 14;
  std::uint32_t tInit = 500;
  std::uint32_t tMax = 1000;
  double gamma = 10.0;
  float maskFill = 0.0f;

  void validate() const;
  /// Non-fatal issues, currently only tInit > tMax (beta then saturates at 1).
  std::vector<std::string> warnings() const;

  static PerturbConfig mathDomain() { return {}; }
  static PerturbConfig medicalDomain() {
    PerturbConfig c;
    c.pMask = 0.2;
    c.tInit = 100;
    return c;
  }
};

/// Patch grid of ceil(H / patch) x ceil(W / patch) flags.
struct PatchMask {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;
  std::vector<bool> masked;

  bool at(std::uint32_t r, std::uint32_t c) const { return masked[static_cast<std::size_t>(r) * cols + c]; }
  std::size_t maskedCount() const;
  /// One line per patch row, '0'/'1' separated by single spaces.
  std::string toText() const;
};

struct MaskResult {
  ImageGrid image;
  PatchMask bitmap;
};

/// Independent Bernoulli(pMask) per patch; masked patches take maskFill in every channel.
MaskResult maskPatches(const ImageGrid& image, const PerturbConfig& cfg, std::uint64_t seed);

/// sqrt(1 - beta) * image + sqrt(beta) * eps, eps ~ N(0, 1) per element. Not clamped.
ImageGrid diffuseNoise(const ImageGrid& image, double beta, std::uint64_t seed);

/// tInit * sigmoid(gamma * (0.5 - k / K)).
double scheduleTimestep(std::uint64_t k, std::uint64_t totalSteps, double tInit, double gamma);

/// min(t / tMax, 1).
double betaFromTimestep(double t, double tMax);

/// Noise intensity used at optimizer step k of K.
double annealedBeta(std::uint64_t k, std::uint64_t totalSteps, const PerturbConfig& cfg);

struct ViewTriplet {
  ImageGrid original;
  ImageGrid masked;
  ImageGrid noised;
  PatchMask maskBitmap;
  double beta = 0.0;
  std::uint64_t seed = 0;
};

ViewTriplet makeTriplet(const ImageGrid& image, const PerturbConfig& cfg, std::uint64_t k, std::uint64_t totalSteps,
                        std::uint64_t seed);

/// One triplet per group member: the mask is shared, the noise is drawn
/// independently for each member. Member 0 equals makeTriplet(...).
std::vector<ViewTriplet> makeGroupTriplets(const ImageGrid& image, const PerturbConfig& cfg, std::uint64_t k,
                                           std::uint64_t totalSteps, std::uint64_t seed, std::size_t members);

/// Mean over the patch grid of the flattened (patch x patch x C) patch
/// vectors; pixels beyond the image edge count as zero.
std::vector<double> meanPatch(const ImageGrid& image, std::uint32_t patchSize);

}  // namespace dvrp
