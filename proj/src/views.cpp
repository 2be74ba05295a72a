#include "dvrp/views.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "dvrp/detail/bytes.hpp"
#include "dvrp/rng.hpp"

namespace dvrp {

namespace {

constexpr std::string_view kGridMagic = "DVRPGRID";

std::uint64_t maskSeed(std::uint64_t seed) { return deriveSeed(seed, {1}); }
std::uint64_t noiseSeed(std::uint64_t seed, std::uint64_t member) { return deriveSeed(seed, {2, member}); }

}  // namespace

bool ImageGrid::bitwiseEqual(const ImageGrid& o) const {
  return sameShape(o) && data.size() == o.data.size() &&
         (data.empty() || std::memcmp(data.data(), o.data.data(), data.size() * sizeof(float)) == 0);
}

void ImageGrid::validate() const {
  if (data.size() != static_cast<std::size_t>(height) * width * channels) {
    throw std::invalid_argument(
        fmt::format("image {}x{}x{} carries {} values", height, width, channels, data.size()));
  }
  if (!std::all_of(data.begin(), data.end(), [](float v) { return std::isfinite(v); })) {
    throw std::invalid_argument("image contains non-finite values");
  }
}

std::vector<std::uint8_t> encodeGrid(const ImageGrid& image) {
  image.validate();
  detail::ByteWriter w;
  w.raw(kGridMagic);
  w.le<std::uint32_t>(kGridVersion);
  w.le<std::uint32_t>(image.height);
  w.le<std::uint32_t>(image.width);
  w.le<std::uint32_t>(image.channels);
  for (float v : image.data) w.le<float>(v);
  return w.take();
}

ImageGrid decodeGrid(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(kGridMagic.size()) != kGridMagic) throw std::runtime_error("not a grid file (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kGridVersion) throw std::runtime_error(fmt::format("unsupported grid version {}", version));
  const auto h = r.le<std::uint32_t>();
  const auto w = r.le<std::uint32_t>();
  const auto c = r.le<std::uint32_t>();
  const std::size_t n = static_cast<std::size_t>(h) * w * c;
  if (r.remaining() != n * sizeof(float)) {
    throw std::runtime_error(fmt::format("grid {}x{}x{} needs {} bytes, found {}", h, w, c, n * 4, r.remaining()));
  }
  ImageGrid image(h, w, c);
  for (auto& v : image.data) v = r.le<float>();
  return image;
}

void writeGrid(const std::filesystem::path& path, const ImageGrid& image) {
  detail::writeFileBytes(path, encodeGrid(image));
}

ImageGrid readGrid(const std::filesystem::path& path) { return decodeGrid(detail::readFileBytes(path)); }

void PerturbConfig::validate() const {
  if (!(pMask >= 0.0 && pMask <= 1.0)) throw std::invalid_argument(fmt::format("pMask {} outside [0, 1]", pMask));
  if (patchSize < 1) throw std::invalid_argument("patchSize must be >= 1");
  if (tInit == 0 || tMax == 0) throw std::invalid_argument("tInit and tMax must be positive");
  if (!(gamma > 0.0)) throw std::invalid_argument("gamma must be positive");
}

std::vector<std::string> PerturbConfig::warnings() const {
  std::vector<std::string> out;
  if (tInit > tMax) {
    out.push_back(fmt::format("tInit {} exceeds tMax {}; beta is clamped at 1 early in training", tInit, tMax));
  }
  return out;
}

std::size_t PatchMask::maskedCount() const { return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true)); }

std::string PatchMask::toText() const {
  std::string out;
  for (std::uint32_t r = 0; r < rows; ++r) {
    for (std::uint32_t c = 0; c < cols; ++c) {
      if (c) out += ' ';
      out += at(r, c) ? '1' : '0';
    }
    out += '\n';
  }
  return out;
}

MaskResult maskPatches(const ImageGrid& image, const PerturbConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::uint32_t p = cfg.patchSize;
  MaskResult result{image, {}};
  result.bitmap.rows = (image.height + p - 1) / p;
  result.bitmap.cols = (image.width + p - 1) / p;
  result.bitmap.masked.assign(static_cast<std::size_t>(result.bitmap.rows) * result.bitmap.cols, false);

  const CounterRng rng(seed);
  for (std::uint32_t pr = 0; pr < result.bitmap.rows; ++pr) {
    for (std::uint32_t pc = 0; pc < result.bitmap.cols; ++pc) {
      const std::size_t id = static_cast<std::size_t>(pr) * result.bitmap.cols + pc;
      if (!(rng.uniformAt(id) < cfg.pMask)) continue;
      result.bitmap.masked[id] = true;
      const std::uint32_t y1 = std::min(image.height, (pr + 1) * p);
      const std::uint32_t x1 = std::min(image.width, (pc + 1) * p);
      for (std::uint32_t y = pr * p; y < y1; ++y) {
        for (std::uint32_t x = pc * p; x < x1; ++x) {
          for (std::uint32_t c = 0; c < image.channels; ++c) result.image.at(y, x, c) = cfg.maskFill;
        }
      }
    }
  }
  return result;
}

ImageGrid diffuseNoise(const ImageGrid& image, double beta, std::uint64_t seed) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw InvalidBeta(fmt::format("beta {} outside [0, 1]", beta));
  if (beta == 0.0) return image;
  const double signal = std::sqrt(1.0 - beta);
  const double noise = std::sqrt(beta);
  const CounterRng rng(seed);
  ImageGrid out(image.height, image.width, image.channels);
  const std::size_t n = image.data.size();
  for (std::size_t i = 0; i < n; i += 2) {
    const auto eps = rng.normalPairAt(i >> 1);
    out.data[i] = static_cast<float>(signal * image.data[i] + noise * eps[0]);
    if (i + 1 < n) out.data[i + 1] = static_cast<float>(signal * image.data[i + 1] + noise * eps[1]);
  }
  return out;
}

double scheduleTimestep(std::uint64_t k, std::uint64_t totalSteps, double tInit, double gamma) {
  if (totalSteps < 1 || k > totalSteps) {
    throw std::invalid_argument(fmt::format("schedule step {} outside [0, {}]", k, totalSteps));
  }
  const double progress = static_cast<double>(k) / static_cast<double>(totalSteps);
  const double x = gamma * (0.5 - progress);
  return tInit / (1.0 + std::exp(-x));
}

double betaFromTimestep(double t, double tMax) {
  if (!(t >= 0.0) || !(tMax > 0.0)) throw std::invalid_argument("betaFromTimestep needs t >= 0 and tMax > 0");
  return std::min(t / tMax, 1.0);
}

double annealedBeta(std::uint64_t k, std::uint64_t totalSteps, const PerturbConfig& cfg) {
  return betaFromTimestep(scheduleTimestep(k, totalSteps, cfg.tInit, cfg.gamma), cfg.tMax);
}

std::vector<ViewTriplet> makeGroupTriplets(const ImageGrid& image, const PerturbConfig& cfg, std::uint64_t k,
                                           std::uint64_t totalSteps, std::uint64_t seed, std::size_t members) {
  image.validate();
  cfg.validate();
  const double beta = annealedBeta(k, totalSteps, cfg);
  auto masked = maskPatches(image, cfg, maskSeed(seed));
  std::vector<ViewTriplet> out;
  out.reserve(members);
  for (std::size_t m = 0; m < members; ++m) {
    ViewTriplet t;
    t.original = image;
    t.masked = masked.image;
    t.maskBitmap = masked.bitmap;
    t.noised = diffuseNoise(image, beta, noiseSeed(seed, m));
    t.beta = beta;
    t.seed = seed;
    out.push_back(std::move(t));
  }
  return out;
}

ViewTriplet makeTriplet(const ImageGrid& image, const PerturbConfig& cfg, std::uint64_t k, std::uint64_t totalSteps,
                        std::uint64_t seed) {
  return std::move(makeGroupTriplets(image, cfg, k, totalSteps, seed, 1).front());
}

std::vector<double> meanPatch(const ImageGrid& image, std::uint32_t patchSize) {
  if (patchSize < 1) throw std::invalid_argument("patchSize must be >= 1");
  const std::uint32_t p = patchSize;
  const std::uint32_t gridRows = (image.height + p - 1) / p;
  const std::uint32_t gridCols = (image.width + p - 1) / p;
  const std::size_t dim = static_cast<std::size_t>(p) * p * image.channels;
  std::vector<double> out(dim, 0.0);
  for (std::uint32_t pr = 0; pr < gridRows; ++pr) {
    for (std::uint32_t pc = 0; pc < gridCols; ++pc) {
      for (std::uint32_t dy = 0; dy < p; ++dy) {
        const std::uint32_t y = pr * p + dy;
        if (y >= image.height) break;
        for (std::uint32_t dx = 0; dx < p; ++dx) {
          const std::uint32_t x = pc * p + dx;
          if (x >= image.width) break;
          const std::size_t base = (static_cast<std::size_t>(dy) * p + dx) * image.channels;
          for (std::uint32_t c = 0; c < image.channels; ++c) out[base + c] += image.at(y, x, c);
        }
      }
    }
  }
  const double patches = static_cast<double>(gridRows) * gridCols;
  if (patches > 0) {
    for (auto& v : out) v /= patches;
  }
  return out;
}

}  // namespace dvrp
