#include "dvrp/checkpoint.hpp"

#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "dvrp/detail/bytes.hpp"

namespace dvrp {

namespace detail {

std::vector<std::uint8_t> readFileBytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("cannot open '{}' for reading", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void writeFileBytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error(fmt::format("cannot open '{}' for writing", path.string()));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error(fmt::format("failed writing '{}'", path.string()));
}

}  // namespace detail

namespace {

constexpr std::string_view kMagic = "DVRPCKPT";

void writeName(detail::ByteWriter& w, const std::string& name) {
  if (name.size() > UINT16_MAX) throw std::invalid_argument("checkpoint name too long");
  w.le<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.raw(name);
}

}  // namespace

std::optional<std::uint32_t> Checkpoint::field(std::string_view name) const {
  for (const auto& f : fields) {
    if (f.name == name) return f.value;
  }
  return std::nullopt;
}

void Checkpoint::setField(std::string name, std::uint32_t value) {
  for (auto& f : fields) {
    if (f.name == name) {
      f.value = value;
      return;
    }
  }
  fields.push_back({std::move(name), value});
}

std::vector<std::uint8_t> encodeCheckpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.raw(kMagic);
  w.le<std::uint32_t>(kCheckpointVersion);
  const auto& blocks = ckpt.params.blocks();
  w.le<std::uint32_t>(static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    writeName(w, b.name);
    w.le<std::uint64_t>(b.offset);
    w.le<std::uint64_t>(b.length);
  }
  w.le<std::uint32_t>(static_cast<std::uint32_t>(ckpt.fields.size()));
  for (const auto& f : ckpt.fields) {
    writeName(w, f.name);
    w.le<std::uint32_t>(f.value);
  }
  for (double v : ckpt.params.values()) w.le<double>(v);
  return w.take();
}

Checkpoint decodeCheckpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(kMagic.size()) != kMagic) throw std::runtime_error("not a checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion) throw std::runtime_error(fmt::format("unsupported checkpoint version {}", version));
  const auto blockCount = r.le<std::uint32_t>();
  std::vector<grad::ParamBlock> blocks;
  std::uint64_t total = 0;
  for (std::uint32_t i = 0; i < blockCount; ++i) {
    grad::ParamBlock b;
    b.name = r.raw(r.le<std::uint16_t>());
    b.offset = r.le<std::uint64_t>();
    b.length = r.le<std::uint64_t>();
    total += b.length;
    blocks.push_back(std::move(b));
  }
  Checkpoint ckpt;
  const auto fieldCount = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < fieldCount; ++i) {
    CheckpointField f;
    f.name = r.raw(r.le<std::uint16_t>());
    f.value = r.le<std::uint32_t>();
    ckpt.fields.push_back(std::move(f));
  }
  if (r.remaining() != total * sizeof(double)) {
    throw std::runtime_error(fmt::format("checkpoint declares {} values but carries {} bytes", total, r.remaining()));
  }
  std::vector<double> values(total);
  for (auto& v : values) v = r.le<double>();
  ckpt.params = grad::ParamVector(std::move(blocks), std::move(values));
  return ckpt;
}

void writeCheckpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  detail::writeFileBytes(path, encodeCheckpoint(ckpt));
}

Checkpoint readCheckpoint(const std::filesystem::path& path) { return decodeCheckpoint(detail::readFileBytes(path)); }

}  // namespace dvrp
