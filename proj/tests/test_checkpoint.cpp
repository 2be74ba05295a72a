#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>

#include "dvrp/checkpoint.hpp"
#include "support.hpp"

using namespace dvrp;

namespace {

void putU16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back(v >> 8);
}
void putU32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
void putU64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
void putStr(std::vector<std::uint8_t>& b, const std::string& s) {
  putU16(b, static_cast<std::uint16_t>(s.size()));
  b.insert(b.end(), s.begin(), s.end());
}

}  // namespace

TEST(Checkpoint, EncodingMatchesHandAssembledBytes) {
  Checkpoint c;
  c.params = grad::ParamVector({{"w", 0, 2}, {"b", 2, 1}}, {1.0, -0.0, 0.25});
  c.setField("step", 7);

  std::vector<std::uint8_t> want;
  for (char ch : std::string("DVRPCKPT")) want.push_back(static_cast<std::uint8_t>(ch));
  putU32(want, 1);
  putU32(want, 2);
  putStr(want, "w");
  putU64(want, 0);
  putU64(want, 2);
  putStr(want, "b");
  putU64(want, 2);
  putU64(want, 1);
  putU32(want, 1);
  putStr(want, "step");
  putU32(want, 7);
  for (double v : {1.0, -0.0, 0.25}) putU64(want, std::bit_cast<std::uint64_t>(v));

  EXPECT_EQ(encodeCheckpoint(c), want);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  dvrp::testing::Gen gen(8);
  for (std::uint64_t s = 0; s < 20; ++s) {
    Checkpoint c;
    const std::size_t blocks = gen.intIn(1, 4);
    for (std::size_t b = 0; b < blocks; ++b) {
      const auto off = c.params.addBlock("blk" + std::to_string(b), gen.intIn(0, 9));
      for (std::size_t i = 0; i < c.params.blockValues("blk" + std::to_string(b)).size(); ++i) {
        c.params.values()[off + i] = gen.normal() * std::pow(10.0, gen.intIn(0, 40) - 20.0);
      }
    }
    if (c.params.size() > 0) {
      c.params.values()[0] = std::numeric_limits<double>::quiet_NaN();
      c.params.values()[c.params.size() - 1] = -0.0;
    }
    c.setField("step", gen.intIn(0, 1000000));
    c.setField("adam_t", 0xffffffffu);
    const auto bytes = encodeCheckpoint(c);
    const Checkpoint back = decodeCheckpoint(bytes);
    EXPECT_TRUE(back.params.bitwiseEqual(c.params));
    EXPECT_EQ(back.fields, c.fields);
    EXPECT_EQ(encodeCheckpoint(back), bytes);
  }
}

TEST(Checkpoint, FieldsCanBeOverwritten) {
  Checkpoint c;
  c.setField("step", 1);
  c.setField("step", 2);
  EXPECT_EQ(c.fields.size(), 1u);
  EXPECT_EQ(c.field("step"), 2u);
  EXPECT_FALSE(c.field("missing").has_value());
}

TEST(Checkpoint, RejectsCorruptInput) {
  Checkpoint c;
  c.params = grad::ParamVector({{"w", 0, 3}}, {1.0, 2.0, 3.0});
  auto bytes = encodeCheckpoint(c);

  auto badMagic = bytes;
  badMagic[0] = 'X';
  EXPECT_THROW(decodeCheckpoint(badMagic), std::runtime_error);

  auto badVersion = bytes;
  badVersion[8] = 9;
  EXPECT_THROW(decodeCheckpoint(badVersion), std::runtime_error);

  auto truncated = bytes;
  truncated.pop_back();
  EXPECT_THROW(decodeCheckpoint(truncated), std::runtime_error);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(decodeCheckpoint(trailing), std::runtime_error);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "dvrp_ckpt_test";
  std::filesystem::create_directories(dir);
  Checkpoint c;
  c.params = grad::ParamVector({{"w", 0, 2}}, {0.1, 0.2});
  c.setField("step", 3);
  writeCheckpoint(dir / "a.ckpt", c);
  const Checkpoint back = readCheckpoint(dir / "a.ckpt");
  EXPECT_TRUE(back.params.bitwiseEqual(c.params));
  EXPECT_THROW(readCheckpoint(dir / "missing.ckpt"), std::runtime_error);
  std::filesystem::remove_all(dir);
}
