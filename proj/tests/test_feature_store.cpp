#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "support.hpp"

using namespace patternmine;

TEST(Normalize, ScalesToUnitNorm) {
  FeatureMap m(1.0f, 1, 1, 2);
  m.values = {3, 4};
  const auto n = l2_normalize_map(m);
  EXPECT_NEAR(n.values[0], 0.6f, 1e-7);
  EXPECT_NEAR(n.values[1], 0.8f, 1e-7);
}

TEST(Normalize, ZeroCellStaysZero) {
  FeatureMap m(1.0f, 1, 2, 2);
  m.values = {0, 0, 1, 1};
  const auto n = l2_normalize_map(m);
  EXPECT_EQ(n.values[0], 0.0f);
  EXPECT_EQ(n.values[1], 0.0f);
}

TEST(Normalize, RejectsNonFinite) {
  FeatureMap m(1.0f, 1, 1, 2);
  m.values = {1, std::numeric_limits<float>::quiet_NaN()};
  try {
    l2_normalize_map(m);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.kind(), FormatErrorKind::NonFinite);
  }
}

TEST(Normalize, IdempotentOnRandomMaps) {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> d(0, 5);
  for (int t = 0; t < 50; ++t) {
    FeatureMap m(1.0f, 4, 5, 7);
    for (auto& v : m.values) v = d(rng);
    const auto once = l2_normalize_map(m);
    const auto twice = l2_normalize_map(once);
    for (std::size_t i = 0; i < once.values.size(); ++i) EXPECT_NEAR(once.values[i], twice.values[i], 1e-7);
    for (int r = 0; r < m.height; ++r)
      for (int c = 0; c < m.width; ++c) EXPECT_NEAR(dot(once.cell(r, c), once.cell(r, c)), 1.0, 1e-5);
  }
}

TEST(Scales, SevenOverTwoOctaves) {
  const std::vector<double> expected{1, 0.7937, 0.6300, 0.5, 0.3969, 0.3150, 0.25};
  const auto s = default_scales(7, 3);
  ASSERT_EQ(s.size(), expected.size());
  for (std::size_t k = 0; k < s.size(); ++k) EXPECT_NEAR(s[k], expected[k], 1e-4);
}

TEST(Scales, EdgeCounts) {
  EXPECT_EQ(default_scales(1, 3), std::vector<double>{1.0});
  const auto s = default_scales(4, 1);
  ASSERT_EQ(s.size(), 4u);
  for (int k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(s[k], std::ldexp(1.0, -k));
  EXPECT_THROW(default_scales(0, 3), PreconditionError);
}

TEST(Amfp, RoundTripIsBitExact) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 20; ++t) {
    auto p = pmtest::random_pyramid(rng, "", 3 + t % 5, 4 + t % 3, 1 + t % 9, 1 + t % 4);
    const auto bytes = encode_pyramid(p);
    const auto q = decode_pyramid(bytes);
    ASSERT_EQ(q.maps.size(), p.maps.size());
    for (std::size_t s = 0; s < p.maps.size(); ++s) {
      EXPECT_EQ(q.maps[s].height, p.maps[s].height);
      EXPECT_EQ(q.maps[s].width, p.maps[s].width);
      EXPECT_EQ(q.maps[s].scale_factor, p.maps[s].scale_factor);
      EXPECT_EQ(std::memcmp(q.maps[s].values.data(), p.maps[s].values.data(), p.maps[s].values.size() * 4), 0);
    }
  }
}

TEST(Amfp, FileRoundTrip) {
  std::mt19937_64 rng(6);
  const auto p = pmtest::random_pyramid(rng, "", 6, 5, 11, 2);
  const auto dir = pmtest::scratch_dir("amfp");
  write_pyramid_file(dir / "a.amfp", p);
  EXPECT_EQ(read_pyramid_file(dir / "a.amfp"), p);
}

TEST(Amfp, HeaderLayout) {
  FeaturePyramid p;
  p.maps.push_back(FeatureMap(0.5f, 1, 2, 3));
  const auto b = encode_pyramid(p);
  ASSERT_EQ(b.size(), 4u + 3 * 4 + 3 * 4 + 1 * 2 * 3 * 4);
  EXPECT_EQ(std::string(b.data(), 4), "AMFP");
  std::uint32_t v[3];
  std::memcpy(v, b.data() + 4, 12);
  EXPECT_EQ(v[0], 1u);
  EXPECT_EQ(v[1], 3u);
  EXPECT_EQ(v[2], 1u);
  float scale;
  std::memcpy(&scale, b.data() + 16, 4);
  EXPECT_EQ(scale, 0.5f);
}

namespace {

FormatErrorKind decode_error(const std::vector<char>& bytes) {
  try {
    decode_pyramid(bytes);
  } catch (const FormatError& e) {
    return e.kind();
  }
  return FormatErrorKind::Io;
}

} // namespace

TEST(Amfp, DistinctErrors) {
  std::mt19937_64 rng(7);
  const auto good = encode_pyramid(pmtest::random_pyramid(rng, "", 3, 3, 4, 2));

  auto magic = good;
  std::memcpy(magic.data(), "XXXX", 4);
  EXPECT_EQ(decode_error(magic), FormatErrorKind::BadMagic);

  auto version = good;
  const std::uint32_t two = 2;
  std::memcpy(version.data() + 4, &two, 4);
  EXPECT_EQ(decode_error(version), FormatErrorKind::VersionMismatch);

  auto truncated = good;
  truncated.resize(truncated.size() - 3);
  EXPECT_EQ(decode_error(truncated), FormatErrorKind::Truncated);

  auto nan = good;
  const float bad = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + 4 + 12 + 12, &bad, 4);
  EXPECT_EQ(decode_error(nan), FormatErrorKind::NonFinite);
}

TEST(Manifest, RoundTripAndValidation) {
  const auto dir = pmtest::scratch_dir("manifest");
  std::vector<ImageManifestEntry> entries{{"a", "a.png", 640, 480, "a.amfp"}, {"b", "b.png", 10, 20, "b.amfp"}};
  write_manifest(dir / "m.jsonl", entries);
  const auto back = read_manifest(dir / "m.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].image_id, "b");
  EXPECT_EQ(back[1].pixel_height, 20);

  entries.push_back(entries[0]);
  write_manifest(dir / "dup.jsonl", entries);
  EXPECT_THROW(read_manifest(dir / "dup.jsonl"), DataError);
  EXPECT_THROW(read_manifest(dir / "missing.jsonl"), DataError);
}

TEST(Collection, LoadsAndNormalizes) {
  const auto dir = pmtest::scratch_dir("collection");
  FeaturePyramid p;
  p.maps.push_back(FeatureMap(1.0f, 2, 2, 2));
  p.maps[0].values = {3, 4, 0, 0, 1, 0, 0, 2};
  write_pyramid_file(dir / "p" / "x.amfp", p);
  write_manifest(dir / "m.jsonl", {{"x", "", 32, 32, "p/x.amfp"}});
  const auto col = load_collection(dir / "m.jsonl");
  ASSERT_EQ(col.size(), 1u);
  EXPECT_EQ(col.pyramids[0].image_id, "x");
  EXPECT_NEAR(col.pyramids[0].maps[0].values[0], 0.6f, 1e-7);
  EXPECT_EQ(col.pyramids[0].maps[0].values[2], 0.0f);
  EXPECT_EQ(col.index_of("x"), 0u);
  EXPECT_THROW(col.index_of("y"), DataError);
  EXPECT_DOUBLE_EQ(col.px_per_cell(0, 0), 16.0);
}
