#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "patternmine/error.hpp"

namespace patternmine {

static_assert(std::endian::native == std::endian::little, "AMFP I/O assumes a little-endian host");

inline constexpr int kDefaultCellStride = 16;
inline constexpr int kDefaultNumScales = 7;
inline constexpr int kDefaultScalesPerOctave = 3;
inline constexpr int kDefaultBaseMaxDim = 40;

/// Cell position inside one map of a pyramid.
struct GridPos {
  int scale_index = 0;
  int row = 0;
  int col = 0;

  friend auto operator<=>(const GridPos&, const GridPos&) = default;
};

/// H x W grid of C-dimensional feature vectors, stored [row][col][channel].
struct FeatureMap {
  float scale_factor = 1.0f;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> values;

  FeatureMap() = default;
  FeatureMap(float scale, int h, int w, int c)
      : scale_factor(scale), height(h), width(w), channels(c),
        values(static_cast<std::size_t>(h) * w * c, 0.0f) {}

  std::size_t cell_count() const { return static_cast<std::size_t>(height) * width; }
  bool contains(int row, int col) const { return row >= 0 && col >= 0 && row < height && col < width; }

  std::span<float> cell(int row, int col) {
    return {values.data() + (static_cast<std::size_t>(row) * width + col) * channels,
            static_cast<std::size_t>(channels)};
  }
  std::span<const float> cell(int row, int col) const {
    return {values.data() + (static_cast<std::size_t>(row) * width + col) * channels,
            static_cast<std::size_t>(channels)};
  }

  friend bool operator==(const FeatureMap&, const FeatureMap&) = default;
};

/// Multi-scale stack of feature maps for one image; scales strictly decreasing.
struct FeaturePyramid {
  std::string image_id;
  std::vector<FeatureMap> maps;
  int cell_stride_px = kDefaultCellStride;

  int channels() const { return maps.empty() ? 0 : maps.front().channels; }
  int num_scales() const { return static_cast<int>(maps.size()); }
  const FeatureMap& base() const { return maps.front(); }

  std::span<const float> cell(const GridPos& p) const { return maps[p.scale_index].cell(p.row, p.col); }
  bool contains(const GridPos& p) const {
    return p.scale_index >= 0 && p.scale_index < num_scales() && maps[p.scale_index].contains(p.row, p.col);
  }

  friend bool operator==(const FeaturePyramid&, const FeaturePyramid&) = default;
};

inline double dot(std::span<const float> a, std::span<const float> b) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Scales a vector to unit L2 norm in place; all-zero vectors stay zero.
inline void l2_normalize(std::span<float> v) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * x;
  if (sq <= 0.0) return;
  const double inv = 1.0 / std::sqrt(sq);
  for (float& x : v) x = static_cast<float>(x * inv);
}

inline void check_finite(const FeatureMap& map) {
  for (float v : map.values)
    if (!std::isfinite(v)) throw FormatError(FormatErrorKind::NonFinite, "feature map contains NaN or Inf");
}

[[nodiscard]] inline FeatureMap l2_normalize_map(FeatureMap map) {
  check_finite(map);
  for (int r = 0; r < map.height; ++r)
    for (int c = 0; c < map.width; ++c) l2_normalize(map.cell(r, c));
  return map;
}

[[nodiscard]] inline FeaturePyramid l2_normalize_pyramid(FeaturePyramid p) {
  for (auto& m : p.maps) m = l2_normalize_map(std::move(m));
  return p;
}

/// Scale factors 2^(-k / per_octave) for k = 0 .. num_scales-1.
inline std::vector<double> default_scales(int num_scales = kDefaultNumScales,
                                          int per_octave = kDefaultScalesPerOctave) {
  if (num_scales < 1 || per_octave < 1) throw PreconditionError("default_scales: counts must be >= 1");
  std::vector<double> out(num_scales);
  for (int k = 0; k < num_scales; ++k) out[k] = std::exp2(-static_cast<double>(k) / per_octave);
  return out;
}

// ---------------------------------------------------------------------------
// AMFP binary format (little-endian):
//   "AMFP" u32 version=1, u32 C, u32 num_scales,
//   per scale: f32 scale_factor, u32 H, u32 W, H*W*C f32 [row][col][channel]
// ---------------------------------------------------------------------------

inline constexpr char kAmfpMagic[4] = {'A', 'M', 'F', 'P'};
inline constexpr std::uint32_t kAmfpVersion = 1;

namespace detail {

template <typename T>
void put(std::vector<char>& buf, T v) {
  const auto* p = reinterpret_cast<const char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

class ByteReader {
public:
  ByteReader(std::span<const char> data, std::string source) : data_(data), source_(std::move(source)) {}

  template <typename T>
  T get() {
    require(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  void read_floats(std::span<float> out) {
    require(out.size_bytes());
    std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  void require(std::size_t n) const {
    if (data_.size() - pos_ < n)
      throw FormatError(FormatErrorKind::Truncated,
                        source_ + ": need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_));
  }

private:
  std::span<const char> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorKind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError(FormatErrorKind::Io, "short write to " + path.string());
}

} // namespace detail

inline std::vector<char> encode_pyramid(const FeaturePyramid& p) {
  std::vector<char> buf(kAmfpMagic, kAmfpMagic + 4);
  detail::put<std::uint32_t>(buf, kAmfpVersion);
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.channels()));
  detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(p.maps.size()));
  for (const auto& m : p.maps) {
    if (m.channels != p.channels()) throw DimensionError("encode_pyramid: maps disagree on channel count");
    detail::put<float>(buf, m.scale_factor);
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.height));
    detail::put<std::uint32_t>(buf, static_cast<std::uint32_t>(m.width));
    const auto* raw = reinterpret_cast<const char*>(m.values.data());
    buf.insert(buf.end(), raw, raw + m.values.size() * sizeof(float));
  }
  return buf;
}

inline FeaturePyramid decode_pyramid(std::span<const char> bytes, const std::string& source = "<memory>") {
  detail::ByteReader in(bytes, source);
  in.require(4);
  if (std::memcmp(bytes.data(), kAmfpMagic, 4) != 0)
    throw FormatError(FormatErrorKind::BadMagic, source + ": expected \"AMFP\"");
  in.get<std::uint32_t>();
  const auto version = in.get<std::uint32_t>();
  if (version != kAmfpVersion)
    throw FormatError(FormatErrorKind::VersionMismatch, source + ": version " + std::to_string(version));
  const auto channels = in.get<std::uint32_t>();
  const auto num_scales = in.get<std::uint32_t>();

  FeaturePyramid p;
  p.maps.reserve(num_scales);
  for (std::uint32_t s = 0; s < num_scales; ++s) {
    const auto scale = in.get<float>();
    const auto h = in.get<std::uint32_t>();
    const auto w = in.get<std::uint32_t>();
    const std::uint64_t count = std::uint64_t{h} * w * channels;
    in.require(count * sizeof(float));
    FeatureMap m(scale, static_cast<int>(h), static_cast<int>(w), static_cast<int>(channels));
    in.read_floats(m.values);
    for (float v : m.values)
      if (std::isnan(v) || std::isinf(v))
        throw FormatError(FormatErrorKind::NonFinite, source + ": scale " + std::to_string(s));
    p.maps.push_back(std::move(m));
  }
  return p;
}

inline void write_pyramid_file(const std::filesystem::path& path, const FeaturePyramid& p) {
  detail::write_file_bytes(path, encode_pyramid(p));
}

/// Reads an AMFP file. The file carries no image id; the caller assigns it.
inline FeaturePyramid read_pyramid_file(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  return decode_pyramid(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Manifest (JSON lines)
// ---------------------------------------------------------------------------

struct ImageManifestEntry {
  std::string image_id;
  std::string source_path;
  int pixel_width = 0;
  int pixel_height = 0;
  std::string pyramid_path;
};

inline void to_json(nlohmann::json& j, const ImageManifestEntry& e) {
  j = nlohmann::json{{"image_id", e.image_id},
                     {"source_path", e.source_path},
                     {"pixel_width", e.pixel_width},
                     {"pixel_height", e.pixel_height},
                     {"pyramid_path", e.pyramid_path}};
}

inline void from_json(const nlohmann::json& j, ImageManifestEntry& e) {
  e.image_id = j.at("image_id").get<std::string>();
  e.source_path = j.value("source_path", "");
  e.pixel_width = j.at("pixel_width").get<int>();
  e.pixel_height = j.at("pixel_height").get<int>();
  e.pyramid_path = j.value("pyramid_path", "");
}

inline void validate_manifest(const std::vector<ImageManifestEntry>& entries) {
  std::unordered_set<std::string> seen;
  for (const auto& e : entries) {
    if (e.image_id.empty()) throw DataError("manifest: empty image_id");
    if (!seen.insert(e.image_id).second) throw DataError("manifest: duplicate image_id '" + e.image_id + "'");
    if (e.pixel_width <= 0 || e.pixel_height <= 0)
      throw DataError("manifest: non-positive dimensions for '" + e.image_id + "'");
  }
}

inline std::vector<ImageManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<ImageManifestEntry> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<ImageManifestEntry>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  validate_manifest(out);
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const std::vector<ImageManifestEntry>& entries) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : entries) out << nlohmann::json(e).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Collection: manifest entries with their loaded pyramids
// ---------------------------------------------------------------------------

struct Collection {
  std::vector<ImageManifestEntry> entries;
  std::vector<FeaturePyramid> pyramids;

  std::size_t size() const { return pyramids.size(); }

  // Original-image pixels covered by one cell edge at the given scale. The
  // longest image side maps onto the longest side of the base map.
  double px_per_cell(std::size_t image, int scale_index) const {
    const auto& e = entries[image];
    const auto& base = pyramids[image].base();
    const double longest_px = std::max(e.pixel_width, e.pixel_height);
    const double longest_cells = std::max(base.width, base.height);
    return longest_px / (longest_cells * pyramids[image].maps[scale_index].scale_factor);
  }

  // Original pixels per base-frame pixel (base frame: base map at cell_stride_px per cell).
  double px_per_base_px(std::size_t image) const {
    return px_per_cell(image, 0) / pyramids[image].cell_stride_px;
  }

  std::size_t index_of(const std::string& id) const {
    for (std::size_t i = 0; i < entries.size(); ++i)
      if (entries[i].image_id == id) return i;
    throw DataError("unknown image id '" + id + "'");
  }
};

inline std::filesystem::path resolve_relative(const std::filesystem::path& base_dir, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

/// Loads and normalizes every pyramid referenced by a manifest; relative
/// pyramid paths resolve against the manifest's directory.
inline Collection load_collection(const std::filesystem::path& manifest_path) {
  Collection col;
  col.entries = read_manifest(manifest_path);
  const auto dir = manifest_path.parent_path();
  for (const auto& e : col.entries) {
    if (e.pyramid_path.empty()) throw DataError("manifest entry '" + e.image_id + "' has no pyramid_path");
    auto p = read_pyramid_file(resolve_relative(dir, e.pyramid_path));
    p.image_id = e.image_id;
    col.pyramids.push_back(l2_normalize_pyramid(std::move(p)));
  }
  return col;
}

} // namespace patternmine
