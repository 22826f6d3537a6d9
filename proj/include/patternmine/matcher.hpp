#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "patternmine/box.hpp"
#include "patternmine/error.hpp"
#include "patternmine/feature_store.hpp"
#include "patternmine/parallel.hpp"

namespace patternmine {

/// h x w block of per-cell normalized features used as a correlation kernel.
struct QueryPatch {
  std::string source_image_id;
  GridPos origin;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> cells;

  std::span<const float> cell(int row, int col) const {
    return {cells.data() + (static_cast<std::size_t>(row) * width + col) * channels,
            static_cast<std::size_t>(channels)};
  }
};

inline QueryPatch make_query(const FeaturePyramid& p, const GridPos& origin, int height, int width) {
  const auto& map = p.maps.at(origin.scale_index);
  if (height < 1 || width < 1 || !map.contains(origin.row, origin.col) ||
      !map.contains(origin.row + height - 1, origin.col + width - 1))
    throw PreconditionError("make_query: patch out of bounds");
  QueryPatch q{p.image_id, origin, height, width, map.channels, {}};
  q.cells.reserve(static_cast<std::size_t>(height) * width * map.channels);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      auto v = map.cell(origin.row + r, origin.col + c);
      q.cells.insert(q.cells.end(), v.begin(), v.end());
    }
  return q;
}

inline QueryPatch make_query(const FeatureMap& map, std::string source_id = {}) {
  return {std::move(source_id), {}, map.height, map.width, map.channels, map.values};
}

struct SimilarityMap {
  std::string target_image_id;
  int scale_index = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;

  float at(int row, int col) const { return values[static_cast<std::size_t>(row) * width + col]; }
};

/// Mean per-cell cosine of the query at one map, for every valid placement.
inline SimilarityMap similarity_at_scale(const QueryPatch& q, const FeatureMap& map) {
  SimilarityMap out;
  out.height = map.height - q.height + 1;
  out.width = map.width - q.width + 1;
  if (out.height <= 0 || out.width <= 0) return out;
  std::vector<double> acc(static_cast<std::size_t>(out.height) * out.width, 0.0);
  const int C = q.channels;
  // Query-as-kernel: each query cell is a 1x1 filter applied to the shifted map.
  for (int qi = 0; qi < q.height; ++qi)
    for (int qj = 0; qj < q.width; ++qj) {
      const float* kernel = q.cell(qi, qj).data();
      for (int r = 0; r < out.height; ++r) {
        const float* row = map.values.data() + (static_cast<std::size_t>(r + qi) * map.width + qj) * C;
        double* dst = acc.data() + static_cast<std::size_t>(r) * out.width;
        for (int c = 0; c < out.width; ++c) {
          const float* cell = row + static_cast<std::size_t>(c) * C;
          float d = 0.0f;
          for (int k = 0; k < C; ++k) d += kernel[k] * cell[k];
          dst[c] += d;
        }
      }
    }
  const double inv = 1.0 / (static_cast<double>(q.height) * q.width);
  out.values.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i] * inv);
  return out;
}

/// Dense matching of a query against every scale of a pyramid. Scales whose
/// map is smaller than the query are omitted.
inline std::vector<SimilarityMap> dense_similarity(const QueryPatch& q, const FeaturePyramid& p) {
  if (q.channels != p.channels())
    throw DimensionError("dense_similarity: query has " + std::to_string(q.channels) + " channels, pyramid " +
                         std::to_string(p.channels()));
  std::vector<SimilarityMap> out;
  for (int s = 0; s < p.num_scales(); ++s) {
    auto m = similarity_at_scale(q, p.maps[s]);
    if (m.values.empty()) continue;
    m.target_image_id = p.image_id;
    m.scale_index = s;
    out.push_back(std::move(m));
  }
  return out;
}

/// A matched position in the dataset.
struct Match {
  std::size_t image_index = 0;
  std::string image_id;
  GridPos pos;
  double similarity = 0.0;
};

/// Ranking order: similarity desc, then (image_id, scale, row, col) ascending.
inline bool match_before(const Match& a, const Match& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return std::tie(a.image_id, a.pos) < std::tie(b.image_id, b.pos);
}

/// Globally best K placements of the query over a dataset.
inline std::vector<Match> top_k_matches(const QueryPatch& q, std::span<const FeaturePyramid> dataset, int K,
                                        bool exclude_source, int jobs = 1,
                                        std::span<const std::size_t> candidate_pool = {}) {
  if (K < 1) throw PreconditionError("top_k_matches: K must be >= 1");
  std::vector<std::size_t> images;
  if (candidate_pool.empty()) {
    images.resize(dataset.size());
    for (std::size_t i = 0; i < dataset.size(); ++i) images[i] = i;
  } else {
    images.assign(candidate_pool.begin(), candidate_pool.end());
  }
  std::vector<std::vector<Match>> per_image(images.size());
  parallel_for(images.size(), jobs, [&](std::size_t n) {
    const std::size_t i = images[n];
    const auto& p = dataset[i];
    if (exclude_source && p.image_id == q.source_image_id) return;
    struct Scored {
      double similarity;
      GridPos pos;
    };
    std::vector<Scored> scored;
    for (const auto& sim : dense_similarity(q, p))
      for (int r = 0; r < sim.height; ++r)
        for (int c = 0; c < sim.width; ++c) scored.push_back({sim.at(r, c), {sim.scale_index, r, c}});
    const auto keep = std::min<std::size_t>(K, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + keep, scored.end(), [](const Scored& a, const Scored& b) {
      return a.similarity != b.similarity ? a.similarity > b.similarity : a.pos < b.pos;
    });
    auto& local = per_image[n];
    for (std::size_t k = 0; k < keep; ++k) local.push_back({i, p.image_id, scored[k].pos, scored[k].similarity});
  });
  std::vector<Match> all;
  for (auto& v : per_image) std::move(v.begin(), v.end(), std::back_inserter(all));
  const auto keep = std::min<std::size_t>(K, all.size());
  std::partial_sort(all.begin(), all.begin() + keep, all.end(), match_before);
  all.resize(keep);
  return all;
}

/// Best single-cell match of `feature` within one pyramid, optionally
/// restricted to one scale. Ties go to the smallest (scale, row, col).
inline Match best_cell_match(std::span<const float> feature, const FeaturePyramid& p, int only_scale = -1) {
  if (static_cast<int>(feature.size()) != p.channels()) throw DimensionError("best_cell_match: channel mismatch");
  Match best{0, p.image_id, {}, -std::numeric_limits<double>::infinity()};
  const int C = p.channels();
  for (int s = 0; s < p.num_scales(); ++s) {
    if (only_scale >= 0 && s != only_scale) continue;
    const auto& m = p.maps[s];
    for (int r = 0; r < m.height; ++r)
      for (int c = 0; c < m.width; ++c) {
        const float* cell = m.values.data() + (static_cast<std::size_t>(r) * m.width + c) * C;
        float d = 0.0f;
        for (int k = 0; k < C; ++k) d += feature[k] * cell[k];
        if (d > best.similarity) {
          best.similarity = d;
          best.pos = {s, r, c};
        }
      }
  }
  return best;
}

// ---------------------------------------------------------------------------
// One-shot detection
// ---------------------------------------------------------------------------

inline constexpr int kDetectionQueryCells = 8;

struct DetectConfig {
  double nms_iou = 0.5;
  int query_cells = kDetectionQueryCells;
  int jobs = 1;
};

struct Detection {
  std::string image_id;
  Box box;
  double score = 0.0;
  int scale_index = 0;
};

inline void to_json(nlohmann::json& j, const Detection& d) {
  j = nlohmann::json{{"image_id", d.image_id}, {"box", d.box}, {"score", d.score}, {"scale_index", d.scale_index}};
}

inline bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.image_id, a.scale_index, a.box.y, a.box.x) < std::tie(b.image_id, b.scale_index, b.box.y, b.box.x);
}

/// Greedy non-maximum suppression; input must already be ranked.
inline std::vector<Detection> non_maximum_suppression(const std::vector<Detection>& ranked, double iou_threshold) {
  std::vector<Detection> kept;
  for (const auto& d : ranked) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (k.image_id == d.image_id && iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

namespace detail {

// A seed is a placement that is >= every neighbour in its 3x3 window and
// strictly greater than the neighbours that precede it in raster order.
inline bool is_local_maximum(const SimilarityMap& m, int r, int c) {
  const float v = m.at(r, c);
  for (int dr = -1; dr <= 1; ++dr)
    for (int dc = -1; dc <= 1; ++dc) {
      if (dr == 0 && dc == 0) continue;
      const int rr = r + dr, cc = c + dc;
      if (rr < 0 || cc < 0 || rr >= m.height || cc >= m.width) continue;
      const float n = m.at(rr, cc);
      const bool precedes = dr < 0 || (dr == 0 && dc < 0);
      if (n > v || (precedes && n == v)) return false;
    }
  return true;
}

} // namespace detail

/// Detects occurrences of a query (already resampled to the detection grid)
/// in every image of the collection and returns them ranked by score.
inline std::vector<Detection> one_shot_detect(const QueryPatch& q, const Collection& dataset, const DetectConfig& cfg = {}) {
  std::vector<std::vector<Detection>> per_image(dataset.size());
  parallel_for(dataset.size(), cfg.jobs, [&](std::size_t i) {
    const auto& entry = dataset.entries[i];
    std::vector<Detection> local;
    for (const auto& sim : dense_similarity(q, dataset.pyramids[i])) {
      const double cell = dataset.px_per_cell(i, sim.scale_index);
      for (int r = 0; r < sim.height; ++r)
        for (int c = 0; c < sim.width; ++c) {
          if (!detail::is_local_maximum(sim, r, c)) continue;
          const Box raw{c * cell, r * cell, q.width * cell, q.height * cell};
          local.push_back({entry.image_id, clamp_box(raw, entry.pixel_width, entry.pixel_height), sim.at(r, c),
                           sim.scale_index});
        }
    }
    std::sort(local.begin(), local.end(), detection_before);
    per_image[i] = non_maximum_suppression(local, cfg.nms_iou);
  });
  std::vector<Detection> all;
  for (auto& v : per_image) std::move(v.begin(), v.end(), std::back_inserter(all));
  std::sort(all.begin(), all.end(), detection_before);
  return all;
}

} // namespace patternmine
