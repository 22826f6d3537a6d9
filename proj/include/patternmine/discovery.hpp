#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "patternmine/box.hpp"
#include "patternmine/error.hpp"
#include "patternmine/feature_store.hpp"
#include "patternmine/geometry.hpp"
#include "patternmine/matcher.hpp"
#include "patternmine/parallel.hpp"

namespace patternmine {

struct DiscoveryConfig {
  ScoringConfig scoring;
  double score_threshold = 0.03;
  double overlap_iou = 0.5;
  // Two results of one pair whose source and target boxes both overlap above
  // this are the same region found twice; the lower score is dropped.
  double duplicate_iou = 0.5;
  // An inlier survives only with at least this many inliers among its 8
  // neighbouring source cells; chance inliers are isolated. 0 disables.
  int min_inlier_neighbours = 2;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct ScoredPair {
  std::string source_id;
  std::string target_id;
  AffineTransform transform;       // original source pixels -> original target pixels
  std::vector<int> inliers;        // base-scale source cell indices (row * width + col)
  double score = 0.0;
  Box source_box;                  // original pixels
  Box target_box;
  double sigma = 0.0;              // base-frame pixels
  std::size_t n_source_features = 0;
};

inline void to_json(nlohmann::json& j, const ScoredPair& p) {
  j = nlohmann::json{{"source_id", p.source_id},
                     {"target_id", p.target_id},
                     {"transform", p.transform},
                     {"inliers", p.inliers},
                     {"score", p.score},
                     {"source_box", p.source_box},
                     {"target_box", p.target_box},
                     {"sigma", p.sigma},
                     {"n_source_features", p.n_source_features},
                     {"normalization", "base-scale source cells"}};
}

inline void from_json(const nlohmann::json& j, ScoredPair& p) {
  p.source_id = j.at("source_id").get<std::string>();
  p.target_id = j.at("target_id").get<std::string>();
  p.transform = j.at("transform").get<AffineTransform>();
  p.inliers = j.at("inliers").get<std::vector<int>>();
  p.score = j.at("score").get<double>();
  p.source_box = j.at("source_box").get<Box>();
  p.target_box = j.at("target_box").get<Box>();
  p.sigma = j.value("sigma", 0.0);
  p.n_source_features = j.value("n_source_features", std::size_t{0});
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  auto splitmix = [](std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  };
  return splitmix(splitmix(splitmix(splitmix(seed) ^ a) ^ b) ^ c);
}

inline Point2 cell_centre(const FeaturePyramid& p, const GridPos& g) {
  const double step = p.cell_stride_px / static_cast<double>(p.maps[g.scale_index].scale_factor);
  return {(g.col + 0.5) * step, (g.row + 0.5) * step};
}

inline Box bounding_box(const std::vector<Point2>& pts) {
  double x0 = pts.front().x, x1 = x0, y0 = pts.front().y, y1 = y0;
  for (const auto& p : pts) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  return {x0, y0, x1 - x0, y1 - y0};
}

// Drops inliers whose source cell has fewer than `min_neighbours` inlier
// cells among its 8 neighbours.
inline std::vector<int> coherent_inliers(std::span<const int> inliers, std::span<const int> cells, int width,
                                         int min_neighbours) {
  if (min_neighbours <= 0) return {inliers.begin(), inliers.end()};
  std::set<int> occupied;
  for (int i : inliers) occupied.insert(cells[i]);
  std::vector<int> out;
  for (int i : inliers) {
    const int r = cells[i] / width, c = cells[i] % width;
    int n = 0;
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        if ((dr == 0 && dc == 0) || c + dc < 0 || c + dc >= width) continue;
        n += static_cast<int>(occupied.count((r + dr) * width + c + dc));
      }
    if (n >= min_neighbours) out.push_back(i);
  }
  return out;
}

} // namespace detail

/// Every non-zero base-scale source cell matched to its best target cell over
/// all target scales. `source_cells` receives each correspondence's cell index.
inline std::vector<Correspondence> dense_correspondences(const FeaturePyramid& source, const FeaturePyramid& target,
                                                         std::vector<int>* source_cells = nullptr) {
  if (source.channels() != target.channels()) throw DimensionError("dense_correspondences: channel mismatch");
  const auto& base = source.base();
  std::vector<Correspondence> out;
  out.reserve(base.cell_count());
  if (source_cells) source_cells->clear();
  for (int r = 0; r < base.height; ++r)
    for (int c = 0; c < base.width; ++c) {
      const auto f = base.cell(r, c);
      if (std::all_of(f.begin(), f.end(), [](float v) { return v == 0.0f; })) continue;
      const auto best = best_cell_match(f, target);
      out.push_back({detail::cell_centre(source, {0, r, c}), detail::cell_centre(target, best.pos), best.similarity, 0,
                     best.pos.scale_index});
      if (source_cells) source_cells->push_back(r * base.width + c);
    }
  return out;
}

/// Geometric verification of one image pair: dense correspondences, Hough
/// grouping, RANSAC affine per group, scoring. Results below the score
/// threshold are dropped.
inline std::vector<ScoredPair> discover_pair(const Collection& col, std::size_t a, std::size_t b,
                                             const DiscoveryConfig& cfg) {
  const auto& A = col.pyramids[a];
  const auto& B = col.pyramids[b];
  std::vector<int> cells;
  const auto corrs = dense_correspondences(A, B, &cells);
  const auto groups = hough_vote(corrs, cfg.scoring);
  const double ppa = col.px_per_base_px(a);
  const double ppb = col.px_per_base_px(b);
  const auto& ea = col.entries[a];
  const auto& eb = col.entries[b];
  const std::size_t n_source = A.base().cell_count();

  std::vector<ScoredPair> found;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto fit = ransac_affine(corrs, groups[g].group, cfg.scoring, detail::mix_seed(cfg.seed, a, b, g));
    if (!fit) continue;
    if (cfg.min_inlier_neighbours > 0) {
      const auto kept = detail::coherent_inliers(fit->inliers, cells, A.base().width, cfg.min_inlier_neighbours);
      const auto refit = detail::fit_affine(corrs, kept);
      if (!refit || !detail::acceptable(*refit)) continue;
      fit->transform = *refit;
      fit->inliers = detail::inliers_of(*refit, corrs, kept, cfg.scoring.inlier_threshold);
      if (fit->inliers.size() < 3) continue;
    }
    const double s = score_pair(corrs, fit->inliers, fit->transform, n_source, cfg.scoring.sigma);
    if (s < cfg.score_threshold) continue;
    std::vector<Point2> src, dst;
    ScoredPair p{ea.image_id, eb.image_id, fit->transform.rescaled(ppa, ppb), {}, s, {}, {}, cfg.scoring.sigma, n_source};
    for (int i : fit->inliers) {
      src.push_back({corrs[i].source.x * ppa, corrs[i].source.y * ppa});
      dst.push_back({corrs[i].target.x * ppb, corrs[i].target.y * ppb});
      p.inliers.push_back(cells[i]);
    }
    std::sort(p.inliers.begin(), p.inliers.end());
    p.source_box = clamp_box(detail::bounding_box(src), ea.pixel_width, ea.pixel_height);
    p.target_box = clamp_box(detail::bounding_box(dst), eb.pixel_width, eb.pixel_height);
    found.push_back(std::move(p));
  }

  std::stable_sort(found.begin(), found.end(), [](const ScoredPair& x, const ScoredPair& y) { return x.score > y.score; });
  std::vector<ScoredPair> kept;
  for (auto& p : found) {
    const bool duplicate = std::any_of(kept.begin(), kept.end(), [&](const ScoredPair& k) {
      return iou(k.source_box, p.source_box) > cfg.duplicate_iou && iou(k.target_box, p.target_box) > cfg.duplicate_iou;
    });
    if (!duplicate) kept.push_back(std::move(p));
  }
  return kept;
}

/// Discovery over all unordered pairs (i < j), or over an explicit allowlist.
inline std::vector<ScoredPair> discover_all(const Collection& col, const DiscoveryConfig& cfg,
                                            std::span<const std::pair<std::size_t, std::size_t>> allowlist = {}) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs(allowlist.begin(), allowlist.end());
  if (pairs.empty())
    for (std::size_t i = 0; i < col.size(); ++i)
      for (std::size_t j = i + 1; j < col.size(); ++j) pairs.emplace_back(i, j);
  std::vector<std::vector<ScoredPair>> per_pair(pairs.size());
  parallel_for(pairs.size(), cfg.jobs,
               [&](std::size_t k) { per_pair[k] = discover_pair(col, pairs[k].first, pairs[k].second, cfg); });
  std::vector<ScoredPair> out;
  for (auto& v : per_pair) std::move(v.begin(), v.end(), std::back_inserter(out));
  return out;
}

// ---------------------------------------------------------------------------
// Region graph and clusters
// ---------------------------------------------------------------------------

struct RegionNode {
  std::string image_id;
  Box box;
  std::size_t pair_index = 0;
};

enum class EdgeKind { Match, Overlap };

struct RegionEdge {
  std::size_t a = 0, b = 0;
  EdgeKind kind = EdgeKind::Match;

  friend bool operator==(const RegionEdge&, const RegionEdge&) = default;
};

struct RegionGraph {
  std::vector<RegionNode> nodes;  // node 2k is pair k's source region, 2k+1 its target region
  std::vector<RegionEdge> edges;
};

/// Match edges join the two regions of each pair; overlap edges join regions
/// of the same image with IoU above the threshold.
inline RegionGraph build_graph(std::span<const ScoredPair> pairs, double iou_threshold = 0.5) {
  RegionGraph g;
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    g.nodes.push_back({pairs[k].source_id, pairs[k].source_box, k});
    g.nodes.push_back({pairs[k].target_id, pairs[k].target_box, k});
    g.edges.push_back({2 * k, 2 * k + 1, EdgeKind::Match});
  }
  // Sweep per image over boxes sorted by left edge; only x-overlapping boxes can intersect.
  std::vector<std::size_t> order(g.nodes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(g.nodes[a].image_id, g.nodes[a].box.x, a) < std::tie(g.nodes[b].image_id, g.nodes[b].box.x, b);
  });
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& ni = g.nodes[order[i]];
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const auto& nj = g.nodes[order[j]];
      if (nj.image_id != ni.image_id || nj.box.x > ni.box.right()) break;
      if (iou(ni.box, nj.box) > iou_threshold)
        g.edges.push_back({std::min(order[i], order[j]), std::max(order[i], order[j]), EdgeKind::Overlap});
    }
  }
  std::sort(g.edges.begin(), g.edges.end(), [](const RegionEdge& x, const RegionEdge& y) {
    return std::tie(x.a, x.b, x.kind) < std::tie(y.a, y.b, y.kind);
  });
  return g;
}

struct ClusterMember {
  std::string image_id;
  Box box;
  double score = 0.0;  // S of the originating pair
};

struct Cluster {
  int id = 0;
  std::vector<ClusterMember> members;
  double aggregate_score = 0.0;
};

namespace detail {

class UnionFind {
public:
  explicit UnionFind(std::size_t n) : parent_(n), rank_(n, 0) { std::iota(parent_.begin(), parent_.end(), 0); }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
  }

private:
  std::vector<std::size_t> parent_;
  std::vector<int> rank_;
};

inline bool member_before(const ClusterMember& a, const ClusterMember& b) {
  return std::tie(a.image_id, a.box.x, a.box.y, a.box.w, a.box.h, b.score) <
         std::tie(b.image_id, b.box.x, b.box.y, b.box.w, b.box.h, a.score);
}

} // namespace detail

/// Connected components of the region graph with at least min_size nodes,
/// sorted by aggregate score (sum of the distinct originating pair scores).
inline std::vector<Cluster> extract_clusters(const RegionGraph& g, std::span<const ScoredPair> pairs,
                                             std::size_t min_size = 2) {
  detail::UnionFind uf(g.nodes.size());
  for (const auto& e : g.edges) uf.unite(e.a, e.b);
  std::map<std::size_t, std::vector<std::size_t>> comps;
  for (std::size_t n = 0; n < g.nodes.size(); ++n) comps[uf.find(n)].push_back(n);

  std::vector<Cluster> out;
  for (const auto& [root, nodes] : comps) {
    if (nodes.size() < min_size) continue;
    Cluster c;
    std::vector<double> pair_scores;
    std::vector<std::size_t> seen_pairs;
    for (auto n : nodes) {
      const auto& node = g.nodes[n];
      c.members.push_back({node.image_id, node.box, pairs[node.pair_index].score});
      if (std::find(seen_pairs.begin(), seen_pairs.end(), node.pair_index) == seen_pairs.end()) {
        seen_pairs.push_back(node.pair_index);
        pair_scores.push_back(pairs[node.pair_index].score);
      }
    }
    std::sort(pair_scores.begin(), pair_scores.end());
    c.aggregate_score = std::accumulate(pair_scores.begin(), pair_scores.end(), 0.0);
    std::sort(c.members.begin(), c.members.end(), detail::member_before);
    out.push_back(std::move(c));
  }
  std::sort(out.begin(), out.end(), [](const Cluster& a, const Cluster& b) {
    if (a.aggregate_score != b.aggregate_score) return a.aggregate_score > b.aggregate_score;
    return detail::member_before(a.members.front(), b.members.front());
  });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<int>(i);
  return out;
}

inline void to_json(nlohmann::json& j, const Cluster& c) {
  nlohmann::json members = nlohmann::json::array();
  for (const auto& m : c.members) members.push_back({{"image_id", m.image_id}, {"box", m.box}, {"score", m.score}});
  j = nlohmann::json{{"id", c.id}, {"members", members}, {"aggregate_score", c.aggregate_score}};
}

inline void from_json(const nlohmann::json& j, Cluster& c) {
  c.id = j.at("id").get<int>();
  c.aggregate_score = j.at("aggregate_score").get<double>();
  c.members.clear();
  for (const auto& m : j.at("members"))
    c.members.push_back({m.at("image_id").get<std::string>(), m.at("box").get<Box>(), m.at("score").get<double>()});
}

// ---------------------------------------------------------------------------
// Localization / retrieval by discovery score
// ---------------------------------------------------------------------------

struct RankedReference {
  std::size_t index = 0;
  std::string image_id;
  double score = 0.0;  // best S of any discovered region pair, 0 if none
};

/// Ranks references by their best discovery score against the query.
inline std::vector<RankedReference> localize_by_discovery(const Collection& col, std::size_t query,
                                                          std::span<const std::size_t> references,
                                                          const DiscoveryConfig& cfg) {
  if (references.empty()) throw PreconditionError("localize_by_discovery: empty reference set");
  std::vector<RankedReference> out(references.size());
  parallel_for(references.size(), cfg.jobs, [&](std::size_t k) {
    const auto r = references[k];
    double best = 0.0;
    for (const auto& p : discover_pair(col, query, r, cfg)) best = std::max(best, p.score);
    out[k] = {r, col.entries[r].image_id, best};
  });
  std::stable_sort(out.begin(), out.end(), [](const RankedReference& a, const RankedReference& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.image_id < b.image_id;
  });
  return out;
}

} // namespace patternmine
