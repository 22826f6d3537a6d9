#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <tuple>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "patternmine/error.hpp"
#include "patternmine/feature_store.hpp"

namespace patternmine {

struct Point2 {
  double x = 0, y = 0;
};

/// A dense match between a source cell and a target cell, in base-frame pixels.
struct Correspondence {
  Point2 source;
  Point2 target;
  double similarity = 0.0;
  int source_scale = 0;
  int target_scale = 0;
};

struct ScoringConfig {
  double sigma = 1.5 * kDefaultCellStride;
  double inlier_threshold = 2.0 * kDefaultCellStride;
  int ransac_iters = 1000;
  double translation_bin = 2.0 * kDefaultCellStride;
  double scale_bin = 1.0 / 3.0;  // octaves
  int scales_per_octave = kDefaultScalesPerOctave;
  int min_group_votes = 5;
  int max_groups = 10;
};

/// 2x3 matrix mapping source pixels to target pixels.
struct AffineTransform {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  Point2 apply(const Point2& p) const { return {m[0] * p.x + m[1] * p.y + m[2], m[3] * p.x + m[4] * p.y + m[5]}; }
  double det() const { return m[0] * m[4] - m[1] * m[3]; }

  std::optional<AffineTransform> inverse() const {
    const double d = det();
    if (std::abs(d) <= 1e-12) return std::nullopt;
    AffineTransform inv;
    inv.m[0] = m[4] / d;
    inv.m[1] = -m[1] / d;
    inv.m[3] = -m[3] / d;
    inv.m[4] = m[0] / d;
    inv.m[2] = -(inv.m[0] * m[2] + inv.m[1] * m[5]);
    inv.m[5] = -(inv.m[3] * m[2] + inv.m[4] * m[5]);
    return inv;
  }

  // Conjugates by per-axis scalings: returns T such that T(sa * p) = sb * this(p).
  AffineTransform rescaled(double source_scale, double target_scale) const {
    AffineTransform t;
    t.m = {m[0] * target_scale / source_scale, m[1] * target_scale / source_scale, m[2] * target_scale,
           m[3] * target_scale / source_scale, m[4] * target_scale / source_scale, m[5] * target_scale};
    return t;
  }
};

inline double reprojection_error(const AffineTransform& a, const Correspondence& c) {
  const auto p = a.apply(c.source);
  return std::hypot(p.x - c.target.x, p.y - c.target.y);
}

// ---------------------------------------------------------------------------
// Hough voting over translation and log-scale
// ---------------------------------------------------------------------------

struct HoughBin {
  int tx = 0, ty = 0, ts = 0;
  std::vector<int> members;  // correspondences that fell in this bin
  std::vector<int> group;    // members of the 3x3x3 neighbourhood, sorted

  int votes() const { return static_cast<int>(members.size()); }
};

namespace detail {

using BinKey = std::tuple<int, int, int>;

inline BinKey bin_of(const Correspondence& c, const ScoringConfig& cfg) {
  const double log_scale = static_cast<double>(c.target_scale - c.source_scale) / cfg.scales_per_octave;
  const double ratio = std::exp2(log_scale);
  const double tx = c.target.x - ratio * c.source.x;
  const double ty = c.target.y - ratio * c.source.y;
  return {static_cast<int>(std::floor(tx / cfg.translation_bin)), static_cast<int>(std::floor(ty / cfg.translation_bin)),
          static_cast<int>(std::lround(log_scale / cfg.scale_bin))};
}

} // namespace detail

/// Returns up to max_groups bins ordered by vote count (ties by bin
/// coordinates). A bin is skipped when it has fewer than min_group_votes
/// votes or neighbours an already selected bin.
inline std::vector<HoughBin> hough_vote(std::span<const Correspondence> corrs, const ScoringConfig& cfg) {
  std::map<detail::BinKey, std::vector<int>> bins;
  for (std::size_t i = 0; i < corrs.size(); ++i) bins[detail::bin_of(corrs[i], cfg)].push_back(static_cast<int>(i));

  std::vector<const std::pair<const detail::BinKey, std::vector<int>>*> order;
  for (const auto& kv : bins) order.push_back(&kv);
  std::stable_sort(order.begin(), order.end(),
                   [](auto* a, auto* b) { return a->second.size() > b->second.size(); });

  std::vector<HoughBin> out;
  for (const auto* kv : order) {
    if (static_cast<int>(out.size()) >= cfg.max_groups) break;
    if (static_cast<int>(kv->second.size()) < cfg.min_group_votes) break;
    const auto [tx, ty, ts] = kv->first;
    const bool adjacent = std::any_of(out.begin(), out.end(), [&](const HoughBin& b) {
      return std::abs(b.tx - tx) <= 1 && std::abs(b.ty - ty) <= 1 && std::abs(b.ts - ts) <= 1;
    });
    if (adjacent) continue;
    HoughBin bin{tx, ty, ts, kv->second, {}};
    for (int dx = -1; dx <= 1; ++dx)
      for (int dy = -1; dy <= 1; ++dy)
        for (int ds = -1; ds <= 1; ++ds)
          if (auto it = bins.find({tx + dx, ty + dy, ts + ds}); it != bins.end())
            bin.group.insert(bin.group.end(), it->second.begin(), it->second.end());
    std::sort(bin.group.begin(), bin.group.end());
    out.push_back(std::move(bin));
  }
  return out;
}

// ---------------------------------------------------------------------------
// RANSAC affine
// ---------------------------------------------------------------------------

struct AffineFit {
  AffineTransform transform;
  std::vector<int> inliers;  // indices into the correspondence array, sorted
};

namespace detail {

// Least-squares affine through the given correspondences; nullopt when the
// source points are degenerate.
inline std::optional<AffineTransform> fit_affine(std::span<const Correspondence> corrs, std::span<const int> idx) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  if (n < 3) return std::nullopt;
  Eigen::MatrixXd A(n, 3);
  Eigen::VectorXd bx(n), by(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& c = corrs[idx[k]];
    A.row(k) << c.source.x, c.source.y, 1.0;
    bx[k] = c.target.x;
    by[k] = c.target.y;
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  if (qr.rank() < 3) return std::nullopt;
  const Eigen::Vector3d rx = qr.solve(bx);
  const Eigen::Vector3d ry = qr.solve(by);
  AffineTransform t;
  t.m = {rx[0], rx[1], rx[2], ry[0], ry[1], ry[2]};
  if (!std::all_of(t.m.begin(), t.m.end(), [](double v) { return std::isfinite(v); })) return std::nullopt;
  return t;
}

inline std::vector<int> inliers_of(const AffineTransform& t, std::span<const Correspondence> corrs,
                                   std::span<const int> group, double threshold) {
  std::vector<int> out;
  for (int i : group)
    if (reprojection_error(t, corrs[i]) < threshold) out.push_back(i);
  return out;
}

inline bool acceptable(const AffineTransform& t) { return std::abs(t.det()) > 1e-8; }

} // namespace detail

/// Best affine model over minimal 3-point samples of `group`, refit by least
/// squares on its inliers until the inlier set is stable.
inline std::optional<AffineFit> ransac_affine(std::span<const Correspondence> corrs, std::span<const int> group,
                                              const ScoringConfig& cfg, std::uint64_t seed) {
  if (group.size() < 3) return std::nullopt;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
  std::vector<int> best;
  for (int it = 0; it < cfg.ransac_iters; ++it) {
    std::array<int, 3> sample{};
    std::size_t a = pick(rng), b = pick(rng), c = pick(rng);
    while (b == a) b = pick(rng);
    while (c == a || c == b) c = pick(rng);
    sample = {group[a], group[b], group[c]};
    const auto model = detail::fit_affine(corrs, sample);
    if (!model || !detail::acceptable(*model)) continue;
    auto inl = detail::inliers_of(*model, corrs, group, cfg.inlier_threshold);
    if (inl.size() > best.size()) best = std::move(inl);
  }
  if (best.size() < 3) return std::nullopt;

  std::optional<AffineFit> fit;
  for (int refine = 0; refine < 10; ++refine) {
    const auto model = detail::fit_affine(corrs, best);
    if (!model || !detail::acceptable(*model)) break;
    auto inl = detail::inliers_of(*model, corrs, group, cfg.inlier_threshold);
    if (inl.size() < 3) break;
    const bool stable = inl == best;
    fit = AffineFit{*model, inl};
    best = std::move(inl);
    if (stable) break;
  }
  // The refit may have dropped a point; report only what the final model explains.
  if (fit) {
    fit->inliers = detail::inliers_of(fit->transform, corrs, fit->inliers, cfg.inlier_threshold);
    if (fit->inliers.size() < 3) return std::nullopt;
  }
  return fit;
}

// ---------------------------------------------------------------------------
// Correspondence score
// ---------------------------------------------------------------------------

/// S = (1/N) sum_i exp(-e_i^2 / (2 sigma^2)) s_i over the inliers.
inline double score_pair(std::span<const Correspondence> corrs, std::span<const int> inliers,
                         const AffineTransform& transform, std::size_t source_feature_count, double sigma) {
  if (source_feature_count == 0) throw PreconditionError("score_pair: N must be positive");
  double sum = 0.0;
  for (int i : inliers) {
    const double e = reprojection_error(transform, corrs[i]);
    sum += std::exp(-e * e / (2.0 * sigma * sigma)) * corrs[i].similarity;
  }
  return sum / static_cast<double>(source_feature_count);
}

inline void to_json(nlohmann::json& j, const AffineTransform& t) {
  j = nlohmann::json::array({{t.m[0], t.m[1], t.m[2]}, {t.m[3], t.m[4], t.m[5]}});
}

inline void from_json(const nlohmann::json& j, AffineTransform& t) {
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) t.m[r * 3 + c] = j.at(r).at(c).get<double>();
}

} // namespace patternmine
