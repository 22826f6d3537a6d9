#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patternmine/box.hpp"
#include "patternmine/error.hpp"
#include "patternmine/feature_store.hpp"
#include "patternmine/log.hpp"
#include "patternmine/matcher.hpp"
#include "patternmine/parallel.hpp"

namespace patternmine {

inline constexpr int kProposalSize = 2;

/// Rectangle of base-scale cells, [row0, row0 + rows) x [col0, col0 + cols).
struct CellRect {
  int row0 = 0, col0 = 0, rows = 0, cols = 0;
};

struct MiningConfig {
  int K = 10;
  int verify_window = 10;
  int verify_tolerance = 1;
  double verified_fraction = 0.10;
  int positive_config = 12;  // Pd: side of the positive square, even in [2, 14]
  int proposals_per_round = 64;
  int n_neg = 20;
  bool candidate_top1 = false;  // take the best match instead of a uniform pick among the top K
  int candidate_pool_size = 0;  // 0: search every image; otherwise a random subset per round
  // Optional per-image sampling mask; when non-empty, proposals are drawn only
  // from images with at least one rect and only inside those rects.
  std::vector<std::vector<CellRect>> proposal_mask;

  void validate() const {
    if (K < 1) throw PreconditionError("mining: K must be >= 1");
    if (!(verified_fraction > 0.0 && verified_fraction <= 1.0))
      throw PreconditionError("mining: verified_fraction must be in (0, 1]");
    if (positive_config < 2 || positive_config > 14 || positive_config % 2 != 0)
      throw PreconditionError("mining: positive_config must be even in [2, 14]");
    if (verify_window < kProposalSize || verify_tolerance < 0 || n_neg < 1 || proposals_per_round < 0)
      throw PreconditionError("mining: invalid window, tolerance, n_neg or proposal count");
  }
};

struct ProposalRegion {
  std::size_t image_index = 0;
  std::string image_id;
  GridPos pos;  // top-left cell of the 2x2 region, always at scale 0
};

struct CandidateMatch {
  ProposalRegion proposal;
  Match target;  // p_B: top-left cell of the matched 2x2 region
  int votes = 0;

  double similarity() const { return target.similarity; }
};

struct VerifiedMatch {
  std::size_t candidate_index = 0;
  CandidateMatch candidate;
};

struct FeatureRef {
  std::size_t image_index = 0;
  GridPos pos;

  friend bool operator==(const FeatureRef&, const FeatureRef&) = default;
};

struct PositivePair {
  FeatureRef p1;  // in the proposal's image
  FeatureRef p2;  // in the candidate's image
  std::vector<FeatureRef> negatives;  // all in p2's image, at p2's scale
};

// ---------------------------------------------------------------------------
// Proposal sampling
// ---------------------------------------------------------------------------

inline std::vector<ProposalRegion> sample_proposals(std::span<const FeaturePyramid> dataset, int n, std::mt19937_64& rng,
                                                    const std::vector<std::vector<CellRect>>& mask = {}) {
  if (dataset.empty()) throw PreconditionError("sample_proposals: empty dataset");
  std::vector<ProposalRegion> out;
  if (n <= 0) return out;

  // Valid top-left positions per eligible image.
  std::vector<std::size_t> eligible;
  std::vector<std::vector<GridPos>> masked_positions(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& base = dataset[i].base();
    if (base.height < kProposalSize || base.width < kProposalSize)
      throw PreconditionError("sample_proposals: base map of '" + dataset[i].image_id + "' smaller than 2x2");
    if (mask.empty()) {
      eligible.push_back(i);
      continue;
    }
    if (i >= mask.size() || mask[i].empty()) continue;
    auto& pos = masked_positions[i];
    for (int r = 0; r + kProposalSize <= base.height; ++r)
      for (int c = 0; c + kProposalSize <= base.width; ++c)
        for (const auto& rect : mask[i])
          if (r >= rect.row0 && c >= rect.col0 && r + kProposalSize <= rect.row0 + rect.rows &&
              c + kProposalSize <= rect.col0 + rect.cols) {
            pos.push_back({0, r, c});
            break;
          }
    if (!pos.empty()) eligible.push_back(i);
  }
  if (eligible.empty()) throw PreconditionError("sample_proposals: no image has a valid proposal position");

  std::uniform_int_distribution<std::size_t> pick_image(0, eligible.size() - 1);
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    const std::size_t i = eligible[pick_image(rng)];
    GridPos pos;
    if (mask.empty()) {
      const auto& base = dataset[i].base();
      std::uniform_int_distribution<int> row(0, base.height - kProposalSize);
      std::uniform_int_distribution<int> col(0, base.width - kProposalSize);
      pos = {0, row(rng), col(rng)};
    } else {
      const auto& cands = masked_positions[i];
      pos = cands[std::uniform_int_distribution<std::size_t>(0, cands.size() - 1)(rng)];
    }
    out.push_back({i, dataset[i].image_id, pos});
  }
  return out;
}

inline std::vector<ProposalRegion> sample_proposals(std::span<const FeaturePyramid> dataset, int n,
                                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_proposals(dataset, n, rng);
}

// ---------------------------------------------------------------------------
// Candidate proposal
// ---------------------------------------------------------------------------

/// Picks one of the top-K cross-image matches of the proposal. `draw` in
/// [0, 1) selects the rank uniformly; with top1 the best match is taken.
inline CandidateMatch propose_candidate(const ProposalRegion& q, std::span<const FeaturePyramid> dataset, int K,
                                        double draw, bool top1 = false,
                                        std::span<const std::size_t> candidate_pool = {}) {
  if (dataset.size() < 2) throw PreconditionError("propose_candidate: need at least two images");
  const auto query = make_query(dataset[q.image_index], q.pos, kProposalSize, kProposalSize);
  const auto top = top_k_matches(query, dataset, K, true, 1, candidate_pool);
  if (top.empty()) throw PreconditionError("propose_candidate: no cross-image positions for '" + q.image_id + "'");
  std::size_t rank = 0;
  if (!top1) rank = std::min(top.size() - 1, static_cast<std::size_t>(draw * static_cast<double>(top.size())));
  return {q, top[rank], 0};
}

inline CandidateMatch propose_candidate(const ProposalRegion& q, std::span<const FeaturePyramid> dataset, int K,
                                        std::mt19937_64& rng, bool top1 = false) {
  const double draw = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return propose_candidate(q, dataset, K, draw, top1);
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

namespace detail {

// Centre of the 2x2 region with top-left cell (row, col), in continuous cell
// coordinates (cell i spans [i, i + 1)).
inline std::pair<double, double> proposal_centre(const GridPos& p) {
  return {p.row + kProposalSize / 2.0, p.col + kProposalSize / 2.0};
}

inline double scale_ratio(const CandidateMatch& c, std::span<const FeaturePyramid> dataset) {
  const double src = dataset[c.proposal.image_index].maps[c.proposal.pos.scale_index].scale_factor;
  const double dst = dataset[c.target.image_index].maps[c.target.pos.scale_index].scale_factor;
  return dst / src;
}

} // namespace detail

/// Counts the cells of the verification window around p_A (minus the
/// proposal cells) whose best single-cell match in image B lands within
/// verify_tolerance cells of where the candidate says it should.
inline int verify_candidate(const CandidateMatch& c, std::span<const FeaturePyramid> dataset, const MiningConfig& cfg) {
  const auto& A = dataset[c.proposal.image_index];
  const auto& B = dataset[c.target.image_index];
  const auto& mapA = A.maps[c.proposal.pos.scale_index];
  const int target_scale = c.target.pos.scale_index;
  const double ratio = detail::scale_ratio(c, dataset);
  const auto [ar, ac] = detail::proposal_centre(c.proposal.pos);
  const auto [br, bc] = detail::proposal_centre(c.target.pos);

  const int r0 = c.proposal.pos.row - (cfg.verify_window - kProposalSize) / 2;
  const int c0 = c.proposal.pos.col - (cfg.verify_window - kProposalSize) / 2;
  int votes = 0;
  for (int r = r0; r < r0 + cfg.verify_window; ++r)
    for (int col = c0; col < c0 + cfg.verify_window; ++col) {
      if (!mapA.contains(r, col)) continue;
      const bool in_proposal = r >= c.proposal.pos.row && r < c.proposal.pos.row + kProposalSize &&
                               col >= c.proposal.pos.col && col < c.proposal.pos.col + kProposalSize;
      if (in_proposal) continue;
      const auto best = best_cell_match(mapA.cell(r, col), B);
      if (best.pos.scale_index != target_scale) continue;
      const double expect_r = br + (r + 0.5 - ar) * ratio;
      const double expect_c = bc + (col + 0.5 - ac) * ratio;
      if (std::abs(best.pos.row + 0.5 - expect_r) <= cfg.verify_tolerance &&
          std::abs(best.pos.col + 0.5 - expect_c) <= cfg.verify_tolerance)
        ++votes;
    }
  return votes;
}

inline bool candidate_ranks_before(const CandidateMatch& a, const CandidateMatch& b) {
  if (a.votes != b.votes) return a.votes > b.votes;
  if (a.similarity() != b.similarity()) return a.similarity() > b.similarity();
  return std::tie(a.proposal.image_id, a.proposal.pos, a.target.image_id, a.target.pos) <
         std::tie(b.proposal.image_id, b.proposal.pos, b.target.image_id, b.target.pos);
}

/// Keeps the ceil(fraction * n) candidates with the most votes.
inline std::vector<VerifiedMatch> select_verified(std::span<const CandidateMatch> candidates, double fraction) {
  if (candidates.empty()) return {};
  std::vector<std::size_t> order(candidates.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return candidate_ranks_before(candidates[a], candidates[b]); });
  const auto keep = std::min(
      candidates.size(), static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(candidates.size()) - 1e-9)));
  std::vector<VerifiedMatch> out;
  for (std::size_t k = 0; k < keep; ++k) out.push_back({order[k], candidates[order[k]]});
  return out;
}

// ---------------------------------------------------------------------------
// Hard positives and negatives
// ---------------------------------------------------------------------------

/// The four corner cells of the d x d square concentric with the proposal,
/// paired with the cells at the same (scaled) offsets from p_B. Pairs that
/// leave either map are dropped.
inline std::vector<PositivePair> generate_positive_pairs(const VerifiedMatch& v, std::span<const FeaturePyramid> dataset,
                                                         const MiningConfig& cfg) {
  const auto& c = v.candidate;
  const auto& mapA = dataset[c.proposal.image_index].maps[c.proposal.pos.scale_index];
  const auto& mapB = dataset[c.target.image_index].maps[c.target.pos.scale_index];
  const double ratio = detail::scale_ratio(c, dataset);
  const auto [ar, ac] = detail::proposal_centre(c.proposal.pos);
  const auto [br, bc] = detail::proposal_centre(c.target.pos);
  const int half = cfg.positive_config / 2;

  std::vector<PositivePair> out;
  for (int sr : {-1, 1})
    for (int sc : {-1, 1}) {
      // Corner cell just inside the square's corner at (ar + sr*half, ac + sc*half).
      const int rowA = sr < 0 ? static_cast<int>(ar) - half : static_cast<int>(ar) + half - 1;
      const int colA = sc < 0 ? static_cast<int>(ac) - half : static_cast<int>(ac) + half - 1;
      const double dr = rowA + 0.5 - ar;
      const double dc = colA + 0.5 - ac;
      const int rowB = static_cast<int>(std::floor(br + dr * ratio));
      const int colB = static_cast<int>(std::floor(bc + dc * ratio));
      if (!mapA.contains(rowA, colA) || !mapB.contains(rowB, colB)) continue;
      out.push_back({{c.proposal.image_index, {c.proposal.pos.scale_index, rowA, colA}},
                     {c.target.image_index, {c.target.pos.scale_index, rowB, colB}},
                     {}});
    }
  return out;
}

/// The n_neg cells of P2's image (at P2's scale) most similar to P1.
inline std::vector<FeatureRef> mine_negatives(const PositivePair& pair, std::span<const FeaturePyramid> dataset,
                                              int n_neg) {
  const auto p1 = dataset[pair.p1.image_index].cell(pair.p1.pos);
  const int scale = pair.p2.pos.scale_index;
  const auto& map = dataset[pair.p2.image_index].maps[scale];
  struct Scored {
    double sim;
    int row, col;
  };
  std::vector<Scored> all;
  all.reserve(map.cell_count());
  for (int r = 0; r < map.height; ++r)
    for (int c = 0; c < map.width; ++c) all.push_back({dot(p1, map.cell(r, c)), r, c});
  if (static_cast<int>(all.size()) < n_neg)
    logger().warn("mine_negatives: only {} cells available in '{}' (wanted {})", all.size(),
                  dataset[pair.p2.image_index].image_id, n_neg);
  const auto keep = std::min<std::size_t>(n_neg, all.size());
  std::partial_sort(all.begin(), all.begin() + keep, all.end(), [](const Scored& a, const Scored& b) {
    if (a.sim != b.sim) return a.sim > b.sim;
    return std::tie(a.row, a.col) < std::tie(b.row, b.col);
  });
  std::vector<FeatureRef> out;
  for (std::size_t k = 0; k < keep; ++k) out.push_back({pair.p2.image_index, {scale, all[k].row, all[k].col}});
  return out;
}

// ---------------------------------------------------------------------------
// One full mining round
// ---------------------------------------------------------------------------

struct MiningRound {
  std::vector<ProposalRegion> proposals;
  std::vector<CandidateMatch> candidates;  // one per proposal that had a cross-image match
  std::vector<VerifiedMatch> verified;
  std::vector<PositivePair> pairs;
};

/// Propose -> verify -> select -> positives -> negatives, on the given
/// (already adapted) pyramids. Deterministic in (dataset, cfg, rng state).
inline MiningRound mine_round(std::span<const FeaturePyramid> dataset, const MiningConfig& cfg, std::mt19937_64& rng,
                              int jobs = 1) {
  cfg.validate();
  if (dataset.size() < 2) throw PreconditionError("mine_round: need at least two images");
  MiningRound round;
  round.proposals = sample_proposals(dataset, cfg.proposals_per_round, rng, cfg.proposal_mask);

  std::vector<std::size_t> pool;
  if (cfg.candidate_pool_size > 0 && static_cast<std::size_t>(cfg.candidate_pool_size) < dataset.size()) {
    std::vector<std::size_t> all(dataset.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    std::sample(all.begin(), all.end(), std::back_inserter(pool), cfg.candidate_pool_size, rng);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> draws(round.proposals.size());
  for (auto& d : draws) d = unit(rng);

  std::vector<std::optional<CandidateMatch>> slots(round.proposals.size());
  parallel_for(round.proposals.size(), jobs, [&](std::size_t i) {
    try {
      auto c = propose_candidate(round.proposals[i], dataset, cfg.K, draws[i], cfg.candidate_top1, pool);
      c.votes = verify_candidate(c, dataset, cfg);
      slots[i] = std::move(c);
    } catch (const PreconditionError& e) {
      logger().debug("mine_round: proposal {} skipped: {}", i, e.what());
    }
  });
  for (auto& s : slots)
    if (s) round.candidates.push_back(std::move(*s));

  round.verified = select_verified(round.candidates, cfg.verified_fraction);
  for (const auto& v : round.verified)
    for (auto& pair : generate_positive_pairs(v, dataset, cfg)) {
      pair.negatives = mine_negatives(pair, dataset, cfg.n_neg);
      round.pairs.push_back(std::move(pair));
    }
  return round;
}

inline nlohmann::json to_json(const MiningRound& round, std::span<const FeaturePyramid> dataset) {
  auto ref = [&](const FeatureRef& f) {
    return nlohmann::json{{"image_id", dataset[f.image_index].image_id},
                          {"scale", f.pos.scale_index},
                          {"row", f.pos.row},
                          {"col", f.pos.col}};
  };
  nlohmann::json j;
  j["proposals"] = nlohmann::json::array();
  for (const auto& p : round.proposals)
    j["proposals"].push_back({{"image_id", p.image_id}, {"row", p.pos.row}, {"col", p.pos.col}});
  j["candidates"] = nlohmann::json::array();
  for (const auto& c : round.candidates)
    j["candidates"].push_back({{"proposal", {{"image_id", c.proposal.image_id}, {"row", c.proposal.pos.row}, {"col", c.proposal.pos.col}}},
                               {"target", ref({c.target.image_index, c.target.pos})},
                               {"similarity", c.similarity()},
                               {"votes", c.votes}});
  j["selected"] = nlohmann::json::array();
  for (const auto& v : round.verified) j["selected"].push_back(v.candidate_index);
  j["pairs"] = nlohmann::json::array();
  for (const auto& p : round.pairs) {
    nlohmann::json negs = nlohmann::json::array();
    for (const auto& n : p.negatives) negs.push_back(ref(n));
    j["pairs"].push_back({{"p1", ref(p.p1)}, {"p2", ref(p.p2)}, {"negatives", negs}});
  }
  return j;
}

} // namespace patternmine
