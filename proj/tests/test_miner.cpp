#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "support.hpp"

using namespace patternmine;

namespace {

// B is A shifted by (dr, dc) cells, everything else random.
std::vector<FeaturePyramid> shifted_pair(std::mt19937_64& rng, int n, int dr, int dc, int C = 16) {
  std::vector<FeaturePyramid> ds{{"A", {pmtest::random_map(rng, n, n, C)}, 16}, {"B", {pmtest::random_map(rng, n, n, C)}, 16}};
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      if (ds[1].maps[0].contains(r + dr, c + dc)) {
        const auto src = ds[0].maps[0].cell(r, c);
        std::copy(src.begin(), src.end(), ds[1].maps[0].cell(r + dr, c + dc).begin());
      }
  return ds;
}

CandidateMatch candidate(const std::vector<FeaturePyramid>& ds, GridPos a, GridPos b) {
  CandidateMatch m;
  m.proposal = {0, ds[0].image_id, a};
  m.target.image_index = 1;
  m.target.image_id = ds[1].image_id;
  m.target.pos = b;
  return m;
}

} // namespace

TEST(Proposals, DeterministicAndInBounds) {
  std::mt19937_64 rng(1);
  std::vector<FeaturePyramid> ds;
  for (int i = 0; i < 4; ++i) ds.push_back(pmtest::random_pyramid(rng, "i" + std::to_string(i), 5 + i, 9 - i, 4, 2));
  const auto a = sample_proposals(ds, 500, 42);
  const auto b = sample_proposals(ds, 500, 42);
  ASSERT_EQ(a.size(), 500u);
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].image_index, b[k].image_index);
    EXPECT_EQ(a[k].pos, b[k].pos);
    const auto& m = ds[a[k].image_index].base();
    EXPECT_EQ(a[k].pos.scale_index, 0);
    EXPECT_TRUE(m.contains(a[k].pos.row, a[k].pos.col));
    EXPECT_TRUE(m.contains(a[k].pos.row + 1, a[k].pos.col + 1));
    EXPECT_EQ(a[k].image_id, ds[a[k].image_index].image_id);
  }
  EXPECT_TRUE(sample_proposals(ds, 0, 1).empty());
}

TEST(Proposals, ImagesAreDrawnUniformly) {
  std::mt19937_64 rng(2);
  std::vector<FeaturePyramid> ds;
  for (int i = 0; i < 4; ++i) ds.push_back(pmtest::random_pyramid(rng, "i" + std::to_string(i), 4, 4 + 3 * i, 3, 1));
  const int n = 4000;
  std::vector<int> count(4);
  for (const auto& p : sample_proposals(ds, n, 9)) ++count[p.image_index];
  // Binomial(n, 1/4): five standard deviations.
  const double sd = std::sqrt(n * 0.25 * 0.75);
  for (int c : count) EXPECT_NEAR(c, n / 4.0, 5 * sd);
}

TEST(Proposals, MaskRestrictsPositions) {
  std::mt19937_64 rng(3);
  std::vector<FeaturePyramid> ds{pmtest::random_pyramid(rng, "a", 10, 10, 3, 1), pmtest::random_pyramid(rng, "b", 10, 10, 3, 1)};
  std::vector<std::vector<CellRect>> mask{{}, {{2, 3, 3, 4}}};
  std::mt19937_64 draw(4);
  for (const auto& p : sample_proposals(ds, 200, draw, mask)) {
    EXPECT_EQ(p.image_index, 1u);
    EXPECT_GE(p.pos.row, 2);
    EXPECT_LE(p.pos.row, 3);
    EXPECT_GE(p.pos.col, 3);
    EXPECT_LE(p.pos.col, 5);
  }
  mask = {{}, {{0, 0, 1, 1}}};
  EXPECT_THROW(sample_proposals(ds, 5, draw, mask), PreconditionError);
}

TEST(Candidates, TopOneIsTheBestMatch) {
  std::mt19937_64 rng(5);
  const auto ds = shifted_pair(rng, 8, 2, -1);
  const ProposalRegion q{0, "A", {0, 3, 4}};
  const auto c = propose_candidate(q, ds, 1, 0.99);
  EXPECT_EQ(c.target.image_id, "B");
  EXPECT_EQ(c.target.pos, (GridPos{0, 5, 3}));
  EXPECT_EQ(propose_candidate(q, ds, 10, 0.7, true).target.pos, c.target.pos);
}

TEST(Candidates, DrawCoversEveryRank) {
  std::mt19937_64 rng(6);
  std::vector<FeaturePyramid> ds{pmtest::random_pyramid(rng, "a", 6, 6, 8, 2), pmtest::random_pyramid(rng, "b", 6, 6, 8, 2)};
  const ProposalRegion q{0, "a", {0, 1, 1}};
  const int K = 5;
  const auto query = make_query(ds[0], q.pos, 2, 2);
  const auto top = top_k_matches(query, ds, K, true);
  std::set<GridPos> seen;
  for (int k = 0; k < K; ++k) {
    const auto c = propose_candidate(q, ds, K, (k + 0.5) / K);
    EXPECT_EQ(c.target.pos, top[k].pos);
    seen.insert(c.target.pos);
  }
  EXPECT_EQ(seen.size(), std::size_t(K));

  // Uniform rng draws: every rank shows up (coupon collector, 200 draws for 5 ranks).
  std::mt19937_64 draw(7);
  std::set<GridPos> hit;
  for (int t = 0; t < 200; ++t) hit.insert(propose_candidate(q, ds, K, draw).target.pos);
  EXPECT_EQ(hit.size(), std::size_t(K));
}

TEST(Candidates, NeedTwoImages) {
  std::mt19937_64 rng(8);
  std::vector<FeaturePyramid> one{pmtest::random_pyramid(rng, "a", 5, 5, 4, 1)};
  EXPECT_THROW(propose_candidate({0, "a", {0, 0, 0}}, one, 3, 0.1), PreconditionError);
}

TEST(Verify, PlantedCopyGetsEveryVote) {
  std::mt19937_64 rng(9);
  const auto ds = shifted_pair(rng, 24, 3, -2);
  const MiningConfig cfg;
  EXPECT_EQ(verify_candidate(candidate(ds, {0, 10, 10}, {0, 13, 8}), ds, cfg), 96);
}

TEST(Verify, CornerProposalIsBoundedByTheClippedWindow) {
  std::mt19937_64 rng(10);
  const auto ds = shifted_pair(rng, 20, 0, 0);
  const MiningConfig cfg;
  // Window rows/cols -4..5: only 6 x 6 cells exist, minus the proposal.
  EXPECT_EQ(verify_candidate(candidate(ds, {0, 0, 0}, {0, 0, 0}), ds, cfg), 32);
}

TEST(Verify, UnrelatedImagesRarelyVerify) {
  std::mt19937_64 rng(11);
  const MiningConfig cfg;
  int low = 0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    std::vector<FeaturePyramid> ds{{"A", {pmtest::random_map(rng, 20, 20, 16)}, 16}, {"B", {pmtest::random_map(rng, 20, 20, 16)}, 16}};
    const int v = verify_candidate(candidate(ds, {0, 9, 9}, {0, 9, 9}), ds, cfg);
    EXPECT_LE(v, 96);
    if (v <= 5) ++low;
  }
  EXPECT_GE(low, trials * 95 / 100);
}

TEST(Verify, VotesGrowWithTolerance) {
  std::mt19937_64 rng(12);
  for (int t = 0; t < 20; ++t) {
    std::vector<FeaturePyramid> ds{{"A", {pmtest::random_map(rng, 16, 16, 4)}, 16}, {"B", {pmtest::random_map(rng, 16, 16, 4)}, 16}};
    const auto c = candidate(ds, {0, 7, 7}, {0, 6, 8});
    MiningConfig cfg;
    int prev = -1;
    for (int tol = 0; tol <= 5; ++tol) {
      cfg.verify_tolerance = tol;
      const int v = verify_candidate(c, ds, cfg);
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
}

TEST(SelectVerified, KeepsTheTopFraction) {
  std::vector<CandidateMatch> c(4);
  const int votes[] = {5, 1, 9, 3};
  for (int i = 0; i < 4; ++i) {
    c[i].votes = votes[i];
    c[i].proposal.pos.row = i;
  }
  const auto half = select_verified(c, 0.5);
  ASSERT_EQ(half.size(), 2u);
  EXPECT_EQ(half[0].candidate_index, 2u);
  EXPECT_EQ(half[1].candidate_index, 0u);
  EXPECT_EQ(select_verified(c, 0.1).size(), 1u);  // ceil
  EXPECT_EQ(select_verified(c, 1.0).size(), 4u);
  EXPECT_TRUE(select_verified(std::vector<CandidateMatch>{}, 0.1).empty());
}

TEST(SelectVerified, PlantedTrueMatchesAreSelected) {
  // 20 true candidates with many votes hidden among 180 false ones.
  std::mt19937_64 rng(13);
  std::vector<CandidateMatch> c(200);
  std::vector<std::size_t> idx(200);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), rng);
  std::set<std::size_t> truth(idx.begin(), idx.begin() + 20);
  std::uniform_int_distribution<int> hi(40, 96), lo(0, 8);
  for (std::size_t i = 0; i < c.size(); ++i) {
    c[i].votes = truth.count(i) ? hi(rng) : lo(rng);
    c[i].proposal.pos.col = static_cast<int>(i);
  }
  const auto sel = select_verified(c, 0.1);
  ASSERT_EQ(sel.size(), 20u);
  for (const auto& v : sel) EXPECT_TRUE(truth.count(v.candidate_index));
}

TEST(PositivePairs, CornersOfTheSquare) {
  std::mt19937_64 rng(14);
  const auto ds = shifted_pair(rng, 30, 2, 1);
  MiningConfig cfg;
  const VerifiedMatch v{0, candidate(ds, {0, 10, 10}, {0, 12, 11})};
  const auto pairs = generate_positive_pairs(v, ds, cfg);
  ASSERT_EQ(pairs.size(), 4u);
  std::set<std::pair<int, int>> corners;
  for (const auto& p : pairs) {
    // Cell centres sit 5.5 cells from the proposal centre (11, 11) on each axis.
    EXPECT_DOUBLE_EQ(std::abs(p.p1.pos.row + 0.5 - 11), 5.5);
    EXPECT_DOUBLE_EQ(std::abs(p.p1.pos.col + 0.5 - 11), 5.5);
    EXPECT_EQ(p.p2.pos.row, p.p1.pos.row + 2);
    EXPECT_EQ(p.p2.pos.col, p.p1.pos.col + 1);
    corners.insert({p.p1.pos.row, p.p1.pos.col});
  }
  EXPECT_EQ(corners.size(), 4u);

  cfg.positive_config = 2;
  for (const auto& p : generate_positive_pairs(v, ds, cfg)) {
    EXPECT_GE(p.p1.pos.row, 10);
    EXPECT_LE(p.p1.pos.row, 11);
    EXPECT_GE(p.p1.pos.col, 10);
    EXPECT_LE(p.p1.pos.col, 11);
  }
}

TEST(PositivePairs, DropsCornersOutsideTheMap) {
  std::mt19937_64 rng(15);
  const auto ds = shifted_pair(rng, 30, 0, 0);
  const VerifiedMatch v{0, candidate(ds, {0, 0, 10}, {0, 0, 10})};
  EXPECT_EQ(generate_positive_pairs(v, ds, MiningConfig{}).size(), 2u);
}

TEST(PositivePairs, ScaledTargetUsesTheScaleRatio) {
  std::mt19937_64 rng(16);
  std::vector<FeaturePyramid> ds{pmtest::random_pyramid(rng, "A", 30, 30, 4, 4), pmtest::random_pyramid(rng, "B", 30, 30, 4, 4)};
  const VerifiedMatch v{0, candidate(ds, {0, 10, 10}, {3, 5, 5})};  // ratio 0.5
  for (const auto& p : generate_positive_pairs(v, ds, MiningConfig{})) {
    EXPECT_EQ(p.p2.pos.scale_index, 3);
    const double dr = p.p1.pos.row + 0.5 - 11;
    EXPECT_EQ(p.p2.pos.row, int(std::floor(6 + dr * 0.5)));
  }
}

TEST(Negatives, MatchExhaustiveOracle) {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 20; ++t) {
    std::vector<FeaturePyramid> ds{pmtest::random_pyramid(rng, "A", 7, 8, 6, 2), pmtest::random_pyramid(rng, "B", 9, 6, 6, 2)};
    const PositivePair pair{{0, {0, 2, 3}}, {1, {t % 2, 1, 1}}, {}};
    const int n = 1 + t;
    const auto neg = mine_negatives(pair, ds, n);
    const auto p1 = ds[0].cell(pair.p1.pos);
    const auto& m = ds[1].maps[pair.p2.pos.scale_index];
    std::vector<double> sims;
    for (int r = 0; r < m.height; ++r)
      for (int c = 0; c < m.width; ++c) sims.push_back(dot(p1, m.cell(r, c)));
    std::sort(sims.rbegin(), sims.rend());
    ASSERT_EQ(neg.size(), std::min<std::size_t>(n, sims.size()));
    for (std::size_t k = 0; k < neg.size(); ++k) {
      EXPECT_EQ(neg[k].image_index, 1u);
      EXPECT_EQ(neg[k].pos.scale_index, pair.p2.pos.scale_index);
      EXPECT_NEAR(dot(p1, ds[1].cell(neg[k].pos)), sims[k], 1e-9);
    }
  }
}

TEST(MiningConfig, RejectsInvalidSettings) {
  MiningConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.positive_config = 7;
  EXPECT_THROW(cfg.validate(), PreconditionError);
  cfg = {};
  cfg.positive_config = 16;
  EXPECT_THROW(cfg.validate(), PreconditionError);
  cfg = {};
  cfg.verified_fraction = 0;
  EXPECT_THROW(cfg.validate(), PreconditionError);
  cfg = {};
  cfg.K = 0;
  EXPECT_THROW(cfg.validate(), PreconditionError);
}

TEST(MineRound, SameSeedSameRound) {
  std::mt19937_64 rng(18);
  std::vector<FeaturePyramid> ds;
  for (int i = 0; i < 4; ++i) ds.push_back(pmtest::random_pyramid(rng, "i" + std::to_string(i), 12, 12, 8, 3));
  MiningConfig cfg;
  cfg.proposals_per_round = 20;
  std::mt19937_64 r1(5), r2(5);
  const auto a = mine_round(ds, cfg, r1, 1), b = mine_round(ds, cfg, r2, 1);
  EXPECT_EQ(to_json(a, ds), to_json(b, ds));
  EXPECT_EQ(a.verified.size(), 2u);
  for (const auto& p : a.pairs) EXPECT_EQ(p.negatives.size(), 20u);
}
