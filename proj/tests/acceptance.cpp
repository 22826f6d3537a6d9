// Acceptance checks. Prints one PASS/FAIL line per criterion; exit status is
// the number of failures. Pass criterion names as arguments to run a subset.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <thread>

#include "patternmine/cli.hpp"
#include "patternmine/patternmine.hpp"

using namespace patternmine;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string format(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Eigen::VectorXd gaussian(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> d;
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  const int C = 11;
  const LossConfig cfg;
  double worst = 0;
  for (int b = 0; b < 100; ++b) {
    TripletBatch batch;
    for (int t = 0; t < 4; ++t) {
      Triplet tr{gaussian(rng, C), gaussian(rng, C), {}};
      for (int n = 0; n < 6; ++n) tr.negatives.push_back(gaussian(rng, C));
      batch.push_back(std::move(tr));
    }
    AdapterParams p{Eigen::MatrixXd::Identity(C, C), Eigen::VectorXd::Zero(C)};
    p.W += 0.3 * Eigen::MatrixXd(gaussian(rng, C * C).reshaped(C, C));
    p.b = 0.3 * gaussian(rng, C);
    const auto g = triplet_loss_grad(batch, p, cfg);
    AdapterGrad fd = AdapterParams::zeros_like(p);
    const double h = 1e-6;
    for (int i = 0; i < C; ++i) {
      for (int j = 0; j < C; ++j) {
        auto a = p, m = p;
        a.W(i, j) += h;
        m.W(i, j) -= h;
        fd.W(i, j) = (batch_loss(batch, a, cfg) - batch_loss(batch, m, cfg)) / (2 * h);
      }
      auto a = p, m = p;
      a.b[i] += h;
      m.b[i] -= h;
      fd.b[i] = (batch_loss(batch, a, cfg) - batch_loss(batch, m, cfg)) / (2 * h);
    }
    const double diff = std::sqrt((g.W - fd.W).squaredNorm() + (g.b - fd.b).squaredNorm());
    const double scale = std::max({std::sqrt(g.W.squaredNorm() + g.b.squaredNorm()),
                                   std::sqrt(fd.W.squaredNorm() + fd.b.squaredNorm()), 1e-12});
    worst = std::max(worst, diff / scale);
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs < 60, format("max relative error %.2e over 100 batches, %.1fs", worst, secs)};
}

Outcome ransac_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  AffineTransform truth;
  truth.m = {1.1, 0, 5, 0, 0.9, -3};
  const ScoringConfig cfg;
  int exact = 0;
  double worst = 0;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    std::uniform_real_distribution<double> u(0, 640);
    std::vector<Correspondence> c;
    std::vector<int> group(100);
    for (int i = 0; i < 70; ++i) {
      const Point2 p{u(rng), u(rng)};
      c.push_back({p, truth.apply(p), 1.0, 0, 0});
    }
    // Outliers are drawn until they sit clearly off the planted model.
    while (c.size() < 100) {
      Correspondence o{{u(rng), u(rng)}, {u(rng), u(rng)}, 1.0, 0, 0};
      if (reprojection_error(truth, o) > 2 * cfg.inlier_threshold) c.push_back(o);
    }
    std::shuffle(c.begin(), c.end(), rng);
    std::vector<int> planted;
    for (int i = 0; i < 100; ++i) {
      group[i] = i;
      if (reprojection_error(truth, c[i]) < 1e-9) planted.push_back(i);
    }
    const auto fit = ransac_affine(c, group, cfg, seed);
    if (!fit || fit->inliers != planted) continue;
    ++exact;
    for (int k = 0; k < 6; ++k) worst = std::max(worst, std::abs(fit->transform.m[k] - truth.m[k]));
  }
  const double secs = seconds_since(t0);
  return {exact >= 99 && worst < 1e-3 && secs < 60,
          format("exact inlier sets %d/100, max parameter error %.2e, %.1fs", exact, worst, secs)};
}

Outcome hough_recovery() {
  const ScoringConfig cfg;
  int found = 0;
  for (int t = 0; t < 100; ++t) {
    std::mt19937_64 rng(2000 + t);
    std::uniform_real_distribution<double> u(0, 640), shift(-300, 300);
    const int n_planted = 40 + t % 40, n_noise = n_planted;  // 50% planted
    const int ts = static_cast<int>(rng() % 7) - 3;
    const double ratio = std::exp2(ts / 3.0), dx = shift(rng), dy = shift(rng);
    std::vector<Correspondence> c;
    for (int i = 0; i < n_planted; ++i) {
      const Point2 p{u(rng), u(rng)};
      c.push_back({p, {ratio * p.x + dx, ratio * p.y + dy}, 1.0, 3, 3 + ts});
    }
    for (int i = 0; i < n_noise; ++i)
      c.push_back({{u(rng), u(rng)}, {u(rng), u(rng)}, 1.0, 3, static_cast<int>(rng() % 7)});
    const auto bins = hough_vote(c, cfg);
    for (const auto& b : bins) {
      int planted = 0;
      for (int i : b.group) planted += i < n_planted;
      if (planted == n_planted) {
        ++found;
        break;
      }
    }
  }
  return {found == 100, format("planted population in the top-10 bins in %d/100 instances", found)};
}

Outcome score_oracle() {
  std::mt19937_64 rng(3000);
  std::uniform_real_distribution<double> u(0, 640), s(0, 1);
  double worst = 0;
  int monotone_fail = 0;
  for (int t = 0; t < 1000; ++t) {
    AffineTransform tr;
    tr.m = {0.5 + s(rng), s(rng) - 0.5, u(rng) - 320, s(rng) - 0.5, 0.5 + s(rng), u(rng) - 320};
    const int n = 1 + static_cast<int>(rng() % 60);
    std::vector<Correspondence> c;
    std::vector<int> inl;
    for (int i = 0; i < n; ++i) {
      const Point2 p{u(rng), u(rng)};
      const auto q = tr.apply(p);
      c.push_back({p, {q.x + 40 * (s(rng) - 0.5), q.y + 40 * (s(rng) - 0.5)}, s(rng), 0, 0});
      if (rng() % 4) inl.push_back(i);
    }
    const std::size_t N = n + rng() % 100;
    const double sigma = 4 + 40 * s(rng);
    long double sum = 0;
    for (int i : inl) {
      const long double ex = tr.m[0] * c[i].source.x + tr.m[1] * c[i].source.y + tr.m[2] - c[i].target.x;
      const long double ey = tr.m[3] * c[i].source.x + tr.m[4] * c[i].source.y + tr.m[5] - c[i].target.y;
      sum += std::exp(-(ex * ex + ey * ey) / (2.0L * sigma * sigma)) * c[i].similarity;
    }
    const double got = score_pair(c, inl, tr, N, sigma);
    worst = std::max(worst, std::abs(got - static_cast<double>(sum / N)));

    if (inl.empty()) continue;
    // Moving one inlier further off the model, or lowering its similarity,
    // never raises S; a larger N never raises S.
    auto farther = c;
    const int k = inl[rng() % inl.size()];
    const auto q = tr.apply(farther[k].source);
    farther[k].target = {q.x + 2 * (farther[k].target.x - q.x), q.y + 2 * (farther[k].target.y - q.y)};
    auto weaker = c;
    weaker[k].similarity *= 0.5;
    if (score_pair(farther, inl, tr, N, sigma) > got + 1e-15) ++monotone_fail;
    if (score_pair(weaker, inl, tr, N, sigma) > got + 1e-15) ++monotone_fail;
    if (score_pair(c, inl, tr, N + 1, sigma) > got + 1e-15) ++monotone_fail;
  }
  return {worst <= 1e-9 && monotone_fail == 0,
          format("max deviation %.2e on 1000 instances, %d monotonicity violations", worst, monotone_fail)};
}

// ---------------------------------------------------------------------------
// Synthetic corpus shared by the mining and training criteria.

struct SyntheticSet {
  synth::Corpus corpus;
  Collection col;
  std::vector<Annotation> annotations;
};

const SyntheticSet& synthetic_set() {
  static const SyntheticSet set = [] {
    SyntheticSet s;
    synth::CorpusConfig cc;
    cc.seed = 1;
    s.corpus = synth::make_corpus(cc);
    s.col.entries = s.corpus.entries;
    for (std::size_t i = 0; i < s.corpus.images.size(); ++i)
      s.col.pyramids.push_back(l2_normalize_pyramid(builtin_extract(s.corpus.images[i], s.corpus.entries[i].image_id)));
    s.annotations = s.corpus.annotations();
    return s;
  }();
  return set;
}

// A candidate is correct when the centre of its proposal lies inside a
// planted instance and the matched region lands within 1.5 cells of the
// corresponding point of another instance of the same pattern.
bool candidate_is_correct(const CandidateMatch& c, const SyntheticSet& s) {
  const auto ia = c.proposal.image_index, ib = c.target.image_index;
  const double ca = s.col.px_per_cell(ia, 0);
  const double ax = (c.proposal.pos.col + 1) * ca, ay = (c.proposal.pos.row + 1) * ca;
  const double cb = s.col.px_per_cell(ib, c.target.pos.scale_index);
  const double bx = (c.target.pos.col + 1) * cb, by = (c.target.pos.row + 1) * cb;
  for (const auto& A : s.corpus.instances) {
    if (A.image != static_cast<int>(ia) || ax < A.box.x || ax > A.box.right() || ay < A.box.y || ay > A.box.bottom())
      continue;
    for (const auto& B : s.corpus.instances) {
      if (B.image != static_cast<int>(ib) || B.pattern != A.pattern) continue;
      const double ex = B.box.x + (ax - A.box.x) / A.box.w * B.box.w;
      const double ey = B.box.y + (ay - A.box.y) / A.box.h * B.box.h;
      if (std::hypot(ex - bx, ey - by) <= 1.5 * cb) return true;
    }
  }
  return false;
}

Outcome mining_precision() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& s = synthetic_set();
  std::mt19937_64 rng(7);
  int tp = 0, selected = 0, base_tp = 0, base = 0;
  for (int r = 0; r < 10; ++r) {
    const auto round = mine_round(s.col.pyramids, MiningConfig{}, rng, 1);
    for (const auto& c : round.candidates) base_tp += candidate_is_correct(c, s), ++base;
    for (const auto& v : round.verified) tp += candidate_is_correct(v.candidate, s), ++selected;
  }
  const double precision = selected ? static_cast<double>(tp) / selected : 0.0;
  const double secs = seconds_since(t0);
  return {precision >= 0.9 && secs < 300,
          format("precision %d/%d = %.3f (all candidates %d/%d), %.1fs", tp, selected, precision, base_tp, base, secs)};
}

double benchmark_map(const AdapterParams& p) {
  const auto& s = synthetic_set();
  const Collection adapted{s.col.entries, adapt_all(p, s.col.pyramids)};
  return one_shot_benchmark(s.corpus.images, adapted, s.annotations, p).map;
}

struct TrainingRuns {
  double identity = 0, p12 = 0, p2 = 0, seconds_p12 = 0;
};

const TrainingRuns& training_runs() {
  static const TrainingRuns runs = [] {
    TrainingRuns r;
    const auto& s = synthetic_set();
    r.identity = benchmark_map(AdapterParams::identity(kBuiltinChannels));
    TrainConfig tc;
    tc.rounds = 50;
    tc.adam.lr = 1e-2;
    for (int pc : {12, 2}) {
      const auto t0 = std::chrono::steady_clock::now();
      MiningConfig mc;
      mc.positive_config = pc;
      const auto res = train(s.col.pyramids, mc, LossConfig{}, tc, 11);
      (pc == 12 ? r.p12 : r.p2) = benchmark_map(res.params);
      if (pc == 12) r.seconds_p12 = seconds_since(t0);
    }
    return r;
  }();
  return runs;
}

Outcome training_gain() {
  const auto& r = training_runs();
  const double gain = r.p12 - r.identity;
  return {gain >= 10.0 && r.seconds_p12 < 900,
          format("identity mAP %.2f, trained (P12, 50 rounds) %.2f, gain %.2f, %.0fs", r.identity, r.p12, gain,
                 r.seconds_p12)};
}

Outcome positive_config_order() {
  const auto& r = training_runs();
  return {r.p12 >= r.p2, format("P12 mAP %.2f, P2 mAP %.2f", r.p12, r.p2)};
}

// ---------------------------------------------------------------------------

Outcome discovery_end_to_end() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto corpus = synth::make_corpus(synth::discovery_corpus(1));
  Collection col;
  col.entries = corpus.entries;
  for (std::size_t i = 0; i < corpus.images.size(); ++i)
    col.pyramids.push_back(l2_normalize_pyramid(builtin_extract(corpus.images[i], corpus.entries[i].image_id)));
  const DiscoveryConfig cfg;
  const auto pairs = discover_all(col, cfg);
  const auto clusters = extract_clusters(build_graph(pairs, cfg.overlap_iou), pairs);

  // Label each member with the planted instance it overlaps (IoU >= 0.3), or -1.
  auto label = [&](const ClusterMember& m) {
    const auto idx = col.index_of(m.image_id);
    double best = 0.3;
    int out = -1;
    for (std::size_t k = 0; k < corpus.instances.size(); ++k)
      if (corpus.instances[k].image == static_cast<int>(idx) && iou(m.box, corpus.instances[k].box) >= best) {
        best = iou(m.box, corpus.instances[k].box);
        out = static_cast<int>(k);
      }
    return out;
  };
  const int patterns = 2;
  std::vector<int> best_cover(patterns, 0), best_contamination(patterns, 0);
  int mixed = 0;
  for (const auto& c : clusters) {
    std::set<int> pats, instances;
    int unlabeled = 0;
    for (const auto& m : c.members) {
      const int l = label(m);
      if (l < 0) {
        ++unlabeled;
        continue;
      }
      pats.insert(corpus.instances[l].pattern);
      instances.insert(l);
    }
    if (pats.size() > 1) ++mixed;
    if (pats.size() != 1) continue;
    const int p = *pats.begin();
    if (static_cast<int>(instances.size()) > best_cover[p] ||
        (static_cast<int>(instances.size()) == best_cover[p] && unlabeled < best_contamination[p])) {
      best_cover[p] = static_cast<int>(instances.size());
      best_contamination[p] = unlabeled;
    }
  }
  const double secs = seconds_since(t0);
  bool pass = mixed == 0 && secs < 600;
  std::string detail = format("%zu pairs, %zu clusters", pairs.size(), clusters.size());
  for (int p = 0; p < patterns; ++p) {
    pass = pass && best_cover[p] >= 4 && best_contamination[p] == 0;
    detail += format("; pattern %d: %d/5 regions in one cluster, %d contaminating", p, best_cover[p],
                     best_contamination[p]);
  }
  return {pass, detail + format("; %d mixed clusters, %.0fs", mixed, secs)};
}

Outcome null_control() {
  std::mt19937_64 rng(4000);
  const DiscoveryConfig cfg;
  int above = 0;
  double highest = 0;
  for (int t = 0; t < 100; ++t) {
    std::uniform_int_distribution<int> side(256, 640);
    const cv::Mat a = synth::noise_image(side(rng), side(rng), rng);
    const cv::Mat b = synth::noise_image(side(rng), side(rng), rng);
    Collection col;
    col.entries = {{"a", "", a.cols, a.rows, ""}, {"b", "", b.cols, b.rows, ""}};
    col.pyramids = {l2_normalize_pyramid(builtin_extract(a, "a")), l2_normalize_pyramid(builtin_extract(b, "b"))};
    DiscoveryConfig probe = cfg;
    probe.score_threshold = 0.0;
    const auto found = discover_pair(col, 0, 1, probe);
    bool any = false;
    for (const auto& p : found) {
      highest = std::max(highest, p.score);
      any = any || p.score >= cfg.score_threshold;
    }
    above += any;
  }
  return {above <= 5, format("%d/100 noise pairs above threshold %.3f (highest score %.4f)", above,
                             cfg.score_threshold, highest)};
}

// ---------------------------------------------------------------------------

double pr_oracle(const std::vector<bool>& hits, std::size_t relevant) {
  // Precision at every rank, summed where recall increases.
  double area = 0;
  for (std::size_t k = 0; k < hits.size(); ++k) {
    if (!hits[k]) continue;
    const double tp = static_cast<double>(std::count(hits.begin(), hits.begin() + k + 1, true));
    area += (tp / (k + 1)) / relevant;
  }
  return area;
}

Outcome eval_oracles() {
  std::mt19937_64 rng(5000);
  std::uniform_real_distribution<double> u(0, 100), s(5, 40);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<GroundTruth> gts;
    std::vector<Detection> dets;
    const int ng = 1 + static_cast<int>(rng() % 5), nd = static_cast<int>(rng() % 12);
    for (int i = 0; i < ng; ++i) gts.push_back({rng() % 2 ? "x" : "y", {u(rng), u(rng), s(rng), s(rng)}});
    for (int i = 0; i < nd; ++i) dets.push_back({rng() % 2 ? "x" : "y", {u(rng), u(rng), s(rng), s(rng)}, u(rng), 0});
    std::sort(dets.begin(), dets.end(), detection_before);
    // Oracle: greedy matching by rank against the best free ground truth.
    std::vector<bool> used(gts.size()), hits;
    for (const auto& d : dets) {
      int best = -1;
      double o = -1;
      for (std::size_t g = 0; g < gts.size(); ++g)
        if (!used[g] && gts[g].image_id == d.image_id && iou(d.box, gts[g].box) > o) {
          o = iou(d.box, gts[g].box);
          best = static_cast<int>(g);
        }
      const bool hit = best >= 0 && o >= 0.3;
      if (hit) used[best] = true;
      hits.push_back(hit);
    }
    worst = std::max(worst, std::abs(*average_precision(dets, gts, 0.3) - pr_oracle(hits, gts.size())));
  }

  // A detector that returns exactly the ground truth scores 100.
  const auto& anns = synth::make_corpus(synth::discovery_corpus(3)).annotations();
  std::vector<QueryAp> q;
  for (const auto& query : anns) {
    std::vector<GroundTruth> gts;
    std::vector<Detection> dets;
    for (const auto& a : anns)
      if (a.pattern_id == query.pattern_id && !(a.image_id == query.image_id && a.box == query.box)) {
        gts.push_back({a.image_id, a.box});
        dets.push_back({a.image_id, a.box, 1.0, 0});
      }
    q.push_back({query.image_id, query.pattern_id, *average_precision(dets, gts, 0.3)});
  }
  const double perfect = detection_map(q);
  return {worst <= 1e-12 && perfect == 100.0,
          format("max AP deviation %.2e on 1000 instances; perfect detector mAP %.4f", worst, perfect)};
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "patternmine");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto root = fs::temp_directory_path() / "patternmine_acceptance_determinism";
  fs::remove_all(root);
  std::vector<std::string> pairs, clusters;
  for (const char* run : {"run1", "run2"}) {
    const auto dir = root / run;
    const auto cfg = (dir / "config.json").string();
    if (run_cli({"synth", "--out", dir.string(), "--preset", "discovery", "--seed", "1"}) != 0 ||
        run_cli({"extract", "--config", cfg}) != 0 || run_cli({"discover", "--config", cfg, "--seed", "5"}) != 0 ||
        run_cli({"cluster", "--config", cfg, "--seed", "5"}) != 0)
      return {false, "a CLI step failed"};
    pairs.push_back(slurp(dir / "out" / "pairs.json"));
    clusters.push_back(slurp(dir / "out" / "clusters.json"));
  }
  const bool same = pairs[0] == pairs[1] && clusters[0] == clusters[1] && !pairs[0].empty();
  return {same, format("pairs.json %zu bytes, clusters.json %zu bytes, %s, %.0fs", pairs[0].size(), clusters[0].size(),
                       same ? "byte-identical" : "different", seconds_since(t0))};
}

Outcome throughput() {
  std::mt19937_64 rng(6000);
  std::vector<FeaturePyramid> ds;
  for (int i = 0; i < 100; ++i)
    ds.push_back(l2_normalize_pyramid(builtin_extract(synth::random_scene(640, 480, rng), "t" + std::to_string(i))));
  const auto q = make_query(ds[0], {0, 10, 10}, 2, 2);
  auto time_with = [&](int jobs) {
    double best = 1e9;
    for (int rep = 0; rep < 3; ++rep) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto top = top_k_matches(q, ds, 10, true, jobs);
      best = std::min(best, seconds_since(t0));
      if (top.empty()) return 1e9;
    }
    return best;
  };
  const double t1 = time_with(1), t4 = time_with(4);
  const double speedup = t1 / t4;
  return {t1 < 10.0 && speedup >= 3.0, format("1 worker %.3fs, 4 workers %.3fs, speedup %.2fx on %u hardware threads",
                                              t1, t4, speedup, std::thread::hardware_concurrency())};
}

} // namespace

int main(int argc, char** argv) {
  logger().set_level(spdlog::level::err);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient-check", gradient_check},
      {"ransac-recovery", ransac_recovery},
      {"hough-recovery", hough_recovery},
      {"score-oracle", score_oracle},
      {"mining-precision", mining_precision},
      {"training-gain", training_gain},
      {"positive-config-order", positive_config_order},
      {"discovery-end-to-end", discovery_end_to_end},
      {"null-control", null_control},
      {"eval-oracles", eval_oracles},
      {"determinism", determinism},
      {"throughput", throughput},
  };
  std::set<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures;
}
