#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "patternmine/builtin_features.hpp"
#include "patternmine/eval.hpp"
#include "patternmine/matcher.hpp"
#include "patternmine/trainer.hpp"

namespace patternmine {

struct BenchmarkResult {
  std::vector<QueryAp> queries;
  double map = 0.0;  // percent
};

/// Query features for a box: the built-in descriptor resampled to the
/// detection grid, passed through the adapter and normalized.
inline QueryPatch region_query(const cv::Mat& image, const std::string& image_id, const Box& box,
                               const AdapterParams& adapter, int query_cells = kDetectionQueryCells,
                               const BuiltinExtractorConfig& ext = {}) {
  FeatureMap raw = extract_region(image, box, query_cells, ext);
  FeaturePyramid p;
  p.image_id = image_id;
  p.maps.push_back(std::move(raw));
  p = l2_normalize_pyramid(std::move(p));
  FeaturePyramid adapted = adapt_pyramid(adapter, p);
  return make_query(adapted.maps[0], image_id);
}

/// Drops detections of the query itself: those in the query image that
/// overlap the query box at det_iou or more.
inline std::vector<Detection> without_query(std::vector<Detection> ranked, const Annotation& query, double det_iou) {
  std::erase_if(ranked, [&](const Detection& d) { return d.image_id == query.image_id && iou(d.box, query.box) >= det_iou; });
  return ranked;
}

/// Every annotation is used once as a query; ground truth is every other
/// instance of its pattern. `adapted` must hold pyramids already passed
/// through `adapter`, and `images` the matching source images.
inline BenchmarkResult one_shot_benchmark(std::span<const cv::Mat> images, const Collection& adapted,
                                          std::span<const Annotation> annotations, const AdapterParams& adapter,
                                          const DetectConfig& det = {}, const EvalConfig& ev = {},
                                          const BuiltinExtractorConfig& ext = {}) {
  BenchmarkResult out;
  for (const auto& query : annotations) {
    const auto idx = adapted.index_of(query.image_id);
    const auto q = region_query(images[idx], query.image_id, query.box, adapter, det.query_cells, ext);
    const auto ranked = without_query(one_shot_detect(q, adapted, det), query, ev.det_iou);
    std::vector<GroundTruth> gts;
    for (const auto& a : annotations)
      if (a.pattern_id == query.pattern_id && !(a.image_id == query.image_id && a.box == query.box))
        gts.push_back({a.image_id, a.box});
    const auto ap = average_precision(ranked, gts, ev.det_iou);
    if (!ap) continue;
    out.queries.push_back({query.image_id + ":" + nlohmann::json(query.box).dump(), query.pattern_id, *ap});
  }
  out.map = detection_map(out.queries);
  return out;
}

inline void write_benchmark(const std::filesystem::path& dir, const BenchmarkResult& r, const EvalConfig& ev) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "per_query_ap.csv", std::ios::trunc);
  csv << "query,class,ap\n";
  for (const auto& q : r.queries) csv << '"' << q.query_id << "\"," << q.class_id << ',' << q.ap << '\n';
  nlohmann::json summary{{"map_percent", r.map},
                         {"num_queries", r.queries.size()},
                         {"det_iou", ev.det_iou},
                         {"ap_integration", "step-wise, no interpolation"},
                         {"positives", "all instances of the pattern except the query box"}};
  std::ofstream(dir / "summary.json", std::ios::trunc) << summary.dump(2) << '\n';
}

} // namespace patternmine
