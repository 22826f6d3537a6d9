#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "patternmine/box.hpp"
#include "patternmine/error.hpp"
#include "patternmine/matcher.hpp"

namespace patternmine {

struct Annotation {
  std::string image_id;
  std::string pattern_id;
  Box box;
};

inline void to_json(nlohmann::json& j, const Annotation& a) {
  j = nlohmann::json{{"image_id", a.image_id}, {"pattern_id", a.pattern_id}, {"box", a.box}};
}

inline void from_json(const nlohmann::json& j, Annotation& a) {
  a.image_id = j.at("image_id").get<std::string>();
  a.pattern_id = j.at("pattern_id").get<std::string>();
  a.box = j.at("box").get<Box>();
  if (a.pattern_id.empty()) throw DataError("annotation with empty pattern_id");
}

inline std::vector<Annotation> read_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotations " + path.string());
  std::vector<Annotation> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<Annotation>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_annotations(const std::filesystem::path& path, std::span<const Annotation> anns) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  for (const auto& a : anns) out << nlohmann::json(a).dump() << '\n';
}

struct EvalConfig {
  double det_iou = 0.3;
};

struct GroundTruth {
  std::string image_id;
  Box box;
};

/// Marks each ranked detection as true or false positive: a detection is a
/// hit when its best-overlapping unmatched ground truth in the same image
/// reaches det_iou. Each ground truth is matched at most once.
inline std::vector<bool> match_detections(std::span<const Detection> ranked, std::span<const GroundTruth> gts,
                                          double det_iou) {
  std::vector<bool> used(gts.size(), false);
  std::vector<bool> hit(ranked.size(), false);
  for (std::size_t d = 0; d < ranked.size(); ++d) {
    double best = -1.0;
    std::size_t best_gt = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image_id != ranked[d].image_id) continue;
      const double o = iou(ranked[d].box, gts[g].box);
      if (o > best) {
        best = o;
        best_gt = g;
      }
    }
    if (best_gt < gts.size() && best >= det_iou) {
      used[best_gt] = true;
      hit[d] = true;
    }
  }
  return hit;
}

/// Step-wise (non-interpolated) area under the precision/recall curve:
/// the mean, over all ground truths, of the precision at the rank where each
/// is retrieved (0 for those never retrieved).
inline double average_precision_from_hits(const std::vector<bool>& hits, std::size_t n_relevant) {
  if (n_relevant == 0) return 0.0;
  double sum = 0.0;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < hits.size(); ++k)
    if (hits[k]) sum += static_cast<double>(++tp) / static_cast<double>(k + 1);
  return sum / static_cast<double>(n_relevant);
}

/// Detection AP; nullopt when there is no ground truth.
inline std::optional<double> average_precision(std::span<const Detection> ranked, std::span<const GroundTruth> gts,
                                               double det_iou) {
  if (gts.empty()) return std::nullopt;
  return average_precision_from_hits(match_detections(ranked, gts, det_iou), gts.size());
}

struct QueryAp {
  std::string query_id;
  std::string class_id;
  double ap = 0.0;
};

/// Class-level mAP in percent: mean over classes of the mean query AP.
inline double detection_map(std::span<const QueryAp> queries) {
  std::map<std::string, std::pair<double, int>> per_class;
  for (const auto& q : queries) {
    auto& [sum, n] = per_class[q.class_id];
    sum += q.ap;
    ++n;
  }
  if (per_class.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [cls, acc] : per_class) total += acc.first / acc.second;
  return 100.0 * total / static_cast<double>(per_class.size());
}

inline double ltll_accuracy(std::span<const std::string> predictions, std::span<const std::string> labels) {
  if (predictions.size() != labels.size())
    throw PreconditionError("ltll_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// Oxford-style relevance: good and ok are positives, junk is ignored.
struct RelevanceSet {
  std::set<std::string> good;
  std::set<std::string> ok;
  std::set<std::string> junk;
};

inline double retrieval_ap(std::span<const std::string> ranking, const RelevanceSet& rel) {
  std::vector<bool> hits;
  for (const auto& id : ranking) {
    if (rel.junk.count(id)) continue;
    hits.push_back(rel.good.count(id) || rel.ok.count(id));
  }
  return average_precision_from_hits(hits, rel.good.size() + rel.ok.size());
}

/// Mean retrieval AP over queries, in percent.
inline double retrieval_map(std::span<const std::vector<std::string>> rankings, std::span<const RelevanceSet> relevance) {
  if (rankings.size() != relevance.size()) throw PreconditionError("retrieval_map: rankings/relevance size mismatch");
  if (rankings.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t q = 0; q < rankings.size(); ++q) total += retrieval_ap(rankings[q], relevance[q]);
  return 100.0 * total / static_cast<double>(rankings.size());
}

} // namespace patternmine
