#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "patternmine/builtin_features.hpp"
#include "patternmine/discovery.hpp"
#include "patternmine/error.hpp"
#include "patternmine/eval.hpp"
#include "patternmine/matcher.hpp"
#include "patternmine/miner.hpp"
#include "patternmine/trainer.hpp"

namespace patternmine {

struct TrainSection {
  int rounds = 200;
  double lr = 1e-5;
  int checkpoint_every = 0;
};

/// Everything one CLI run needs. Paths are resolved against the directory
/// of the config file they were read from.
struct RunConfig {
  std::filesystem::path manifest;
  std::filesystem::path out_dir = "out";
  std::filesystem::path annotations;
  std::filesystem::path adapter;  // checkpoint; empty means identity
  BuiltinExtractorConfig extract;
  MiningConfig mining;
  LossConfig loss;
  TrainSection train;
  DetectConfig detect;
  DiscoveryConfig discovery;
  EvalConfig eval;
  std::uint64_t seed = 0;
  int jobs = 1;
};

namespace detail {

// Copies j[key] into field when present.
template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& field) {
  if (auto it = j.find(key); it != j.end()) field = it->template get<T>();
}

inline void reject_unknown(const nlohmann::json& j, const std::string& section, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw DataError("config: '" + section + "' must be an object");
  const std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw DataError("config: unknown key '" + section + "." + k + "'");
}

} // namespace detail

inline void from_json(const nlohmann::json& j, BuiltinExtractorConfig& c) {
  detail::reject_unknown(j, "extract",
                         {"base_max_dim", "cell_stride", "num_scales", "scales_per_octave", "context_radius",
                          "signed_orientation", "gradient_floor", "color_weight", "presmooth_sigma"});
  detail::read_opt(j, "base_max_dim", c.base_max_dim);
  detail::read_opt(j, "cell_stride", c.cell_stride);
  detail::read_opt(j, "num_scales", c.num_scales);
  detail::read_opt(j, "scales_per_octave", c.scales_per_octave);
  detail::read_opt(j, "context_radius", c.context_radius);
  detail::read_opt(j, "signed_orientation", c.signed_orientation);
  detail::read_opt(j, "gradient_floor", c.gradient_floor);
  detail::read_opt(j, "color_weight", c.color_weight);
  detail::read_opt(j, "presmooth_sigma", c.presmooth_sigma);
}

inline void to_json(nlohmann::json& j, const BuiltinExtractorConfig& c) {
  j = {{"base_max_dim", c.base_max_dim},       {"cell_stride", c.cell_stride},
       {"num_scales", c.num_scales},           {"scales_per_octave", c.scales_per_octave},
       {"context_radius", c.context_radius},   {"signed_orientation", c.signed_orientation},
       {"gradient_floor", c.gradient_floor},   {"color_weight", c.color_weight},
       {"presmooth_sigma", c.presmooth_sigma}};
}

inline void from_json(const nlohmann::json& j, MiningConfig& c) {
  detail::reject_unknown(j, "mining",
                         {"K", "verify_window", "verify_tolerance", "verified_fraction", "positive_config",
                          "proposals_per_round", "n_neg", "candidate_top1", "candidate_pool_size"});
  detail::read_opt(j, "K", c.K);
  detail::read_opt(j, "verify_window", c.verify_window);
  detail::read_opt(j, "verify_tolerance", c.verify_tolerance);
  detail::read_opt(j, "verified_fraction", c.verified_fraction);
  detail::read_opt(j, "positive_config", c.positive_config);
  detail::read_opt(j, "proposals_per_round", c.proposals_per_round);
  detail::read_opt(j, "n_neg", c.n_neg);
  detail::read_opt(j, "candidate_top1", c.candidate_top1);
  detail::read_opt(j, "candidate_pool_size", c.candidate_pool_size);
}

inline void to_json(nlohmann::json& j, const MiningConfig& c) {
  j = {{"K", c.K},
       {"verify_window", c.verify_window},
       {"verify_tolerance", c.verify_tolerance},
       {"verified_fraction", c.verified_fraction},
       {"positive_config", c.positive_config},
       {"proposals_per_round", c.proposals_per_round},
       {"n_neg", c.n_neg},
       {"candidate_top1", c.candidate_top1},
       {"candidate_pool_size", c.candidate_pool_size}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  detail::reject_unknown(j, "loss", {"lambda", "n_neg"});
  detail::read_opt(j, "lambda", c.lambda);
  detail::read_opt(j, "n_neg", c.n_neg);
}

inline void to_json(nlohmann::json& j, const LossConfig& c) { j = {{"lambda", c.lambda}, {"n_neg", c.n_neg}}; }

inline void from_json(const nlohmann::json& j, TrainSection& c) {
  detail::reject_unknown(j, "train", {"rounds", "lr", "checkpoint_every"});
  detail::read_opt(j, "rounds", c.rounds);
  detail::read_opt(j, "lr", c.lr);
  detail::read_opt(j, "checkpoint_every", c.checkpoint_every);
}

inline void to_json(nlohmann::json& j, const TrainSection& c) {
  j = {{"rounds", c.rounds}, {"lr", c.lr}, {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, DetectConfig& c) {
  detail::reject_unknown(j, "detect", {"nms_iou", "query_cells"});
  detail::read_opt(j, "nms_iou", c.nms_iou);
  detail::read_opt(j, "query_cells", c.query_cells);
}

inline void to_json(nlohmann::json& j, const DetectConfig& c) {
  j = {{"nms_iou", c.nms_iou}, {"query_cells", c.query_cells}};
}

inline void from_json(const nlohmann::json& j, ScoringConfig& c) {
  detail::reject_unknown(j, "discovery.scoring",
                         {"sigma", "inlier_threshold", "ransac_iters", "translation_bin", "scale_bin",
                          "scales_per_octave", "min_group_votes", "max_groups"});
  detail::read_opt(j, "sigma", c.sigma);
  detail::read_opt(j, "inlier_threshold", c.inlier_threshold);
  detail::read_opt(j, "ransac_iters", c.ransac_iters);
  detail::read_opt(j, "translation_bin", c.translation_bin);
  detail::read_opt(j, "scale_bin", c.scale_bin);
  detail::read_opt(j, "scales_per_octave", c.scales_per_octave);
  detail::read_opt(j, "min_group_votes", c.min_group_votes);
  detail::read_opt(j, "max_groups", c.max_groups);
}

inline void to_json(nlohmann::json& j, const ScoringConfig& c) {
  j = {{"sigma", c.sigma},
       {"inlier_threshold", c.inlier_threshold},
       {"ransac_iters", c.ransac_iters},
       {"translation_bin", c.translation_bin},
       {"scale_bin", c.scale_bin},
       {"scales_per_octave", c.scales_per_octave},
       {"min_group_votes", c.min_group_votes},
       {"max_groups", c.max_groups}};
}

inline void from_json(const nlohmann::json& j, DiscoveryConfig& c) {
  detail::reject_unknown(j, "discovery",
                         {"scoring", "score_threshold", "overlap_iou", "duplicate_iou", "min_inlier_neighbours"});
  detail::read_opt(j, "scoring", c.scoring);
  detail::read_opt(j, "score_threshold", c.score_threshold);
  detail::read_opt(j, "overlap_iou", c.overlap_iou);
  detail::read_opt(j, "duplicate_iou", c.duplicate_iou);
  detail::read_opt(j, "min_inlier_neighbours", c.min_inlier_neighbours);
}

inline void to_json(nlohmann::json& j, const DiscoveryConfig& c) {
  j = {{"scoring", c.scoring},
       {"score_threshold", c.score_threshold},
       {"overlap_iou", c.overlap_iou},
       {"duplicate_iou", c.duplicate_iou},
       {"min_inlier_neighbours", c.min_inlier_neighbours}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  detail::reject_unknown(j, "eval", {"det_iou"});
  detail::read_opt(j, "det_iou", c.det_iou);
}

inline void to_json(nlohmann::json& j, const EvalConfig& c) { j = {{"det_iou", c.det_iou}}; }

inline void validate(const RunConfig& c) {
  c.mining.validate();
  if (!(c.eval.det_iou > 0.0 && c.eval.det_iou < 1.0)) throw DataError("config: eval.det_iou must be in (0, 1)");
  if (c.loss.lambda <= 0.0) throw DataError("config: loss.lambda must be positive");
  if (c.train.rounds < 0 || c.train.lr <= 0.0) throw DataError("config: train.rounds >= 0 and train.lr > 0 required");
  if (c.discovery.scoring.sigma <= 0.0 || c.discovery.scoring.inlier_threshold <= 0.0)
    throw DataError("config: discovery.scoring.sigma and inlier_threshold must be positive");
  if (c.extract.base_max_dim < 8 || c.extract.cell_stride < 1 || c.extract.num_scales < 1)
    throw DataError("config: invalid extract section");
  if (c.jobs < 1) throw DataError("config: jobs must be >= 1");
}

/// Parses a RunConfig; relative paths are resolved against base_dir.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
  RunConfig c;
  try {
    detail::reject_unknown(j, "<root>",
                           {"manifest", "out_dir", "annotations", "adapter", "extract", "mining", "loss", "train",
                            "detect", "discovery", "eval", "seed", "jobs"});
    auto path = [&](const char* key, std::filesystem::path& field) {
      if (auto it = j.find(key); it != j.end() && !it->get<std::string>().empty())
        field = resolve_relative(base_dir, it->get<std::string>());
    };
    path("manifest", c.manifest);
    path("out_dir", c.out_dir);
    path("annotations", c.annotations);
    path("adapter", c.adapter);
    detail::read_opt(j, "extract", c.extract);
    detail::read_opt(j, "mining", c.mining);
    detail::read_opt(j, "loss", c.loss);
    detail::read_opt(j, "train", c.train);
    detail::read_opt(j, "detect", c.detect);
    detail::read_opt(j, "discovery", c.discovery);
    detail::read_opt(j, "eval", c.eval);
    detail::read_opt(j, "seed", c.seed);
    detail::read_opt(j, "jobs", c.jobs);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("config: ") + e.what());
  } catch (const PreconditionError& e) {
    throw DataError(e.what());
  }
  try {
    validate(c);
  } catch (const PreconditionError& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"manifest", c.manifest.string()},
          {"out_dir", c.out_dir.string()},
          {"annotations", c.annotations.string()},
          {"adapter", c.adapter.string()},
          {"extract", c.extract},
          {"mining", c.mining},
          {"loss", c.loss},
          {"train", c.train},
          {"detect", c.detect},
          {"discovery", c.discovery},
          {"eval", c.eval},
          {"seed", c.seed},
          {"jobs", c.jobs}};
}

} // namespace patternmine
