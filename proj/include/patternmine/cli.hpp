#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "patternmine/benchmark.hpp"
#include "patternmine/builtin_features.hpp"
#include "patternmine/config.hpp"
#include "patternmine/discovery.hpp"
#include "patternmine/error.hpp"
#include "patternmine/eval.hpp"
#include "patternmine/feature_store.hpp"
#include "patternmine/log.hpp"
#include "patternmine/matcher.hpp"
#include "patternmine/report.hpp"
#include "patternmine/synthetic.hpp"
#include "patternmine/trainer.hpp"

namespace patternmine::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

class UsageError : public Error {
public:
  using Error::Error;
};

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out;
};

namespace detail {

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline RunConfig resolve(const CommonOptions& o) {
  if (o.config.empty()) throw UsageError("--config is required");
  RunConfig c = load_run_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.jobs) c.jobs = *o.jobs;
  if (!o.out.empty()) c.out_dir = o.out;
  if (c.jobs < 1) throw UsageError("--jobs must be >= 1");
  c.discovery.seed = c.seed;
  c.discovery.jobs = c.jobs;
  c.detect.jobs = c.jobs;
  return c;
}

inline void require_manifest(const RunConfig& c) {
  if (c.manifest.empty()) throw DataError("config has no manifest");
  if (!std::filesystem::exists(c.manifest)) throw DataError("manifest not found: " + c.manifest.string());
}

inline AdapterParams load_adapter(const RunConfig& c, int channels) {
  if (c.adapter.empty()) return AdapterParams::identity(channels);
  auto params = read_checkpoint(c.adapter).params;
  if (params.in_dim() != channels)
    throw DataError("adapter " + c.adapter.string() + " expects " + std::to_string(params.in_dim()) +
                    " channels, features have " + std::to_string(channels));
  return params;
}

// Collection with the configured adapter applied.
inline Collection adapted_collection(const RunConfig& c, AdapterParams* adapter_out = nullptr) {
  require_manifest(c);
  Collection col = load_collection(c.manifest);
  if (col.size() == 0) throw DataError("manifest " + c.manifest.string() + " is empty");
  const auto adapter = load_adapter(c, col.pyramids.front().channels());
  col.pyramids = adapt_all(adapter, col.pyramids, c.jobs);
  if (adapter_out) *adapter_out = adapter;
  return col;
}

inline cv::Mat source_image(const RunConfig& c, const ImageManifestEntry& e) {
  if (e.source_path.empty()) throw DataError("manifest entry '" + e.image_id + "' has no source_path");
  return load_image(resolve_relative(c.manifest.parent_path(), e.source_path));
}

// "img7:10,20,120,90" -> (image id, box)
inline std::pair<std::string, Box> parse_query(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0) throw UsageError("--query must look like id:x,y,w,h");
  std::array<double, 4> v{};
  std::istringstream in(s.substr(colon + 1));
  char comma = 0;
  for (int i = 0; i < 4; ++i) {
    if (!(in >> v[i])) throw UsageError("--query: cannot parse box in '" + s + "'");
    if (i < 3 && (!(in >> comma) || comma != ',')) throw UsageError("--query: expected ',' in '" + s + "'");
  }
  if (in >> comma) throw UsageError("--query: trailing characters in '" + s + "'");
  if (v[2] <= 0 || v[3] <= 0) throw UsageError("--query: box must have positive width and height");
  return {s.substr(0, colon), Box{v[0], v[1], v[2], v[3]}};
}

inline std::vector<ScoredPair> read_pairs(const std::filesystem::path& path) {
  const auto j = read_json(path);
  try {
    return j.at("pairs").get<std::vector<ScoredPair>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

inline std::vector<Cluster> read_clusters(const std::filesystem::path& path) {
  const auto j = read_json(path);
  try {
    return j.at("clusters").get<std::vector<Cluster>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

/// Writes the built-in pyramid of every manifest image. Entries with a
/// pyramid_path are written there; the rest go to <out>/pyramids. The
/// completed manifest is written to <out>/manifest.jsonl.
inline int cmd_extract(const RunConfig& c) {
  namespace fs = std::filesystem;
  detail::require_manifest(c);
  auto entries = read_manifest(c.manifest);
  const auto manifest_dir = c.manifest.parent_path();
  const auto out_dir = fs::absolute(c.out_dir);
  std::vector<std::string> errors(entries.size());
  parallel_for(entries.size(), c.jobs, [&](std::size_t i) {
    auto& e = entries[i];
    try {
      const cv::Mat img = detail::source_image(c, e);
      if (img.cols != e.pixel_width || img.rows != e.pixel_height)
        logger().warn("extract: '{}' is {}x{}, manifest says {}x{}; using the image", e.image_id, img.cols, img.rows,
                      e.pixel_width, e.pixel_height);
      e.pixel_width = img.cols;
      e.pixel_height = img.rows;
      const fs::path target = e.pyramid_path.empty() ? out_dir / "pyramids" / (e.image_id + ".amfp")
                                                     : resolve_relative(manifest_dir, e.pyramid_path);
      write_pyramid_file(target, builtin_extract(img, e.image_id, c.extract));
      e.pyramid_path = fs::absolute(target).lexically_normal().string();
      if (!e.source_path.empty())
        e.source_path = fs::absolute(resolve_relative(manifest_dir, e.source_path)).lexically_normal().string();
    } catch (const Error& err) {
      errors[i] = err.what();
    }
  });
  for (const auto& err : errors)
    if (!err.empty()) throw DataError(err);
  write_manifest(out_dir / "manifest.jsonl", entries);
  logger().info("extract: {} pyramids, channels {}", entries.size(), c.extract.channels());
  return kExitOk;
}

inline int cmd_train(const RunConfig& c) {
  detail::require_manifest(c);
  const Collection col = load_collection(c.manifest);
  TrainConfig tc;
  tc.rounds = c.train.rounds;
  tc.adam.lr = c.train.lr;
  tc.checkpoint_every = c.train.checkpoint_every;
  tc.checkpoint_dir = c.out_dir / "checkpoints";
  tc.jobs = c.jobs;
  const auto result = train(col.pyramids, c.mining, c.loss, tc, c.seed);
  write_checkpoint(c.out_dir / "adapter.amck", result.params, result.state);
  write_history_csv(c.out_dir / "train_history.csv", result.history);
  return kExitOk;
}

inline int cmd_detect(const RunConfig& c, const std::string& query) {
  const auto [image_id, box] = detail::parse_query(query);
  AdapterParams adapter;
  const Collection col = detail::adapted_collection(c, &adapter);
  const auto idx = col.index_of(image_id);
  const cv::Mat img = detail::source_image(c, col.entries[idx]);
  const auto q = region_query(img, image_id, box, adapter, c.detect.query_cells, c.extract);
  const auto ranked = one_shot_detect(q, col, c.detect);
  detail::write_json(c.out_dir / "detections.json",
                     {{"query", {{"image_id", image_id}, {"box", box}}}, {"detections", ranked}});
  return kExitOk;
}

inline int cmd_discover(const RunConfig& c) {
  const Collection col = detail::adapted_collection(c);
  const auto pairs = discover_all(col, c.discovery);
  detail::write_json(c.out_dir / "pairs.json", {{"seed", c.seed}, {"discovery", c.discovery}, {"pairs", pairs}});
  logger().info("discover: {} scored pairs", pairs.size());
  return kExitOk;
}

inline int cmd_cluster(const RunConfig& c) {
  const auto pairs = detail::read_pairs(c.out_dir / "pairs.json");
  const auto graph = build_graph(pairs, c.discovery.overlap_iou);
  const auto clusters = extract_clusters(graph, pairs);
  detail::write_json(c.out_dir / "clusters.json", {{"clusters", clusters}});
  return kExitOk;
}

inline int cmd_eval(const RunConfig& c) {
  if (c.annotations.empty()) throw DataError("config has no annotations");
  const auto anns = read_annotations(c.annotations);
  AdapterParams adapter;
  const Collection col = detail::adapted_collection(c, &adapter);
  std::vector<cv::Mat> images;
  for (const auto& e : col.entries) images.push_back(detail::source_image(c, e));
  const auto r = one_shot_benchmark(images, col, anns, adapter, c.detect, c.eval, c.extract);
  write_benchmark(c.out_dir / "eval", r, c.eval);
  std::printf("mAP %.2f over %zu queries\n", r.map, r.queries.size());
  return kExitOk;
}

inline int cmd_report(const RunConfig& c) {
  detail::require_manifest(c);
  const auto clusters = detail::read_clusters(c.out_dir / "clusters.json");
  const auto entries = read_manifest(c.manifest);
  ReportConfig rc;
  rc.image_root = c.manifest.parent_path();
  const auto s = emit_report(clusters, entries, c.out_dir / "report", rc);
  logger().info("report: {} pages, {} crops, {} placeholders", s.pages, s.crops, s.placeholders);
  return kExitOk;
}

/// Writes a planted-copy corpus: images/, manifest.jsonl, annotations.jsonl
/// and a config.json that points at them.
inline int cmd_synth(const std::filesystem::path& out, const std::string& preset, std::uint64_t seed) {
  namespace fs = std::filesystem;
  synth::CorpusConfig cc;
  if (preset == "discovery")
    cc = synth::discovery_corpus(seed);
  else if (preset == "mining")
    cc.seed = seed;
  else
    throw UsageError("--preset must be 'mining' or 'discovery'");
  auto corpus = synth::make_corpus(cc);
  fs::create_directories(out / "images");
  for (std::size_t i = 0; i < corpus.images.size(); ++i) {
    auto& e = corpus.entries[i];
    e.source_path = "images/" + e.image_id + ".png";
    e.pyramid_path = "pyramids/" + e.image_id + ".amfp";
    if (!cv::imwrite((out / e.source_path).string(), corpus.images[i]))
      throw DataError("cannot write " + (out / e.source_path).string());
  }
  write_manifest(out / "manifest.jsonl", corpus.entries);
  write_annotations(out / "annotations.jsonl", corpus.annotations());
  detail::write_json(out / "config.json", {{"manifest", "manifest.jsonl"},
                                           {"annotations", "annotations.jsonl"},
                                           {"out_dir", "out"},
                                           {"seed", seed}});
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"Pattern discovery in image collections"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "patternmine 1.0");

  CommonOptions opt;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "RunConfig JSON")->required();
    sub->add_option("--seed", opt.seed, "override the config seed");
    sub->add_option("--jobs", opt.jobs, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--out", opt.out, "output directory (overrides out_dir)");
  };

  auto* extract = app.add_subcommand("extract", "compute built-in feature pyramids");
  auto* train_cmd = app.add_subcommand("train", "train the feature adapter");
  auto* detect = app.add_subcommand("detect", "one-shot detection of a query region");
  auto* discover = app.add_subcommand("discover", "score all image pairs");
  auto* cluster = app.add_subcommand("cluster", "group scored regions into clusters");
  auto* eval = app.add_subcommand("eval", "one-shot detection benchmark against annotations");
  auto* report = app.add_subcommand("report", "static HTML cluster report");
  for (auto* sub : {extract, train_cmd, detect, discover, cluster, eval, report}) common(sub);

  std::string query;
  detect->add_option("--query", query, "image_id:x,y,w,h in pixels")->required();

  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic planted-copy corpus");
  std::string synth_out, preset = "discovery";
  std::uint64_t synth_seed = 1;
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--preset", preset, "mining or discovery")->check(CLI::IsMember({"mining", "discovery"}));
  synth_cmd->add_option("--seed", synth_seed, "corpus seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth(synth_out, preset, synth_seed);
    const RunConfig c = detail::resolve(opt);
    if (extract->parsed()) return cmd_extract(c);
    if (train_cmd->parsed()) return cmd_train(c);
    if (detect->parsed()) return cmd_detect(c, query);
    if (discover->parsed()) return cmd_discover(c);
    if (cluster->parsed()) return cmd_cluster(c);
    if (eval->parsed()) return cmd_eval(c);
    if (report->parsed()) return cmd_report(c);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const cv::Exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

} // namespace patternmine::cli
