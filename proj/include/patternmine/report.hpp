#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "patternmine/discovery.hpp"
#include "patternmine/error.hpp"
#include "patternmine/feature_store.hpp"
#include "patternmine/log.hpp"

namespace patternmine {

struct ReportConfig {
  int tile_height = 160;
  std::filesystem::path image_root;  // source_path entries resolve against this
};

struct ReportSummary {
  std::size_t pages = 0;
  std::size_t crops = 0;
  std::size_t placeholders = 0;
};

namespace detail {

inline std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(double v, const char* f = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline cv::Mat placeholder_tile(int size) {
  cv::Mat tile(size, size, CV_8UC3, cv::Scalar(200, 200, 200));
  cv::line(tile, {0, 0}, {size - 1, size - 1}, cv::Scalar(90, 90, 90), 2);
  cv::line(tile, {0, size - 1}, {size - 1, 0}, cv::Scalar(90, 90, 90), 2);
  return tile;
}

inline std::string page_name(int id) { return "cluster_" + std::to_string(id) + ".html"; }

constexpr const char* kStyle =
    "body{font-family:sans-serif;margin:1.5em}"
    "table{border-collapse:collapse}td,th{padding:4px 10px;border-bottom:1px solid #ddd;text-align:left}"
    ".tiles{display:flex;flex-wrap:wrap;gap:12px}.tile{font-size:12px}";

} // namespace detail

/// Writes index.html (clusters by decreasing aggregate score), one page per
/// cluster, and a cropped tile per member under crops/. Images that cannot
/// be read get a placeholder tile.
inline ReportSummary emit_report(std::span<const Cluster> clusters, std::span<const ImageManifestEntry> manifest,
                                 const std::filesystem::path& out_dir, const ReportConfig& cfg = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "crops");
  std::map<std::string, const ImageManifestEntry*> by_id;
  for (const auto& e : manifest) by_id[e.image_id] = &e;

  std::vector<const Cluster*> order;
  for (const auto& c : clusters) order.push_back(&c);
  std::stable_sort(order.begin(), order.end(), [](const Cluster* a, const Cluster* b) {
    if (a->aggregate_score != b->aggregate_score) return a->aggregate_score > b->aggregate_score;
    return a->id < b->id;
  });

  ReportSummary summary;
  std::map<std::string, cv::Mat> cache;
  auto image_for = [&](const std::string& id) -> const cv::Mat& {
    auto [it, fresh] = cache.try_emplace(id);
    if (fresh) {
      if (auto e = by_id.find(id); e != by_id.end() && !e->second->source_path.empty())
        it->second = cv::imread(resolve_relative(cfg.image_root, e->second->source_path).string(), cv::IMREAD_COLOR);
      if (it->second.empty()) logger().warn("report: cannot read image for '{}'; using placeholder", id);
    }
    return it->second;
  };

  std::ostringstream index;
  index << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Discovered clusters</title><style>"
        << detail::kStyle << "</style></head><body>\n<h1>Discovered clusters</h1>\n<p>" << order.size()
        << " clusters</p>\n<table>\n<tr><th>rank</th><th>cluster</th><th>members</th><th>aggregate score</th></tr>\n";

  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Cluster& c = *order[rank];
    index << "<tr><td>" << rank + 1 << "</td><td><a href=\"" << detail::page_name(c.id) << "\">cluster " << c.id
          << "</a></td><td>" << c.members.size() << "</td><td>" << detail::fmt(c.aggregate_score) << "</td></tr>\n";

    std::ostringstream page;
    page << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Cluster " << c.id << "</title><style>"
         << detail::kStyle << "</style></head><body>\n<p><a href=\"index.html\">index</a></p>\n<h1>Cluster " << c.id
         << "</h1>\n<p>aggregate score " << detail::fmt(c.aggregate_score) << ", " << c.members.size()
         << " members</p>\n<div class=\"tiles\">\n";
    for (std::size_t m = 0; m < c.members.size(); ++m) {
      const auto& mem = c.members[m];
      const std::string crop_name = "crops/cluster_" + std::to_string(c.id) + "_" + std::to_string(m) + ".png";
      const cv::Mat& img = image_for(mem.image_id);
      cv::Mat tile;
      if (!img.empty()) {
        const Box b = clamp_box(mem.box, img.cols, img.rows);
        const cv::Rect r(static_cast<int>(b.x), static_cast<int>(b.y), std::max(1, static_cast<int>(b.w)),
                         std::max(1, static_cast<int>(b.h)));
        const cv::Rect roi = r & cv::Rect(0, 0, img.cols, img.rows);
        if (roi.area() > 0) {
          const double s = static_cast<double>(cfg.tile_height) / roi.height;
          cv::resize(img(roi), tile, {}, s, s, s < 1.0 ? cv::INTER_AREA : cv::INTER_LINEAR);
        }
      }
      if (tile.empty()) {
        tile = detail::placeholder_tile(cfg.tile_height);
        ++summary.placeholders;
      }
      cv::imwrite((out_dir / crop_name).string(), tile);
      ++summary.crops;

      std::string source_link;
      if (auto e = by_id.find(mem.image_id); e != by_id.end() && !e->second->source_path.empty())
        source_link = fs::absolute(resolve_relative(cfg.image_root, e->second->source_path)).lexically_normal().string();
      page << "<div class=\"tile\"><img src=\"" << crop_name << "\" height=\"" << cfg.tile_height << "\" alt=\""
           << detail::html_escape(mem.image_id) << "\"><br>";
      if (source_link.empty())
        page << detail::html_escape(mem.image_id);
      else
        page << "<a href=\"file://" << detail::html_escape(source_link) << "\">" << detail::html_escape(mem.image_id)
             << "</a>";
      page << "<br>box [" << detail::fmt(mem.box.x, "%.1f") << ", " << detail::fmt(mem.box.y, "%.1f") << ", "
           << detail::fmt(mem.box.w, "%.1f") << ", " << detail::fmt(mem.box.h, "%.1f") << "]<br>score "
           << detail::fmt(mem.score) << "</div>\n";
    }
    page << "</div>\n</body></html>\n";
    std::ofstream(out_dir / detail::page_name(c.id), std::ios::trunc) << page.str();
    ++summary.pages;
  }
  index << "</table>\n</body></html>\n";
  std::ofstream out(out_dir / "index.html", std::ios::trunc);
  if (!out) throw DataError("cannot write " + (out_dir / "index.html").string());
  out << index.str();
  return summary;
}

} // namespace patternmine
