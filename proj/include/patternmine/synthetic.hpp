#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "patternmine/box.hpp"
#include "patternmine/eval.hpp"
#include "patternmine/feature_store.hpp"

namespace patternmine::synth {

// Planted-copy corpora: random cluttered scenes, some of which receive
// copies of shared "details" under colour jitter, blur and noise.

struct CorpusConfig {
  int num_images = 30;
  int min_side = 256;
  int max_side = 640;
  int num_patterns = 2;
  int copies_per_pattern = 10;
  // Explicit placements (pattern -> image indices); overrides the two counts above.
  std::vector<std::vector<int>> placements;
  double patch_fraction = 0.75;  // patch side relative to the image's longest side
  double scale_jitter = 1.0;     // copies vary in size by a factor in [1/j, j]
  double color_gain_jitter = 0.5;
  double color_offset_jitter = 0.15;
  double channel_swap_probability = 0.5;
  // Recolouring drifts smoothly across each copy (parts coloured differently).
  bool spatially_varying_color = true;
  double blur_sigma_min = 0.5;
  double blur_sigma_max = 1.5;
  double noise_sigma = 0.05;  // fraction of full intensity
  // Whole-image palette shift applied after planting (a per-painting "style").
  double style_gain_jitter = 0.0;
  double style_offset_jitter = 0.0;
  double style_swap_probability = 0.0;
  std::uint64_t seed = 1;
};

/// Two details, each copied into 5 of 20 images; the two share images 3 and 4.
inline CorpusConfig discovery_corpus(std::uint64_t seed = 1) {
  CorpusConfig c;
  c.num_images = 20;
  c.placements = {{0, 1, 2, 3, 4}, {3, 4, 5, 6, 7}};
  c.patch_fraction = 0.4;
  c.seed = seed;
  return c;
}

struct Instance {
  int pattern = 0;
  int image = 0;
  Box box;  // original pixels
};

struct Corpus {
  std::vector<cv::Mat> images;  // BGR8
  std::vector<ImageManifestEntry> entries;
  std::vector<Instance> instances;

  std::vector<Annotation> annotations() const {
    std::vector<Annotation> out;
    for (const auto& in : instances)
      out.push_back({entries[in.image].image_id, "pattern" + std::to_string(in.pattern), in.box});
    return out;
  }
};

inline cv::Scalar random_color(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> c(0, 255);
  return {static_cast<double>(c(rng)), static_cast<double>(c(rng)), static_cast<double>(c(rng))};
}

/// Cluttered scene of random filled rectangles, ellipses, triangles and thick lines.
inline cv::Mat random_scene(int width, int height, std::mt19937_64& rng) {
  cv::Mat img(height, width, CV_8UC3, random_color(rng));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int shapes = std::max(8, width * height / 900);
  const double max_extent = std::max(12.0, 0.12 * std::max(width, height));
  for (int s = 0; s < shapes; ++s) {
    const cv::Point c(static_cast<int>(u(rng) * width), static_cast<int>(u(rng) * height));
    const int a = static_cast<int>(4 + u(rng) * max_extent);
    const int b = static_cast<int>(4 + u(rng) * max_extent);
    const auto color = random_color(rng);
    switch (static_cast<int>(u(rng) * 4)) {
    case 0: cv::rectangle(img, cv::Rect(c.x - a / 2, c.y - b / 2, a, b), color, cv::FILLED); break;
    case 1: cv::ellipse(img, c, cv::Size(a / 2, b / 2), u(rng) * 180, 0, 360, color, cv::FILLED); break;
    case 2: {
      std::vector<cv::Point> tri{c, c + cv::Point(a, static_cast<int>(b * (u(rng) - 0.5))),
                                 c + cv::Point(static_cast<int>(a * (u(rng) - 0.5)), b)};
      cv::fillConvexPoly(img, tri, color);
      break;
    }
    default:
      cv::line(img, c, c + cv::Point(static_cast<int>(a * (u(rng) - 0.5) * 2), static_cast<int>(b * (u(rng) - 0.5) * 2)),
               color, 1 + static_cast<int>(u(rng) * 5));
    }
  }
  return img;
}

/// Smooth colour noise: blurred white noise, contrast-stretched per channel.
inline cv::Mat noise_image(int width, int height, std::mt19937_64& rng, double smoothing = 3.0) {
  cv::Mat f(height, width, CV_32FC3);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) f.at<cv::Vec3f>(y, x) = {n(rng), n(rng), n(rng)};
  cv::GaussianBlur(f, f, cv::Size(0, 0), smoothing);
  cv::normalize(f.reshape(1), f.reshape(1), 0, 255, cv::NORM_MINMAX);
  cv::Mat out;
  f.convertTo(out, CV_8UC3);
  return out;
}

struct Recolor {
  std::array<int, 3> order{0, 1, 2};
  std::array<double, 3> gain{1, 1, 1};
  std::array<double, 3> offset{};
  double swap_blend = 0.0;  // 0: original channel order, 1: permuted
};

inline Recolor random_recolor(double gain_jitter, double offset_jitter, double swap_probability,
                              const std::array<int, 3>& order, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Recolor r;
  r.order = order;
  for (int c = 0; c < 3; ++c) {
    r.gain[c] = 1.0 + gain_jitter * (2 * u(rng) - 1);
    r.offset[c] = offset_jitter * (2 * u(rng) - 1);
  }
  r.swap_blend = u(rng) < swap_probability ? 1.0 : 0.0;
  return r;
}

inline std::array<int, 3> random_order(std::mt19937_64& rng) {
  std::array<int, 3> order{0, 1, 2};
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Applies a recolouring that varies bilinearly between four corner settings
// (top-left, top-right, bottom-left, bottom-right); equal corners give a
// uniform recolouring.
inline cv::Mat recolor(const cv::Mat& f, const std::array<Recolor, 4>& corners) {
  cv::Mat out(f.size(), CV_32FC3);
  const auto& order = corners[0].order;
  for (int y = 0; y < f.rows; ++y) {
    const double v = f.rows > 1 ? static_cast<double>(y) / (f.rows - 1) : 0.0;
    for (int x = 0; x < f.cols; ++x) {
      const double h = f.cols > 1 ? static_cast<double>(x) / (f.cols - 1) : 0.0;
      const std::array<double, 4> w{(1 - h) * (1 - v), h * (1 - v), (1 - h) * v, h * v};
      const auto& p = f.at<cv::Vec3f>(y, x);
      auto& q = out.at<cv::Vec3f>(y, x);
      double blend = 0.0;
      for (int k = 0; k < 4; ++k) blend += w[k] * corners[k].swap_blend;
      for (int c = 0; c < 3; ++c) {
        double gain = 0.0, offset = 0.0;
        for (int k = 0; k < 4; ++k) {
          gain += w[k] * corners[k].gain[c];
          offset += w[k] * corners[k].offset[c];
        }
        const double src = (1 - blend) * p[c] + blend * p[order[c]];
        q[c] = static_cast<float>(std::clamp(src * gain + offset, 0.0, 1.0));
      }
    }
  }
  return out;
}

inline cv::Mat color_jitter(const cv::Mat& f, double gain_jitter, double offset_jitter, double swap_probability,
                            bool spatially_varying, std::mt19937_64& rng) {
  const auto order = random_order(rng);
  std::array<Recolor, 4> corners;
  corners[0] = random_recolor(gain_jitter, offset_jitter, swap_probability, order, rng);
  for (int k = 1; k < 4; ++k)
    corners[k] = spatially_varying ? random_recolor(gain_jitter, offset_jitter, swap_probability, order, rng) : corners[0];
  return recolor(f, corners);
}

inline cv::Mat jitter_copy(const cv::Mat& patch, const CorpusConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  cv::Mat f;
  patch.convertTo(f, CV_32FC3, 1.0 / 255.0);
  cv::Mat out = color_jitter(f, cfg.color_gain_jitter, cfg.color_offset_jitter, cfg.channel_swap_probability,
                             cfg.spatially_varying_color, rng);
  const double sigma = cfg.blur_sigma_min + u(rng) * (cfg.blur_sigma_max - cfg.blur_sigma_min);
  if (sigma > 0) cv::GaussianBlur(out, out, cv::Size(0, 0), sigma);
  cv::Mat out8;
  out.convertTo(out8, CV_8UC3, 255.0);
  return out8;
}

inline void add_noise(cv::Mat& img, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0) return;
  std::normal_distribution<double> n(0.0, sigma * 255.0);
  for (int y = 0; y < img.rows; ++y) {
    auto* row = img.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.cols; ++x)
      for (int c = 0; c < 3; ++c) row[x][c] = cv::saturate_cast<uchar>(row[x][c] + n(rng));
  }
}

inline Corpus make_corpus(const CorpusConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  auto placements = cfg.placements;
  if (placements.empty()) {
    std::vector<int> hosts(cfg.num_images);
    std::iota(hosts.begin(), hosts.end(), 0);
    std::shuffle(hosts.begin(), hosts.end(), rng);
    placements.resize(cfg.num_patterns);
    int next = 0;
    for (int p = 0; p < cfg.num_patterns; ++p)
      for (int k = 0; k < cfg.copies_per_pattern; ++k) placements[p].push_back(hosts[next++ % cfg.num_images]);
  }

  Corpus corpus;
  for (int i = 0; i < cfg.num_images; ++i) {
    const int longest = cfg.min_side + static_cast<int>(u(rng) * (cfg.max_side - cfg.min_side));
    const int shortest = std::max(cfg.min_side / 2, static_cast<int>(longest * (0.75 + 0.25 * u(rng))));
    const bool landscape = u(rng) < 0.5;
    const int w = landscape ? longest : shortest;
    const int h = landscape ? shortest : longest;
    corpus.images.push_back(random_scene(w, h, rng));
    char id[32];
    std::snprintf(id, sizeof id, "img%03d", i);
    corpus.entries.push_back({id, std::string(id) + ".png", w, h, std::string(id) + ".amfp"});
  }

  constexpr int kPatternCanvas = 512;
  for (std::size_t p = 0; p < placements.size(); ++p) {
    const cv::Mat pattern = random_scene(kPatternCanvas, kPatternCanvas, rng);
    for (int host : placements[p]) {
      cv::Mat& img = corpus.images[host];
      const double longest = std::max(img.cols, img.rows);
      const double jitter = std::exp(std::log(cfg.scale_jitter) * (2 * u(rng) - 1));
      int side = static_cast<int>(std::lround(cfg.patch_fraction * longest * jitter));
      side = std::min(side, static_cast<int>(0.95 * std::min(img.cols, img.rows)));
      // Avoid overlapping earlier instances in the same image.
      Box box;
      for (int attempt = 0; attempt < 200; ++attempt) {
        box = {std::floor(u(rng) * (img.cols - side)), std::floor(u(rng) * (img.rows - side)),
               static_cast<double>(side), static_cast<double>(side)};
        const bool clash = std::any_of(corpus.instances.begin(), corpus.instances.end(), [&](const Instance& in) {
          return in.image == host && iou(in.box, box) > 0.0;
        });
        if (!clash) break;
        if (attempt % 20 == 19) side = static_cast<int>(side * 0.9);
      }
      cv::Mat resized;
      cv::resize(pattern, resized, cv::Size(side, side), 0, 0, side < kPatternCanvas ? cv::INTER_AREA : cv::INTER_LINEAR);
      jitter_copy(resized, cfg, rng).copyTo(img(cv::Rect(static_cast<int>(box.x), static_cast<int>(box.y), side, side)));
      corpus.instances.push_back({static_cast<int>(p), host, box});
    }
  }
  for (auto& img : corpus.images) {
    if (cfg.style_gain_jitter > 0 || cfg.style_offset_jitter > 0 || cfg.style_swap_probability > 0) {
      cv::Mat f;
      img.convertTo(f, CV_32FC3, 1.0 / 255.0);
      color_jitter(f, cfg.style_gain_jitter, cfg.style_offset_jitter, cfg.style_swap_probability, false, rng)
          .convertTo(img, CV_8UC3, 255.0);
    }
    add_noise(img, cfg.noise_sigma, rng);
  }
  return corpus;
}

} // namespace patternmine::synth
