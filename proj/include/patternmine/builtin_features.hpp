#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "patternmine/box.hpp"
#include "patternmine/error.hpp"
#include "patternmine/feature_store.hpp"

namespace patternmine {

// Built-in descriptor. Each cell carries the gradient-orientation histograms
// of its (2r+1)x(2r+1) cell neighbourhood, jointly normalized, plus its mean
// RGB. Crude, but dependency-free and good enough for planted copies.

inline constexpr int kOrientationBins = 8;
inline constexpr float kNegligibleGradient = 1e-5f;

struct BuiltinExtractorConfig {
  int base_max_dim = kDefaultBaseMaxDim;
  int cell_stride = kDefaultCellStride;
  int num_scales = kDefaultNumScales;
  int scales_per_octave = kDefaultScalesPerOctave;
  int context_radius = 1;
  bool signed_orientation = false;
  // Histogram energy below this (per neighbourhood cell) is treated as texture-free.
  double gradient_floor = 0.02;
  double color_weight = 1.5;
  double presmooth_sigma = 1.0;

  constexpr int context_cells() const { return (2 * context_radius + 1) * (2 * context_radius + 1); }
  constexpr int channels() const { return context_cells() * kOrientationBins + 3; }
};

inline constexpr int kBuiltinChannels = BuiltinExtractorConfig{}.channels();

inline cv::Mat load_image(const std::filesystem::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (img.empty()) throw DataError("cannot decode image " + path.string());
  return img;
}

/// Base-frame resize factor: the longest side becomes base_max_dim cells.
inline double base_resize_factor(int width, int height, const BuiltinExtractorConfig& cfg) {
  return static_cast<double>(cfg.base_max_dim) * cfg.cell_stride / std::max(width, height);
}

namespace detail {

inline cv::Mat to_float_rgb(const cv::Mat& bgr8) {
  cv::Mat rgb;
  cv::cvtColor(bgr8, rgb, cv::COLOR_BGR2RGB);
  cv::Mat f;
  rgb.convertTo(f, CV_32FC3, 1.0 / 255.0);
  return f;
}

inline cv::Mat resize_to(const cv::Mat& img, int width, int height) {
  if (img.cols == width && img.rows == height) return img;
  cv::Mat out;
  const bool shrinking = width < img.cols && height < img.rows;
  cv::resize(img, out, cv::Size(width, height), 0, 0, shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
  return out;
}

struct GradientField {
  cv::Mat magnitude;  // CV_32F
  cv::Mat angle;      // CV_32F, degrees in [0, 360)
};

// Per pixel, the gradient of the colour channel with the largest magnitude.
inline GradientField gradients(const cv::Mat& rgb, const BuiltinExtractorConfig& cfg) {
  cv::Mat smooth = rgb;
  if (cfg.presmooth_sigma > 0) cv::GaussianBlur(rgb, smooth, cv::Size(0, 0), cfg.presmooth_sigma, 0, cv::BORDER_REPLICATE);
  cv::Mat dx, dy;
  cv::Sobel(smooth, dx, CV_32F, 1, 0, 3, 1.0 / 8.0, 0, cv::BORDER_REPLICATE);
  cv::Sobel(smooth, dy, CV_32F, 0, 1, 3, 1.0 / 8.0, 0, cv::BORDER_REPLICATE);
  cv::Mat gx(rgb.size(), CV_32F), gy(rgb.size(), CV_32F);
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* ax = dx.ptr<cv::Vec3f>(y);
    const auto* ay = dy.ptr<cv::Vec3f>(y);
    auto* ox = gx.ptr<float>(y);
    auto* oy = gy.ptr<float>(y);
    for (int x = 0; x < rgb.cols; ++x) {
      int best = 0;
      float best_mag = -1.0f;
      for (int c = 0; c < 3; ++c) {
        const float m = ax[x][c] * ax[x][c] + ay[x][c] * ay[x][c];
        if (m > best_mag) {
          best_mag = m;
          best = c;
        }
      }
      ox[x] = ax[x][best];
      oy[x] = ay[x][best];
    }
  }
  GradientField g;
  cv::cartToPolar(gx, gy, g.magnitude, g.angle, true);
  return g;
}

struct CellStats {
  std::array<float, kOrientationBins> hist{};  // magnitude per pixel, soft-binned
  std::array<float, 3> color{};                // mean RGB
};

// Raw statistics of the stride x stride cell whose top-left pixel is
// (x0, y0). Pixels are weighted by a tent centred on the cell that reaches
// zero one stride away (bilinear spatial binning), so a sub-cell shift moves
// mass smoothly between neighbouring cells.
inline CellStats cell_stats(const cv::Mat& rgb, const GradientField& g, int x0, int y0,
                            const BuiltinExtractorConfig& cfg) {
  std::array<double, kOrientationBins> hist{};
  std::array<double, 3> color{};
  const double period = cfg.signed_orientation ? 360.0 : 180.0;
  const int s = cfg.cell_stride;
  const double cx = x0 + s / 2.0, cy = y0 + s / 2.0;
  const int ylo = std::max(0, y0 - s / 2), yhi = std::min(rgb.rows, y0 + s + s / 2);
  const int xlo = std::max(0, x0 - s / 2), xhi = std::min(rgb.cols, x0 + s + s / 2);
  double color_weight = 0.0;
  for (int y = ylo; y < yhi; ++y) {
    const double wy = 1.0 - std::abs(y + 0.5 - cy) / s;
    if (wy <= 0) continue;
    const auto* mag = g.magnitude.ptr<float>(y);
    const auto* ang = g.angle.ptr<float>(y);
    const auto* px = rgb.ptr<cv::Vec3f>(y);
    for (int x = xlo; x < xhi; ++x) {
      const double w = wy * (1.0 - std::abs(x + 0.5 - cx) / s);
      if (w <= 0) continue;
      for (int c = 0; c < 3; ++c) color[c] += w * px[x][c];
      color_weight += w;
      if (mag[x] < kNegligibleGradient) continue;  // blur round-off on flat colour
      // Soft assignment between the two nearest orientation bins.
      double pos = std::fmod(ang[x], period) / (period / kOrientationBins) - 0.5;
      if (pos < 0) pos += kOrientationBins;
      const int lo = static_cast<int>(pos) % kOrientationBins;
      const double frac = pos - std::floor(pos);
      hist[lo] += w * mag[x] * (1.0 - frac);
      hist[(lo + 1) % kOrientationBins] += w * mag[x] * frac;
    }
  }
  const double area = static_cast<double>(s) * s;
  CellStats out;
  for (int b = 0; b < kOrientationBins; ++b) out.hist[b] = static_cast<float>(hist[b] / area);
  for (int c = 0; c < 3; ++c) out.color[c] = static_cast<float>(color_weight > 0 ? color[c] / color_weight : 0.0);
  return out;
}

// Stats for every cell of a rows x cols grid whose top-left cell starts at
// pixel (x0, y0).
inline std::vector<CellStats> grid_stats(const cv::Mat& rgb, int x0, int y0, int rows, int cols,
                                         const BuiltinExtractorConfig& cfg) {
  const auto g = gradients(rgb, cfg);
  std::vector<CellStats> out(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out[static_cast<std::size_t>(r) * cols + c] =
          cell_stats(rgb, g, x0 + c * cfg.cell_stride, y0 + r * cfg.cell_stride, cfg);
  return out;
}

// Descriptor of cell (r, c) of a stats grid; neighbours outside the grid
// contribute empty histograms.
inline void assemble(const std::vector<CellStats>& stats, int rows, int cols, int r, int c,
                     const BuiltinExtractorConfig& cfg, std::span<float> out) {
  const int k = cfg.context_radius;
  double energy = 0.0;
  std::size_t o = 0;
  for (int dr = -k; dr <= k; ++dr)
    for (int dc = -k; dc <= k; ++dc) {
      const int rr = r + dr, cc = c + dc;
      const bool inside = rr >= 0 && cc >= 0 && rr < rows && cc < cols;
      for (int b = 0; b < kOrientationBins; ++b, ++o) {
        const float v = inside ? stats[static_cast<std::size_t>(rr) * cols + cc].hist[b] : 0.0f;
        out[o] = v;
        energy += static_cast<double>(v) * v;
      }
    }
  const double floor = cfg.gradient_floor * std::sqrt(static_cast<double>(cfg.context_cells()));
  const double scale = 1.0 / std::max(std::sqrt(energy), floor);
  for (std::size_t i = 0; i < o; ++i) out[i] = static_cast<float>(out[i] * scale);
  const auto& centre = stats[static_cast<std::size_t>(r) * cols + c];
  for (int ch = 0; ch < 3; ++ch) out[o + ch] = static_cast<float>(cfg.color_weight * centre.color[ch]);
  l2_normalize(out);
}

// Computes the cell grid of an RGB float image, padding right/bottom by
// edge replication up to a whole number of cells.
inline FeatureMap cell_grid(const cv::Mat& rgb, float scale_factor, const BuiltinExtractorConfig& cfg) {
  const int s = cfg.cell_stride;
  const int cells_w = (rgb.cols + s - 1) / s;
  const int cells_h = (rgb.rows + s - 1) / s;
  cv::Mat padded;
  cv::copyMakeBorder(rgb, padded, 0, cells_h * s - rgb.rows, 0, cells_w * s - rgb.cols, cv::BORDER_REPLICATE);
  const auto stats = grid_stats(padded, 0, 0, cells_h, cells_w, cfg);
  FeatureMap map(scale_factor, cells_h, cells_w, cfg.channels());
  for (int r = 0; r < cells_h; ++r)
    for (int c = 0; c < cells_w; ++c) assemble(stats, cells_h, cells_w, r, c, cfg, map.cell(r, c));
  return map;
}

} // namespace detail

/// Extracts the built-in pyramid: one map per scale, each computed on the
/// image resized to (base frame) x scale_factor.
inline FeaturePyramid builtin_extract(const cv::Mat& bgr8, const std::string& image_id,
                                      const BuiltinExtractorConfig& cfg = {}) {
  if (bgr8.empty() || bgr8.cols < cfg.cell_stride || bgr8.rows < cfg.cell_stride)
    throw PreconditionError("builtin_extract: image '" + image_id + "' is smaller than one cell");
  const cv::Mat rgb = detail::to_float_rgb(bgr8);
  const double f = base_resize_factor(rgb.cols, rgb.rows, cfg);
  FeaturePyramid p;
  p.image_id = image_id;
  p.cell_stride_px = cfg.cell_stride;
  for (double scale : default_scales(cfg.num_scales, cfg.scales_per_octave)) {
    const int w = std::max(1, static_cast<int>(std::lround(rgb.cols * f * scale)));
    const int h = std::max(1, static_cast<int>(std::lround(rgb.rows * f * scale)));
    p.maps.push_back(detail::cell_grid(detail::resize_to(rgb, w, h), static_cast<float>(scale), cfg));
  }
  return p;
}

/// Grid size (cols, rows) of a query box whose longest side spans `longest_cells`.
inline std::pair<int, int> query_grid_size(const Box& box, int longest_cells) {
  if (box.w <= 0 || box.h <= 0) throw PreconditionError("query box has zero area");
  const double r = longest_cells / std::max(box.w, box.h);
  return {std::max(1, static_cast<int>(std::lround(box.w * r))),
          std::max(1, static_cast<int>(std::lround(box.h * r)))};
}

/// Extracts the built-in descriptor over a pixel box, resampled so that the
/// box's longest side spans `longest_cells` cells. The whole image is resized
/// (not just the crop), so gradients at the box border see real neighbours.
inline FeatureMap extract_region(const cv::Mat& bgr8, const Box& box, int longest_cells,
                                 const BuiltinExtractorConfig& cfg = {}) {
  const auto [cols, rows] = query_grid_size(box, longest_cells);
  const int s = cfg.cell_stride;
  const double sx = cols * s / box.w;
  const double sy = rows * s / box.h;
  const cv::Mat rgb = detail::to_float_rgb(bgr8);
  const int w = std::max(1, static_cast<int>(std::lround(rgb.cols * sx)));
  const int h = std::max(1, static_cast<int>(std::lround(rgb.rows * sy)));
  const cv::Mat resized = detail::resize_to(rgb, w, h);

  // Cut the box plus a margin of context cells (and a few pixels of gradient
  // support), padding with edge replication where the box leaves the image.
  const int x0 = static_cast<int>(std::lround(box.x * sx));
  const int y0 = static_cast<int>(std::lround(box.y * sy));
  const int k = cfg.context_radius;
  const int margin = k * s + 2;
  const int left = x0 - margin, top = y0 - margin;
  const int right = x0 + cols * s + margin, bottom = y0 + rows * s + margin;
  cv::Mat canvas;
  cv::copyMakeBorder(resized, canvas, std::max(0, -top), std::max(0, bottom - h), std::max(0, -left),
                     std::max(0, right - w), cv::BORDER_REPLICATE);
  const cv::Rect roi(left + std::max(0, -left), top + std::max(0, -top), right - left, bottom - top);
  const cv::Mat window = canvas(roi);
  const int grid_rows = rows + 2 * k, grid_cols = cols + 2 * k;
  const auto stats = detail::grid_stats(window, 2, 2, grid_rows, grid_cols, cfg);
  FeatureMap map(1.0f, rows, cols, cfg.channels());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) detail::assemble(stats, grid_rows, grid_cols, r + k, c + k, cfg, map.cell(r, c));
  return map;
}

} // namespace patternmine
