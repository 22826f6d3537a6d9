#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "patternmine/patternmine.hpp"

namespace pmtest {

using namespace patternmine;

inline std::vector<float> random_unit(std::mt19937_64& rng, int C) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> v(C);
  double s = 0;
  for (auto& x : v) {
    x = n(rng);
    s += double(x) * x;
  }
  for (auto& x : v) x = static_cast<float>(x / std::sqrt(s));
  return v;
}

inline FeatureMap random_map(std::mt19937_64& rng, int h, int w, int C, float scale = 1.0f) {
  FeatureMap m(scale, h, w, C);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      auto v = random_unit(rng, C);
      std::copy(v.begin(), v.end(), m.cell(r, c).begin());
    }
  return m;
}

// Pyramid of random unit cells whose map k has roughly (h, w) * 2^(-k/3) cells.
inline FeaturePyramid random_pyramid(std::mt19937_64& rng, const std::string& id, int h, int w, int C,
                                     int scales = 3) {
  FeaturePyramid p;
  p.image_id = id;
  const auto factors = default_scales(scales, 3);
  for (double f : factors)
    p.maps.push_back(random_map(rng, std::max(1, int(std::lround(h * f))), std::max(1, int(std::lround(w * f))), C,
                                static_cast<float>(f)));
  return p;
}

inline ImageManifestEntry entry_for(const FeaturePyramid& p) {
  return {p.image_id, "", p.base().width * p.cell_stride_px, p.base().height * p.cell_stride_px, ""};
}

inline Collection collection_of(std::vector<FeaturePyramid> pyramids) {
  Collection col;
  for (const auto& p : pyramids) col.entries.push_back(entry_for(p));
  col.pyramids = std::move(pyramids);
  return col;
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, int n, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = d(rng);
  return v;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("patternmine_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

} // namespace pmtest
