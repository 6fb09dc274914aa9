#pragma once

// Two-stage set-abstraction feature extractor. Each stage samples centers by
// farthest point sampling, groups neighbors by ball query, runs a shared MLP
// on (neighbor − center, neighbor feature) and max-pools per center. Features
// never see absolute coordinates, so they are invariant to global translation.

#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamtrack/geom.hpp"
#include "streamtrack/nn.hpp"

namespace streamtrack {

struct BackboneConfig {
  std::size_t input_points = 1024;
  std::vector<std::size_t> stage_points{512, 128};
  std::vector<double> stage_radii{0.3, 0.5};
  std::size_t neighbor_cap = 32;
  std::vector<std::size_t> stage_channels{32, 64};

  void validate() const {
    if (stage_points.empty() || stage_points.size() != stage_radii.size() ||
        stage_points.size() != stage_channels.size())
      throw std::invalid_argument("BackboneConfig: stage lists must be non-empty and equally long");
    std::size_t prev = input_points;
    for (std::size_t s = 0; s < stage_points.size(); ++s) {
      if (stage_points[s] == 0 || stage_points[s] >= prev)
        throw std::invalid_argument("BackboneConfig: stage point counts must be strictly decreasing");
      if (!(stage_radii[s] > 0.0)) throw std::invalid_argument("BackboneConfig: radii must be positive");
      if (stage_channels[s] == 0) throw std::invalid_argument("BackboneConfig: zero channel width");
      prev = stage_points[s];
    }
    if (neighbor_cap == 0) throw std::invalid_argument("BackboneConfig: neighbor_cap must be >= 1");
  }
  std::size_t out_points() const { return stage_points.back(); }
  std::size_t channels() const { return stage_channels.back(); }
};

/// Sampled points (row-aligned with feats) reported in the input frame.
struct FrameFeatures {
  PointSet coords;  // N'×3
  Tensor feats;     // N'×C
};

namespace backbone {

inline std::string stage_name(std::size_t s) { return "backbone.sa" + std::to_string(s); }

inline void init_params(ParamStore& p, const BackboneConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  std::size_t cin = 0;
  for (std::size_t s = 0; s < cfg.stage_points.size(); ++s) {
    const std::size_t c = cfg.stage_channels[s];
    nn::init_linear(p, stage_name(s) + ".fc1", 3 + cin, c, rng);
    nn::init_linear(p, stage_name(s) + ".fc2", c, c, rng);
    cin = c;
  }
}

}  // namespace backbone

/// Runs the set-abstraction stages on exactly cfg.input_points points.
inline FrameFeatures extract(const PointSet& points, const BackboneConfig& cfg, const ParamStore& p) {
  cfg.validate();
  if (points.size() != cfg.input_points)
    throw std::invalid_argument("extract: expected " + std::to_string(cfg.input_points) + " points, got " +
                                std::to_string(points.size()) + " (resample upstream)");
  PointSet coords = points;
  Tensor feats;  // undefined before the first stage
  for (std::size_t s = 0; s < cfg.stage_points.size(); ++s) {
    const auto centers_idx = farthest_point_sample(coords, cfg.stage_points[s], 0);
    PointSet centers;
    centers.reserve(centers_idx.size());
    for (auto i : centers_idx) centers.push_back(coords[i]);
    const auto groups = ball_query(coords, centers, cfg.stage_radii[s], cfg.neighbor_cap);

    // Pad each group to the cap by repeating its nearest member; max-pooling is unaffected.
    const std::size_t cap = cfg.neighbor_cap;
    const std::size_t rows = centers.size() * cap;
    std::vector<double> rel(rows * 3);
    std::vector<std::size_t> gather(rows);
    for (std::size_t c = 0; c < centers.size(); ++c)
      for (std::size_t k = 0; k < cap; ++k) {
        const std::size_t idx = k < groups[c].size() ? groups[c][k] : groups[c][0];
        const Vec3 d = coords[idx] - centers[c];
        rel[(c * cap + k) * 3 + 0] = d.x;
        rel[(c * cap + k) * 3 + 1] = d.y;
        rel[(c * cap + k) * 3 + 2] = d.z;
        gather[c * cap + k] = idx;
      }
    Tensor input = Tensor({rows, 3}, std::move(rel));
    if (feats.defined()) input = concat({input, gather_rows(feats, gather)}, 1);
    const std::string name = backbone::stage_name(s);
    Tensor h = relu(nn::apply_linear(p, name + ".fc1", input));
    h = relu(nn::apply_linear(p, name + ".fc2", h));
    const std::size_t c_out = cfg.stage_channels[s];
    feats = max_axis(reshape(h, {centers.size(), cap, c_out}), 1);
    coords = std::move(centers);
  }
  return {std::move(coords), std::move(feats)};
}

}  // namespace streamtrack
