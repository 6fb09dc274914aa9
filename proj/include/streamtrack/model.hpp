#pragma once

// The full network: backbone, encoder, decoder and their parameters.

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>

#include "streamtrack/backbone.hpp"
#include "streamtrack/decoder.hpp"
#include "streamtrack/encoder.hpp"

namespace streamtrack {

struct ModelConfig {
  std::size_t history = 2;  // n
  BackboneConfig backbone;
  EncoderConfig encoder;
  DecoderConfig decoder;

  std::size_t channels() const { return backbone.channels(); }
  std::size_t frames() const { return history + 1; }
  void validate() const {
    if (history == 0) throw std::invalid_argument("ModelConfig: history must be >= 1");
    backbone.validate();
    encoder.validate(channels());
    decoder.validate(channels());
  }
};

struct Model {
  ModelConfig config;
  ParamStore params;

  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    backbone::init_params(params, cfg.backbone, rng);
    encoder::init_params(params, cfg.encoder, cfg.channels(), cfg.frames(), rng);
    decoder::init_params(params, cfg.decoder, cfg.channels(), rng);
  }
};

struct ModelOutput {
  EncoderOutput encoder;
  std::vector<LayerPrediction> layers;
  PointSet query_coords;  // current-frame sampled points, canonical frame
};

/// Encoder + decoder over an assembled stream input. `gt_center` (canonical
/// frame) adds the GT query for the contrastive loss.
inline ModelOutput forward(const Model& model, const StreamInput& in, const PointMask& mask,
                           const std::optional<Vec3>& gt_center = std::nullopt) {
  ModelOutput out;
  out.encoder = encode(in, mask, model.config.encoder, model.params);
  out.query_coords.assign(in.coords.begin(), in.coords.begin() + static_cast<std::ptrdiff_t>(in.points_per_frame));
  const QuerySet q = make_queries(out.query_coords, gt_center, model.params);
  out.layers = decode(q, out.encoder.tokens, out.encoder.position_embedding, model.config.decoder, model.params);
  return out;
}

struct Prediction {
  Box3D box;           // canonical frame
  double score = 0.0;  // sigmoid of the selected logit
  std::size_t query = 0;
};

/// Highest-scoring query of the last decoder layer (lowest index on ties).
inline Prediction select_prediction(const ModelOutput& out, const Vec3& size) {
  const auto& last = out.layers.back();
  std::size_t best = 0;
  for (std::size_t k = 1; k < out.query_coords.size(); ++k)
    if (last.logits.at(k) > last.logits.at(best)) best = k;
  return {decode_box(last, out.query_coords, best, size), sigmoid_value(last.logits.at(best)), best};
}

}  // namespace streamtrack
