#pragma once

// Query-based prediction. Every sampled current-frame point spawns a query;
// decoder layers alternate self-attention among queries, cross-attention to
// all encoder tokens, and an FFN. Each layer emits class logits, 4-DOF boxes
// (offset from the query point + heading) and projection embeddings. An
// optional GT query runs through an EMA copy of the decoder to anchor InfoNCE.

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamtrack/geom.hpp"
#include "streamtrack/losses.hpp"
#include "streamtrack/nn.hpp"

namespace streamtrack {

struct DecoderConfig {
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t ffn_mult = 2;
  std::size_t proj_dim = 0;  // 0 → same as model width

  void validate(std::size_t channels) const {
    if (layers == 0) throw std::invalid_argument("DecoderConfig: layers must be >= 1");
    if (heads == 0 || channels % heads != 0)
      throw std::invalid_argument("DecoderConfig: channels must be divisible by heads");
  }
  std::size_t projection(std::size_t channels) const { return proj_dim ? proj_dim : channels; }
};

struct QuerySet {
  Tensor embeddings;           // [N', C]
  std::optional<Tensor> gt;    // [1, C], training only
};

struct LayerPrediction {
  Tensor logits;                     // [N']
  Tensor boxes;                      // [N', 4]: offset (3) + heading
  Tensor projections;                // [N', D]
  std::optional<std::vector<double>> gt_embedding;  // f_g, no gradient
};

struct MatchResult {
  std::size_t positive = 0;
  std::vector<double> targets;  // one-hot ĉ
};

struct BoxLossWeights {
  double cls = 0.1;
  double reg = 1.0;
  double offset = 1.0;
  double theta = 5.0;
  double giou = 0.25;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

struct MatchWeights {
  double cls = 0.1;
  double giou = 0.25;
};

namespace decoder {

inline std::string layer_name(std::size_t l) { return "decoder.l" + std::to_string(l); }
inline constexpr const char* kMomentumPrefix = "momentum.";

inline void init_params(ParamStore& p, const DecoderConfig& cfg, std::size_t channels, std::mt19937_64& rng) {
  cfg.validate(channels);
  const std::size_t C = channels;
  nn::init_mlp2(p, "query", 3, C, C, rng);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string L = layer_name(l);
    nn::init_attention(p, L + ".self", C, rng);
    nn::init_layer_norm(p, L + ".ln1", C);
    nn::init_attention(p, L + ".cross", C, rng);
    nn::init_layer_norm(p, L + ".ln2", C);
    nn::init_mlp2(p, L + ".ffn", C, cfg.ffn_mult * C, C, rng);
    nn::init_layer_norm(p, L + ".ln3", C);
  }
  nn::init_mlp2(p, "decoder.cls", C, C, 1, rng);
  nn::init_mlp2(p, "decoder.reg", C, C, 4, rng);
  nn::init_mlp2(p, "proj", C, C, cfg.projection(C), rng);
  // EMA copies of the decoder and projection head start equal to the live weights.
  std::vector<std::pair<std::string, Tensor>> copies;
  for (const auto& [name, t] : p)
    if (name.rfind("decoder.", 0) == 0 || name.rfind("proj.", 0) == 0) copies.emplace_back(name, t.detach());
  for (auto& [name, t] : copies) p.add(kMomentumPrefix + name, t, /*trainable=*/false);
}

/// (live, momentum) name pairs for momentum_update.
inline std::vector<std::pair<std::string, std::string>> momentum_pairs(const ParamStore& p) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [name, _] : p)
    if (name.rfind("decoder.", 0) == 0 || name.rfind("proj.", 0) == 0) out.emplace_back(name, kMomentumPrefix + name);
  return out;
}

inline Tensor coords_tensor(const PointSet& pts) {
  std::vector<double> v;
  v.reserve(pts.size() * 3);
  for (const auto& c : pts) v.insert(v.end(), {c.x, c.y, c.z});
  return Tensor({pts.size(), 3}, std::move(v));
}

}  // namespace decoder

/// Shared query MLP over the sampled coordinates; the GT query reuses it on the GT center.
inline QuerySet make_queries(const PointSet& coords, const std::optional<Vec3>& gt_center, const ParamStore& p) {
  QuerySet q;
  q.embeddings = nn::apply_mlp2(p, "query", decoder::coords_tensor(coords));
  if (gt_center) q.gt = nn::apply_mlp2(p, "query", decoder::coords_tensor({*gt_center}));
  return q;
}

namespace decoder {

// One decoder layer under the given parameter prefix ("" live, "momentum." EMA).
inline Tensor layer(const Tensor& x, const Tensor& memory_kv, std::size_t l, const DecoderConfig& cfg,
                    const ParamStore& p, const std::string& prefix) {
  const std::string L = prefix + layer_name(l);
  const Tensor sa = nn::attention(p, L + ".self", x, x, x, cfg.heads).out;
  const Tensor x1 = nn::apply_layer_norm(p, L + ".ln1", add(x, sa));
  const Tensor ca = nn::attention(p, L + ".cross", x1, memory_kv, memory_kv, cfg.heads).out;
  const Tensor x2 = nn::apply_layer_norm(p, L + ".ln2", add(x1, ca));
  return nn::apply_layer_norm(p, L + ".ln3", add(x2, nn::apply_mlp2(p, L + ".ffn", x2)));
}

}  // namespace decoder

/// Runs all decoder layers. Cross-attention keys and values are encoder tokens
/// plus their position embedding. The GT query, when present, is processed on
/// its own by the momentum parameters with no gradient, so it never enters the
/// live queries' attention.
inline std::vector<LayerPrediction> decode(const QuerySet& q, const Tensor& tokens, const Tensor& position,
                                           const DecoderConfig& cfg, const ParamStore& p) {
  const std::size_t C = tokens.dim(1);
  cfg.validate(C);
  const std::size_t Nq = q.embeddings.dim(0);
  const Tensor memory = add(tokens, position);
  std::vector<LayerPrediction> out;
  Tensor x = q.embeddings;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    x = decoder::layer(x, memory, l, cfg, p, "");
    LayerPrediction pred;
    pred.logits = reshape(nn::apply_mlp2(p, "decoder.cls", x), {Nq});
    pred.boxes = nn::apply_mlp2(p, "decoder.reg", x);
    pred.projections = nn::apply_mlp2(p, "proj", x);
    out.push_back(std::move(pred));
  }
  if (q.gt) {
    NoGradGuard guard;
    const Tensor mem = memory.detach();
    Tensor g = q.gt->detach();
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      g = decoder::layer(g, mem, l, cfg, p, decoder::kMomentumPrefix);
      const Tensor f = nn::apply_mlp2(p, std::string(decoder::kMomentumPrefix) + "proj", g);
      out[l].gt_embedding = f.values();
    }
  }
  return out;
}

/// Decoded canonical-frame box of query k: center = query point + offset, fixed size.
inline Box3D decode_box(const LayerPrediction& pred, const PointSet& query_coords, std::size_t k, const Vec3& size) {
  const Vec3 c = query_coords[k] + Vec3{pred.boxes.at(k, 0), pred.boxes.at(k, 1), pred.boxes.at(k, 2)};
  return {c, size, wrap_angle(pred.boxes.at(k, 3))};
}

/// Single-positive matching: cost_k = −λ_cls·sigmoid(c_k) − λ_giou·GIoU(b_k, b̂);
/// the argmin (lowest index on ties) is the positive.
inline MatchResult match(const LayerPrediction& pred, const PointSet& query_coords, const Vec3& size,
                         const Box3D& gt, const MatchWeights& w = {}) {
  const std::size_t n = query_coords.size();
  MatchResult r;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    const double c = sigmoid_value(pred.logits.at(k));
    const double cost = -w.cls * c - w.giou * giou_3d(decode_box(pred, query_coords, k, size), gt).giou;
    if (cost < best) {
      best = cost;
      r.positive = k;
    }
  }
  r.targets.assign(n, 0.0);
  r.targets[r.positive] = 1.0;
  return r;
}

/// Σ_l λ_cls·focal(c_l, ĉ_l) + λ_reg·(λ_off·ΣsmoothL1(o⁺−ô) + λ_θ·smoothL1(θ⁺−θ̂) + λ_giou·(1 − GIoU(b⁺, b̂))).
/// `gt` is the target box in the queries' canonical frame.
inline Tensor box_loss(const std::vector<LayerPrediction>& preds, const std::vector<MatchResult>& matches,
                       const PointSet& query_coords, const Box3D& gt, const BoxLossWeights& w = {}) {
  if (preds.size() != matches.size()) throw std::invalid_argument("box_loss: one match per layer required");
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < preds.size(); ++l) {
    const auto& pred = preds[l];
    const std::size_t k = matches[l].positive;
    const Tensor focal = focal_loss(pred.logits, matches[l].targets, w.focal_alpha, w.focal_gamma);
    const Tensor row = reshape(slice(pred.boxes, 0, k, 1), {4});
    const Tensor offset = slice(row, 0, 0, 3);
    const Tensor theta = slice(row, 0, 3, 1);
    const Vec3 q = query_coords[k];
    const Vec3 target_offset = gt.center - q;
    const Tensor l_off = sum(smooth_l1(sub(offset, Tensor({3}, {target_offset.x, target_offset.y, target_offset.z}))));
    const Tensor l_theta = sum(smooth_l1(add_scalar(theta, -gt.heading)));
    const Tensor center = add(offset, Tensor({3}, {q.x, q.y, q.z}));
    const Tensor l_giou = add_scalar(neg(giou_op(center, theta, gt.size, gt)), 1.0);
    const Tensor reg = add(add(scale(l_off, w.offset), scale(l_theta, w.theta)), scale(l_giou, w.giou));
    total = add(total, add(scale(focal, w.cls), scale(reg, w.reg)));
  }
  return total;
}

/// Σ_l −log( exp(f_g·f_+/τ) / Σ_i exp(f_g·f_i/τ) ); f_g is a constant.
inline Tensor infonce_loss(const std::vector<LayerPrediction>& preds, const std::vector<MatchResult>& matches,
                           double tau = 1.0) {
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < preds.size(); ++l) {
    if (!preds[l].gt_embedding) throw std::invalid_argument("infonce_loss: layer without GT embedding");
    const auto& fg = *preds[l].gt_embedding;
    const Tensor g({fg.size(), 1}, fg);
    const Tensor logits = reshape(scale(matmul(preds[l].projections, g), 1.0 / tau), {1, preds[l].projections.dim(0)});
    const Tensor ls = log_softmax(logits);
    total = sub(total, reshape(slice(ls, 1, matches[l].positive, 1), {1}));
  }
  return total;
}

}  // namespace streamtrack
