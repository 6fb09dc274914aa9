#pragma once

// Spatial-temporal relation modeling: box-aware point mask, position/temporal
// and mask embeddings, hybrid (global + local) attention layers, and per-layer
// point supervision.

#include <cstdint>
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

/// Tokens of the current frame plus n history frames, all in the canonical
/// frame of the newest stored box. Token k of temporal index i sits at row
/// i·N' + k; i = 0 is the current frame.
struct StreamInput {
  std::size_t frames = 0;
  std::size_t points_per_frame = 0;
  PointSet coords;
  PointSet coords_world;
  Tensor feats;                              // [(n+1)·N', C]
  std::vector<std::size_t> temporal_index;   // per token
  std::vector<Box3D> boxes_world;            // per temporal index; entry 0 is unused
  Box3D reference;                           // canonical frame of `coords`

  std::size_t tokens() const { return frames * points_per_frame; }
};

struct PointTargets {
  std::vector<double> objectness;           // ŝ per token
  std::vector<BoxDistances> distances;      // d̂ per token
};

/// Box-aware point mask M′: objectiveness m ∈ {0, 0.5, 1} plus 9 box distances per token.
struct PointMask {
  std::vector<double> objectness;
  std::vector<BoxDistances> distances;
  std::optional<PointTargets> targets;      // training only

  Tensor features() const {
    std::vector<double> v;
    v.reserve(objectness.size() * 10);
    for (std::size_t i = 0; i < objectness.size(); ++i) {
      v.push_back(objectness[i]);
      v.insert(v.end(), distances[i].begin(), distances[i].end());
    }
    return Tensor({objectness.size(), 10}, std::move(v));
  }
};

struct EncoderConfig {
  std::size_t layers = 3;
  std::vector<double> radii{0.6, 1.0, 1.5};
  std::size_t heads = 4;
  std::size_t local_cap = 16;
  std::size_t ffn_mult = 2;
  bool use_local = true;          // false: vanilla attention only
  bool cross_frame_local = false; // neighborhoods across frames instead of within each frame

  void validate(std::size_t channels) const {
    if (layers == 0) throw std::invalid_argument("EncoderConfig: layers must be >= 1");
    if (radii.size() != layers) throw std::invalid_argument("EncoderConfig: need one radius per layer");
    if (heads == 0 || channels % heads != 0)
      throw std::invalid_argument("EncoderConfig: channels must be divisible by heads");
    if (local_cap == 0) throw std::invalid_argument("EncoderConfig: local_cap must be >= 1");
  }
};

struct EncoderOutput {
  Tensor tokens;                  // [T, C]
  Tensor position_embedding;      // PE, reused by decoder cross-attention
  std::vector<Tensor> objectness; // s_l, [T] logits per layer
  std::vector<Tensor> distances;  // d_l, [T, 9] per layer
};

/// Historical tokens get m from containment in their own frame's box and the 9
/// box distances; current-frame tokens get m = 0.5 and zero distances. When
/// per-frame ground truth (indexed by temporal index) is supplied, supervision
/// targets are emitted for every token against its own frame's GT box.
inline PointMask build_point_mask(const StreamInput& in, const std::vector<Box3D>* gt_world = nullptr) {
  const std::size_t T = in.tokens();
  PointMask mask;
  mask.objectness.assign(T, 0.5);
  mask.distances.assign(T, BoxDistances{});
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t i = in.temporal_index[t];
    if (i == 0) continue;
    const Box3D& box = in.boxes_world.at(i);
    mask.objectness[t] = point_in_box(in.coords_world[t], box) ? 1.0 : 0.0;
    mask.distances[t] = box_aware_distances(in.coords_world[t], box);
  }
  if (gt_world) {
    if (gt_world->size() != in.frames) throw std::invalid_argument("build_point_mask: need one GT box per frame");
    PointTargets tg;
    tg.objectness.resize(T);
    tg.distances.resize(T);
    for (std::size_t t = 0; t < T; ++t) {
      const Box3D& box = (*gt_world)[in.temporal_index[t]];
      tg.objectness[t] = point_in_box(in.coords_world[t], box) ? 1.0 : 0.0;
      tg.distances[t] = box_aware_distances(in.coords_world[t], box);
    }
    mask.targets = std::move(tg);
  }
  return mask;
}

/// Row-major [T, T] attend mask from a ball query of radius `radius` (cap
/// nearest neighbors), within each frame unless `cross_frame` is set.
inline std::vector<std::uint8_t> local_attention_mask(const StreamInput& in, double radius, std::size_t cap,
                                                      bool cross_frame) {
  const std::size_t T = in.tokens();
  std::vector<std::uint8_t> mask(T * T, 0);
  if (cross_frame) {
    const auto groups = ball_query(in.coords, in.coords, radius, cap);
    for (std::size_t a = 0; a < T; ++a)
      for (auto b : groups[a]) mask[a * T + b] = 1;
    return mask;
  }
  const std::size_t P = in.points_per_frame;
  for (std::size_t f = 0; f < in.frames; ++f) {
    const PointSet pts(in.coords.begin() + static_cast<std::ptrdiff_t>(f * P),
                       in.coords.begin() + static_cast<std::ptrdiff_t>((f + 1) * P));
    const auto groups = ball_query(pts, pts, radius, cap);
    for (std::size_t a = 0; a < P; ++a)
      for (auto b : groups[a]) mask[(f * P + a) * T + f * P + b] = 1;
  }
  return mask;
}

namespace encoder {

inline std::string layer_name(std::size_t l) { return "encoder.l" + std::to_string(l); }

inline void init_params(ParamStore& p, const EncoderConfig& cfg, std::size_t channels, std::size_t frames,
                        std::mt19937_64& rng) {
  cfg.validate(channels);
  const std::size_t C = channels;
  nn::init_mlp2(p, "encoder.pos", 3, C, C, rng);
  nn::init_mlp2(p, "encoder.mask", 10, C, C, rng);
  {
    std::normal_distribution<double> n(0.0, 0.02);
    std::vector<double> t(frames * C);
    for (auto& v : t) v = n(rng);
    p.add("encoder.temporal", Tensor({frames, C}, std::move(t)));
  }
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string L = layer_name(l);
    nn::init_attention(p, L + ".global", C, rng);
    nn::init_attention(p, L + ".local", C, rng);
    nn::init_linear(p, L + ".merge", 2 * C, C, rng);
    nn::init_layer_norm(p, L + ".ln1", C);
    nn::init_mlp2(p, L + ".ffn", C, cfg.ffn_mult * C, C, rng);
    nn::init_layer_norm(p, L + ".ln2", C);
    nn::init_mlp2(p, L + ".point_s", C, C, 1, rng);
    nn::init_mlp2(p, L + ".point_d", C, C, 9, rng);
  }
}

}  // namespace encoder

/// PE = MLP(coords) + temporal[i]; ME = MLP(M′).
inline std::pair<Tensor, Tensor> embeddings(const StreamInput& in, const PointMask& mask, const ParamStore& p) {
  std::vector<double> xyz;
  xyz.reserve(in.coords.size() * 3);
  for (const auto& c : in.coords) xyz.insert(xyz.end(), {c.x, c.y, c.z});
  const Tensor coords({in.coords.size(), 3}, std::move(xyz));
  const Tensor pe = add(nn::apply_mlp2(p, "encoder.pos", coords), gather_rows(p.at("encoder.temporal"), in.temporal_index));
  const Tensor me = nn::apply_mlp2(p, "encoder.mask", mask.features());
  return {pe, me};
}

/// Q = K = F + PE, V = F + ME over all tokens.
inline nn::AttentionOutput global_attention(const Tensor& F, const Tensor& PE, const Tensor& ME, const ParamStore& p,
                                            const std::string& name, std::size_t heads) {
  const Tensor qk = add(F, PE);
  return nn::attention(p, name, qk, qk, add(F, ME), heads);
}

/// Same construction as global_attention, keys/values restricted by `neighbors`.
inline nn::AttentionOutput local_attention(const Tensor& F, const Tensor& PE, const Tensor& ME,
                                           const std::vector<std::uint8_t>& neighbors, const ParamStore& p,
                                           const std::string& name, std::size_t heads) {
  const Tensor qk = add(F, PE);
  return nn::attention(p, name, qk, qk, add(F, ME), heads, &neighbors);
}

struct LayerOutput {
  Tensor tokens;
  Tensor objectness;  // [T]
  Tensor distances;   // [T, 9]
};

/// Global and local attention concatenated and merged by a linear layer,
/// residual + layer-norm, FFN (residual + layer-norm), then the point heads.
/// With use_local = false only the global half of the merge weights is used.
inline LayerOutput hybrid_layer(const Tensor& F, const Tensor& PE, const Tensor& ME,
                                const std::vector<std::uint8_t>* neighbors, std::size_t l, const EncoderConfig& cfg,
                                const ParamStore& p) {
  const std::string L = encoder::layer_name(l);
  const std::size_t C = F.dim(1);
  const Tensor g = global_attention(F, PE, ME, p, L + ".global", cfg.heads).out;
  Tensor merged;
  if (cfg.use_local) {
    const Tensor loc = local_attention(F, PE, ME, *neighbors, p, L + ".local", cfg.heads).out;
    merged = nn::apply_linear(p, L + ".merge", concat({g, loc}, 1));
  } else {
    merged = linear(g, slice(p.at(L + ".merge.W"), 0, 0, C), p.at(L + ".merge.b"));
  }
  const Tensor f1 = nn::apply_layer_norm(p, L + ".ln1", add(F, merged));
  const Tensor f2 = nn::apply_layer_norm(p, L + ".ln2", add(f1, nn::apply_mlp2(p, L + ".ffn", f1)));
  const std::size_t T = F.dim(0);
  return {f2, reshape(nn::apply_mlp2(p, L + ".point_s", f2), {T}), nn::apply_mlp2(p, L + ".point_d", f2)};
}

inline EncoderOutput encode(const StreamInput& in, const PointMask& mask, const EncoderConfig& cfg,
                            const ParamStore& p) {
  cfg.validate(in.feats.dim(1));
  auto [pe, me] = embeddings(in, mask, p);
  EncoderOutput out;
  out.position_embedding = pe;
  Tensor F = in.feats;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::vector<std::uint8_t> neighbors;
    if (cfg.use_local) neighbors = local_attention_mask(in, cfg.radii[l], cfg.local_cap, cfg.cross_frame_local);
    LayerOutput lo = hybrid_layer(F, pe, me, cfg.use_local ? &neighbors : nullptr, l, cfg, p);
    F = lo.tokens;
    out.objectness.push_back(lo.objectness);
    out.distances.push_back(lo.distances);
  }
  out.tokens = F;
  return out;
}

/// Σ_l λ_s·BCE(s_l, ŝ) + λ_d·smoothL1(d_l, d̂); both terms are means over tokens/elements.
inline Tensor point_loss(const EncoderOutput& enc, const PointTargets& tg, double lambda_s = 0.1,
                         double lambda_d = 1.0) {
  std::vector<double> dflat;
  dflat.reserve(tg.distances.size() * 9);
  for (const auto& d : tg.distances) dflat.insert(dflat.end(), d.begin(), d.end());
  const Tensor dt({tg.distances.size(), 9}, std::move(dflat));
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t l = 0; l < enc.objectness.size(); ++l) {
    const Tensor ce = bce_with_logits(enc.objectness[l], tg.objectness);
    const Tensor sl1 = mean(smooth_l1(sub(enc.distances[l], dt)));
    total = add(total, add(scale(ce, lambda_s), scale(sl1, lambda_d)));
  }
  return total;
}

}  // namespace streamtrack
