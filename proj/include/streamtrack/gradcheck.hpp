#pragma once

// Central finite-difference checks of every differentiable op and of the
// composed backbone, encoder layer, decoder, losses and total loss.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "streamtrack/harness.hpp"

namespace streamtrack::gradcheck {

struct Options {
  double h = 1e-6;
  double tolerance = 1e-5;
  // Relative error is |a − n| / max(|a|, |n|, floor). Below the floor the
  // comparison is absolute: at h = 1e-6 central differences through a few
  // hundred ops carry ~1e-8 of rounding noise, which swamps the ratio for
  // gradients near zero.
  double floor = 1e-2;
  std::size_t instances = 100;
  std::uint64_t seed = 20240601;
};

struct Stats {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t coords = 0;

  void merge(const Stats& o) {
    max_rel = std::max(max_rel, o.max_rel);
    max_abs = std::max(max_abs, o.max_abs);
    coords += o.coords;
  }
};

/// Compares backward() against central differences for the scalar `f` at the
/// current values of `leaves`. `f` must rebuild its graph on every call. With
/// max_coords > 0 a random subset of that many coordinates is checked.
inline Stats compare(const std::function<Tensor()>& f, std::vector<Tensor> leaves, const Options& o,
                     std::mt19937_64& rng, std::size_t max_coords = 0) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.mutable_grad().assign(l.numel(), 0.0);
  }
  backward(f());
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t k = 0; k < leaves.size(); ++k)
    for (std::size_t i = 0; i < leaves[k].numel(); ++i) coords.emplace_back(k, i);
  if (max_coords > 0 && coords.size() > max_coords) {
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }
  Stats st;
  NoGradGuard ng;
  for (auto [k, i] : coords) {
    auto d = leaves[k].mutable_data();
    const double v = d[i];
    d[i] = v + o.h;
    const double fp = f().item();
    d[i] = v - o.h;
    const double fm = f().item();
    d[i] = v;
    const double num = (fp - fm) / (2.0 * o.h);
    const double ana = leaves[k].grad()[i];
    const double err = std::abs(ana - num);
    st.max_abs = std::max(st.max_abs, err);
    st.max_rel = std::max(st.max_rel, err / std::max({std::abs(ana), std::abs(num), o.floor}));
    ++st.coords;
  }
  return st;
}

struct CaseResult {
  std::string name;
  std::size_t instances = 0;
  Stats stats;
  double seconds = 0.0;
  bool passed = false;
};

// One random instance: build leaves and a scalar function, return their comparison.
using Case = std::function<Stats(std::mt19937_64&, const Options&)>;

namespace detail {

inline Tensor randn(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Values bounded away from `kink` by `gap`.
inline Tensor randn_away(Shape shape, std::mt19937_64& rng, std::vector<double> kinks, double gap = 1e-3) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    bool ok = false;
    while (!ok) {
      x = 1.5 * n(rng);
      ok = true;
      for (double k : kinks) ok = ok && std::abs(x - k) > gap;
    }
  }
  return Tensor(std::move(shape), std::move(v), true);
}

inline std::size_t dim(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Scalarizes y with fixed random weights.
inline std::function<Tensor(const Tensor&)> projector(const Shape& shape, std::mt19937_64& rng) {
  Tensor w = randn(shape, rng);
  w.set_requires_grad(false);
  return [w](const Tensor& y) { return sum(mul(y, w)); };
}

inline Stats unary(std::mt19937_64& rng, const Options& o, const std::function<Tensor(const Tensor&)>& op,
                   std::vector<double> kinks = {}, double shift = 0.0) {
  const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
  Tensor x = kinks.empty() ? randn(s, rng) : randn_away(s, rng, kinks);
  if (shift != 0.0)
    for (auto& v : x.mutable_data()) v = std::abs(v) + shift;
  auto proj = projector(s, rng);
  return compare([&] { return proj(op(x)); }, {x}, o, rng);
}

inline void randomize(ParamStore& p, std::mt19937_64& rng, double sd = 0.3) {
  std::normal_distribution<double> n(0.0, sd);
  for (auto& [name, t] : p)
    for (auto& v : t.mutable_data()) v += n(rng);
}

inline std::vector<Tensor> trainable(ParamStore& p, const std::string& prefix = "") {
  std::vector<Tensor> out;
  for (auto& [name, t] : p)
    if (t.requires_grad() && name.rfind(prefix, 0) == 0) out.push_back(t);
  return out;
}

inline PointSet random_points(std::size_t n, std::mt19937_64& rng, double extent) {
  std::uniform_real_distribution<double> u(-extent, extent);
  PointSet out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({u(rng), u(rng), 0.5 * u(rng)});
  return out;
}

inline ModelConfig tiny_model(std::size_t history = 1) {
  ModelConfig m;
  m.history = history;
  m.backbone.input_points = 16;
  m.backbone.stage_points = {8, 4};
  m.backbone.stage_radii = {0.8, 1.5};
  m.backbone.neighbor_cap = 4;
  m.backbone.stage_channels = {8, 8};
  m.encoder.layers = 1;
  m.encoder.radii = {1.5};
  m.encoder.heads = 2;
  m.encoder.local_cap = 3;
  m.decoder.layers = 2;
  m.decoder.heads = 2;
  return m;
}

// Random stream input with C-wide leaf features: `frames` frames of `per_frame` tokens.
inline StreamInput random_stream(std::size_t frames, std::size_t per_frame, std::size_t C, std::mt19937_64& rng) {
  StreamInput in;
  in.frames = frames;
  in.points_per_frame = per_frame;
  in.reference = Box3D{{0, 0, 0}, {1.5, 1.0, 1.0}, 0.0};
  in.boxes_world.assign(frames, Box3D{{0, 0, 0}, {1.5, 1.0, 1.0}, 0.0});
  std::uniform_real_distribution<double> u(-0.4, 0.4);
  for (std::size_t f = 1; f < frames; ++f)
    in.boxes_world[f] = Box3D{{u(rng), u(rng), 0.0}, {1.5, 1.0, 1.0}, u(rng)};
  for (std::size_t f = 0; f < frames; ++f) {
    const PointSet pts = random_points(per_frame, rng, 1.2);
    in.coords.insert(in.coords.end(), pts.begin(), pts.end());
    in.temporal_index.insert(in.temporal_index.end(), per_frame, f);
  }
  in.coords_world = in.coords;
  in.feats = randn({frames * per_frame, C}, rng);
  return in;
}

}  // namespace detail

/// The registered cases, in run order.
inline std::vector<std::pair<std::string, Case>> cases() {
  using namespace detail;
  std::vector<std::pair<std::string, Case>> c;
  auto binary = [](std::function<Tensor(const Tensor&, const Tensor&)> op, bool broadcast) {
    return [op, broadcast](std::mt19937_64& rng, const Options& o) {
      const Shape s{dim(rng, 1, 4), dim(rng, 1, 5)};
      Tensor a = randn(s, rng);
      Tensor b = randn(broadcast ? Shape{s[1]} : s, rng);
      auto proj = projector(s, rng);
      return compare([&] { return proj(op(a, b)); }, {a, b}, o, rng);
    };
  };
  c.emplace_back("add", binary([](const Tensor& a, const Tensor& b) { return add(a, b); }, false));
  c.emplace_back("add_broadcast", binary([](const Tensor& a, const Tensor& b) { return add(a, b); }, true));
  c.emplace_back("sub", binary([](const Tensor& a, const Tensor& b) { return sub(a, b); }, false));
  c.emplace_back("mul", binary([](const Tensor& a, const Tensor& b) { return mul(a, b); }, false));
  c.emplace_back("mul_broadcast", binary([](const Tensor& a, const Tensor& b) { return mul(a, b); }, true));
  c.emplace_back("scale", [](std::mt19937_64& rng, const Options& o) {
    const double s = std::normal_distribution<double>(0.0, 2.0)(rng);
    return unary(rng, o, [s](const Tensor& x) { return scale(x, s); });
  });
  c.emplace_back("add_scalar", [](std::mt19937_64& rng, const Options& o) {
    return unary(rng, o, [](const Tensor& x) { return add_scalar(x, 0.7); });
  });
  c.emplace_back("neg", [](std::mt19937_64& rng, const Options& o) { return unary(rng, o, neg); });
  c.emplace_back("exp", [](std::mt19937_64& rng, const Options& o) {
    return unary(rng, o, static_cast<Tensor (*)(const Tensor&)>(exp));
  });
  c.emplace_back("log", [](std::mt19937_64& rng, const Options& o) {
    return unary(rng, o, static_cast<Tensor (*)(const Tensor&)>(log), {}, 0.2);
  });
  c.emplace_back("relu", [](std::mt19937_64& rng, const Options& o) { return unary(rng, o, relu, {0.0}); });
  c.emplace_back("sigmoid", [](std::mt19937_64& rng, const Options& o) { return unary(rng, o, sigmoid); });
  c.emplace_back("log_sigmoid", [](std::mt19937_64& rng, const Options& o) { return unary(rng, o, log_sigmoid); });
  c.emplace_back("smooth_l1", [](std::mt19937_64& rng, const Options& o) {
    return unary(rng, o, [](const Tensor& x) { return smooth_l1(x); }, {-1.0, 1.0});
  });
  c.emplace_back("reshape", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({2, 3, dim(rng, 1, 3)}, rng);
    auto proj = projector({6, x.dim(2)}, rng);
    return compare([&] { return proj(reshape(x, {6, x.dim(2)})); }, {x}, o, rng);
  });
  c.emplace_back("transpose", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({dim(rng, 1, 4), dim(rng, 1, 5)}, rng);
    auto proj = projector({x.dim(1), x.dim(0)}, rng);
    return compare([&] { return proj(transpose(x)); }, {x}, o, rng);
  });
  c.emplace_back("concat", [](std::mt19937_64& rng, const Options& o) {
    const int axis = static_cast<int>(dim(rng, 0, 1));
    const std::size_t r = dim(rng, 1, 3), k = dim(rng, 1, 3);
    Tensor a = randn({r, k}, rng), b = randn(axis == 0 ? Shape{r + 1, k} : Shape{r, k + 2}, rng);
    const Shape out = axis == 0 ? Shape{2 * r + 1, k} : Shape{r, 2 * k + 2};
    auto proj = projector(out, rng);
    return compare([&] { return proj(concat({a, b}, axis)); }, {a, b}, o, rng);
  });
  c.emplace_back("slice", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({4, 5}, rng);
    const int axis = static_cast<int>(dim(rng, 0, 1));
    const std::size_t start = dim(rng, 0, 2), len = dim(rng, 1, 2);
    auto proj = projector(axis == 0 ? Shape{len, 5} : Shape{4, len}, rng);
    return compare([&] { return proj(slice(x, axis, start, len)); }, {x}, o, rng);
  });
  c.emplace_back("gather_rows", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({4, 3}, rng);
    std::vector<std::size_t> idx;
    for (int i = 0; i < 6; ++i) idx.push_back(dim(rng, 0, 3));
    auto proj = projector({6, 3}, rng);
    return compare([&] { return proj(gather_rows(x, idx)); }, {x}, o, rng);
  });
  c.emplace_back("matmul", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
    Tensor a = randn({m, k}, rng), b = randn({k, n}, rng);
    auto proj = projector({m, n}, rng);
    return compare([&] { return proj(matmul(a, b)); }, {a, b}, o, rng);
  });
  c.emplace_back("matmul_nt", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t m = dim(rng, 1, 4), k = dim(rng, 1, 4), n = dim(rng, 1, 4);
    Tensor a = randn({m, k}, rng), b = randn({n, k}, rng);
    auto proj = projector({m, n}, rng);
    return compare([&] { return proj(matmul_nt(a, b)); }, {a, b}, o, rng);
  });
  c.emplace_back("linear", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({3, 4}, rng), W = randn({4, 5}, rng), b = randn({5}, rng);
    auto proj = projector({3, 5}, rng);
    return compare([&] { return proj(linear(x, W, b)); }, {x, W, b}, o, rng);
  });
  c.emplace_back("linear_rank3", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({2, 3, 4}, rng), W = randn({4, 5}, rng), b = randn({5}, rng);
    auto proj = projector({2, 3, 5}, rng);
    return compare([&] { return proj(linear(x, W, b)); }, {x, W, b}, o, rng);
  });
  c.emplace_back("sum", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({dim(rng, 1, 4), dim(rng, 1, 5)}, rng);
    return compare([&] { return mul(sum(x), sum(x)); }, {x}, o, rng);
  });
  c.emplace_back("mean", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({dim(rng, 1, 4), dim(rng, 1, 5)}, rng);
    return compare([&] { return exp(mean(x)); }, {x}, o, rng);
  });
  c.emplace_back("sum_axis", [](std::mt19937_64& rng, const Options& o) {
    const int axis = static_cast<int>(dim(rng, 0, 1));
    Tensor x = randn({3, 4}, rng);
    auto proj = projector(axis == 0 ? Shape{4} : Shape{3}, rng);
    return compare([&] { return proj(sum_axis(x, axis)); }, {x}, o, rng);
  });
  c.emplace_back("max_axis", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({3, 4, 2}, rng);  // continuous draws: ties have probability zero
    auto proj = projector({3, 2}, rng);
    return compare([&] { return proj(max_axis(x, 1)); }, {x}, o, rng);
  });
  c.emplace_back("softmax", [](std::mt19937_64& rng, const Options& o) { return unary(rng, o, softmax); });
  c.emplace_back("masked_softmax", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({3, 4}, rng);
    std::vector<std::uint8_t> mask(12);
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t k = 0; k < 4; ++k) mask[r * 4 + k] = dim(rng, 0, 1);
      mask[r * 4 + dim(rng, 0, 3)] = 1;
    }
    auto proj = projector({3, 4}, rng);
    return compare([&] { return proj(masked_softmax(x, mask)); }, {x}, o, rng);
  });
  c.emplace_back("log_softmax", [](std::mt19937_64& rng, const Options& o) { return unary(rng, o, log_softmax); });
  c.emplace_back("layer_norm", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t d = dim(rng, 2, 6);
    Tensor x = randn({3, d}, rng), g = randn({d}, rng), b = randn({d}, rng);
    auto proj = projector({3, d}, rng);
    return compare([&] { return proj(layer_norm(x, g, b)); }, {x, g, b}, o, rng);
  });
  c.emplace_back("bce_with_logits", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({6}, rng);
    std::vector<double> t;
    for (int i = 0; i < 6; ++i) t.push_back(static_cast<double>(dim(rng, 0, 1)));
    return compare([&] { return bce_with_logits(x, t); }, {x}, o, rng);
  });
  c.emplace_back("focal_loss", [](std::mt19937_64& rng, const Options& o) {
    Tensor x = randn({6}, rng);
    std::vector<double> t(6, 0.0);
    t[dim(rng, 0, 5)] = 1.0;
    return compare([&] { return focal_loss(x, t); }, {x}, o, rng);
  });
  c.emplace_back("giou", [](std::mt19937_64& rng, const Options& o) {
    std::uniform_real_distribution<double> u(-0.6, 0.6), s(0.8, 2.5), hd(-3.0, 3.0);
    const Box3D target{{u(rng), u(rng), 0.3 * u(rng)}, {s(rng), s(rng), s(rng)}, hd(rng)};
    const Vec3 size{s(rng), s(rng), s(rng)};
    const bool far = dim(rng, 0, 3) == 0;  // some disjoint pairs
    Tensor center({3}, {u(rng) + (far ? 4.0 : 0.0), u(rng), 0.3 * u(rng)}, true);
    Tensor heading({1}, {hd(rng)}, true);
    return compare([&] { return giou_op(center, heading, size, target); }, {center, heading}, o, rng);
  });
  c.emplace_back("attention", [](std::mt19937_64& rng, const Options& o) {
    ParamStore p;
    nn::init_attention(p, "att", 4, rng);
    randomize(p, rng);
    Tensor q = randn({3, 4}, rng), kv = randn({5, 4}, rng);
    std::vector<std::uint8_t> mask(15);
    for (auto& m : mask) m = dim(rng, 0, 1);
    for (std::size_t r = 0; r < 3; ++r) mask[r * 5 + dim(rng, 0, 4)] = 1;
    const bool masked = dim(rng, 0, 1) == 1;
    auto proj = projector({3, 4}, rng);
    auto leaves = trainable(p);
    leaves.push_back(q);
    leaves.push_back(kv);
    return compare([&] { return proj(nn::attention(p, "att", q, kv, kv, 2, masked ? &mask : nullptr).out); },
                   leaves, o, rng);
  });
  c.emplace_back("backbone", [](std::mt19937_64& rng, const Options& o) {
    const ModelConfig m = tiny_model();
    ParamStore p;
    backbone::init_params(p, m.backbone, rng);
    randomize(p, rng);
    const PointSet pts = random_points(m.backbone.input_points, rng, 1.5);
    auto proj = projector({m.backbone.out_points(), m.backbone.channels()}, rng);
    return compare([&] { return proj(extract(pts, m.backbone, p).feats); }, trainable(p), o, rng);
  });
  c.emplace_back("embeddings", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t C = 8;
    EncoderConfig ec;
    ec.layers = 1;
    ec.radii = {1.0};
    ec.heads = 2;
    ParamStore p;
    encoder::init_params(p, ec, C, 2, rng);
    randomize(p, rng);
    const StreamInput in = random_stream(2, 3, C, rng);
    const PointMask mask = build_point_mask(in);
    auto proj = projector({6, C}, rng);
    auto proj2 = projector({6, C}, rng);
    std::vector<Tensor> leaves = trainable(p, "encoder.pos");
    for (auto& t : trainable(p, "encoder.mask")) leaves.push_back(t);
    leaves.push_back(p.at("encoder.temporal"));
    return compare(
        [&] {
          auto [pe, me] = embeddings(in, mask, p);
          return add(proj(pe), proj2(me));
        },
        leaves, o, rng);
  });
  c.emplace_back("encoder_layer", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t C = 8;
    EncoderConfig ec;
    ec.layers = 1;
    ec.radii = {0.9};
    ec.heads = 2;
    ec.local_cap = 2;
    ParamStore p;
    encoder::init_params(p, ec, C, 2, rng);
    randomize(p, rng);
    StreamInput in = random_stream(2, 3, C, rng);
    const PointMask mask = build_point_mask(in);
    const auto nb = local_attention_mask(in, ec.radii[0], ec.local_cap, false);
    auto proj = projector({6, C}, rng), ps = projector({6}, rng), pd = projector({6, 9}, rng);
    auto leaves = trainable(p);
    leaves.push_back(in.feats);
    return compare(
        [&] {
          auto [pe, me] = embeddings(in, mask, p);
          const LayerOutput lo = hybrid_layer(in.feats, pe, me, &nb, 0, ec, p);
          return add(add(proj(lo.tokens), ps(lo.objectness)), pd(lo.distances));
        },
        leaves, o, rng);
  });
  c.emplace_back("point_loss", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t C = 8;
    EncoderConfig ec;
    ec.layers = 2;
    ec.radii = {0.9, 1.5};
    ec.heads = 2;
    ec.local_cap = 2;
    ParamStore p;
    encoder::init_params(p, ec, C, 2, rng);
    randomize(p, rng);
    StreamInput in = random_stream(2, 3, C, rng);
    std::vector<Box3D> gt(2);
    for (auto& b : gt) b = Box3D{{0.3 * in.coords[dim(rng, 0, 5)].x, 0.0, 0.0}, {1.4, 1.0, 1.0}, 0.2};
    const PointMask mask = build_point_mask(in, &gt);
    std::vector<Tensor> leaves = trainable(p);
    return compare([&] { return point_loss(encode(in, mask, ec, p), *mask.targets); }, leaves, o, rng, 300);
  });
  c.emplace_back("query_mlp", [](std::mt19937_64& rng, const Options& o) {
    ParamStore p;
    nn::init_mlp2(p, "query", 3, 8, 8, rng);
    randomize(p, rng);
    const PointSet pts = random_points(4, rng, 1.0);
    auto proj = projector({4, 8}, rng);
    return compare([&] { return proj(make_queries(pts, std::nullopt, p).embeddings); }, trainable(p), o, rng);
  });
  c.emplace_back("decoder_layer", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t C = 8;
    DecoderConfig dc;
    dc.layers = 1;
    dc.heads = 2;
    ParamStore p;
    decoder::init_params(p, dc, C, rng);
    randomize(p, rng);
    Tensor x = randn({4, C}, rng), mem = randn({6, C}, rng);
    auto proj = projector({4, C}, rng);
    auto leaves = trainable(p, "decoder.l0");
    leaves.push_back(x);
    leaves.push_back(mem);
    return compare([&] { return proj(decoder::layer(x, mem, 0, dc, p, "")); }, leaves, o, rng);
  });
  c.emplace_back("box_loss", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t C = 8;
    DecoderConfig dc;
    dc.layers = 2;
    dc.heads = 2;
    ParamStore p;
    decoder::init_params(p, dc, C, rng);
    randomize(p, rng);
    const PointSet q = random_points(4, rng, 1.0);
    Tensor tokens = randn({6, C}, rng), pos = randn({6, C}, rng);
    const Box3D gt{{0.2, -0.1, 0.05}, {1.6, 1.1, 1.0}, 0.3};
    std::vector<MatchResult> matches;
    {
      NoGradGuard ng;
      for (const auto& l : decode(make_queries(q, std::nullopt, p), tokens, pos, dc, p))
        matches.push_back(match(l, q, gt.size, gt));
    }
    auto leaves = trainable(p);
    leaves.push_back(tokens);
    return compare(
        [&] { return box_loss(decode(make_queries(q, std::nullopt, p), tokens, pos, dc, p), matches, q, gt); },
        leaves, o, rng, 300);
  });
  c.emplace_back("infonce", [](std::mt19937_64& rng, const Options& o) {
    const std::size_t N = dim(rng, 2, 6), D = dim(rng, 2, 5), L = dim(rng, 1, 2);
    std::vector<Tensor> proj;
    std::vector<std::vector<double>> fg;
    std::vector<MatchResult> matches;
    for (std::size_t l = 0; l < L; ++l) {
      proj.push_back(randn({N, D}, rng));
      fg.push_back(randn({D}, rng).values());
      MatchResult m;
      m.positive = dim(rng, 0, N - 1);
      m.targets.assign(N, 0.0);
      m.targets[m.positive] = 1.0;
      matches.push_back(m);
    }
    const double tau = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
    return compare(
        [&] {
          std::vector<LayerPrediction> preds(L);
          for (std::size_t l = 0; l < L; ++l) {
            preds[l].projections = proj[l];
            preds[l].gt_embedding = fg[l];
          }
          return infonce_loss(preds, matches, tau);
        },
        proj, o, rng);
  });
  c.emplace_back("total_loss", [](std::mt19937_64& rng, const Options& o) {
    std::uniform_real_distribution<double> u(0.1, 3.0);
    Tensor a({1}, {u(rng)}, true), b({1}, {u(rng)}, true), x({1}, {u(rng)}, true);
    LossWeights w;
    return compare([&] { return total_loss(mul(a, a), mul(b, x), exp(x), w); }, {a, b, x}, o, rng);
  });
  c.emplace_back("model_total_loss", [](std::mt19937_64& rng, const Options& o) {
    const ModelConfig mc = tiny_model(1);
    Model model(mc, rng());
    randomize(model.params, rng, 0.1);
    // A two-frame window: target box moving along x plus scattered clutter.
    Tracklet win{"car", {1.2, 0.8, 0.8}, {}};
    std::uniform_real_distribution<double> u(-0.3, 0.3);
    for (std::size_t j = 0; j < 2; ++j) {
      Frame f;
      f.timestamp = static_cast<std::int64_t>(j);
      f.box = Box3D{{0.4 * static_cast<double>(j) + u(rng), u(rng), 0.0}, win.size, u(rng)};
      f.points = random_points(24, rng, 1.5);
      win.frames.push_back(f);
    }
    TrackerConfig tc;
    tc.search_scale = 1.0;
    tc.search_margin = 2.0;
    AugmentConfig ac;
    ac.enhance_prob = 0.0;
    const std::mt19937_64 sample_rng(rng());
    LossWeights w;
    // The GT embedding is a stop-gradient target: freeze it at the base point.
    std::vector<std::vector<double>> fg;
    {
      NoGradGuard ng;
      std::mt19937_64 r = sample_rng;
      const auto s = build_sample(win, model, tc, ac, nullptr, r);
      for (const auto& l : forward(model, s->input, s->mask, s->gt.center).layers) fg.push_back(*l.gt_embedding);
    }
    return compare(
        [&] {
          std::mt19937_64 r = sample_rng;
          const auto s = build_sample(win, model, tc, ac, nullptr, r);
          ModelOutput out = forward(model, s->input, s->mask);
          for (std::size_t l = 0; l < out.layers.size(); ++l) out.layers[l].gt_embedding = fg[l];
          return output_loss(out, *s, w, true, true);
        },
        trainable(model.params), o, rng, 60);
  });
  return c;
}

/// Runs every case (or those whose name contains `filter`) for o.instances seeded instances.
inline std::vector<CaseResult> run(const Options& o, const std::string& filter = "",
                                   const std::function<void(const CaseResult&)>& on_result = {}) {
  std::vector<CaseResult> out;
  std::size_t index = 0;
  for (const auto& [name, fn] : cases()) {
    ++index;
    if (!filter.empty() && name.find(filter) == std::string::npos) continue;
    CaseResult r;
    r.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 rng(o.seed * 1000003ULL + index);
    for (std::size_t i = 0; i < o.instances; ++i) r.stats.merge(fn(rng, o));
    r.instances = o.instances;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.passed = r.stats.max_rel <= o.tolerance;
    if (on_result) on_result(r);
    out.push_back(r);
  }
  return out;
}

}  // namespace streamtrack::gradcheck
