#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "streamtrack/encoder.hpp"
#include "streamtrack/gradcheck.hpp"
#include "test_util.hpp"

using namespace streamtrack;
using st_test::Gen;

namespace {

constexpr std::size_t C = 8;

struct Fixture {
  ParamStore p;
  EncoderConfig cfg;
  StreamInput in;
  PointMask mask;

  explicit Fixture(std::uint64_t seed, std::size_t frames = 3, std::size_t per_frame = 6) {
    std::mt19937_64 rng(seed);
    cfg.layers = 1;
    cfg.radii = {0.8};
    cfg.heads = 2;
    cfg.local_cap = 4;
    encoder::init_params(p, cfg, C, frames, rng);
    gradcheck::detail::randomize(p, rng, 0.2);
    in = gradcheck::detail::random_stream(frames, per_frame, C, rng);
    mask = build_point_mask(in);
  }
};

void expect_tensor_near(const Tensor& a, const Tensor& b, double tol) {
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.at(i), b.at(i), tol) << "at " << i;
}

// Per-token output projection of the value path: out(V(F + ME)).
Tensor value_projection(const ParamStore& p, const std::string& name, const Tensor& v_in) {
  return nn::apply_linear(p, name + ".out", nn::apply_linear(p, name + ".v", v_in));
}

}  // namespace

TEST(PointMask, HistoricalInsideIsOne) {
  StreamInput in;
  in.frames = 2;
  in.points_per_frame = 2;
  in.coords = in.coords_world = {{5, 5, 5}, {6, 5, 5}, {0.1, 0, 0}, {3, 0, 0}};
  in.temporal_index = {0, 0, 1, 1};
  in.boxes_world = {Box3D{}, Box3D{{0, 0, 0}, {1, 1, 1}, 0.0}};
  const PointMask m = build_point_mask(in);
  EXPECT_EQ(m.objectness[2], 1.0);
  EXPECT_EQ(m.objectness[3], 0.0);
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_EQ(m.objectness[t], 0.5);
    for (double d : m.distances[t]) EXPECT_EQ(d, 0.0);
  }
  EXPECT_FALSE(m.targets.has_value());
}

TEST(PointMask, DistancesAtHistoricalCenter) {
  StreamInput in;
  in.frames = 2;
  in.points_per_frame = 1;
  const Box3D box{{1, 2, 0}, {2, 4, 2}, 0.7};
  in.coords = in.coords_world = {{0, 0, 0}, box.center};
  in.temporal_index = {0, 1};
  in.boxes_world = {Box3D{}, box};
  const PointMask m = build_point_mask(in);
  EXPECT_NEAR(m.distances[1][0], 0.0, 1e-15);
  const double half_diag = std::sqrt(1.0 + 4.0 + 1.0);
  for (std::size_t k = 1; k < 9; ++k) EXPECT_NEAR(m.distances[1][k], half_diag, 1e-12);
}

TEST(PointMask, TargetsForEveryFrame) {
  Fixture f(1);
  std::vector<Box3D> gt(f.in.frames, Box3D{{0, 0, 0}, {1.0, 1.0, 1.0}, 0.0});
  const PointMask m = build_point_mask(f.in, &gt);
  ASSERT_TRUE(m.targets.has_value());
  for (std::size_t t = 0; t < f.in.tokens(); ++t) {
    EXPECT_EQ(m.targets->objectness[t], point_in_box(f.in.coords_world[t], gt[0]) ? 1.0 : 0.0);
    const auto d = box_aware_distances(f.in.coords_world[t], gt[0]);
    for (std::size_t k = 0; k < 9; ++k) EXPECT_NEAR(m.targets->distances[t][k], d[k], 1e-12);
  }
  gt.pop_back();
  EXPECT_THROW(build_point_mask(f.in, &gt), std::invalid_argument);
}

TEST(Embeddings, IdenticalTokensGiveIdenticalRows) {
  Fixture f(2);
  f.in.coords[1] = f.in.coords[0];
  auto [pe, me] = embeddings(f.in, f.mask, f.p);
  for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(pe.at(0, c), pe.at(1, c));
}

TEST(Embeddings, ZeroTemporalTableDependsOnCoordsOnly) {
  Fixture f(3);
  for (auto& v : f.p.at("encoder.temporal").mutable_data()) v = 0.0;
  const std::size_t P = f.in.points_per_frame;
  f.in.coords[P] = f.in.coords[0];  // same coords, different temporal index
  auto [pe, me] = embeddings(f.in, f.mask, f.p);
  for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(pe.at(0, c), pe.at(P, c));
}

TEST(Attention, IdenticalKeysAverageValues) {
  ParamStore p;
  std::mt19937_64 rng(4);
  nn::init_attention(p, "a", C, rng);
  Gen g(5);
  const Tensor q({1, C}, g.values(C));
  const std::vector<double> key_row = g.values(C);
  std::vector<double> keys;
  for (int i = 0; i < 5; ++i) keys.insert(keys.end(), key_row.begin(), key_row.end());
  const Tensor k({5, C}, keys);
  const Tensor v({5, C}, g.values(5 * C));
  const auto res = nn::attention(p, "a", q, k, v, 2);
  for (const auto& w : res.weights)
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(w.at(j), 0.2, 1e-15);
  const Tensor mean_v = scale(sum_axis(nn::apply_linear(p, "a.v", v), 0), 0.2);
  expect_tensor_near(res.out, nn::apply_linear(p, "a.out", reshape(mean_v, {1, C})), 1e-12);
}

TEST(Attention, SingleTokenIsValueProjection) {
  ParamStore p;
  std::mt19937_64 rng(6);
  nn::init_attention(p, "a", C, rng);
  Gen g(7);
  const Tensor x({1, C}, g.values(C));
  expect_tensor_near(nn::attention(p, "a", x, x, x, 2).out, value_projection(p, "a", x), 1e-12);
}

TEST(Attention, WeightsAreRowStochastic) {
  Fixture f(8, 3, 8);
  auto [pe, me] = embeddings(f.in, f.mask, f.p);
  const auto res = global_attention(f.in.feats, pe, me, f.p, "encoder.l0.global", 2);
  for (const auto& w : res.weights)
    for (std::size_t r = 0; r < w.dim(0); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < w.dim(1); ++c) s += w.at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

TEST(Attention, GlobalIsPermutationEquivariant) {
  Fixture f(9, 2, 7);
  auto [pe, me] = embeddings(f.in, f.mask, f.p);
  const Tensor out = global_attention(f.in.feats, pe, me, f.p, "encoder.l0.global", 2).out;
  const std::size_t T = f.in.tokens();
  std::vector<std::size_t> perm(T);
  std::iota(perm.begin(), perm.end(), 0);
  Gen g(10);
  std::shuffle(perm.begin(), perm.end(), g.rng);
  const Tensor out_p = global_attention(gather_rows(f.in.feats, perm), gather_rows(pe, perm), gather_rows(me, perm),
                                        f.p, "encoder.l0.global", 2)
                           .out;
  expect_tensor_near(out_p, gather_rows(out, perm), 1e-12);
}

TEST(HybridAttention, InfiniteRadiusEqualsFrameBlockGlobal) {
  for (std::uint64_t seed = 11; seed < 16; ++seed) {
    Fixture f(seed, 3, 6);
    auto [pe, me] = embeddings(f.in, f.mask, f.p);
    const std::size_t P = f.in.points_per_frame;
    const auto nb = local_attention_mask(f.in, 1e9, P, false);
    const Tensor local = local_attention(f.in.feats, pe, me, nb, f.p, "encoder.l0.local", 2).out;
    std::vector<Tensor> blocks;
    for (std::size_t fr = 0; fr < f.in.frames; ++fr) {
      auto rows = [&](const Tensor& t) { return slice(t, 0, fr * P, P); };
      blocks.push_back(global_attention(rows(f.in.feats), rows(pe), rows(me), f.p, "encoder.l0.local", 2).out);
    }
    expect_tensor_near(local, concat(blocks, 0), 1e-6);
  }
}

TEST(HybridAttention, TinyRadiusAttendsToSelfOnly) {
  Fixture f(17, 3, 6);
  auto [pe, me] = embeddings(f.in, f.mask, f.p);
  const auto nb = local_attention_mask(f.in, 1e-9, 8, false);
  const Tensor local = local_attention(f.in.feats, pe, me, nb, f.p, "encoder.l0.local", 2).out;
  expect_tensor_near(local, value_projection(f.p, "encoder.l0.local", add(f.in.feats, me)), 1e-12);
}

TEST(HybridAttention, LocalMaskIsWithinFrame) {
  Fixture f(18, 3, 6);
  const auto nb = local_attention_mask(f.in, 1e9, 100, false);
  const std::size_t T = f.in.tokens();
  for (std::size_t a = 0; a < T; ++a)
    for (std::size_t b = 0; b < T; ++b)
      EXPECT_EQ(nb[a * T + b], f.in.temporal_index[a] == f.in.temporal_index[b] ? 1 : 0);
}

TEST(HybridLayer, ZeroLocalMergeEqualsVanilla) {
  Fixture f(19, 2, 6);
  auto [pe, me] = embeddings(f.in, f.mask, f.p);
  auto W = f.p.at("encoder.l0.merge.W").mutable_data();
  for (std::size_t r = C; r < 2 * C; ++r)
    for (std::size_t c = 0; c < C; ++c) W[r * C + c] = 0.0;
  const auto nb = local_attention_mask(f.in, f.cfg.radii[0], f.cfg.local_cap, false);
  const LayerOutput hybrid = hybrid_layer(f.in.feats, pe, me, &nb, 0, f.cfg, f.p);
  EncoderConfig vanilla = f.cfg;
  vanilla.use_local = false;
  const LayerOutput plain = hybrid_layer(f.in.feats, pe, me, nullptr, 0, vanilla, f.p);
  expect_tensor_near(hybrid.tokens, plain.tokens, 1e-12);
  expect_tensor_near(hybrid.objectness, plain.objectness, 1e-12);
}

TEST(HybridLayer, ZeroMergeReducesToFeedForward) {
  Fixture f(20, 2, 6);
  for (const char* name : {"encoder.l0.merge.W", "encoder.l0.merge.b"})
    for (auto& v : f.p.at(name).mutable_data()) v = 0.0;
  auto [pe, me] = embeddings(f.in, f.mask, f.p);
  const auto nb = local_attention_mask(f.in, f.cfg.radii[0], f.cfg.local_cap, false);
  const LayerOutput lo = hybrid_layer(f.in.feats, pe, me, &nb, 0, f.cfg, f.p);
  const Tensor f1 = nn::apply_layer_norm(f.p, "encoder.l0.ln1", f.in.feats);
  const Tensor f2 = nn::apply_layer_norm(f.p, "encoder.l0.ln2", add(f1, nn::apply_mlp2(f.p, "encoder.l0.ffn", f1)));
  expect_tensor_near(lo.tokens, f2, 1e-12);
}

TEST(Encoder, OutputShapes) {
  Fixture f(21, 3, 5);
  EncoderConfig cfg = f.cfg;
  const EncoderOutput out = encode(f.in, f.mask, cfg, f.p);
  EXPECT_EQ(out.tokens.shape(), (Shape{15, C}));
  ASSERT_EQ(out.objectness.size(), cfg.layers);
  EXPECT_EQ(out.objectness[0].shape(), (Shape{15}));
  EXPECT_EQ(out.distances[0].shape(), (Shape{15, 9}));
}

TEST(Encoder, ConfigValidation) {
  EncoderConfig cfg;
  EXPECT_THROW(cfg.validate(30), std::invalid_argument);  // 30 % 4 != 0
  cfg.radii = {1.0};
  EXPECT_THROW(cfg.validate(32), std::invalid_argument);
}

TEST(PointLoss, PerfectPredictionsGiveZero) {
  Fixture f(22, 2, 4);
  std::vector<Box3D> gt(f.in.frames, Box3D{{0, 0, 0}, {1.5, 1.0, 1.0}, 0.0});
  const PointMask m = build_point_mask(f.in, &gt);
  const auto& tg = *m.targets;
  EncoderOutput out;
  std::vector<double> logits, dist;
  for (std::size_t t = 0; t < tg.objectness.size(); ++t) {
    logits.push_back(tg.objectness[t] > 0.5 ? 60.0 : -60.0);
    dist.insert(dist.end(), tg.distances[t].begin(), tg.distances[t].end());
  }
  out.objectness = {Tensor({logits.size()}, logits)};
  out.distances = {Tensor({tg.distances.size(), 9}, dist)};
  EXPECT_NEAR(point_loss(out, tg).item(), 0.0, 1e-12);
}

TEST(PointLoss, SmoothL1AtHalf) {
  PointTargets tg;
  tg.objectness = {1.0};
  tg.distances = {BoxDistances{}};
  EncoderOutput out;
  out.objectness = {Tensor({1}, {60.0})};
  out.distances = {Tensor::full({1, 9}, 0.5)};
  EXPECT_NEAR(point_loss(out, tg, 0.1, 1.0).item(), 0.125, 1e-12);
}
