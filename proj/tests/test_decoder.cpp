#include <gtest/gtest.h>

#include <cmath>

#include "streamtrack/gradcheck.hpp"
#include "streamtrack/harness.hpp"
#include "test_util.hpp"

using namespace streamtrack;
using st_test::Gen;

namespace {

constexpr std::size_t C = 8;

double logit(double p) { return std::log(p / (1.0 - p)); }

// Hand-built prediction for `n` queries.
LayerPrediction make_prediction(const std::vector<double>& logits, const std::vector<std::array<double, 4>>& boxes) {
  LayerPrediction pred;
  pred.logits = Tensor({logits.size()}, logits);
  std::vector<double> b;
  for (const auto& r : boxes) b.insert(b.end(), r.begin(), r.end());
  pred.boxes = Tensor({boxes.size(), 4}, b);
  pred.projections = Tensor::zeros({boxes.size(), 2});
  return pred;
}

struct DecoderFixture {
  ParamStore p;
  DecoderConfig cfg;
  Tensor tokens, position;
  PointSet coords;

  explicit DecoderFixture(std::uint64_t seed, std::size_t nq = 6, std::size_t tokens_n = 12) {
    std::mt19937_64 rng(seed);
    cfg.layers = 2;
    cfg.heads = 2;
    decoder::init_params(p, cfg, C, rng);
    gradcheck::detail::randomize(p, rng, 0.2);
    tokens = gradcheck::detail::randn({tokens_n, C}, rng);
    position = gradcheck::detail::randn({tokens_n, C}, rng);
    coords = gradcheck::detail::random_points(nq, rng, 1.5);
  }
};

}  // namespace

TEST(Queries, IdenticalCoordsGiveIdenticalEmbeddings) {
  DecoderFixture f(1);
  f.coords[2] = f.coords[0];
  const QuerySet q = make_queries(f.coords, std::nullopt, f.p);
  for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(q.embeddings.at(0, c), q.embeddings.at(2, c));
  EXPECT_FALSE(q.gt.has_value());
}

TEST(Queries, GtQueryAtSampledPointEqualsThatQuery) {
  DecoderFixture f(2);
  const QuerySet q = make_queries(f.coords, f.coords[3], f.p);
  ASSERT_TRUE(q.gt.has_value());
  for (std::size_t c = 0; c < C; ++c) EXPECT_EQ(q.gt->at(0, c), q.embeddings.at(3, c));
}

TEST(Decoder, OutputShapes) {
  DecoderFixture f(3);
  const auto preds = decode(make_queries(f.coords, Vec3{}, f.p), f.tokens, f.position, f.cfg, f.p);
  ASSERT_EQ(preds.size(), 2u);
  for (const auto& pr : preds) {
    EXPECT_EQ(pr.logits.shape(), (Shape{6}));
    EXPECT_EQ(pr.boxes.shape(), (Shape{6, 4}));
    EXPECT_EQ(pr.projections.shape(), (Shape{6, C}));
    ASSERT_TRUE(pr.gt_embedding.has_value());
    EXPECT_EQ(pr.gt_embedding->size(), C);
  }
}

TEST(Decoder, GtQueryDoesNotInterfere) {
  DecoderFixture f(4);
  const auto with = decode(make_queries(f.coords, Vec3{0.3, -0.2, 0.1}, f.p), f.tokens, f.position, f.cfg, f.p);
  const auto without = decode(make_queries(f.coords, std::nullopt, f.p), f.tokens, f.position, f.cfg, f.p);
  for (std::size_t l = 0; l < with.size(); ++l) {
    EXPECT_EQ(with[l].logits.values(), without[l].logits.values());
    EXPECT_EQ(with[l].boxes.values(), without[l].boxes.values());
    EXPECT_EQ(with[l].projections.values(), without[l].projections.values());
    EXPECT_FALSE(without[l].gt_embedding.has_value());
  }
}

TEST(Decoder, MomentumCopiesStartEqual) {
  std::mt19937_64 rng(5);
  ParamStore p;
  DecoderConfig cfg;
  decoder::init_params(p, cfg, C, rng);
  const auto pairs = decoder::momentum_pairs(p);
  EXPECT_FALSE(pairs.empty());
  for (const auto& [live, mom] : pairs) {
    EXPECT_EQ(p.at(live).values(), p.at(mom).values());
    EXPECT_FALSE(p.at(mom).requires_grad());
  }
}

TEST(Match, HigherScoreWinsForEqualBoxes) {
  const PointSet coords{{0, 0, 0}, {0, 0, 0}};
  const auto pred = make_prediction({logit(0.9), logit(0.1)}, {{0.1, 0, 0, 0}, {0.1, 0, 0, 0}});
  const Box3D gt{{0, 0, 0}, {2, 1, 1}, 0.0};
  const MatchResult m = match(pred, coords, gt.size, gt);
  EXPECT_EQ(m.positive, 0u);
  EXPECT_EQ(m.targets, (std::vector<double>{1.0, 0.0}));
}

TEST(Match, ExactBoxWinsForEqualScores) {
  const PointSet coords{{0, 0, 0}, {0.5, 0, 0}, {1, 1, 0}};
  const Box3D gt{{1.2, 0.4, 0.0}, {2, 1, 1}, 0.3};
  const auto pred = make_prediction({0.0, 0.0, 0.0}, {{0.5, 0.5, 0, 0}, {0.7, 0.4, 0, 0.3}, {0, 0, 0, 0}});
  EXPECT_EQ(match(pred, coords, gt.size, gt).positive, 1u);
}

TEST(Match, TiesGoToLowestIndex) {
  const PointSet coords{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
  const auto pred = make_prediction({0.0, 0.0, 0.0}, {{1, 0, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}});
  const Box3D gt{{0, 0, 0}, {1, 1, 1}, 0.0};
  EXPECT_EQ(match(pred, coords, gt.size, gt).positive, 1u);
}

TEST(Match, AgreesWithExhaustiveArgmin) {
  Gen g(6);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + g.index(12);
    const PointSet coords = g.points(n, 2.0);
    std::vector<double> logits;
    std::vector<std::array<double, 4>> boxes;
    for (std::size_t k = 0; k < n; ++k) {
      logits.push_back(g.normal(2.0));
      boxes.push_back({g.normal(0.5), g.normal(0.5), g.normal(0.2), g.uniform(-3.0, 3.0)});
    }
    const auto pred = make_prediction(logits, boxes);
    const Box3D gt{g.vec(1.0), {g.uniform(1, 4), g.uniform(1, 2), g.uniform(1, 2)}, g.heading()};
    std::size_t best = 0;
    double best_cost = 1e300;
    for (std::size_t k = 0; k < n; ++k) {
      const Box3D b{coords[k] + Vec3{boxes[k][0], boxes[k][1], boxes[k][2]}, gt.size, wrap_angle(boxes[k][3])};
      const double cost = -0.1 / (1.0 + std::exp(-logits[k])) - 0.25 * giou_3d(b, gt).giou;
      if (cost < best_cost) best_cost = cost, best = k;
    }
    EXPECT_EQ(match(pred, coords, gt.size, gt).positive, best);
  }
}

TEST(Losses, FocalAtHalfProbability) {
  const double v = focal_loss(Tensor({1}, {0.0}), {1.0}, 0.25, 2.0).item();
  EXPECT_NEAR(v, 0.25 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(v, 0.0433, 1e-4);
}

TEST(Losses, FocalNegativeAtHalfProbability) {
  EXPECT_NEAR(focal_loss(Tensor({1}, {0.0}), {0.0}, 0.25, 2.0).item(), 0.75 * 0.25 * std::log(2.0), 1e-15);
}

TEST(Losses, BceWithLogitsFixture) {
  EXPECT_NEAR(bce_with_logits(Tensor({2}, {0.0, 0.0}), {1.0, 0.0}).item(), std::log(2.0), 1e-15);
}

TEST(BoxLoss, PerfectPositiveIsZero) {
  const PointSet coords{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  const Box3D gt{{1.2, 0.1, 0.05}, {2, 1, 1}, 0.4};
  const auto pred = make_prediction({-60.0, 60.0, -60.0}, {{0, 0, 0, 0}, {0.2, 0.1, 0.05, 0.4}, {0, 0, 0, 0}});
  const std::vector<LayerPrediction> preds{pred};
  const auto m = match(pred, coords, gt.size, gt);
  ASSERT_EQ(m.positive, 1u);
  EXPECT_NEAR(box_loss(preds, {m}, coords, gt).item(), 0.0, 1e-12);
}

TEST(BoxLoss, RegressionGradientOnlyOnPositive) {
  Gen g(7);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 5;
    const PointSet coords = g.points(n, 1.0);
    LayerPrediction pred;
    pred.logits = Tensor({n}, g.values(n), true);
    pred.boxes = Tensor({n, 4}, g.values(4 * n, 0.3), true);
    pred.projections = Tensor::zeros({n, 2});
    const Box3D gt{g.vec(0.5), {2, 1, 1}, g.uniform(-0.5, 0.5)};
    const auto m = match(pred, coords, gt.size, gt);
    backward(box_loss({pred}, {m}, coords, gt));
    const auto& gb = pred.boxes.grad();
    double pos = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t c = 0; c < 4; ++c) {
        if (k == m.positive)
          pos += std::abs(gb[k * 4 + c]);
        else
          EXPECT_EQ(gb[k * 4 + c], 0.0);
      }
    EXPECT_GT(pos, 0.0);
  }
}

TEST(InfoNce, UniformLogitsGiveLogN) {
  const std::size_t n = 128;
  LayerPrediction pred;
  pred.logits = Tensor::zeros({n});
  pred.boxes = Tensor::zeros({n, 4});
  pred.projections = Tensor::full({n, 4}, 0.3);
  pred.gt_embedding = std::vector<double>{1.0, -2.0, 0.5, 0.25};
  MatchResult m{17, std::vector<double>(n, 0.0)};
  EXPECT_NEAR(infonce_loss({pred}, {m}).item(), std::log(128.0), 1e-9);
  EXPECT_NEAR(std::log(128.0), 4.852, 1e-3);
  EXPECT_NEAR(infonce_loss({pred, pred}, {m, m}).item(), 2.0 * std::log(128.0), 1e-9);
}

TEST(InfoNce, DominantPositiveGoesToZero) {
  const std::size_t n = 8;
  std::vector<double> proj(n * 2, 0.0);
  proj[3 * 2] = 100.0;
  LayerPrediction pred;
  pred.logits = Tensor::zeros({n});
  pred.boxes = Tensor::zeros({n, 4});
  pred.projections = Tensor({n, 2}, proj);
  pred.gt_embedding = std::vector<double>{1.0, 0.0};
  EXPECT_NEAR(infonce_loss({pred}, {{3, {}}}).item(), 0.0, 1e-12);
}

TEST(InfoNce, RequiresGtEmbedding) {
  LayerPrediction pred;
  pred.projections = Tensor::zeros({2, 2});
  EXPECT_THROW(infonce_loss({pred}, {{0, {}}}), std::invalid_argument);
}

TEST(Momentum, SingleUpdateFixture) {
  ParamStore live, mom;
  live.add("w", Tensor({1}, {1.0}));
  mom.add("m.w", Tensor({1}, {0.0}), false);
  momentum_update(live, mom, {{"w", "m.w"}}, 0.99);
  EXPECT_NEAR(mom.at("m.w").at(0), 0.01, 1e-15);
}

TEST(Momentum, FrozenAtOne) {
  ParamStore live, mom;
  live.add("w", Tensor({2}, {1.0, 2.0}));
  mom.add("m.w", Tensor({2}, {-1.0, 0.5}), false);
  for (int k = 0; k < 10; ++k) momentum_update(live, mom, {{"w", "m.w"}}, 1.0);
  EXPECT_EQ(mom.at("m.w").values(), (std::vector<double>{-1.0, 0.5}));
}

TEST(Momentum, GeometricSeries) {
  ParamStore live, mom;
  live.add("w", Tensor({1}, {1.0}));
  mom.add("m.w", Tensor({1}, {0.0}), false);
  for (int k = 1; k <= 300; ++k) {
    momentum_update(live, mom, {{"w", "m.w"}}, 0.99);
    EXPECT_NEAR(mom.at("m.w").at(0), 1.0 - std::pow(0.99, k), 1e-12) << "k=" << k;
  }
}

TEST(Momentum, ShapeMismatchRejected) {
  ParamStore live, mom;
  live.add("w", Tensor({2}, {1.0, 2.0}));
  mom.add("m.w", Tensor({3}, {0, 0, 0}), false);
  EXPECT_THROW(momentum_update(live, mom, {{"w", "m.w"}}, 0.99), ShapeError);
}

TEST(Momentum, NoGradientAfterBackward) {
  const Model model(st_test::tiny_model_config(1), 8);
  std::mt19937_64 rng(9);
  const Tracklet tr = st_test::small_tracklet(10, 4);
  TrackerConfig tcfg;
  AugmentConfig acfg;
  const auto s = build_sample(slice_window(tr, 0, 2), model, tcfg, acfg, nullptr, rng);
  ASSERT_TRUE(s.has_value());
  backward(sample_loss(model, *s, LossWeights{}, true, true));
  std::size_t checked = 0;
  for (const auto& [name, t] : model.params) {
    if (name.rfind(decoder::kMomentumPrefix, 0) != 0) continue;
    ++checked;
    for (double gv : t.grad()) EXPECT_EQ(gv, 0.0) << name;
  }
  EXPECT_GT(checked, 0u);
  // Live decoder weights did receive gradient.
  double live = 0.0;
  for (double gv : model.params.at("decoder.cls.fc2.W").grad()) live += std::abs(gv);
  EXPECT_GT(live, 0.0);
}
