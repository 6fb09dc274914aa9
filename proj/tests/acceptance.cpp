// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance [--only 1,2,...] [--seeds 3]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "streamtrack/gradcheck.hpp"
#include "test_util.hpp"

using namespace streamtrack;
using st_test::Gen;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  gradcheck::Options o;
  o.instances = 100;
  std::size_t cases = 0;
  std::vector<std::string> failed;
  double worst = 0.0;
  for (const auto& r : gradcheck::run(o)) {
    ++cases;
    worst = std::max(worst, r.stats.max_rel);
    if (!r.passed || r.instances < 100) failed.push_back(r.name);
  }
  const double secs = seconds_since(t0);
  Outcome out{failed.empty() && secs < 300.0,
              fmt("%zu cases x 100 instances, worst rel err %.2e, %.1f s", cases, worst, secs)};
  for (const auto& f : failed) out.detail += "; failed " + f;
  return out;
}

Outcome giou_oracle() {
  Gen g(2024);
  std::mt19937_64 mc(99);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto [a, b] = st_test::overlapping_pair(g);
    worst = std::max(worst, std::abs(iou_3d(a, b) - st_test::monte_carlo_iou(a, b, 1000000, mc)));
  }
  bool self_exact = true;
  for (int i = 0; i < 200; ++i) {
    const Box3D a = g.box(5.0);
    self_exact = self_exact && giou_3d(a, a).giou == 1.0;
  }
  const Box3D u{{0, 0, 0}, {1, 1, 1}, 0.0}, v{{2, 0, 0}, {1, 1, 1}, 0.0};
  const double disjoint = giou_3d(u, v).giou;
  return {worst <= 0.01 && self_exact && std::abs(disjoint + 1.0 / 3.0) <= 1e-9,
          fmt("max |IoU - MC| %.4f over 200 pairs; self GIoU exact: %s; disjoint %.12f", worst,
              self_exact ? "yes" : "no", disjoint)};
}

Outcome streaming_equivalence() {
  ExperimentConfig cfg = desk_profile();
  const Model model(cfg.model, 5);

  double inv = 0.0;
  Gen g(6);
  for (int trial = 0; trial < 10; ++trial) {
    const PointSet pts = g.points(cfg.model.backbone.input_points, 3.0);
    const Vec3 t = g.vec(50.0);
    PointSet moved;
    for (const auto& q : pts) moved.push_back(q + t);
    inv = std::max(inv, max_abs_diff(extract(pts, cfg.model.backbone, model.params).feats,
                                     extract(moved, cfg.model.backbone, model.params).feats));
  }

  SynthConfig synth = cfg.synth;
  synth.frames = 10;
  const auto seqs = generate_split(synth, {"stream", 20, 31, desk_test_scene()});
  const Tracker tracker(model, cfg.tracker);
  double worst = 0.0;
  std::size_t steps = 0;
  for (const auto& tr : seqs) {
    TrackState st = tracker.init_track(tr.frames[0].points, tr.frames[0].box, tr.frames[0].timestamp);
    RecomputeTracker ref(model, cfg.tracker);
    ref.init(tr.frames[0].points, tr.frames[0].box, tr.frames[0].timestamp);
    for (std::size_t j = 1; j < tr.frames.size(); ++j) {
      const Box3D a = tracker.track_step(st, tr.frames[j].points, tr.frames[j].timestamp).box;
      const Box3D b = ref.step(tr.frames[j].points, tr.frames[j].timestamp).box;
      for (double d : {a.center.x - b.center.x, a.center.y - b.center.y, a.center.z - b.center.z,
                       wrap_angle(a.heading - b.heading)})
        worst = std::max(worst, std::abs(d));
      ++steps;
    }
  }
  return {worst <= 1e-9 && inv <= 1e-12,
          fmt("%zu steps, max box coord diff %.3e; backbone translation diff %.3e", steps, worst, inv)};
}

LayerPrediction hand_prediction(const std::vector<double>& logits, const std::vector<std::array<double, 4>>& boxes) {
  LayerPrediction pred;
  pred.logits = Tensor({logits.size()}, logits);
  std::vector<double> b;
  for (const auto& r : boxes) b.insert(b.end(), r.begin(), r.end());
  pred.boxes = Tensor({boxes.size(), 4}, b);
  pred.projections = Tensor::zeros({boxes.size(), 2});
  return pred;
}

Outcome matching_oracle() {
  Gen g(4);
  std::size_t agree = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + g.index(32);
    const PointSet coords = g.points(n, 2.0);
    std::vector<double> logits;
    std::vector<std::array<double, 4>> boxes;
    for (std::size_t k = 0; k < n; ++k) {
      logits.push_back(g.normal(2.0));
      boxes.push_back({g.normal(0.5), g.normal(0.5), g.normal(0.2), g.uniform(-3.0, 3.0)});
    }
    const Box3D gt{g.vec(1.0), {g.uniform(1, 4), g.uniform(1, 2), g.uniform(1, 2)}, g.heading()};
    std::size_t best = 0;
    double best_cost = INFINITY;
    for (std::size_t k = 0; k < n; ++k) {
      const Box3D b{coords[k] + Vec3{boxes[k][0], boxes[k][1], boxes[k][2]}, gt.size, wrap_angle(boxes[k][3])};
      const double cost = -0.1 / (1.0 + std::exp(-logits[k])) - 0.25 * giou_3d(b, gt).giou;
      if (cost < best_cost) best_cost = cost, best = k;
    }
    agree += match(hand_prediction(logits, boxes), coords, gt.size, gt).positive == best;
  }
  return {agree == 1000, fmt("%zu / 1000 instances agree", agree)};
}

Outcome hybrid_limit() {
  constexpr std::size_t C = 16, frames = 3, P = 8;
  double far = 0.0, near = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    ParamStore p;
    EncoderConfig cfg;
    cfg.layers = 1;
    cfg.radii = {1.0};
    cfg.heads = 2;
    encoder::init_params(p, cfg, C, frames, rng);
    gradcheck::detail::randomize(p, rng, 0.3);
    const StreamInput in = gradcheck::detail::random_stream(frames, P, C, rng);
    const PointMask mask = build_point_mask(in);
    const auto [pe, me] = embeddings(in, mask, p);
    const std::string name = "encoder.l0.local";

    const auto wide = local_attention_mask(in, INFINITY, in.tokens(), false);
    std::vector<Tensor> blocks;
    for (std::size_t fr = 0; fr < frames; ++fr) {
      auto rows = [&](const Tensor& t) { return slice(t, 0, fr * P, P); };
      blocks.push_back(global_attention(rows(in.feats), rows(pe), rows(me), p, name, cfg.heads).out);
    }
    far = std::max(far, max_abs_diff(local_attention(in.feats, pe, me, wide, p, name, cfg.heads).out,
                                     concat(blocks, 0)));

    double dmin = INFINITY;
    for (std::size_t a = 0; a < in.tokens(); ++a)
      for (std::size_t b = a + 1; b < in.tokens(); ++b) dmin = std::min(dmin, distance(in.coords[a], in.coords[b]));
    const auto tight = local_attention_mask(in, 0.5 * dmin, in.tokens(), false);
    const Tensor self = nn::apply_linear(p, name + ".out", nn::apply_linear(p, name + ".v", add(in.feats, me)));
    near = std::max(near, max_abs_diff(local_attention(in.feats, pe, me, tight, p, name, cfg.heads).out, self));
  }
  return {far <= 1e-6 && near <= 1e-12,
          fmt("infinite radius vs frame-block global %.3e; tiny radius vs value projection %.3e", far, near)};
}

Outcome loss_fixtures() {
  std::vector<std::string> bad;
  const std::size_t n = desk_profile().model.backbone.out_points();
  LayerPrediction pred;
  pred.logits = Tensor::zeros({n});
  pred.boxes = Tensor::zeros({n, 4});
  pred.projections = Tensor::full({n, 4}, 0.7);
  pred.gt_embedding = std::vector<double>{0.5, -1.0, 2.0, 0.25};
  const double nce = infonce_loss({pred}, {{3, std::vector<double>(n, 0.0)}}).item();
  if (std::abs(nce - std::log(static_cast<double>(n))) > 1e-9) bad.push_back(fmt("InfoNCE %.12f", nce));

  ParamStore live, mom;
  live.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
  mom.add("m.w", Tensor({3}, {0.0, 4.0, 0.5}), false);
  momentum_update(live, mom, {{"w", "m.w"}}, 0.75);
  if (mom.at("m.w").values() != std::vector<double>{0.25, 2.5, 0.5}) bad.push_back("EMA m=0.75");
  ParamStore live2, mom2;
  live2.add("w", Tensor({1}, {1.0}));
  mom2.add("m.w", Tensor({1}, {0.0}), false);
  momentum_update(live2, mom2, {{"w", "m.w"}}, 0.99);
  if (std::abs(mom2.at("m.w").at(0) - 0.01) > 1e-15) bad.push_back("EMA m=0.99");

  const double sl1 = smooth_l1(Tensor({1}, {0.5})).item();
  if (std::abs(sl1 - 0.125) > 1e-15) bad.push_back(fmt("smooth-L1 %.15f", sl1));
  const double focal = focal_loss(Tensor({1}, {0.0}), {1.0}, 0.25, 2.0).item();
  if (std::abs(focal - 0.25 * 0.25 * std::log(2.0)) > 1e-15 || std::abs(focal - 0.0433) > 1e-4)
    bad.push_back(fmt("focal %.6f", focal));

  const LossWeights w;
  const auto one = Tensor::scalar(1.0), zero = Tensor::scalar(0.0);
  const double tot = total_loss(one, one, one, w).item();
  if (std::abs(tot - 3.05) > 1e-12) bad.push_back(fmt("total %.12f", tot));
  if (total_loss(zero, zero, zero, w).item() != 0.0) bad.push_back("total of zeros");

  Outcome out{bad.empty(), fmt("InfoNCE %.9f (ln %zu = %.9f), focal %.4f, smooth-L1 %.3f, total %.2f", nce, n,
                               std::log(static_cast<double>(n)), focal, sl1, tot)};
  for (const auto& b : bad) out.detail += "; bad " + b;
  return out;
}

Outcome metric_fixtures() {
  Gen g(7);
  std::vector<Box3D> gt;
  for (int i = 0; i < 20; ++i) gt.push_back(g.box(10.0));
  const auto perfect = evaluate_sequence(gt, gt);
  const Box3D a{{0, 0, 0}, {2, 1, 1}, 0.0}, half{{2.0 / 3.0, 0, 0}, {2, 1, 1}, 0.0};
  const auto two = evaluate_sequence({a, half}, {a, a});
  double rigid = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Box3D> p0, g0, p1, g1;
    const RigidTransform t = g.transform(20.0);
    for (int i = 0; i < 10; ++i) {
      const auto [x, y] = st_test::overlapping_pair(g);
      g0.push_back(x);
      p0.push_back(y);
      g1.push_back(t.apply(x));
      p1.push_back(t.apply(y));
    }
    const auto r0 = evaluate_sequence(p0, g0), r1 = evaluate_sequence(p1, g1);
    rigid = std::max({rigid, std::abs(r0.success - r1.success), std::abs(r0.precision - r1.precision)});
  }
  const bool ok = std::abs(perfect.success - 100.0) <= 1e-9 && std::abs(perfect.precision - 100.0) <= 1e-9 &&
                  std::abs(two.success - 75.0) <= 1e-9 && rigid <= 1e-9;
  return {ok, fmt("perfect %.6f/%.6f, two-frame Success %.6f, rigid diff %.2e", perfect.success, perfect.precision,
                  two.success, rigid)};
}

// ---------------------------------------------------------------------------
// Desk-scale ablations.

struct DeskData {
  std::vector<Tracklet> train, test, crowded;
};

// Test tracklets with four distractors instead of two.
SplitSpec crowded_split() {
  SplitSpec s = desk_profile().synth.split("test");
  s.name = "crowded";
  s.scene.distractors = 4;
  return s;
}

const DeskData& desk_data() {
  static const DeskData d = [] {
    const auto cfg = desk_profile();
    return DeskData{generate_split(cfg.synth, cfg.synth.split("train")),
                    generate_split(cfg.synth, cfg.synth.split("test")), generate_split(cfg.synth, crowded_split())};
  }();
  return d;
}

double desk_success(ExperimentConfig cfg, std::uint64_t seed, const std::vector<Tracklet>& test) {
  cfg.seed = seed;
  cfg.train.seed = seed;
  Model model(cfg.model, seed);
  train(model, desk_data().train, cfg.train, cfg.loss, cfg.augment, cfg.tracker);
  return ope_evaluate(model, cfg.tracker, test).success;
}

Outcome ablation(const char* label_a, const ExperimentConfig& a, const char* label_b, const ExperimentConfig& b,
                 std::size_t seeds, const std::vector<Tracklet>& test) {
  const auto t0 = std::chrono::steady_clock::now();
  double sa = 0.0, sb = 0.0;
  std::string per;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    const double va = desk_success(a, s, test), vb = desk_success(b, s, test);
    sa += va;
    sb += vb;
    per += fmt(" [seed %llu: %.2f vs %.2f]", static_cast<unsigned long long>(s), va, vb);
    std::cerr << "  seed " << s << ": " << label_a << " " << va << ", " << label_b << " " << vb << std::endl;
  }
  sa /= static_cast<double>(seeds);
  sb /= static_cast<double>(seeds);
  const double secs = seconds_since(t0);
  return {sa - sb >= 2.0 && secs < 1800.0,
          fmt("mean Success %s %.2f vs %s %.2f (gap %+.2f), %.0f s;", label_a, sa, label_b, sb, sa - sb, secs) + per};
}

Outcome frame_count(std::size_t seeds) {
  ExperimentConfig two = desk_profile(), one = desk_profile();
  one.model.history = 1;
  return ablation("n=2", two, "n=1", one, seeds, desk_data().test);
}

Outcome components(std::size_t seeds) {
  ExperimentConfig on = desk_profile(), off = desk_profile();
  off.train.sequence_enhance = false;
  off.train.contrastive = false;
  return ablation("enhance+contrastive", on, "neither", off, seeds, desk_data().crowded);
}

Outcome overfit() {
  const ExperimentConfig cfg = desk_profile();
  Model model(cfg.model, 1);
  std::mt19937_64 rng(2);
  std::optional<TrainingSample> s;
  for (std::size_t k = 0; !s; ++k)
    s = build_sample(slice_window(desk_data().train[k], 0, cfg.model.history + 1), model, cfg.tracker, cfg.augment,
                     nullptr, rng);
  AdamState adam;
  const double first = train_step(model, {*s}, cfg.train, cfg.loss, adam, cfg.train.lr).total;
  double last = first;
  for (int step = 1; step < 200; ++step) last = train_step(model, {*s}, cfg.train, cfg.loss, adam, cfg.train.lr).total;
  const double drop = 1.0 - last / first;
  return {drop >= 0.9, fmt("total loss %.4f -> %.4f after 200 steps (drop %.1f%%)", first, last, 100.0 * drop)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::size_t seeds = 3;
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',')->check(CLI::Range(1, 10));
  app.add_option("--seeds", seeds, "seeds for the desk ablations")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  const std::set<int> want(only.begin(), only.end());

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"GIoU oracle", giou_oracle},
      {"streaming equivalence", streaming_equivalence},
      {"matching oracle", matching_oracle},
      {"hybrid-attention limit", hybrid_limit},
      {"closed-form loss fixtures", loss_fixtures},
      {"metric fixtures", metric_fixtures},
      {"frame-count effect", [seeds] { return frame_count(seeds); }},
      {"component effect", [seeds] { return components(seeds); }},
      {"single-window overfit", overfit},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!want.empty() && !want.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %2d %s  %-26s %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
