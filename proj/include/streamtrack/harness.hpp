#pragma once

// Training (total loss, sample construction, optimizer loop) and One Pass
// Evaluation of the streaming tracker.

#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "streamtrack/data.hpp"
#include "streamtrack/memory.hpp"
#include "streamtrack/metrics.hpp"

namespace streamtrack {

struct LossWeights {
  double point = 1.0;
  double box = 2.0;
  double aux = 0.05;
  double point_s = 0.1;  // objectiveness BCE inside the point loss
  double point_d = 1.0;  // box-distance smooth-L1 inside the point loss
  BoxLossWeights box_terms;
  MatchWeights match;
  double tau = 1.0;

  void validate() const {
    for (double v : {point, box, aux, point_s, point_d, box_terms.cls, box_terms.reg, box_terms.offset,
                     box_terms.theta, box_terms.giou, match.cls, match.giou})
      if (!(v >= 0.0)) throw std::invalid_argument("LossWeights: weights must be nonnegative");
    if (!(tau > 0.0)) throw std::invalid_argument("LossWeights: tau must be positive");
  }
};

inline Tensor total_loss(const Tensor& point, const Tensor& box, const Tensor& aux, const LossWeights& w) {
  return add(add(scale(point, w.point), scale(box, w.box)), scale(aux, w.aux));
}

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  std::size_t steps_per_epoch = 0;  // 0: one window per tracklet per epoch
  double lr = 3e-4;
  int lr_decay_every = 25;          // epochs
  double lr_decay_factor = 0.1;
  double momentum = 0.99;
  bool point_supervision = true;
  bool contrastive = true;          // GT query + InfoNCE
  bool sequence_enhance = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs == 0 || batch_size == 0) throw std::invalid_argument("TrainConfig: epochs and batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("TrainConfig: momentum outside [0,1]");
  }
};

// ---------------------------------------------------------------------------

/// One training example: n+1 frames assembled exactly as at inference, plus
/// supervision targets.
struct TrainingSample {
  StreamInput input;
  PointMask mask;  // carries point targets
  Box3D gt;        // current-frame GT in the canonical frame
};

/// Builds a sample from a window of n+1 consecutive frames (the last is the
/// current frame). Frame j is cropped and canonicalized against the augmented
/// GT box of frame j−1 (frame 0 against its own), mirroring inference where
/// the previous prediction defines the search region. The backbone runs on
/// every frame with gradients. Returns nullopt when a search region is empty.
inline std::optional<TrainingSample> build_sample(const Tracklet& window, const Model& model,
                                                  const TrackerConfig& tcfg, const AugmentConfig& acfg,
                                                  const std::vector<Tracklet>* pool, std::mt19937_64& rng) {
  const std::size_t n = model.config.history;
  if (window.frames.size() != n + 1)
    throw std::invalid_argument("build_sample: window needs " + std::to_string(n + 1) + " frames, got " +
                                std::to_string(window.frames.size()));
  AugmentedWindow aw = augment(window, acfg, rng);
  if (pool && !pool->empty()) sequence_enhance(aw.window, *pool, acfg, rng);
  const auto& frames = aw.window.frames;
  const auto& perturbed = aw.reference_boxes;

  MemoryBank bank(n);
  std::optional<PreparedFrame> current;
  for (std::size_t j = 0; j <= n; ++j) {
    const Box3D& ref = perturbed[j == 0 ? 0 : j - 1];
    auto pf = prepare_frame(frames[j].points, ref, window.size, rng, model, tcfg);
    if (!pf) return std::nullopt;
    if (j < n)
      bank.push({frames[j].timestamp, std::move(pf->coords_world), pf->feats, perturbed[j]});
    else
      current = std::move(pf);
  }
  TrainingSample s;
  s.input = assemble(bank, {frames[n].timestamp, current->coords, current->coords_world, current->feats}, n);
  std::vector<Box3D> gt_world(n + 1);
  for (std::size_t i = 0; i <= n; ++i) gt_world[i] = frames[n - i].box;
  s.mask = build_point_mask(s.input, &gt_world);
  s.gt = canonicalize(frames[n].box, s.input.reference);
  return s;
}

struct LossBreakdown {
  double point = 0.0;
  double box = 0.0;
  double aux = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o) {
    point += o.point;
    box += o.box;
    aux += o.aux;
    total += o.total;
    return *this;
  }
};

/// Total loss from a finished forward pass. With `contrastive`, every layer must carry a GT embedding.
inline Tensor output_loss(const ModelOutput& out, const TrainingSample& s, const LossWeights& w,
                          bool point_supervision, bool contrastive, LossBreakdown* parts = nullptr) {
  std::vector<MatchResult> matches;
  for (const auto& layer : out.layers) matches.push_back(match(layer, out.query_coords, s.gt.size, s.gt, w.match));
  const Tensor box = box_loss(out.layers, matches, out.query_coords, s.gt, w.box_terms);
  const Tensor point =
      point_supervision ? point_loss(out.encoder, *s.mask.targets, w.point_s, w.point_d) : Tensor::scalar(0.0);
  const Tensor aux = contrastive ? infonce_loss(out.layers, matches, w.tau) : Tensor::scalar(0.0);
  const Tensor total = total_loss(point, box, aux, w);
  if (parts) *parts = {point.item(), box.item(), aux.item(), total.item()};
  return total;
}

inline Tensor sample_loss(const Model& model, const TrainingSample& s, const LossWeights& w, bool point_supervision,
                          bool contrastive, LossBreakdown* parts = nullptr) {
  const ModelOutput out =
      forward(model, s.input, s.mask, contrastive ? std::optional<Vec3>(s.gt.center) : std::nullopt);
  return output_loss(out, s, w, point_supervision, contrastive, parts);
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  std::size_t steps = 0;
  LossBreakdown mean;  // per-sample mean over the epoch
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr},          {"steps", e.steps},         {"total", e.mean.total},
          {"point", e.mean.point}, {"box", e.mean.box}, {"aux", e.mean.aux}};
}

/// Random window of n+1 consecutive frames.
inline Tracklet sample_window(const std::vector<Tracklet>& data, std::size_t n, std::mt19937_64& rng) {
  for (int tries = 0; tries < 100; ++tries) {
    const Tracklet& tr = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
    if (tr.frames.size() < n + 1) continue;
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, tr.frames.size() - n - 1)(rng);
    return slice_window(tr, start, n + 1);
  }
  throw std::invalid_argument("sample_window: no tracklet has " + std::to_string(n + 1) + " frames");
}

/// One optimizer step on the given samples: mean loss, backward, Adam, EMA.
inline LossBreakdown train_step(Model& model, const std::vector<TrainingSample>& batch, const TrainConfig& cfg,
                                const LossWeights& w, AdamState& adam, double lr) {
  model.params.zero_grad();
  LossBreakdown sum;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    LossBreakdown parts;
    const Tensor loss = sample_loss(model, batch[b], w, cfg.point_supervision, cfg.contrastive, &parts);
    if (!std::isfinite(parts.total)) {
      std::ostringstream os;
      os << "non-finite loss at optimizer step " << adam.step + 1 << " (sample " << b << "): point=" << parts.point
         << " box=" << parts.box << " aux=" << parts.aux;
      throw TrainingDiverged(os.str());
    }
    backward(scale(loss, inv));
    sum += parts;
  }
  adam_step(model.params, adam, lr, 0.9, 0.999, 1e-8);
  momentum_update(model.params, model.params, decoder::momentum_pairs(model.params), cfg.momentum);
  return sum;
}

/// Full training loop. Deterministic given cfg.seed. Writes one JSON line per
/// epoch to `log` when given.
inline std::vector<EpochLog> train(Model& model, const std::vector<Tracklet>& data, const TrainConfig& cfg,
                                   const LossWeights& w, const AugmentConfig& acfg, const TrackerConfig& tcfg,
                                   std::ostream* log = nullptr) {
  cfg.validate();
  w.validate();
  acfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  std::mt19937_64 rng(cfg.seed);
  AdamState adam;
  const std::size_t n = model.config.history;
  const std::size_t steps = cfg.steps_per_epoch
                                ? cfg.steps_per_epoch
                                : std::max<std::size_t>(1, (data.size() + cfg.batch_size - 1) / cfg.batch_size);
  const std::vector<Tracklet>* pool = cfg.sequence_enhance ? &data : nullptr;
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = step_decay_lr(cfg.lr, static_cast<int>(epoch), cfg.lr_decay_every, cfg.lr_decay_factor);
    EpochLog e{epoch, lr, steps, {}};
    for (std::size_t s = 0; s < steps; ++s) {
      std::vector<TrainingSample> batch;
      for (int guard = 0; batch.size() < cfg.batch_size; ++guard) {
        if (guard > 1000) throw std::runtime_error("train: could not build samples (empty search regions)");
        auto sample = build_sample(sample_window(data, n, rng), model, tcfg, acfg, pool, rng);
        if (sample) batch.push_back(std::move(*sample));
      }
      e.mean += train_step(model, batch, cfg, w, adam, lr);
    }
    const double denom = static_cast<double>(steps * cfg.batch_size);
    e.mean = {e.mean.point / denom, e.mean.box / denom, e.mean.aux / denom, e.mean.total / denom};
    if (log) *log << to_json(e).dump() << '\n' << std::flush;
    logs.push_back(e);
  }
  return logs;
}

// ---------------------------------------------------------------------------

/// Streams a tracklet through the tracker, initialized from the frame-0 GT box.
/// Returns one result per frame after the first.
inline std::vector<StepResult> run_tracker(const Tracker& tracker, const Tracklet& tr) {
  if (tr.frames.size() < 2) throw std::invalid_argument("run_tracker: tracklet needs >= 2 frames");
  TrackState st = tracker.init_track(tr.frames[0].points, tr.frames[0].box, tr.frames[0].timestamp);
  std::vector<StepResult> out;
  for (std::size_t j = 1; j < tr.frames.size(); ++j)
    out.push_back(tracker.track_step(st, tr.frames[j].points, tr.frames[j].timestamp));
  return out;
}

/// One Pass Evaluation over frames 1..T−1 of every tracklet (frame 0 is the given initialization).
inline EvalReport ope_evaluate(const Model& model, const TrackerConfig& tcfg, const std::vector<Tracklet>& data) {
  const Tracker tracker(model, tcfg);
  std::vector<SequenceReport> seqs;
  for (std::size_t k = 0; k < data.size(); ++k) {
    const auto res = run_tracker(tracker, data[k]);
    std::vector<Box3D> pred, gt;
    std::vector<std::int64_t> ts;
    for (std::size_t j = 0; j < res.size(); ++j) {
      pred.push_back(res[j].box);
      gt.push_back(data[k].frames[j + 1].box);
      ts.push_back(res[j].timestamp);
    }
    seqs.push_back(evaluate_sequence(pred, gt, ts, "track" + std::to_string(k)));
  }
  return aggregate(std::move(seqs));
}

}  // namespace streamtrack
