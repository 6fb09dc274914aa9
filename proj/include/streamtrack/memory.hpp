#pragma once

// Memory bank of past frames' features and boxes, and the streaming tracker
// that reuses them: only the current frame goes through the backbone.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "streamtrack/model.hpp"

namespace streamtrack {

struct FrameRecord {
  std::int64_t timestamp = 0;
  PointSet coords_world;  // N'×3
  Tensor feats;           // N'×C
  Box3D box_world;
};

/// FIFO of the newest `capacity` frame records, oldest first.
class MemoryBank {
 public:
  explicit MemoryBank(std::size_t capacity = 2) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("MemoryBank: capacity must be >= 1");
  }

  void push(FrameRecord rec) {
    if (!entries_.empty() && rec.timestamp <= entries_.back().timestamp)
      throw std::invalid_argument("MemoryBank: timestamp " + std::to_string(rec.timestamp) +
                                  " is not after newest stored " + std::to_string(entries_.back().timestamp));
    entries_.push_back(std::move(rec));
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const std::deque<FrameRecord>& entries() const { return entries_; }
  const FrameRecord& newest() const {
    if (entries_.empty()) throw std::logic_error("MemoryBank: empty");
    return entries_.back();
  }

 private:
  std::size_t capacity_;
  std::deque<FrameRecord> entries_;
};

/// The current frame before a box is known: coordinates in the canonical frame
/// of the bank's newest box plus their world positions.
struct CurrentFrame {
  std::int64_t timestamp = 0;
  PointSet coords;
  PointSet coords_world;
  Tensor feats;
};

/// Concatenates the current frame (temporal index 0) with history frames
/// i = 1..n (i = 1 newest). Missing history replicates the earliest record.
/// All coordinates are expressed in the canonical frame of the newest stored box.
inline StreamInput assemble(const MemoryBank& bank, const CurrentFrame& cur, std::size_t history) {
  if (bank.empty()) throw std::invalid_argument("assemble: empty memory bank");
  const auto& entries = bank.entries();
  StreamInput in;
  in.frames = history + 1;
  in.points_per_frame = cur.coords.size();
  in.reference = bank.newest().box_world;
  in.boxes_world.resize(in.frames);
  std::vector<Tensor> feats{cur.feats};
  in.coords = cur.coords;
  in.coords_world = cur.coords_world;
  in.temporal_index.assign(in.points_per_frame, 0);
  for (std::size_t i = 1; i <= history; ++i) {
    const FrameRecord& rec = i <= entries.size() ? entries[entries.size() - i] : entries.front();
    if (rec.coords_world.size() != in.points_per_frame)
      throw std::invalid_argument("assemble: record point count differs from current frame");
    const PointSet local = canonicalize(rec.coords_world, in.reference);
    in.coords.insert(in.coords.end(), local.begin(), local.end());
    in.coords_world.insert(in.coords_world.end(), rec.coords_world.begin(), rec.coords_world.end());
    in.temporal_index.insert(in.temporal_index.end(), in.points_per_frame, i);
    in.boxes_world[i] = rec.box_world;
    feats.push_back(rec.feats);
  }
  in.feats = concat(feats, 0);
  return in;
}

// ---------------------------------------------------------------------------

struct TrackerConfig {
  double search_scale = 2.0;   // crop radius = max(w,l,h)·search_scale + search_margin
  double search_margin = 2.0;
  std::uint64_t seed = 0;      // resampling stream; combined with each frame's timestamp

  double search_radius(const Vec3& size) const {
    return std::max({size.x, size.y, size.z}) * search_scale + search_margin;
  }
};

/// Points within `radius` (inclusive) of `center`.
inline PointSet crop_search_region(const PointSet& raw, const Vec3& center, double radius) {
  PointSet out;
  const double r2 = radius * radius;
  for (const auto& p : raw)
    if (squared_distance(p, center) <= r2) out.push_back(p);
  return out;
}

/// Exactly n points: a random subset when enough are available, otherwise all
/// of them topped up by draws with replacement.
inline PointSet resample_points(const PointSet& pts, std::size_t n, std::mt19937_64& rng) {
  if (pts.empty()) throw std::invalid_argument("resample_points: empty input");
  PointSet out;
  out.reserve(n);
  if (pts.size() >= n) {
    std::vector<std::size_t> idx(pts.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> u(i, idx.size() - 1);
      std::swap(idx[i], idx[u(rng)]);
      out.push_back(pts[idx[i]]);
    }
    return out;
  }
  out = pts;
  std::uniform_int_distribution<std::size_t> u(0, pts.size() - 1);
  while (out.size() < n) out.push_back(pts[u(rng)]);
  return out;
}

inline std::uint64_t frame_seed(std::uint64_t seed, std::int64_t timestamp) {
  std::uint64_t x = seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(timestamp + 1));
  x ^= x >> 31;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 29;
  return x;
}

struct PreparedFrame {
  PointSet coords;        // canonical frame of the reference box
  PointSet coords_world;
  Tensor feats;
};

/// Crop around `ref`, resample to the backbone's input size, canonicalize to
/// `ref`, extract. Returns nullopt when the crop is empty.
inline std::optional<PreparedFrame> prepare_frame(const PointSet& raw, const Box3D& ref, const Vec3& object_size,
                                                  std::mt19937_64& rng, const Model& model,
                                                  const TrackerConfig& cfg) {
  const PointSet crop = crop_search_region(raw, ref.center, cfg.search_radius(object_size));
  if (crop.empty()) return std::nullopt;
  const PointSet sampled = resample_points(crop, model.config.backbone.input_points, rng);
  FrameFeatures ff = extract(canonicalize(sampled, ref), model.config.backbone, model.params);
  PreparedFrame pf;
  pf.coords_world = decanonicalize(ff.coords, ref);
  pf.coords = std::move(ff.coords);
  pf.feats = std::move(ff.feats);
  return pf;
}

/// Resampling seeded from (cfg.seed, timestamp) so any frame can be re-prepared identically.
inline std::optional<PreparedFrame> prepare_frame(const PointSet& raw, const Box3D& ref, const Vec3& object_size,
                                                  std::int64_t timestamp, const Model& model,
                                                  const TrackerConfig& cfg) {
  std::mt19937_64 rng(frame_seed(cfg.seed, timestamp));
  return prepare_frame(raw, ref, object_size, rng, model, cfg);
}

struct TrackState {
  MemoryBank bank;
  Vec3 size;  // frame-0 GT size, never re-estimated
  std::int64_t last_timestamp = 0;
};

struct StepResult {
  std::int64_t timestamp = 0;
  Box3D box;         // world frame
  double score = 0.0;
  bool carried_forward = false;  // empty search region
};

class Tracker {
 public:
  Tracker(const Model& model, TrackerConfig cfg) : model_(&model), cfg_(cfg) {}

  TrackState init_track(const PointSet& first_frame, const Box3D& gt_box, std::int64_t timestamp = 0) const {
    gt_box.validate();
    NoGradGuard ng;
    auto pf = prepare_frame(first_frame, gt_box, gt_box.size, timestamp, *model_, cfg_);
    if (!pf) throw std::invalid_argument("init_track: no points near the initial box");
    TrackState st{MemoryBank(model_->config.history), gt_box.size, timestamp};
    st.bank.push({timestamp, std::move(pf->coords_world), pf->feats.detach(), gt_box});
    return st;
  }

  StepResult track_step(TrackState& st, const PointSet& raw, std::int64_t timestamp) const {
    NoGradGuard ng;
    const Box3D ref = st.bank.newest().box_world;
    auto pf = prepare_frame(raw, ref, st.size, timestamp, *model_, cfg_);
    st.last_timestamp = timestamp;
    if (!pf) {
      std::clog << "track_step: empty search region at t=" << timestamp << ", carrying previous box forward\n";
      return {timestamp, ref, 0.0, true};
    }
    const StreamInput in = assemble(st.bank, {timestamp, pf->coords, pf->coords_world, pf->feats}, model_->config.history);
    const PointMask mask = build_point_mask(in);
    const ModelOutput out = forward(*model_, in, mask);
    const Prediction pred = select_prediction(out, st.size);
    const Box3D box = decanonicalize(pred.box, ref);
    st.bank.push({timestamp, std::move(pf->coords_world), pf->feats.detach(), box});
    return {timestamp, box, pred.score, false};
  }

  const TrackerConfig& config() const { return cfg_; }

 private:
  const Model* model_;
  TrackerConfig cfg_;
};

/// Tracker without a memory bank: every step re-extracts all frames in the
/// window from raw points. Serves as the equivalence oracle for Tracker.
class RecomputeTracker {
 public:
  RecomputeTracker(const Model& model, TrackerConfig cfg) : model_(&model), cfg_(cfg) {}

  void init(const PointSet& first_frame, const Box3D& gt_box, std::int64_t timestamp = 0) {
    frames_.clear();
    size_ = gt_box.size;
    frames_.push_back({first_frame, timestamp, gt_box, gt_box});
  }

  StepResult step(const PointSet& raw, std::int64_t timestamp) {
    NoGradGuard ng;
    const std::size_t n = model_->config.history;
    const Box3D ref = frames_.back().box;
    auto cur = prepare_frame(raw, ref, size_, timestamp, *model_, cfg_);
    if (!cur) return {timestamp, ref, 0.0, true};
    const std::size_t P = cur->coords.size();
    StreamInput in;
    in.frames = n + 1;
    in.points_per_frame = P;
    in.reference = ref;
    in.boxes_world.resize(n + 1);
    in.coords = cur->coords;
    in.coords_world = cur->coords_world;
    in.temporal_index.assign(P, 0);
    std::vector<Tensor> feats{cur->feats};
    for (std::size_t i = 1; i <= n; ++i) {
      const Stored& s = i <= frames_.size() ? frames_[frames_.size() - i] : frames_.front();
      auto pf = prepare_frame(s.raw, s.reference, size_, s.timestamp, *model_, cfg_);
      for (const auto& w : pf->coords_world) {
        in.coords.push_back(canonicalize(w, ref));
        in.coords_world.push_back(w);
      }
      in.temporal_index.insert(in.temporal_index.end(), P, i);
      in.boxes_world[i] = s.box;
      feats.push_back(pf->feats);
    }
    in.feats = concat(feats, 0);
    const ModelOutput out = forward(*model_, in, build_point_mask(in));
    const Prediction pred = select_prediction(out, size_);
    const Box3D box = decanonicalize(pred.box, ref);
    frames_.push_back({raw, timestamp, ref, box});
    return {timestamp, box, pred.score, false};
  }

 private:
  struct Stored {
    PointSet raw;
    std::int64_t timestamp;
    Box3D reference;  // box the frame was canonicalized against
    Box3D box;        // its box (GT for frame 0, prediction afterwards)
  };
  const Model* model_;
  TrackerConfig cfg_;
  Vec3 size_;
  std::vector<Stored> frames_;
};

// ---------------------------------------------------------------------------
// Trajectory files: one JSON object per line,
//   {"track": id, "t": timestamp, "center": [x,y,z], "size": [w,l,h], "heading": h, "score": s}

struct TrajectoryRecord {
  std::int64_t track = 0;
  std::int64_t timestamp = 0;
  Box3D box;
  double score = 0.0;
};

inline nlohmann::json to_json(const TrajectoryRecord& r) {
  const auto& b = r.box;
  return {{"track", r.track},
          {"t", r.timestamp},
          {"center", {b.center.x, b.center.y, b.center.z}},
          {"size", {b.size.x, b.size.y, b.size.z}},
          {"heading", b.heading},
          {"score", r.score}};
}

inline void write_trajectory(std::ostream& os, const std::vector<TrajectoryRecord>& recs) {
  for (const auto& r : recs) os << to_json(r).dump() << '\n';
}

inline std::vector<TrajectoryRecord> read_trajectory(std::istream& is) {
  std::vector<TrajectoryRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrajectoryRecord r;
      r.track = j.at("track").get<std::int64_t>();
      r.timestamp = j.at("t").get<std::int64_t>();
      const auto c = j.at("center").get<std::vector<double>>();
      const auto s = j.at("size").get<std::vector<double>>();
      if (c.size() != 3 || s.size() != 3) throw std::runtime_error("center/size must have 3 values");
      r.box = {{c[0], c[1], c[2]}, {s[0], s[1], s[2]}, j.at("heading").get<double>()};
      r.score = j.value("score", 0.0);
      out.push_back(r);
    } catch (const std::exception& e) {
      throw std::runtime_error("trajectory line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace streamtrack
