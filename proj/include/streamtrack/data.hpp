#pragma once

// Synthetic LiDAR-like tracklets, sequence enhancement with attached negative
// tracklets, training augmentations, and the line-delimited tracklet format.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "streamtrack/geom.hpp"

namespace streamtrack {

struct Frame {
  std::int64_t timestamp = 0;
  PointSet points;  // world frame
  Box3D box;        // world-frame ground truth
};

struct Tracklet {
  std::string category;
  Vec3 size;
  std::vector<Frame> frames;
};

/// Kinematics along the heading direction.
struct MotionModel {
  Vec3 start;
  double start_heading = 0.0;
  double speed = 0.0;         // m/frame
  double acceleration = 0.0;  // m/frame²
  double yaw_rate = 0.0;      // rad/frame
  double speed_noise = 0.0;   // std-dev per frame
  double yaw_noise = 0.0;
};

struct ShapeSpec {
  std::string category = "car";
  Vec3 size{3.9, 1.6, 1.5};
  std::size_t surface_points = 150;
  double surface_noise = 0.02;  // Gaussian σ, meters
};

struct SceneSpec {
  Vec3 sensor{0.0, 0.0, 2.0};
  double clutter_density = 0.3;   // points per m² of ground area
  double clutter_height = 2.0;
  double scene_margin = 12.0;     // bounds = trajectory extent ± margin
  std::size_t distractors = 0;
  double distractor_min_offset = 2.5;
  double distractor_max_offset = 6.0;
  double distractor_rel_speed = 0.2;  // max relative speed, m/frame
  double occlusion_prob = 0.0;        // chance per frame that an occlusion starts
  std::size_t occlusion_frames = 3;
  double occlusion_keep = 0.05;       // fraction of surface points kept while occluded
};

// ---------------------------------------------------------------------------

/// Points on the faces of `box` that face the sensor, uniform by area, with
/// isotropic Gaussian noise.
inline PointSet sample_visible_surface(const Box3D& box, std::size_t count, const Vec3& sensor, double noise,
                                       std::mt19937_64& rng) {
  struct Face {
    int axis;
    double sign;
    double area;
  };
  const Vec3 h = box.size * 0.5;
  const double ext[3] = {h.x, h.y, h.z};
  std::vector<Face> faces;
  double total = 0.0;
  const Vec3 s_local = canonicalize(sensor, box);
  const double sl[3] = {s_local.x, s_local.y, s_local.z};
  for (int axis = 0; axis < 3; ++axis)
    for (double sign : {1.0, -1.0}) {
      // Visible when the sensor lies on the outer side of the face plane.
      if (sign * sl[axis] <= ext[axis]) continue;
      const double area = 4.0 * ext[(axis + 1) % 3] * ext[(axis + 2) % 3];
      faces.push_back({axis, sign, area});
      total += area;
    }
  PointSet out;
  if (faces.empty() || count == 0) return out;
  std::uniform_real_distribution<double> u(-1.0, 1.0), pick(0.0, total);
  std::normal_distribution<double> n(0.0, noise);
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    double r = pick(rng);
    std::size_t f = 0;
    while (f + 1 < faces.size() && r > faces[f].area) r -= faces[f++].area;
    double local[3];
    for (int a = 0; a < 3; ++a) local[a] = u(rng) * ext[a];
    local[faces[f].axis] = faces[f].sign * ext[faces[f].axis];
    Vec3 p{local[0], local[1], local[2]};
    if (noise > 0.0) p += Vec3{n(rng), n(rng), n(rng)};
    out.push_back(decanonicalize(p, box));
  }
  return out;
}

/// Integrates the motion model: box j+1 advances by the speed after frame j.
inline std::vector<Box3D> integrate_motion(const MotionModel& m, const Vec3& size, std::size_t frames,
                                           std::mt19937_64& rng) {
  std::normal_distribution<double> sn(0.0, 1.0);
  std::vector<Box3D> out;
  Vec3 c = m.start;
  double heading = m.start_heading, speed = m.speed;
  for (std::size_t j = 0; j < frames; ++j) {
    out.push_back({c, size, wrap_angle(heading)});
    c += Vec3{speed * std::cos(heading), speed * std::sin(heading), 0.0};
    heading += m.yaw_rate + (m.yaw_noise > 0.0 ? m.yaw_noise * sn(rng) : 0.0);
    speed += m.acceleration + (m.speed_noise > 0.0 ? m.speed_noise * sn(rng) : 0.0);
  }
  return out;
}

namespace detail {

inline bool overlaps_any(const Box3D& b, const std::vector<Box3D>& others) {
  for (const auto& o : others)
    if (iou_3d(b, o) > 0.0) return true;
  return false;
}

inline Box3D inflate(Box3D b, double margin) {
  b.size += Vec3{2 * margin, 2 * margin, 2 * margin};
  return b;
}

}  // namespace detail

/// A synthetic tracklet: the target follows `motion`; each frame holds its
/// visible-surface points, any distractors' points, and static background
/// clutter. Deterministic given the seed.
inline Tracklet generate_tracklet(const MotionModel& motion, const ShapeSpec& shape, const SceneSpec& scene,
                                  std::size_t frames, std::uint64_t seed) {
  if (frames < 2) throw std::invalid_argument("generate_tracklet: need at least 2 frames");
  std::mt19937_64 rng(seed);
  Tracklet tr;
  tr.category = shape.category;
  tr.size = shape.size;
  const auto boxes = integrate_motion(motion, shape.size, frames, rng);

  // Distractors: same shape ±20% size, offset from the target with a constant relative velocity.
  std::vector<std::vector<Box3D>> distractor_boxes;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (std::size_t d = 0; d < scene.distractors; ++d) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const Vec3 dsize{shape.size.x * (0.8 + 0.4 * u01(rng)), shape.size.y * (0.8 + 0.4 * u01(rng)),
                       shape.size.z * (0.8 + 0.4 * u01(rng))};
      const double ang = 2.0 * std::numbers::pi * u01(rng);
      const double rad = scene.distractor_min_offset + (scene.distractor_max_offset - scene.distractor_min_offset) * u01(rng);
      const double vang = 2.0 * std::numbers::pi * u01(rng);
      const double vmag = scene.distractor_rel_speed * std::sqrt(u01(rng));
      const Vec3 off{rad * std::cos(ang), rad * std::sin(ang), 0.5 * (dsize.z - shape.size.z)};
      const Vec3 vel{vmag * std::cos(vang), vmag * std::sin(vang), 0.0};
      std::vector<Box3D> track;
      bool ok = true;
      for (std::size_t j = 0; j < frames && ok; ++j) {
        Box3D b{boxes[j].center + off + vel * static_cast<double>(j), dsize, boxes[j].heading};
        std::vector<Box3D> others{detail::inflate(boxes[j], 0.2)};
        for (const auto& prev : distractor_boxes) others.push_back(detail::inflate(prev[j], 0.2));
        ok = !detail::overlaps_any(b, others);
        track.push_back(b);
      }
      if (ok) {
        distractor_boxes.push_back(std::move(track));
        break;
      }
    }
  }

  // Static clutter within the trajectory's bounds.
  double x0 = boxes[0].center.x, x1 = x0, y0 = boxes[0].center.y, y1 = y0;
  for (const auto& b : boxes) {
    x0 = std::min(x0, b.center.x);
    x1 = std::max(x1, b.center.x);
    y0 = std::min(y0, b.center.y);
    y1 = std::max(y1, b.center.y);
  }
  x0 -= scene.scene_margin;
  x1 += scene.scene_margin;
  y0 -= scene.scene_margin;
  y1 += scene.scene_margin;
  const auto n_clutter = static_cast<std::size_t>(scene.clutter_density * (x1 - x0) * (y1 - y0));
  std::uniform_real_distribution<double> ux(x0, x1), uy(y0, y1), uz(0.0, scene.clutter_height);
  PointSet clutter;
  clutter.reserve(n_clutter);
  for (std::size_t i = 0; i < n_clutter; ++i) clutter.push_back({ux(rng), uy(rng), uz(rng)});

  std::size_t occluded_left = 0;
  std::normal_distribution<double> jitter(0.0, shape.surface_noise);
  for (std::size_t j = 0; j < frames; ++j) {
    Frame f;
    f.timestamp = static_cast<std::int64_t>(j);
    f.box = boxes[j];
    if (j > 0 && occluded_left == 0 && u01(rng) < scene.occlusion_prob) occluded_left = scene.occlusion_frames;
    std::size_t count = shape.surface_points;
    if (occluded_left > 0) {
      count = static_cast<std::size_t>(std::round(scene.occlusion_keep * static_cast<double>(count)));
      --occluded_left;
    }
    f.points = sample_visible_surface(boxes[j], count, scene.sensor, shape.surface_noise, rng);
    std::vector<Box3D> objects{detail::inflate(boxes[j], 0.1)};
    for (const auto& db : distractor_boxes) {
      const auto pts = sample_visible_surface(db[j], shape.surface_points, scene.sensor, shape.surface_noise, rng);
      f.points.insert(f.points.end(), pts.begin(), pts.end());
      objects.push_back(detail::inflate(db[j], 0.1));
    }
    for (const auto& c : clutter) {
      const Vec3 p = c + Vec3{jitter(rng), jitter(rng), jitter(rng)};
      bool inside = false;
      for (const auto& o : objects) inside = inside || point_in_box(p, o);
      if (!inside) f.points.push_back(p);
    }
    tr.frames.push_back(std::move(f));
  }
  return tr;
}

// ---------------------------------------------------------------------------
// Training-time augmentation.

struct AugmentConfig {
  // Box augmentation on reference boxes (uniform ± ranges).
  double box_shift_xy = 0.2;
  double box_shift_z = 0.05;
  double box_shift_heading = 0.05;
  // Frame-wise motion augmentation: rigid transform about each frame's box center.
  double frame_shift_xy = 0.2;
  double frame_shift_z = 0.0;
  double frame_rotation = 0.05;
  // Sequence enhancement.
  double enhance_prob = 0.3;  // ρ
  double annulus_min = 1.0;
  double annulus_max = 4.0;
  double rel_speed_max = 0.4;
  int max_tries = 10;

  void validate() const {
    if (enhance_prob < 0.0 || enhance_prob > 1.0) throw std::invalid_argument("AugmentConfig: enhance_prob outside [0,1]");
    if (!(annulus_min < annulus_max)) throw std::invalid_argument("AugmentConfig: annulus_min must be < annulus_max");
  }
};

/// Consecutive frames [start, start+len) of a tracklet.
inline Tracklet slice_window(const Tracklet& tr, std::size_t start, std::size_t len) {
  if (start + len > tr.frames.size()) throw std::out_of_range("slice_window: window exceeds tracklet");
  Tracklet w{tr.category, tr.size, {}};
  w.frames.assign(tr.frames.begin() + static_cast<std::ptrdiff_t>(start),
                  tr.frames.begin() + static_cast<std::ptrdiff_t>(start + len));
  return w;
}

/// With probability ρ, attaches one same-category tracklet from `pool` near the
/// target: placed at an annulus offset and advanced by a constant relative
/// velocity. Placements overlapping the target in any frame are retried up to
/// max_tries times, then skipped. Only points are appended; labels are unchanged.
/// Returns true when a tracklet was attached.
inline bool sequence_enhance(Tracklet& window, const std::vector<Tracklet>& pool, const AugmentConfig& cfg,
                             std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  if (!(u01(rng) < cfg.enhance_prob)) return false;
  std::vector<const Tracklet*> same;
  for (const auto& t : pool)
    if (t.category == window.category && t.frames.size() >= window.frames.size()) same.push_back(&t);
  if (same.empty()) return false;
  const Tracklet& src = *same[std::uniform_int_distribution<std::size_t>(0, same.size() - 1)(rng)];
  const std::size_t len = window.frames.size();
  const std::size_t s0 = std::uniform_int_distribution<std::size_t>(0, src.frames.size() - len)(rng);

  for (int attempt = 0; attempt < cfg.max_tries; ++attempt) {
    const double ang = 2.0 * std::numbers::pi * u01(rng);
    const double rad = cfg.annulus_min + (cfg.annulus_max - cfg.annulus_min) * u01(rng);
    const double vang = 2.0 * std::numbers::pi * u01(rng);
    const double vmag = cfg.rel_speed_max * std::sqrt(u01(rng));
    const double yaw = std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    std::vector<Box3D> placed;
    bool ok = true;
    for (std::size_t j = 0; j < len && ok; ++j) {
      const Box3D& tgt = window.frames[j].box;
      const Vec3& ssize = src.frames[s0 + j].box.size;
      const Vec3 c = tgt.center + Vec3{rad * std::cos(ang), rad * std::sin(ang), 0.5 * (ssize.z - tgt.size.z)} +
                     Vec3{vmag * std::cos(vang), vmag * std::sin(vang), 0.0} * static_cast<double>(j);
      Box3D b{c, ssize, wrap_angle(tgt.heading + yaw)};
      ok = iou_3d(b, tgt) <= 0.0;
      placed.push_back(b);
    }
    if (!ok) continue;
    for (std::size_t j = 0; j < len; ++j) {
      const Frame& sf = src.frames[s0 + j];
      const Box3D grab = detail::inflate(sf.box, 0.1);
      for (const auto& p : sf.points)
        if (point_in_box(p, grab)) window.frames[j].points.push_back(decanonicalize(canonicalize(p, sf.box), placed[j]));
    }
    return true;
  }
  return false;
}

/// A window after augmentation: transformed frames and the perturbed
/// reference boxes that stand in for predictions of earlier frames.
struct AugmentedWindow {
  Tracklet window;
  std::vector<Box3D> reference_boxes;  // one per frame: perturbed GT box
};

/// Frame-wise motion augmentation (each frame's points and GT box move by one
/// rigid transform about the box center) followed by box augmentation of the
/// reference boxes.
inline AugmentedWindow augment(const Tracklet& window, const AugmentConfig& cfg, std::mt19937_64& rng) {
  AugmentedWindow out{window, {}};
  auto uni = [&rng](double r) { return r > 0.0 ? std::uniform_real_distribution<double>(-r, r)(rng) : 0.0; };
  for (auto& f : out.window.frames) {
    const double yaw = uni(cfg.frame_rotation);
    const Vec3 t{uni(cfg.frame_shift_xy), uni(cfg.frame_shift_xy), uni(cfg.frame_shift_z)};
    if (yaw == 0.0 && t == Vec3{}) continue;
    // Rotate about the box center, then translate.
    const RigidTransform about = RigidTransform{0.0, f.box.center + t}
                                     .compose(RigidTransform{yaw, {}})
                                     .compose(RigidTransform{0.0, Vec3{} - f.box.center});
    f.points = about.apply(f.points);
    f.box = about.apply(f.box);
  }
  for (const auto& f : out.window.frames) {
    Box3D b = f.box;
    b.center += Vec3{uni(cfg.box_shift_xy), uni(cfg.box_shift_xy), uni(cfg.box_shift_z)};
    b.heading = wrap_angle(b.heading + uni(cfg.box_shift_heading));
    out.reference_boxes.push_back(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tracklet files. One JSON object per line and frame:
//   {"track": k, "t": timestamp, "category": "car",
//    "box": [cx, cy, cz, w, l, h, heading], "points": [[x, y, z], ...]}
// Lines of one tracklet are contiguous and share "track".

inline nlohmann::json frame_to_json(std::size_t track, const std::string& category, const Frame& f) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : f.points) pts.push_back({p.x, p.y, p.z});
  const auto& b = f.box;
  return {{"track", track},
          {"t", f.timestamp},
          {"category", category},
          {"box", {b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.heading}},
          {"points", std::move(pts)}};
}

inline void write_tracklets(const std::vector<Tracklet>& tracklets, std::ostream& os) {
  for (std::size_t k = 0; k < tracklets.size(); ++k)
    for (const auto& f : tracklets[k].frames) os << frame_to_json(k, tracklets[k].category, f).dump() << '\n';
}

inline void write_tracklets(const std::vector<Tracklet>& tracklets, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_tracklets(tracklets, os);
}

inline std::vector<Tracklet> read_tracklets(std::istream& is) {
  std::vector<Tracklet> out;
  std::string line;
  std::size_t lineno = 0;
  std::int64_t current_track = -1;
  auto fail = [&lineno](const std::string& what) {
    throw std::runtime_error("tracklet line " + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      fail(std::string("malformed JSON: ") + e.what());
    }
    for (const char* field : {"track", "t", "category", "box", "points"})
      if (!j.contains(field)) fail(std::string("missing field '") + field + "'");
    try {
      const auto track = j["track"].get<std::int64_t>();
      const auto box = j["box"].get<std::vector<double>>();
      if (box.size() != 7) fail("field 'box' must have 7 values");
      Frame f;
      f.timestamp = j["t"].get<std::int64_t>();
      f.box = {{box[0], box[1], box[2]}, {box[3], box[4], box[5]}, box[6]};
      for (const auto& p : j["points"]) {
        const auto v = p.get<std::vector<double>>();
        if (v.size() != 3) fail("field 'points' entries must have 3 values");
        f.points.push_back({v[0], v[1], v[2]});
      }
      const auto category = j["category"].get<std::string>();
      if (track != current_track) {
        out.push_back({category, f.box.size, {}});
        current_track = track;
      }
      out.back().frames.push_back(std::move(f));
    } catch (const nlohmann::json::exception& e) {
      fail(std::string("bad value: ") + e.what());
    }
  }
  return out;
}

inline std::vector<Tracklet> read_tracklets(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_tracklets(is);
}

}  // namespace streamtrack
