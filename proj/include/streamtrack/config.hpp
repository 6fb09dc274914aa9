#pragma once

// Experiment configuration: model dimensions, training schedule, augmentation,
// tracker search region, synthetic dataset description. Serializes to JSON;
// parsing starts from a named profile and rejects unknown keys.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "streamtrack/data.hpp"
#include "streamtrack/harness.hpp"

namespace streamtrack {

struct SplitSpec {
  std::string name;
  std::size_t count = 0;
  std::uint64_t seed = 0;
  SceneSpec scene;
};

/// Ranges from which each tracklet's motion is drawn.
struct MotionRanges {
  double speed_min = 0.3;
  double speed_max = 1.0;
  double accel_max = 0.02;
  double yaw_rate_max = 0.03;
  double speed_noise = 0.02;
  double yaw_noise = 0.01;
  double start_distance_min = 6.0;
  double start_distance_max = 20.0;
};

struct SynthConfig {
  std::size_t frames = 30;
  ShapeSpec shape;
  MotionRanges motion;
  std::vector<SplitSpec> splits;

  const SplitSpec& split(const std::string& name) const {
    for (const auto& s : splits)
      if (s.name == name) return s;
    throw std::invalid_argument("SynthConfig: no split named '" + name + "'");
  }
};

inline MotionModel draw_motion(const MotionRanges& r, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  MotionModel m;
  const double ang = uni(-std::numbers::pi, std::numbers::pi);
  const double dist = uni(r.start_distance_min, r.start_distance_max);
  m.start = {dist * std::cos(ang), dist * std::sin(ang), 0.0};
  m.start_heading = uni(-std::numbers::pi, std::numbers::pi);
  m.speed = uni(r.speed_min, r.speed_max);
  m.acceleration = uni(-r.accel_max, r.accel_max);
  m.yaw_rate = uni(-r.yaw_rate_max, r.yaw_rate_max);
  m.speed_noise = r.speed_noise;
  m.yaw_noise = r.yaw_noise;
  return m;
}

/// All tracklets of one split; tracklet k uses its own seed derived from (split seed, k).
inline std::vector<Tracklet> generate_split(const SynthConfig& cfg, const SplitSpec& split) {
  std::vector<Tracklet> out;
  for (std::size_t k = 0; k < split.count; ++k) {
    const std::uint64_t seed = frame_seed(split.seed, static_cast<std::int64_t>(k));
    std::mt19937_64 rng(seed);
    MotionModel m = draw_motion(cfg.motion, rng);
    m.start.z = 0.5 * cfg.shape.size.z;
    out.push_back(generate_tracklet(m, cfg.shape, split.scene, cfg.frames, rng()));
  }
  return out;
}

struct ExperimentConfig {
  std::string profile = "desk";
  std::uint64_t seed = 0;
  ModelConfig model;
  TrackerConfig tracker;
  AugmentConfig augment;
  TrainConfig train;
  LossWeights loss;
  SynthConfig synth;
  std::string train_path = "train.jsonl";
  std::string test_path = "test.jsonl";

  void validate() const {
    model.validate();
    augment.validate();
    train.validate();
    loss.validate();
    if (synth.frames < model.history + 2) throw std::invalid_argument("ExperimentConfig: tracklets too short for history");
  }
};

inline SceneSpec desk_train_scene() {
  SceneSpec s;
  s.occlusion_prob = 0.1;
  s.occlusion_frames = 2;
  s.occlusion_keep = 0.0;
  return s;
}

inline SceneSpec desk_test_scene() {
  SceneSpec s = desk_train_scene();
  s.distractors = 2;
  return s;
}

/// Toy dimensions that train in minutes on one CPU core.
inline ExperimentConfig desk_profile() {
  ExperimentConfig c;
  c.profile = "desk";
  auto& m = c.model;
  m.history = 2;
  m.backbone.input_points = 256;
  m.backbone.stage_points = {128, 32};
  m.backbone.stage_radii = {0.5, 1.0};
  m.backbone.neighbor_cap = 8;
  m.backbone.stage_channels = {32, 32};
  m.encoder.layers = 2;
  m.encoder.radii = {1.0, 2.0};
  m.encoder.heads = 2;
  m.encoder.local_cap = 8;
  m.decoder.layers = 2;
  m.decoder.heads = 2;
  c.tracker.search_scale = 1.0;
  c.tracker.search_margin = 1.5;
  c.train.epochs = 30;
  c.train.batch_size = 8;
  c.train.lr = 1e-3;
  c.train.lr_decay_every = 20;
  c.synth.splits = {{"train", 200, 11, desk_train_scene()},
                    {"val", 20, 12, desk_test_scene()},
                    {"test", 50, 13, desk_test_scene()}};
  return c;
}

/// Network and schedule defaults at the published scale (KITTI-style training).
inline ExperimentConfig paper_profile() {
  ExperimentConfig c;
  c.profile = "paper";
  c.model = ModelConfig{};
  c.model.backbone.stage_channels = {64, 64};
  c.train.epochs = 60;
  c.train.batch_size = 64;
  c.train.lr = 3e-4;
  c.train.lr_decay_every = 25;
  c.synth.splits = {{"train", 200, 11, desk_train_scene()},
                    {"val", 20, 12, desk_test_scene()},
                    {"test", 50, 13, desk_test_scene()}};
  return c;
}

inline ExperimentConfig profile_config(const std::string& name) {
  if (name == "desk") return desk_profile();
  if (name == "paper") return paper_profile();
  throw std::invalid_argument("unknown profile '" + name + "' (expected desk or paper)");
}

// ---------------------------------------------------------------------------
// JSON. Every section is optional on input and overrides the profile's values.

namespace cfgjson {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::set<std::string> allowed) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + where + "' must be an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k)) throw std::invalid_argument("config: unknown key '" + where + "." + k + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw std::invalid_argument("config: '" + where + "." + key + "' must be a boolean");
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0))
      throw std::invalid_argument("config: '" + where + "." + key + "' must be a nonnegative integer");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw std::invalid_argument("config: '" + where + "." + key + "' must be an integer");
  }
  try {
    out = v.get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument("config: bad type for '" + where + "." + key + "'");
  }
}

inline nlohmann::json vec3(const Vec3& v) { return {v.x, v.y, v.z}; }

inline void read_vec3(const nlohmann::json& j, const char* key, Vec3& out, const std::string& where) {
  std::vector<double> v{out.x, out.y, out.z};
  read(j, key, v, where);
  if (v.size() != 3) throw std::invalid_argument("config: '" + where + "." + key + "' needs 3 values");
  out = {v[0], v[1], v[2]};
}

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  return {{"sensor", vec3(s.sensor)},
          {"clutter_density", s.clutter_density},
          {"clutter_height", s.clutter_height},
          {"scene_margin", s.scene_margin},
          {"distractors", s.distractors},
          {"distractor_min_offset", s.distractor_min_offset},
          {"distractor_max_offset", s.distractor_max_offset},
          {"distractor_rel_speed", s.distractor_rel_speed},
          {"occlusion_prob", s.occlusion_prob},
          {"occlusion_frames", s.occlusion_frames},
          {"occlusion_keep", s.occlusion_keep}};
}

inline void scene_from_json(const nlohmann::json& j, SceneSpec& s, const std::string& w) {
  check_keys(j, w, {"sensor", "clutter_density", "clutter_height", "scene_margin", "distractors",
                    "distractor_min_offset", "distractor_max_offset", "distractor_rel_speed", "occlusion_prob",
                    "occlusion_frames", "occlusion_keep"});
  read_vec3(j, "sensor", s.sensor, w);
  read(j, "clutter_density", s.clutter_density, w);
  read(j, "clutter_height", s.clutter_height, w);
  read(j, "scene_margin", s.scene_margin, w);
  read(j, "distractors", s.distractors, w);
  read(j, "distractor_min_offset", s.distractor_min_offset, w);
  read(j, "distractor_max_offset", s.distractor_max_offset, w);
  read(j, "distractor_rel_speed", s.distractor_rel_speed, w);
  read(j, "occlusion_prob", s.occlusion_prob, w);
  read(j, "occlusion_frames", s.occlusion_frames, w);
  read(j, "occlusion_keep", s.occlusion_keep, w);
}

}  // namespace cfgjson

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using namespace cfgjson;
  const auto& m = c.model;
  nlohmann::json splits = nlohmann::json::array();
  for (const auto& s : c.synth.splits)
    splits.push_back({{"name", s.name}, {"count", s.count}, {"seed", s.seed}, {"scene", scene_to_json(s.scene)}});
  const auto& bt = c.loss.box_terms;
  return {
      {"version", 1},
      {"profile", c.profile},
      {"seed", c.seed},
      {"model",
       {{"history", m.history},
        {"backbone",
         {{"input_points", m.backbone.input_points},
          {"stage_points", m.backbone.stage_points},
          {"stage_radii", m.backbone.stage_radii},
          {"neighbor_cap", m.backbone.neighbor_cap},
          {"stage_channels", m.backbone.stage_channels}}},
        {"encoder",
         {{"layers", m.encoder.layers},
          {"radii", m.encoder.radii},
          {"heads", m.encoder.heads},
          {"local_cap", m.encoder.local_cap},
          {"ffn_mult", m.encoder.ffn_mult},
          {"use_local", m.encoder.use_local},
          {"cross_frame_local", m.encoder.cross_frame_local}}},
        {"decoder",
         {{"layers", m.decoder.layers},
          {"heads", m.decoder.heads},
          {"ffn_mult", m.decoder.ffn_mult},
          {"proj_dim", m.decoder.proj_dim}}}}},
      {"tracker", {{"search_scale", c.tracker.search_scale}, {"search_margin", c.tracker.search_margin}}},
      {"augment",
       {{"box_shift_xy", c.augment.box_shift_xy},
        {"box_shift_z", c.augment.box_shift_z},
        {"box_shift_heading", c.augment.box_shift_heading},
        {"frame_shift_xy", c.augment.frame_shift_xy},
        {"frame_shift_z", c.augment.frame_shift_z},
        {"frame_rotation", c.augment.frame_rotation},
        {"enhance_prob", c.augment.enhance_prob},
        {"annulus_min", c.augment.annulus_min},
        {"annulus_max", c.augment.annulus_max},
        {"rel_speed_max", c.augment.rel_speed_max},
        {"max_tries", c.augment.max_tries}}},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"steps_per_epoch", c.train.steps_per_epoch},
        {"lr", c.train.lr},
        {"lr_decay_every", c.train.lr_decay_every},
        {"lr_decay_factor", c.train.lr_decay_factor},
        {"momentum", c.train.momentum},
        {"point_supervision", c.train.point_supervision},
        {"contrastive", c.train.contrastive},
        {"sequence_enhance", c.train.sequence_enhance}}},
      {"loss",
       {{"point", c.loss.point},
        {"box", c.loss.box},
        {"aux", c.loss.aux},
        {"point_s", c.loss.point_s},
        {"point_d", c.loss.point_d},
        {"cls", bt.cls},
        {"reg", bt.reg},
        {"offset", bt.offset},
        {"theta", bt.theta},
        {"giou", bt.giou},
        {"focal_alpha", bt.focal_alpha},
        {"focal_gamma", bt.focal_gamma},
        {"match_cls", c.loss.match.cls},
        {"match_giou", c.loss.match.giou},
        {"tau", c.loss.tau}}},
      {"synth",
       {{"frames", c.synth.frames},
        {"shape",
         {{"category", c.synth.shape.category},
          {"size", vec3(c.synth.shape.size)},
          {"surface_points", c.synth.shape.surface_points},
          {"surface_noise", c.synth.shape.surface_noise}}},
        {"motion",
         {{"speed_min", c.synth.motion.speed_min},
          {"speed_max", c.synth.motion.speed_max},
          {"accel_max", c.synth.motion.accel_max},
          {"yaw_rate_max", c.synth.motion.yaw_rate_max},
          {"speed_noise", c.synth.motion.speed_noise},
          {"yaw_noise", c.synth.motion.yaw_noise},
          {"start_distance_min", c.synth.motion.start_distance_min},
          {"start_distance_max", c.synth.motion.start_distance_max}}},
        {"splits", splits}}},
      {"data", {{"train_path", c.train_path}, {"test_path", c.test_path}}}};
}

/// Parses a config; values not present keep the profile's defaults
/// (`profile` key, else `default_profile`).
inline ExperimentConfig config_from_json(const nlohmann::json& j, const std::string& default_profile = "desk") {
  using namespace cfgjson;
  check_keys(j, "config",
             {"version", "profile", "seed", "model", "tracker", "augment", "train", "loss", "synth", "data"});
  if (j.contains("version") && j["version"] != 1) throw std::invalid_argument("config: unsupported version");
  ExperimentConfig c = profile_config(j.value("profile", default_profile));
  read(j, "seed", c.seed, "config");
  if (j.contains("model")) {
    const auto& m = j["model"];
    check_keys(m, "model", {"history", "backbone", "encoder", "decoder"});
    read(m, "history", c.model.history, "model");
    if (m.contains("backbone")) {
      const auto& b = m["backbone"];
      check_keys(b, "model.backbone", {"input_points", "stage_points", "stage_radii", "neighbor_cap", "stage_channels"});
      read(b, "input_points", c.model.backbone.input_points, "model.backbone");
      read(b, "stage_points", c.model.backbone.stage_points, "model.backbone");
      read(b, "stage_radii", c.model.backbone.stage_radii, "model.backbone");
      read(b, "neighbor_cap", c.model.backbone.neighbor_cap, "model.backbone");
      read(b, "stage_channels", c.model.backbone.stage_channels, "model.backbone");
    }
    if (m.contains("encoder")) {
      const auto& e = m["encoder"];
      check_keys(e, "model.encoder", {"layers", "radii", "heads", "local_cap", "ffn_mult", "use_local", "cross_frame_local"});
      read(e, "layers", c.model.encoder.layers, "model.encoder");
      read(e, "radii", c.model.encoder.radii, "model.encoder");
      read(e, "heads", c.model.encoder.heads, "model.encoder");
      read(e, "local_cap", c.model.encoder.local_cap, "model.encoder");
      read(e, "ffn_mult", c.model.encoder.ffn_mult, "model.encoder");
      read(e, "use_local", c.model.encoder.use_local, "model.encoder");
      read(e, "cross_frame_local", c.model.encoder.cross_frame_local, "model.encoder");
    }
    if (m.contains("decoder")) {
      const auto& d = m["decoder"];
      check_keys(d, "model.decoder", {"layers", "heads", "ffn_mult", "proj_dim"});
      read(d, "layers", c.model.decoder.layers, "model.decoder");
      read(d, "heads", c.model.decoder.heads, "model.decoder");
      read(d, "ffn_mult", c.model.decoder.ffn_mult, "model.decoder");
      read(d, "proj_dim", c.model.decoder.proj_dim, "model.decoder");
    }
  }
  if (j.contains("tracker")) {
    const auto& t = j["tracker"];
    check_keys(t, "tracker", {"search_scale", "search_margin"});
    read(t, "search_scale", c.tracker.search_scale, "tracker");
    read(t, "search_margin", c.tracker.search_margin, "tracker");
  }
  if (j.contains("augment")) {
    const auto& a = j["augment"];
    check_keys(a, "augment", {"box_shift_xy", "box_shift_z", "box_shift_heading", "frame_shift_xy", "frame_shift_z",
                              "frame_rotation", "enhance_prob", "annulus_min", "annulus_max", "rel_speed_max",
                              "max_tries"});
    read(a, "box_shift_xy", c.augment.box_shift_xy, "augment");
    read(a, "box_shift_z", c.augment.box_shift_z, "augment");
    read(a, "box_shift_heading", c.augment.box_shift_heading, "augment");
    read(a, "frame_shift_xy", c.augment.frame_shift_xy, "augment");
    read(a, "frame_shift_z", c.augment.frame_shift_z, "augment");
    read(a, "frame_rotation", c.augment.frame_rotation, "augment");
    read(a, "enhance_prob", c.augment.enhance_prob, "augment");
    read(a, "annulus_min", c.augment.annulus_min, "augment");
    read(a, "annulus_max", c.augment.annulus_max, "augment");
    read(a, "rel_speed_max", c.augment.rel_speed_max, "augment");
    read(a, "max_tries", c.augment.max_tries, "augment");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, "train", {"epochs", "batch_size", "steps_per_epoch", "lr", "lr_decay_every", "lr_decay_factor",
                            "momentum", "point_supervision", "contrastive", "sequence_enhance"});
    read(t, "epochs", c.train.epochs, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "steps_per_epoch", c.train.steps_per_epoch, "train");
    read(t, "lr", c.train.lr, "train");
    read(t, "lr_decay_every", c.train.lr_decay_every, "train");
    read(t, "lr_decay_factor", c.train.lr_decay_factor, "train");
    read(t, "momentum", c.train.momentum, "train");
    read(t, "point_supervision", c.train.point_supervision, "train");
    read(t, "contrastive", c.train.contrastive, "train");
    read(t, "sequence_enhance", c.train.sequence_enhance, "train");
  }
  if (j.contains("loss")) {
    const auto& l = j["loss"];
    check_keys(l, "loss", {"point", "box", "aux", "point_s", "point_d", "cls", "reg", "offset", "theta", "giou",
                           "focal_alpha", "focal_gamma", "match_cls", "match_giou", "tau"});
    auto& bt = c.loss.box_terms;
    read(l, "point", c.loss.point, "loss");
    read(l, "box", c.loss.box, "loss");
    read(l, "aux", c.loss.aux, "loss");
    read(l, "point_s", c.loss.point_s, "loss");
    read(l, "point_d", c.loss.point_d, "loss");
    read(l, "cls", bt.cls, "loss");
    read(l, "reg", bt.reg, "loss");
    read(l, "offset", bt.offset, "loss");
    read(l, "theta", bt.theta, "loss");
    read(l, "giou", bt.giou, "loss");
    read(l, "focal_alpha", bt.focal_alpha, "loss");
    read(l, "focal_gamma", bt.focal_gamma, "loss");
    read(l, "match_cls", c.loss.match.cls, "loss");
    read(l, "match_giou", c.loss.match.giou, "loss");
    read(l, "tau", c.loss.tau, "loss");
  }
  if (j.contains("synth")) {
    const auto& s = j["synth"];
    check_keys(s, "synth", {"frames", "shape", "motion", "splits"});
    read(s, "frames", c.synth.frames, "synth");
    if (s.contains("shape")) {
      const auto& sh = s["shape"];
      check_keys(sh, "synth.shape", {"category", "size", "surface_points", "surface_noise"});
      read(sh, "category", c.synth.shape.category, "synth.shape");
      read_vec3(sh, "size", c.synth.shape.size, "synth.shape");
      read(sh, "surface_points", c.synth.shape.surface_points, "synth.shape");
      read(sh, "surface_noise", c.synth.shape.surface_noise, "synth.shape");
    }
    if (s.contains("motion")) {
      const auto& mo = s["motion"];
      auto& r = c.synth.motion;
      check_keys(mo, "synth.motion", {"speed_min", "speed_max", "accel_max", "yaw_rate_max", "speed_noise",
                                      "yaw_noise", "start_distance_min", "start_distance_max"});
      read(mo, "speed_min", r.speed_min, "synth.motion");
      read(mo, "speed_max", r.speed_max, "synth.motion");
      read(mo, "accel_max", r.accel_max, "synth.motion");
      read(mo, "yaw_rate_max", r.yaw_rate_max, "synth.motion");
      read(mo, "speed_noise", r.speed_noise, "synth.motion");
      read(mo, "yaw_noise", r.yaw_noise, "synth.motion");
      read(mo, "start_distance_min", r.start_distance_min, "synth.motion");
      read(mo, "start_distance_max", r.start_distance_max, "synth.motion");
    }
    if (s.contains("splits")) {
      if (!s["splits"].is_array()) throw std::invalid_argument("config: 'synth.splits' must be an array");
      c.synth.splits.clear();
      for (const auto& sp : s["splits"]) {
        check_keys(sp, "synth.splits[]", {"name", "count", "seed", "scene"});
        SplitSpec spec;
        spec.scene = desk_train_scene();
        read(sp, "name", spec.name, "synth.splits[]");
        read(sp, "count", spec.count, "synth.splits[]");
        read(sp, "seed", spec.seed, "synth.splits[]");
        if (sp.contains("scene")) scene_from_json(sp["scene"], spec.scene, "synth.splits[].scene");
        if (spec.name.empty()) throw std::invalid_argument("config: split without a name");
        c.synth.splits.push_back(std::move(spec));
      }
    }
  }
  if (j.contains("data")) {
    const auto& d = j["data"];
    check_keys(d, "data", {"train_path", "test_path"});
    read(d, "train_path", c.train_path, "data");
    read(d, "test_path", c.test_path, "data");
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path, const std::string& default_profile = "desk") {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("config " + path + ": " + e.what());
  }
  return config_from_json(j, default_profile);
}

// ---------------------------------------------------------------------------
// Dataset manifest: {"version": 1, "frames": T, "splits": {"train": {"path": ..., "count": k, "seed": s}, ...}}

inline nlohmann::json make_manifest(const SynthConfig& cfg, const std::string& suffix = ".jsonl") {
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& s : cfg.splits) splits[s.name] = {{"path", s.name + suffix}, {"count", s.count}, {"seed", s.seed}};
  return {{"version", 1}, {"frames", cfg.frames}, {"splits", splits}};
}

// ---------------------------------------------------------------------------
// Checkpoint: the parameter file plus the config that built the model.

inline void save_checkpoint(const ExperimentConfig& cfg, const Model& model, const std::string& path) {
  nlohmann::json j = params_to_json(model.params);
  j["config"] = to_json(cfg);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << j.dump();
}

inline Model load_checkpoint(const std::string& path, ExperimentConfig* cfg_out = nullptr) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  const nlohmann::json j = nlohmann::json::parse(is);
  if (!j.contains("config")) throw std::runtime_error("checkpoint " + path + ": no embedded config");
  const ExperimentConfig cfg = config_from_json(j["config"]);
  Model model(cfg.model, 0);
  params_from_json(j, model.params);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

}  // namespace streamtrack
