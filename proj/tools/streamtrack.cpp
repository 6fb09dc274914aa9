// streamtrack: dataset generation, training, streaming tracking, evaluation
// and gradient checking from the command line.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "streamtrack/config.hpp"
#include "streamtrack/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace streamtrack;

namespace {

struct Common {
  std::string config;
  std::string profile = "desk";
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::optional<std::size_t> frames;
};

void add_common(CLI::App* app, Common& c, bool with_frames) {
  app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--profile", c.profile, "base profile")->check(CLI::IsMember({"desk", "paper"}));
  app->add_option("--seed", c.seed, "seed");
  app->add_option("--out", c.out, "output directory");
  if (with_frames) app->add_option("--frames", c.frames, "number of history frames n");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? profile_config(c.profile) : load_config(c.config, c.profile);
  if (c.seed) cfg.seed = *c.seed;
  if (c.frames) cfg.model.history = *c.frames;
  cfg.validate();
  return cfg;
}

fs::path ensure_dir(const std::string& dir) {
  fs::create_directories(dir);
  return fs::path(dir);
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

// Dataset argument: a manifest directory (uses the named split) or a tracklet file.
std::vector<Tracklet> load_split(const std::string& data, const std::string& split) {
  const fs::path p(data);
  if (fs::is_directory(p)) {
    std::ifstream is(p / "manifest.json");
    if (!is) throw std::runtime_error("no manifest.json in " + data);
    const auto m = nlohmann::json::parse(is);
    if (!m.contains("splits") || !m["splits"].contains(split))
      throw std::runtime_error("manifest in " + data + " has no split '" + split + "'");
    return read_tracklets((p / m["splits"][split]["path"].get<std::string>()).string());
  }
  return read_tracklets(data);
}

int cmd_gen_synth(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  if (c.seed)
    for (auto& s : cfg.synth.splits) s.seed = frame_seed(s.seed, static_cast<std::int64_t>(*c.seed));
  const fs::path dir = ensure_dir(c.out);
  for (const auto& s : cfg.synth.splits) {
    const auto tracklets = generate_split(cfg.synth, s);
    write_tracklets(tracklets, (dir / (s.name + ".jsonl")).string());
    std::cout << s.name << ": " << tracklets.size() << " tracklets x " << cfg.synth.frames << " frames\n";
  }
  write_json(dir / "manifest.json", make_manifest(cfg.synth));
  write_json(dir / "config.json", to_json(cfg));
  return 0;
}

int cmd_train(const Common& c, const std::string& data) {
  ExperimentConfig cfg = resolve(c);
  cfg.train.seed = cfg.seed;
  const auto tracklets = load_split(data.empty() ? cfg.train_path : data, "train");
  const fs::path dir = ensure_dir(c.out);
  Model model(cfg.model, cfg.seed);
  std::ofstream log(dir / "train_log.jsonl");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    train(model, tracklets, cfg.train, cfg.loss, cfg.augment, cfg.tracker, &log);
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 3;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(cfg, model, (dir / "checkpoint.json").string());
  write_json(dir / "config.json", to_json(cfg));
  std::cout << "trained " << cfg.train.epochs << " epochs on " << tracklets.size() << " tracklets in " << secs
            << " s; checkpoint " << (dir / "checkpoint.json").string() << '\n';
  return 0;
}

int cmd_track(const std::string& checkpoint, const std::string& data, const std::string& out,
              std::optional<std::uint64_t> seed) {
  ExperimentConfig cfg;
  const Model model = load_checkpoint(checkpoint, &cfg);
  TrackerConfig tcfg = cfg.tracker;
  if (seed) tcfg.seed = *seed;
  const auto tracklets = load_split(data.empty() ? cfg.test_path : data, "test");
  const Tracker tracker(model, tcfg);
  const fs::path dir = ensure_dir(out);
  std::ofstream os(dir / "trajectory.jsonl");
  for (std::size_t k = 0; k < tracklets.size(); ++k) {
    const auto& tr = tracklets[k];
    std::vector<TrajectoryRecord> recs{{static_cast<std::int64_t>(k), tr.frames[0].timestamp, tr.frames[0].box, 1.0}};
    for (const auto& r : run_tracker(tracker, tr))
      recs.push_back({static_cast<std::int64_t>(k), r.timestamp, r.box, r.score});
    write_trajectory(os, recs);
  }
  std::cout << "tracked " << tracklets.size() << " sequences -> " << (dir / "trajectory.jsonl").string() << '\n';
  return 0;
}

int cmd_eval(const std::string& trajectory, const std::string& data, const std::string& out) {
  std::ifstream is(trajectory);
  if (!is) throw std::runtime_error("cannot read " + trajectory);
  const auto recs = read_trajectory(is);
  const auto tracklets = load_split(data, "test");
  std::map<std::int64_t, std::vector<TrajectoryRecord>> by_track;
  for (const auto& r : recs) by_track[r.track].push_back(r);
  if (by_track.size() != tracklets.size())
    throw std::invalid_argument("trajectory has " + std::to_string(by_track.size()) + " tracks, ground truth has " +
                                std::to_string(tracklets.size()));
  std::vector<SequenceReport> seqs;
  for (std::size_t k = 0; k < tracklets.size(); ++k) {
    const auto it = by_track.find(static_cast<std::int64_t>(k));
    if (it == by_track.end()) throw std::invalid_argument("trajectory has no track " + std::to_string(k));
    const auto& tr = tracklets[k];
    if (it->second.size() != tr.frames.size())
      throw std::invalid_argument("track " + std::to_string(k) + ": " + std::to_string(it->second.size()) +
                                  " trajectory records vs " + std::to_string(tr.frames.size()) + " frames");
    // Frame 0 is the given initialization and is not scored.
    std::vector<Box3D> pred, gt;
    std::vector<std::int64_t> ts;
    for (std::size_t j = 1; j < tr.frames.size(); ++j) {
      if (it->second[j].timestamp != tr.frames[j].timestamp)
        throw std::invalid_argument("track " + std::to_string(k) + ": timestamp mismatch at frame " +
                                    std::to_string(j));
      pred.push_back(it->second[j].box);
      gt.push_back(tr.frames[j].box);
      ts.push_back(tr.frames[j].timestamp);
    }
    seqs.push_back(evaluate_sequence(pred, gt, ts, "track" + std::to_string(k)));
  }
  const EvalReport rep = aggregate(std::move(seqs));
  std::printf("Success %.2f  Precision %.2f  (%zu frames, %zu sequences)\n", rep.success, rep.precision, rep.frames,
              rep.sequences.size());
  if (!out.empty()) write_json(fs::path(out), to_json(rep));
  return 0;
}

int cmd_gradcheck(std::size_t instances, const std::string& filter) {
  gradcheck::Options o;
  o.instances = instances;
  bool ok = true;
  const auto t0 = std::chrono::steady_clock::now();
  gradcheck::run(o, filter, [&ok](const gradcheck::CaseResult& r) {
    std::printf("%-18s %s  max_rel=%.3e  max_abs=%.3e  coords=%zu  %.2fs\n", r.name.c_str(),
                r.passed ? "ok  " : "FAIL", r.stats.max_rel, r.stats.max_abs, r.stats.coords, r.seconds);
    std::fflush(stdout);
    ok = ok && r.passed;
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("gradcheck %s in %.1f s\n", ok ? "passed" : "FAILED", secs);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"streamtrack: streaming 3D single-object tracking"};
  app.require_subcommand(1);

  Common gen, tr;
  auto* g = app.add_subcommand("gen-synth", "write a synthetic dataset and its manifest");
  add_common(g, gen, false);

  std::string train_data;
  auto* t = app.add_subcommand("train", "train a model; writes checkpoint.json and train_log.jsonl");
  add_common(t, tr, true);
  t->add_option("--data", train_data, "dataset directory (manifest.json) or tracklet file");

  std::string ckpt, track_data, track_out = ".";
  std::optional<std::uint64_t> track_seed;
  auto* k = app.add_subcommand("track", "stream tracklets through a trained model; writes trajectory.jsonl");
  k->add_option("--checkpoint", ckpt, "checkpoint.json from train")->required()->check(CLI::ExistingFile);
  k->add_option("--data", track_data, "dataset directory (test split) or tracklet file");
  k->add_option("--out", track_out, "output directory");
  k->add_option("--seed", track_seed, "resampling seed");

  std::string traj, eval_data, eval_out;
  auto* e = app.add_subcommand("eval", "score a trajectory file against ground truth");
  e->add_option("--trajectory", traj, "trajectory.jsonl from track")->required()->check(CLI::ExistingFile);
  e->add_option("--data", eval_data, "dataset directory (test split) or tracklet file")->required();
  e->add_option("--out", eval_out, "report JSON path");

  std::size_t gc_instances = 100;
  std::string gc_filter;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable operation");
  gc->add_option("--instances", gc_instances, "random instances per case");
  gc->add_option("--filter", gc_filter, "only cases whose name contains this");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*g) return cmd_gen_synth(gen);
    if (*t) return cmd_train(tr, train_data);
    if (*k) return cmd_track(ckpt, track_data, track_out, track_seed);
    if (*e) return cmd_eval(traj, eval_data, eval_out);
    if (*gc) return cmd_gradcheck(gc_instances, gc_filter);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 2;
  }
  return 1;
}
