#pragma once

// One Pass Evaluation: per-frame IoU and center distance, Success (mean IoU,
// i.e. the area under the overlap success curve) and Precision (area under the
// center-distance curve over 0–2 m), aggregated weighted by frame count.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "streamtrack/geom.hpp"

namespace streamtrack {

struct FrameTrace {
  std::int64_t timestamp = 0;
  double iou = 0.0;
  double distance = 0.0;  // center distance, meters
};

struct SequenceReport {
  std::string name;
  std::size_t frames = 0;
  double success = 0.0;    // 0–100
  double precision = 0.0;  // 0–100
  std::vector<FrameTrace> trace;
};

struct EvalReport {
  std::vector<SequenceReport> sequences;
  std::size_t frames = 0;
  double success = 0.0;
  double precision = 0.0;
};

inline constexpr double kPrecisionRange = 2.0;  // meters
inline constexpr double kPrecisionStep = 0.01;

/// 100 · (1/2) · ∫₀² fraction(distance ≤ τ) dτ, trapezoid rule on a 0.01 m grid.
inline double precision_auc(const std::vector<double>& distances) {
  if (distances.empty()) return 0.0;
  const auto steps = static_cast<std::size_t>(std::lround(kPrecisionRange / kPrecisionStep));
  auto frac = [&distances](double tau) {
    std::size_t k = 0;
    for (double d : distances) k += d <= tau ? 1 : 0;
    return static_cast<double>(k) / static_cast<double>(distances.size());
  };
  double area = 0.0, prev = frac(0.0);
  for (std::size_t i = 1; i <= steps; ++i) {
    const double cur = frac(static_cast<double>(i) * kPrecisionStep);
    area += 0.5 * (prev + cur) * kPrecisionStep;
    prev = cur;
  }
  return 100.0 * area / kPrecisionRange;
}

inline SequenceReport evaluate_sequence(const std::vector<Box3D>& predicted, const std::vector<Box3D>& ground_truth,
                                        const std::vector<std::int64_t>& timestamps = {}, std::string name = "") {
  if (predicted.size() != ground_truth.size())
    throw std::invalid_argument("evaluate_sequence: " + std::to_string(predicted.size()) + " predictions vs " +
                                std::to_string(ground_truth.size()) + " ground-truth boxes");
  if (!timestamps.empty() && timestamps.size() != predicted.size())
    throw std::invalid_argument("evaluate_sequence: timestamp count mismatch");
  SequenceReport r;
  r.name = std::move(name);
  r.frames = predicted.size();
  std::vector<double> dist;
  double iou_sum = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    FrameTrace f;
    f.timestamp = timestamps.empty() ? static_cast<std::int64_t>(i) : timestamps[i];
    f.iou = iou_3d(predicted[i], ground_truth[i]);
    f.distance = distance(predicted[i].center, ground_truth[i].center);
    iou_sum += f.iou;
    dist.push_back(f.distance);
    r.trace.push_back(f);
  }
  r.success = r.frames ? 100.0 * iou_sum / static_cast<double>(r.frames) : 0.0;
  r.precision = precision_auc(dist);
  return r;
}

/// Frame-weighted means over sequences, reduced in sequence order.
inline EvalReport aggregate(std::vector<SequenceReport> sequences) {
  EvalReport rep;
  double s = 0.0, p = 0.0;
  for (const auto& q : sequences) {
    rep.frames += q.frames;
    s += q.success * static_cast<double>(q.frames);
    p += q.precision * static_cast<double>(q.frames);
  }
  if (rep.frames > 0) {
    rep.success = s / static_cast<double>(rep.frames);
    rep.precision = p / static_cast<double>(rep.frames);
  }
  rep.sequences = std::move(sequences);
  return rep;
}

inline nlohmann::json to_json(const EvalReport& rep, bool with_traces = true) {
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& q : rep.sequences) {
    nlohmann::json s{{"name", q.name}, {"frames", q.frames}, {"success", q.success}, {"precision", q.precision}};
    if (with_traces) {
      nlohmann::json tr = nlohmann::json::array();
      for (const auto& f : q.trace) tr.push_back({{"t", f.timestamp}, {"iou", f.iou}, {"distance", f.distance}});
      s["trace"] = std::move(tr);
    }
    seqs.push_back(std::move(s));
  }
  return {{"frames", rep.frames}, {"success", rep.success}, {"precision", rep.precision}, {"sequences", std::move(seqs)}};
}

}  // namespace streamtrack
