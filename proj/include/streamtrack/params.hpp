#pragma once

// Named parameter store, Adam, EMA momentum copies, and checkpoint files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "streamtrack/tensor.hpp"

namespace streamtrack {

/// Ordered name → tensor map. Handles are shared: copying a ParamStore shares storage,
/// use clone() for an independent copy.
class ParamStore {
 public:
  /// Frozen entries (trainable = false) never receive gradients.
  Tensor& add(const std::string& name, Tensor t, bool trainable = true) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    t.set_requires_grad(trainable);
    return params_[name] = std::move(t);
  }

  /// Uniform(−a, a) with a = sqrt(6 / (fan_in + fan_out)).
  Tensor& add_xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-a, a);
    std::vector<double> d(fan_in * fan_out);
    for (auto& v : d) v = u(rng);
    return add(name, Tensor({fan_in, fan_out}, std::move(d)));
  }
  Tensor& add_const(const std::string& name, Shape shape, double value) {
    return add(name, Tensor::full(std::move(shape), value));
  }

  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  ParamStore clone() const {
    ParamStore out;
    for (const auto& [k, t] : params_) out.params_.emplace(k, t.clone());
    return out;
  }

  /// Names starting with `prefix`.
  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& [k, _] : params_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

 private:
  std::map<std::string, Tensor> params_;
};

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update over every parameter that has a gradient buffer.
/// Parameters in `skip` (e.g. momentum copies) are left untouched.
inline void adam_step(ParamStore& params, AdamState& state, double lr, double beta1, double beta2, double eps,
                      const std::vector<std::string>& skip = {}) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params) {
    if (std::find(skip.begin(), skip.end(), name) != skip.end()) continue;
    const auto& g = t.grad();
    if (g.empty()) continue;
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != t.numel()) {
      m.assign(t.numel(), 0.0);
      v.assign(t.numel(), 0.0);
    }
    auto w = t.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
      v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
}

inline void adam_step(ParamStore& params, AdamState& state, const AdamConfig& cfg, double lr,
                      const std::vector<std::string>& skip = {}) {
  adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.eps, skip);
}

/// Step decay: base_lr · factor^(floor(epoch / every)).
inline double step_decay_lr(double base_lr, int epoch, int every, double factor = 0.1) {
  if (every <= 0) return base_lr;
  return base_lr * std::pow(factor, static_cast<double>(epoch / every));
}

/// θ_momentum ← m·θ_momentum + (1−m)·θ_live for each (live, momentum) name pair.
inline void momentum_update(const ParamStore& live, ParamStore& momentum,
                            const std::vector<std::pair<std::string, std::string>>& pairs, double m) {
  for (const auto& [live_name, mom_name] : pairs) {
    const Tensor& src = live.at(live_name);
    Tensor& dst = momentum.at(mom_name);
    if (src.shape() != dst.shape()) throw ShapeError("momentum_update(" + live_name + ")", src.shape(), dst.shape());
    auto d = dst.mutable_data();
    const auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = m * d[i] + (1.0 - m) * s[i];
  }
}

// ---------------------------------------------------------------------------
// Checkpoint format (JSON, version 1):
//   {"format": "streamtrack-params", "version": 1,
//    "params": {"<name>": {"shape": [..], "data": [..row-major..]}, ...}}

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json params_to_json(const ParamStore& params) {
  nlohmann::json j;
  j["format"] = "streamtrack-params";
  j["version"] = kCheckpointVersion;
  auto& p = j["params"];
  p = nlohmann::json::object();
  for (const auto& [name, t] : params) p[name] = {{"shape", t.shape()}, {"data", t.values()}};
  return j;
}

/// Loads values into an existing store; every stored name must match in shape.
inline void params_from_json(const nlohmann::json& j, ParamStore& params) {
  if (j.value("format", "") != "streamtrack-params") throw std::runtime_error("checkpoint: unknown format");
  if (j.value("version", 0) != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(j.value("version", 0)));
  const auto& p = j.at("params");
  for (auto& [name, t] : params) {
    if (!p.contains(name)) throw std::runtime_error("checkpoint: missing parameter " + name);
    const auto shape = p[name].at("shape").get<Shape>();
    auto data = p[name].at("data").get<std::vector<double>>();
    if (shape != t.shape()) throw ShapeError("checkpoint(" + name + ")", t.shape(), shape);
    if (data.size() != t.numel()) throw std::runtime_error("checkpoint: bad data length for " + name);
    std::copy(data.begin(), data.end(), t.mutable_data().begin());
  }
}

inline void save_params(const ParamStore& params, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << params_to_json(params).dump();
}

inline void load_params(const std::string& path, ParamStore& params) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  params_from_json(nlohmann::json::parse(is), params);
}

}  // namespace streamtrack
