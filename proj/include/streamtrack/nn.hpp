#pragma once

// Reusable layers expressed over a ParamStore with name prefixes.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "streamtrack/params.hpp"
#include "streamtrack/tensor.hpp"

namespace streamtrack::nn {

inline void init_linear(ParamStore& p, const std::string& name, std::size_t din, std::size_t dout,
                        std::mt19937_64& rng) {
  p.add_xavier(name + ".W", din, dout, rng);
  p.add_const(name + ".b", {dout}, 0.0);
}

inline Tensor apply_linear(const ParamStore& p, const std::string& name, const Tensor& x) {
  return linear(x, p.at(name + ".W"), p.at(name + ".b"));
}

/// Linear → ReLU → Linear.
inline void init_mlp2(ParamStore& p, const std::string& name, std::size_t din, std::size_t hidden, std::size_t dout,
                      std::mt19937_64& rng) {
  init_linear(p, name + ".fc1", din, hidden, rng);
  init_linear(p, name + ".fc2", hidden, dout, rng);
}

inline Tensor apply_mlp2(const ParamStore& p, const std::string& name, const Tensor& x) {
  return apply_linear(p, name + ".fc2", relu(apply_linear(p, name + ".fc1", x)));
}

inline void init_layer_norm(ParamStore& p, const std::string& name, std::size_t d) {
  p.add_const(name + ".gamma", {d}, 1.0);
  p.add_const(name + ".beta", {d}, 0.0);
}

inline Tensor apply_layer_norm(const ParamStore& p, const std::string& name, const Tensor& x) {
  return layer_norm(x, p.at(name + ".gamma"), p.at(name + ".beta"));
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention with q/k/v/out projections.

inline void init_attention(ParamStore& p, const std::string& name, std::size_t d, std::mt19937_64& rng) {
  init_linear(p, name + ".q", d, d, rng);
  init_linear(p, name + ".k", d, d, rng);
  init_linear(p, name + ".v", d, d, rng);
  init_linear(p, name + ".out", d, d, rng);
}

struct AttentionOutput {
  Tensor out;                    // [Tq, d]
  std::vector<Tensor> weights;   // one [Tq, Tk] row-stochastic matrix per head
};

/// softmax(QKᵀ/√d_k)V per head, heads concatenated then projected. `mask`
/// (row-major [Tq, Tk], 1 = attend) restricts each query's keys when given.
inline AttentionOutput attention(const ParamStore& p, const std::string& name, const Tensor& q_in, const Tensor& k_in,
                                 const Tensor& v_in, std::size_t heads, const std::vector<std::uint8_t>* mask = nullptr) {
  const std::size_t d = q_in.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ShapeError("attention", "model width " + std::to_string(d) + " not divisible by " + std::to_string(heads));
  const std::size_t dk = d / heads;
  const Tensor Q = apply_linear(p, name + ".q", q_in);
  const Tensor K = apply_linear(p, name + ".k", k_in);
  const Tensor V = apply_linear(p, name + ".v", v_in);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  AttentionOutput res;
  std::vector<Tensor> head_out;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? Q : slice(Q, 1, h * dk, dk);
    const Tensor kh = heads == 1 ? K : slice(K, 1, h * dk, dk);
    const Tensor vh = heads == 1 ? V : slice(V, 1, h * dk, dk);
    const Tensor scores = scale(matmul_nt(qh, kh), inv);
    Tensor w = mask ? masked_softmax(scores, *mask) : softmax(scores);
    head_out.push_back(matmul(w, vh));
    res.weights.push_back(std::move(w));
  }
  const Tensor merged = heads == 1 ? head_out[0] : concat(head_out, 1);
  res.out = apply_linear(p, name + ".out", merged);
  return res;
}

}  // namespace streamtrack::nn
