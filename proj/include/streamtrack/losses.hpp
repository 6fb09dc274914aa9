#pragma once

// Loss primitives shared by the encoder and decoder heads.

#include <array>
#include <vector>

#include "streamtrack/dual.hpp"
#include "streamtrack/geom.hpp"
#include "streamtrack/tensor.hpp"

namespace streamtrack {

/// Mean binary cross-entropy between logits and {0,1} (or soft) targets.
inline Tensor bce_with_logits(const Tensor& logits, const std::vector<double>& targets) {
  if (targets.size() != logits.numel())
    throw ShapeError("bce_with_logits", logits.shape(), Shape{targets.size()});
  const Tensor y(logits.shape(), targets);
  const Tensor one_minus_y(logits.shape(), [&] {
    std::vector<double> v(targets.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 - targets[i];
    return v;
  }());
  const Tensor ll = add(mul(log_sigmoid(logits), y), mul(log_sigmoid(neg(logits)), one_minus_y));
  return neg(mean(ll));
}

/// Summed sigmoid focal loss with binary targets:
/// −α(1−p)^γ log p for positives, −(1−α)p^γ log(1−p) for negatives.
inline Tensor focal_loss(const Tensor& logits, const std::vector<double>& targets, double alpha = 0.25,
                         double gamma = 2.0) {
  if (targets.size() != logits.numel()) throw ShapeError("focal_loss", logits.shape(), Shape{targets.size()});
  std::vector<double> wpos(targets.size()), wneg(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    wpos[i] = -alpha * targets[i];
    wneg[i] = -(1.0 - alpha) * (1.0 - targets[i]);
  }
  const Tensor p = sigmoid(logits);
  const Tensor q = sigmoid(neg(logits));
  auto power = [gamma](const Tensor& x) {
    if (gamma == 2.0) return mul(x, x);
    return exp(scale(log(x), gamma));
  };
  const Tensor pos = mul(mul(power(q), log_sigmoid(logits)), Tensor(logits.shape(), wpos));
  const Tensor negt = mul(mul(power(p), log_sigmoid(neg(logits))), Tensor(logits.shape(), wneg));
  return sum(add(pos, negt));
}

/// GIoU between a predicted box (center [3], heading [1], fixed size) and a
/// constant target, differentiable in center and heading.
inline Tensor giou_op(const Tensor& center, const Tensor& heading, const Vec3& size, const Box3D& target) {
  if (center.numel() != 3 || heading.numel() != 1) throw ShapeError("giou_op", center.shape(), heading.shape());
  using D = Dual<4>;
  const BoxT<D> pred{D::variable(center.at(0), 0), D::variable(center.at(1), 1), D::variable(center.at(2), 2),
                     size.x, size.y, size.z, D::variable(heading.at(0), 3)};
  const BoxT<D> gt{D(target.center.x), D(target.center.y), D(target.center.z), target.size.x, target.size.y,
                   target.size.z, D(target.heading)};
  const D g = box_overlap(pred, gt).giou;
  const std::array<double, 4> grad = g.d;
  return detail::make_op("giou", {1}, {g.v}, {center, heading}, [grad](detail::Node& self) {
    const double go = self.grad[0];
    if (double* gc = detail::grad_of(self, 0))
      for (int i = 0; i < 3; ++i) gc[i] += go * grad[static_cast<std::size_t>(i)];
    if (double* gh = detail::grad_of(self, 1)) gh[0] += go * grad[3];
  });
}

}  // namespace streamtrack
