#pragma once

// Point and oriented-box geometry: canonical frames, containment, box-aware
// distances, rotated 3D IoU/GIoU, farthest point sampling and ball query.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "streamtrack/dual.hpp"

namespace streamtrack {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
  friend Vec3 operator+(Vec3 a, const Vec3& b) { return a += b; }
  friend Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(const Vec3& a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double distance(const Vec3& a, const Vec3& b) { return norm(a - b); }
inline double squared_distance(const Vec3& a, const Vec3& b) {
  const Vec3 d = a - b;
  return dot(d, d);
}

/// Point cloud in meters, one row per point.
using PointSet = std::vector<Vec3>;

/// Maps an angle into (−π, π].
inline double wrap_angle(double a) {
  constexpr double pi = std::numbers::pi;
  a = std::fmod(a, 2.0 * pi);
  if (a <= -pi) a += 2.0 * pi;
  if (a > pi) a -= 2.0 * pi;
  return a;
}

/// Oriented box. size = extents along the box-local x, y, z axes; heading rotates
/// the local x axis about world z.
struct Box3D {
  Vec3 center;
  Vec3 size{1.0, 1.0, 1.0};
  double heading = 0.0;

  void validate() const {
    if (!(size.x > 0.0 && size.y > 0.0 && size.z > 0.0))
      throw std::invalid_argument("Box3D: size components must be positive");
    if (!(heading > -std::numbers::pi && heading <= std::numbers::pi))
      throw std::invalid_argument("Box3D: heading " + std::to_string(heading) + " outside (-pi, pi]");
    if (!std::isfinite(center.x) || !std::isfinite(center.y) || !std::isfinite(center.z))
      throw std::invalid_argument("Box3D: non-finite center");
  }
  double volume() const { return size.x * size.y * size.z; }
  friend bool operator==(const Box3D&, const Box3D&) = default;
};

/// Rotation about z followed by translation: p ↦ R(yaw)·p + t.
struct RigidTransform {
  double yaw = 0.0;
  Vec3 translation;

  Vec3 apply(const Vec3& p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {c * p.x - s * p.y + translation.x, s * p.x + c * p.y + translation.y, p.z + translation.z};
  }
  Vec3 rotate(const Vec3& p) const {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {c * p.x - s * p.y, s * p.x + c * p.y, p.z};
  }
  RigidTransform inverse() const {
    RigidTransform inv{-yaw, {}};
    const Vec3 r = inv.rotate(translation);
    inv.translation = {-r.x, -r.y, -r.z};
    return inv;
  }
  /// (*this ∘ other)(p) = this->apply(other.apply(p)).
  RigidTransform compose(const RigidTransform& other) const {
    return {yaw + other.yaw, apply(other.translation)};
  }
  Box3D apply(const Box3D& b) const { return {apply(b.center), b.size, wrap_angle(b.heading + yaw)}; }
  PointSet apply(const PointSet& pts) const {
    PointSet out;
    out.reserve(pts.size());
    const double c = std::cos(yaw), s = std::sin(yaw);
    for (const auto& p : pts)
      out.push_back({c * p.x - s * p.y + translation.x, s * p.x + c * p.y + translation.y, p.z + translation.z});
    return out;
  }
};

/// The transform taking world coordinates into `ref`'s canonical frame
/// (ref center at the origin, ref heading along +x).
inline RigidTransform canonical_transform(const Box3D& ref) {
  return RigidTransform{ref.heading, ref.center}.inverse();
}

/// p ↦ R(−h)·(p − c). Computed directly rather than through inverse() so that
/// the pure-translation case is exactly p − c.
inline Vec3 canonicalize(const Vec3& p, const Box3D& ref) {
  const double c = std::cos(ref.heading), s = std::sin(ref.heading);
  const Vec3 d = p - ref.center;
  return {c * d.x + s * d.y, -s * d.x + c * d.y, d.z};
}

inline PointSet canonicalize(const PointSet& pts, const Box3D& ref) {
  PointSet out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(canonicalize(p, ref));
  return out;
}

inline Vec3 decanonicalize(const Vec3& p, const Box3D& ref) {
  const double c = std::cos(ref.heading), s = std::sin(ref.heading);
  return {c * p.x - s * p.y + ref.center.x, s * p.x + c * p.y + ref.center.y, p.z + ref.center.z};
}

inline PointSet decanonicalize(const PointSet& pts, const Box3D& ref) {
  PointSet out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(decanonicalize(p, ref));
  return out;
}

inline Box3D canonicalize(const Box3D& b, const Box3D& ref) {
  return {canonicalize(b.center, ref), b.size, wrap_angle(b.heading - ref.heading)};
}

inline Box3D decanonicalize(const Box3D& b, const Box3D& ref) {
  return {decanonicalize(b.center, ref), b.size, wrap_angle(b.heading + ref.heading)};
}

/// Inclusive containment test in the box frame.
inline bool point_in_box(const Vec3& p, const Box3D& box) {
  const Vec3 q = canonicalize(p, box);
  return std::abs(q.x) <= 0.5 * box.size.x && std::abs(q.y) <= 0.5 * box.size.y && std::abs(q.z) <= 0.5 * box.size.z;
}

/// The 8 corners in the box frame order (±w/2, ±l/2, ±h/2), signs enumerated
/// lexicographically with + before − : (+,+,+), (+,+,−), (+,−,+), ..., (−,−,−).
inline std::array<Vec3, 8> box_corners(const Box3D& box) {
  std::array<Vec3, 8> out;
  const Vec3 h = box.size * 0.5;
  for (int k = 0; k < 8; ++k) {
    const double sx = (k & 4) ? -1.0 : 1.0;
    const double sy = (k & 2) ? -1.0 : 1.0;
    const double sz = (k & 1) ? -1.0 : 1.0;
    out[static_cast<std::size_t>(k)] = decanonicalize(Vec3{sx * h.x, sy * h.y, sz * h.z}, box);
  }
  return out;
}

/// Distance to the center followed by distances to the 8 corners in box_corners order.
using BoxDistances = std::array<double, 9>;

inline BoxDistances box_aware_distances(const Vec3& p, const Box3D& box) {
  BoxDistances d{};
  d[0] = distance(p, box.center);
  const auto corners = box_corners(box);
  for (std::size_t k = 0; k < 8; ++k) d[k + 1] = distance(p, corners[k]);
  return d;
}

inline std::vector<BoxDistances> box_aware_distances(const PointSet& pts, const Box3D& box) {
  std::vector<BoxDistances> out;
  out.reserve(pts.size());
  const auto corners = box_corners(box);
  for (const auto& p : pts) {
    BoxDistances d{};
    d[0] = distance(p, box.center);
    for (std::size_t k = 0; k < 8; ++k) d[k + 1] = distance(p, corners[k]);
    out.push_back(d);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotated 3D overlap. Written over a scalar type T so the same code yields
// values (T = double) and exact derivatives (T = Dual<N>).

template <class T>
struct BoxT {
  T cx, cy, cz;
  double w, l, h;
  T heading;
};

template <class T>
struct Overlap {
  T iou;
  T giou;
  T intersection;
  T union_volume;
  T enclosing_volume;
};

namespace detail {

template <class T>
struct P2 {
  T x, y;
};

// Footprint corners in counter-clockwise order.
template <class T>
std::array<P2<T>, 4> footprint(const BoxT<T>& b) {
  using std::cos;
  using std::sin;
  const T c = cos(b.heading), s = sin(b.heading);
  const double hw = 0.5 * b.w, hl = 0.5 * b.l;
  const double lx[4] = {hw, -hw, -hw, hw};
  const double ly[4] = {hl, hl, -hl, -hl};
  std::array<P2<T>, 4> out;
  for (int k = 0; k < 4; ++k) out[k] = {b.cx + c * lx[k] - s * ly[k], b.cy + s * lx[k] + c * ly[k]};
  return out;
}

// Sutherland–Hodgman clip of a convex polygon against a convex CCW polygon.
template <class T>
std::vector<P2<T>> clip_convex(std::vector<P2<T>> subject, const std::array<P2<T>, 4>& clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const P2<T>& a = clip[e];
    const P2<T>& b = clip[(e + 1) % clip.size()];
    const T ex = b.x - a.x, ey = b.y - a.y;
    auto side = [&](const P2<T>& p) { return ex * (p.y - a.y) - ey * (p.x - a.x); };
    std::vector<P2<T>> out;
    out.reserve(subject.size() + 2);
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const P2<T>& cur = subject[i];
      const P2<T>& prev = subject[(i + subject.size() - 1) % subject.size()];
      const T dc = side(cur), dp = side(prev);
      const bool cin = value_of(dc) >= 0.0, pin = value_of(dp) >= 0.0;
      if (cin != pin) {
        const T t = dp / (dp - dc);
        out.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
      if (cin) out.push_back(cur);
    }
    subject = std::move(out);
  }
  return subject;
}

template <class T>
T polygon_area(const std::vector<P2<T>>& poly) {
  if (poly.size() < 3) return T(0.0);
  T a(0.0);
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const auto& p = poly[i];
    const auto& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  a = a * 0.5;
  return value_of(a) < 0.0 ? -a : a;
}

template <class T>
T tmax(const T& a, const T& b) { return value_of(a) >= value_of(b) ? a : b; }
template <class T>
T tmin(const T& a, const T& b) { return value_of(a) <= value_of(b) ? a : b; }

}  // namespace detail

/// IoU and GIoU of two oriented boxes. The intersection is the footprint
/// polygon-clip area times the vertical overlap. The GIoU enclosing region is
/// the smallest box aligned with the bisector of the two headings (taken
/// modulo π) that contains both; for two heading-0 boxes this is the
/// axis-aligned enclosing box. Exactly identical boxes return (1, 1).
template <class T>
Overlap<T> box_overlap(const BoxT<T>& a, const BoxT<T>& b) {
  using std::cos;
  using std::sin;
  const double va = a.w * a.l * a.h, vb = b.w * b.l * b.h;
  if (value_of(a.cx) == value_of(b.cx) && value_of(a.cy) == value_of(b.cy) && value_of(a.cz) == value_of(b.cz) &&
      value_of(a.heading) == value_of(b.heading) && a.w == b.w && a.l == b.l && a.h == b.h) {
    return {T(1.0), T(1.0), T(va), T(va), T(va)};
  }
  const auto fa = detail::footprint(a);
  const auto fb = detail::footprint(b);
  const auto poly = detail::clip_convex(std::vector<detail::P2<T>>(fa.begin(), fa.end()), fb);
  const T area = detail::polygon_area(poly);

  const T za0 = a.cz - 0.5 * a.h, za1 = a.cz + 0.5 * a.h;
  const T zb0 = b.cz - 0.5 * b.h, zb1 = b.cz + 0.5 * b.h;
  T zov = detail::tmin(za1, zb1) - detail::tmax(za0, zb0);
  if (value_of(zov) < 0.0) zov = T(0.0);
  T inter = area * zov;
  if (value_of(area) <= 0.0) inter = T(0.0);
  const T uni = T(va + vb) - inter;
  const T iou = inter / uni;

  // Enclosing box aligned with the heading bisector.
  constexpr double pi = std::numbers::pi;
  double delta = std::fmod(value_of(b.heading) - value_of(a.heading), pi);
  if (delta <= -0.5 * pi) delta += pi;
  if (delta > 0.5 * pi) delta -= pi;
  // mid = a.heading + (wrapped difference)/2, keeping derivatives of both headings.
  const double shift = delta - (value_of(b.heading) - value_of(a.heading));
  const T mid = a.heading + (b.heading - a.heading + shift) * 0.5;
  const T ux = cos(mid), uy = sin(mid);
  T umin = T(std::numeric_limits<double>::infinity()), umax = T(-std::numeric_limits<double>::infinity());
  T vmin = umin, vmax = umax;
  bool first = true;
  for (const auto* f : {&fa, &fb})
    for (const auto& p : *f) {
      const T u = p.x * ux + p.y * uy;
      const T v = -p.x * uy + p.y * ux;
      if (first) {
        umin = umax = u;
        vmin = vmax = v;
        first = false;
      } else {
        umin = detail::tmin(umin, u);
        umax = detail::tmax(umax, u);
        vmin = detail::tmin(vmin, v);
        vmax = detail::tmax(vmax, v);
      }
    }
  const T zext = detail::tmax(za1, zb1) - detail::tmin(za0, zb0);
  const T encl = (umax - umin) * (vmax - vmin) * zext;
  const T giou = iou - (encl - uni) / encl;
  return {iou, giou, inter, uni, encl};
}

inline BoxT<double> to_boxt(const Box3D& b) {
  return {b.center.x, b.center.y, b.center.z, b.size.x, b.size.y, b.size.z, b.heading};
}

inline Overlap<double> giou_3d(const Box3D& a, const Box3D& b) { return box_overlap(to_boxt(a), to_boxt(b)); }
inline double iou_3d(const Box3D& a, const Box3D& b) { return giou_3d(a, b).iou; }

// ---------------------------------------------------------------------------
// Sampling and neighborhoods.

/// Greedy max-min selection of k indices starting at `start`; ties go to the lowest index.
inline std::vector<std::size_t> farthest_point_sample(const PointSet& pts, std::size_t k, std::size_t start = 0) {
  if (k > pts.size())
    throw std::invalid_argument("farthest_point_sample: k=" + std::to_string(k) + " exceeds N=" +
                                std::to_string(pts.size()));
  if (k == 0) return {};
  if (start >= pts.size()) throw std::invalid_argument("farthest_point_sample: start index out of range");
  std::vector<std::size_t> out;
  out.reserve(k);
  std::vector<double> mind(pts.size(), std::numeric_limits<double>::infinity());
  std::vector<char> taken(pts.size(), 0);
  std::size_t cur = start;
  for (std::size_t s = 0; s < k; ++s) {
    out.push_back(cur);
    taken[cur] = 1;
    std::size_t best = pts.size();
    double bestd = -1.0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double d = squared_distance(pts[i], pts[cur]);
      if (d < mind[i]) mind[i] = d;
      if (!taken[i] && mind[i] > bestd) {
        bestd = mind[i];
        best = i;
      }
    }
    cur = best;
  }
  return out;
}

/// For each center: indices with distance < radius, nearest first (ties by index),
/// truncated to cap. An empty neighborhood falls back to the single nearest point.
inline std::vector<std::vector<std::size_t>> ball_query(const PointSet& pts, const PointSet& centers, double radius,
                                                        std::size_t cap) {
  if (!(radius > 0.0)) throw std::invalid_argument("ball_query: radius must be positive");
  if (cap < 1) throw std::invalid_argument("ball_query: cap must be >= 1");
  if (pts.empty()) throw std::invalid_argument("ball_query: empty point set");
  const double r2 = radius * radius;
  std::vector<std::vector<std::size_t>> out(centers.size());
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    cand.clear();
    double nearest_d = std::numeric_limits<double>::infinity();
    std::size_t nearest = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const double d = squared_distance(pts[i], centers[c]);
      if (d < r2) cand.emplace_back(d, i);
      if (d < nearest_d) {
        nearest_d = d;
        nearest = i;
      }
    }
    if (cand.empty()) {
      out[c] = {nearest};
      continue;
    }
    const std::size_t keep = std::min(cap, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end());
    out[c].reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out[c].push_back(cand[i].second);
  }
  return out;
}

}  // namespace streamtrack
