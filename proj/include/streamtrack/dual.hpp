#pragma once

// Forward-mode dual numbers with N tangent directions. Used to differentiate
// geometric kernels (rotated box overlap) that are written once as templates.

#include <array>
#include <cmath>
#include <cstddef>

namespace streamtrack {

template <std::size_t N>
struct Dual {
  double v = 0.0;
  std::array<double, N> d{};

  Dual() = default;
  Dual(double value) : v(value) {}  // NOLINT: constants promote implicitly

  static Dual variable(double value, std::size_t i) {
    Dual x(value);
    x.d[i] = 1.0;
    return x;
  }

  Dual& operator+=(const Dual& o) {
    v += o.v;
    for (std::size_t i = 0; i < N; ++i) d[i] += o.d[i];
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    for (std::size_t i = 0; i < N; ++i) d[i] -= o.d[i];
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    for (std::size_t i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    const double inv = 1.0 / o.v;
    for (std::size_t i = 0; i < N; ++i) d[i] = (d[i] * o.v - v * o.d[i]) * inv * inv;
    v *= inv;
    return *this;
  }
};

template <std::size_t N> Dual<N> operator+(Dual<N> a, const Dual<N>& b) { return a += b; }
template <std::size_t N> Dual<N> operator-(Dual<N> a, const Dual<N>& b) { return a -= b; }
template <std::size_t N> Dual<N> operator*(Dual<N> a, const Dual<N>& b) { return a *= b; }
template <std::size_t N> Dual<N> operator/(Dual<N> a, const Dual<N>& b) { return a /= b; }
template <std::size_t N> Dual<N> operator+(Dual<N> a, double b) { a.v += b; return a; }
template <std::size_t N> Dual<N> operator+(double b, Dual<N> a) { a.v += b; return a; }
template <std::size_t N> Dual<N> operator-(Dual<N> a, double b) { a.v -= b; return a; }
template <std::size_t N> Dual<N> operator-(double b, const Dual<N>& a) { return Dual<N>(b) - a; }
template <std::size_t N>
Dual<N> operator*(Dual<N> a, double b) {
  a.v *= b;
  for (auto& x : a.d) x *= b;
  return a;
}
template <std::size_t N> Dual<N> operator*(double b, Dual<N> a) { return a * b; }
template <std::size_t N> Dual<N> operator/(Dual<N> a, double b) { return a * (1.0 / b); }
template <std::size_t N> Dual<N> operator/(double b, const Dual<N>& a) { return Dual<N>(b) / a; }
template <std::size_t N> Dual<N> operator-(Dual<N> a) { return a * -1.0; }

template <std::size_t N> bool operator<(const Dual<N>& a, const Dual<N>& b) { return a.v < b.v; }
template <std::size_t N> bool operator>(const Dual<N>& a, const Dual<N>& b) { return a.v > b.v; }
template <std::size_t N> bool operator<=(const Dual<N>& a, const Dual<N>& b) { return a.v <= b.v; }
template <std::size_t N> bool operator>=(const Dual<N>& a, const Dual<N>& b) { return a.v >= b.v; }
template <std::size_t N> bool operator<(const Dual<N>& a, double b) { return a.v < b; }
template <std::size_t N> bool operator>(const Dual<N>& a, double b) { return a.v > b; }
template <std::size_t N> bool operator<=(const Dual<N>& a, double b) { return a.v <= b; }
template <std::size_t N> bool operator>=(const Dual<N>& a, double b) { return a.v >= b; }

template <std::size_t N>
Dual<N> sin(const Dual<N>& a) {
  Dual<N> r(std::sin(a.v));
  const double c = std::cos(a.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = c * a.d[i];
  return r;
}
template <std::size_t N>
Dual<N> cos(const Dual<N>& a) {
  Dual<N> r(std::cos(a.v));
  const double s = -std::sin(a.v);
  for (std::size_t i = 0; i < N; ++i) r.d[i] = s * a.d[i];
  return r;
}
template <std::size_t N>
Dual<N> sqrt(const Dual<N>& a) {
  Dual<N> r(std::sqrt(a.v));
  const double k = r.v > 0.0 ? 0.5 / r.v : 0.0;
  for (std::size_t i = 0; i < N; ++i) r.d[i] = k * a.d[i];
  return r;
}
template <std::size_t N>
Dual<N> abs(const Dual<N>& a) {
  return a.v < 0.0 ? -a : a;
}

inline double value_of(double x) { return x; }
template <std::size_t N> double value_of(const Dual<N>& x) { return x.v; }

}  // namespace streamtrack
