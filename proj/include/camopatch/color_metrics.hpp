#pragma once

// sRGB <-> CIELAB conversion, the CIEDE2000 colour difference and the
// raster-level perceptual colour (PerC) distance with its analytic gradient.

#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "camopatch/dual.hpp"
#include "camopatch/raster.hpp"

namespace camo::color {

template <typename T>
struct Rgb {
  T r{}, g{}, b{};
};
using RgbPixel = Rgb<double>;

template <typename T>
struct Lab {
  T L{}, a{}, b{};
};
using LabPixel = Lab<double>;

/// Reference white in XYZ (Y normalised to ~1).
struct WhitePoint {
  double X, Y, Z;
};

namespace detail {
// IEC 61966-2-1 linear-sRGB -> XYZ matrix.
inline constexpr std::array<std::array<double, 3>, 3> kRgbToXyz{{
    {0.4124564, 0.3575761, 0.1804375},
    {0.2126729, 0.7151522, 0.0721750},
    {0.0193339, 0.1191920, 0.9503041},
}};
inline constexpr double kEpsilon = 216.0 / 24389.0;
inline constexpr double kKappa = 24389.0 / 27.0;
}  // namespace detail

/// D65, 2 degree observer, taken as the row sums of the sRGB matrix so that
/// RGB white maps to a = b = 0 exactly.
inline constexpr WhitePoint kD65{
    detail::kRgbToXyz[0][0] + detail::kRgbToXyz[0][1] + detail::kRgbToXyz[0][2],
    detail::kRgbToXyz[1][0] + detail::kRgbToXyz[1][1] + detail::kRgbToXyz[1][2],
    detail::kRgbToXyz[2][0] + detail::kRgbToXyz[2][1] + detail::kRgbToXyz[2][2],
};

namespace detail {

// Extended sRGB decode: the linear toe is continued below zero so the
// optimiser can evaluate patches that have not been clipped yet.
template <typename T>
T srgb_decode(const T& channel_255) {
  using std::pow;
  const T v = channel_255 / 255.0;
  if (value_of(v) <= 0.04045) return v / 12.92;
  return pow((v + 0.055) / 1.055, 2.4);
}

inline double srgb_encode(double linear) {
  if (linear <= 0.0031308) return 12.92 * linear;
  return 1.055 * std::pow(linear, 1.0 / 2.4) - 0.055;
}

template <typename T>
T lab_f(const T& t) {
  using std::pow;
  if (value_of(t) > kEpsilon) return pow(t, 1.0 / 3.0);
  return (kKappa * t + 16.0) / 116.0;
}

inline double lab_f_inverse(double f) {
  const double f3 = f * f * f;
  return f3 > kEpsilon ? f3 : (116.0 * f - 16.0) / kKappa;
}

inline std::array<std::array<double, 3>, 3> invert3(const std::array<std::array<double, 3>, 3>& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  std::array<std::array<double, 3>, 3> r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

}  // namespace detail

/// sRGB (channels on the 0-255 scale, any finite value) to CIELAB. Generic
/// over the scalar so the same code path yields derivatives via Dual<N>.
template <typename T>
Lab<T> srgb_to_lab_unchecked(const Rgb<T>& px, const WhitePoint& white = kD65) {
  const T r = detail::srgb_decode(px.r);
  const T g = detail::srgb_decode(px.g);
  const T b = detail::srgb_decode(px.b);
  const auto& m = detail::kRgbToXyz;
  const T x = (m[0][0] * r + m[0][1] * g + m[0][2] * b) / white.X;
  const T y = (m[1][0] * r + m[1][1] * g + m[1][2] * b) / white.Y;
  const T z = (m[2][0] * r + m[2][1] * g + m[2][2] * b) / white.Z;
  const T fx = detail::lab_f(x);
  const T fy = detail::lab_f(y);
  const T fz = detail::lab_f(z);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

/// Checked conversion for in-range pixels.
inline LabPixel srgb_to_lab(const RgbPixel& px, const WhitePoint& white = kD65) {
  for (double c : {px.r, px.g, px.b})
    if (!std::isfinite(c) || c < 0.0 || c > 255.0)
      throw InvalidArgument("srgb_to_lab: channel outside [0, 255]: " + std::to_string(c));
  return srgb_to_lab_unchecked(px, white);
}

/// Inverse of srgb_to_lab_unchecked (continuous, no quantisation or clipping).
inline RgbPixel lab_to_srgb(const LabPixel& lab, const WhitePoint& white = kD65) {
  const double fy = (lab.L + 16.0) / 116.0;
  const double fx = fy + lab.a / 500.0;
  const double fz = fy - lab.b / 200.0;
  const double x = detail::lab_f_inverse(fx) * white.X;
  const double y = (lab.L > detail::kKappa * detail::kEpsilon ? fy * fy * fy : lab.L / detail::kKappa) *
                   white.Y;
  const double z = detail::lab_f_inverse(fz) * white.Z;
  static const auto inv = detail::invert3(detail::kRgbToXyz);
  const double lin[3] = {inv[0][0] * x + inv[0][1] * y + inv[0][2] * z,
                         inv[1][0] * x + inv[1][1] * y + inv[1][2] * z,
                         inv[2][0] * x + inv[2][1] * y + inv[2][2] * z};
  return {255.0 * detail::srgb_encode(lin[0]), 255.0 * detail::srgb_encode(lin[1]),
          255.0 * detail::srgb_encode(lin[2])};
}

/// Squared CIEDE2000 difference, kL = kC = kH = 1. Branches (hue wrap,
/// neutral colours) are decided on values, so derivative types follow the
/// evaluated branch.
template <typename T, typename U>
auto ciede2000_squared(const Lab<T>& p1, const Lab<U>& p2) {
  using R = decltype(T{} + U{});
  using std::atan2;
  using std::cos;
  using std::exp;
  using std::pow;
  using std::sin;
  using std::sqrt;
  constexpr double pi = std::numbers::pi;
  constexpr double deg = pi / 180.0;
  constexpr double k25_7 = 6103515625.0;  // 25^7

  const R L1 = p1.L, a1 = p1.a, b1 = p1.b;
  const R L2 = p2.L, a2 = p2.a, b2 = p2.b;

  const R c1 = sqrt(a1 * a1 + b1 * b1);
  const R c2 = sqrt(a2 * a2 + b2 * b2);
  const R c_bar = (c1 + c2) * 0.5;
  const R c_bar7 = pow(c_bar, 7.0);
  const R g = 0.5 * (1.0 - sqrt(c_bar7 / (c_bar7 + k25_7)));
  const R a1p = (1.0 + g) * a1;
  const R a2p = (1.0 + g) * a2;
  const R c1p = sqrt(a1p * a1p + b1 * b1);
  const R c2p = sqrt(a2p * a2p + b2 * b2);

  auto hue = [&](const R& b, const R& ap) {
    if (value_of(b) == 0.0 && value_of(ap) == 0.0) return R(0.0);
    R h = atan2(b, ap);
    if (value_of(h) < 0.0) h = h + 2.0 * pi;
    return h;
  };
  const R h1p = hue(b1, a1p);
  const R h2p = hue(b2, a2p);

  const R dLp = L2 - L1;
  const R dCp = c2p - c1p;
  const double c_product = value_of(c1p) * value_of(c2p);
  R dhp(0.0);
  if (c_product != 0.0) {
    dhp = h2p - h1p;
    if (value_of(dhp) > pi)
      dhp = dhp - 2.0 * pi;
    else if (value_of(dhp) < -pi)
      dhp = dhp + 2.0 * pi;
  }
  const R dHp = 2.0 * sqrt(c1p * c2p) * sin(dhp * 0.5);

  const R L_bar = (L1 + L2) * 0.5;
  const R c_bar_p = (c1p + c2p) * 0.5;
  R h_bar = h1p + h2p;
  if (c_product != 0.0) {
    const double diff = std::abs(value_of(h1p) - value_of(h2p));
    if (diff <= pi)
      h_bar = h_bar * 0.5;
    else if (value_of(h_bar) < 2.0 * pi)
      h_bar = (h_bar + 2.0 * pi) * 0.5;
    else
      h_bar = (h_bar - 2.0 * pi) * 0.5;
  }

  const R t = 1.0 - 0.17 * cos(h_bar - 30.0 * deg) + 0.24 * cos(2.0 * h_bar) +
              0.32 * cos(3.0 * h_bar + 6.0 * deg) - 0.20 * cos(4.0 * h_bar - 63.0 * deg);
  const R hz = (h_bar - 275.0 * deg) / (25.0 * deg);
  const R d_theta = 30.0 * deg * exp(-(hz * hz));
  const R c_bar_p7 = pow(c_bar_p, 7.0);
  const R r_c = 2.0 * sqrt(c_bar_p7 / (c_bar_p7 + k25_7));
  const R lz = (L_bar - 50.0) * (L_bar - 50.0);
  const R s_l = 1.0 + 0.015 * lz / sqrt(20.0 + lz);
  const R s_c = 1.0 + 0.045 * c_bar_p;
  const R s_h = 1.0 + 0.015 * c_bar_p * t;
  const R r_t = -sin(2.0 * d_theta) * r_c;

  const R tl = dLp / s_l;
  const R tc = dCp / s_c;
  const R th = dHp / s_h;
  return tl * tl + tc * tc + th * th + r_t * tc * th;
}

/// CIEDE2000 colour difference (kL = kC = kH = 1).
inline double ciede2000(const LabPixel& p1, const LabPixel& p2) {
  // Rounding can leave the quadratic form a hair below zero for identical
  // inputs with non-zero rotation terms.
  return std::sqrt(std::max(0.0, ciede2000_squared(p1, p2)));
}

/// Perceptual colour distance between two rasters: the L2 norm over pixels
/// of the per-pixel CIEDE2000 values.
inline double perc_distance(const RgbRaster& patch, const RgbRaster& segment) {
  require_same_shape(patch, segment, "perc_distance");
  double sum = 0.0;
  const auto p = patch.data();
  const auto s = segment.data();
  for (std::size_t i = 0; i < p.size(); i += 3) {
    const auto lp = srgb_to_lab_unchecked(RgbPixel{p[i], p[i + 1], p[i + 2]});
    const auto ls = srgb_to_lab_unchecked(RgbPixel{s[i], s[i + 1], s[i + 2]});
    sum += std::max(0.0, ciede2000_squared(lp, ls));
  }
  return std::sqrt(sum);
}

struct PercEvaluation {
  double distance = 0.0;
  RgbRaster gradient;  ///< d distance / d patch, same shape as the patch
};

/// Distance and its gradient with respect to the patch channels. Uses
/// d||e|| = (1 / 2||e||) * sum d(e_i^2), which stays smooth where individual
/// pixels already match. Zero raster at the global minimum.
inline PercEvaluation perc_distance_and_gradient(const RgbRaster& patch, const RgbRaster& segment) {
  require_same_shape(patch, segment, "perc_gradient");
  using D = Dual<3>;
  PercEvaluation out{0.0, RgbRaster(patch.height(), patch.width())};
  const auto p = patch.data();
  const auto s = segment.data();
  auto g = out.gradient.data();
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); i += 3) {
    // Matching pixels contribute nothing and sit at a stationary point.
    if (p[i] == s[i] && p[i + 1] == s[i + 1] && p[i + 2] == s[i + 2]) continue;
    const Rgb<D> px{D::variable(p[i], 0), D::variable(p[i + 1], 1), D::variable(p[i + 2], 2)};
    const auto lp = srgb_to_lab_unchecked(px);
    const auto ls = srgb_to_lab_unchecked(RgbPixel{s[i], s[i + 1], s[i + 2]});
    const D e2 = ciede2000_squared(lp, ls);
    sum += std::max(0.0, e2.v);
    g[i] = e2.d[0];
    g[i + 1] = e2.d[1];
    g[i + 2] = e2.d[2];
  }
  out.distance = std::sqrt(sum);
  const double scale = out.distance > 0.0 ? 0.5 / out.distance : 0.0;
  for (double& x : g) x *= scale;
  return out;
}

inline RgbRaster perc_gradient(const RgbRaster& patch, const RgbRaster& segment) {
  return perc_distance_and_gradient(patch, segment).gradient;
}

}  // namespace camo::color
