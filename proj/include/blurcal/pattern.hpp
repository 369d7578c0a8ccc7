#pragma once

// Star (16-sector) and checkerboard calibration patterns in pattern space, hard and
// sigmoid-smoothed, plus rasterization under a homography.
//
// Pattern space: cells of period 2 centred on even-integer lattice points. Pixel
// centres sit at integer pixel coordinates.

#include "blurcal/geometry.hpp"
#include "blurcal/image.hpp"

#include <cmath>
#include <numbers>

namespace blurcal {

enum class PatternKind { star16, checkerboard };

enum class RenderMode {
  soft,         // sigmoid pattern sampled at pixel centres (differentiable model)
  hard,         // hard pattern sampled at pixel centres
  antialiased,  // hard pattern, 4x4 supersampled box filter (ground-truth synthesis)
};

struct PatternSpec {
  PatternKind kind{PatternKind::star16};
  double beta{25.0};
  /// Width (pattern units) of the linear blend across star cell borders in the soft model.
  /// Neighbouring cells disagree on sector parity along their shared border, so with 0 the
  /// soft star jumps there.
  double seam_width{0.0};
};

struct CellCoords {
  double u{0.0};
  double v{0.0};
  double cx{0.0};
  double cy{0.0};
};

// std::nearbyint under the default FE_TONEAREST mode rounds half to even.
inline CellCoords cell_local(const Vec2& q) {
  CellCoords c;
  c.cx = 2.0 * std::nearbyint(q.x() / 2.0);
  c.cy = 2.0 * std::nearbyint(q.y() / 2.0);
  c.u = q.x() - c.cx;
  c.v = q.y() - c.cy;
  return c;
}

inline double wrapped_angle(double u, double v) {
  double theta = std::atan2(v, u);
  if (theta < 0.0) theta += 2.0 * std::numbers::pi;
  return theta;
}

/// 0 for even (black) sectors, 1 for odd (white) sectors, 0.5 at the singular centre.
inline double star_hard(double u, double v) {
  if (u == 0.0 && v == 0.0) return 0.5;
  const double theta = wrapped_angle(u, v);
  const int s = static_cast<int>(std::floor(8.0 * theta / std::numbers::pi)) % 16;
  return static_cast<double>(s % 2);
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double star_soft(double u, double v, double beta) {
  if (u == 0.0 && v == 0.0) return 0.5;
  return sigmoid(-beta * std::sin(8.0 * std::atan2(v, u)));
}

/// Soft star value with its gradient w.r.t. the cell-local coordinates.
struct SoftSample {
  double value{0.5};
  double d_du{0.0};
  double d_dv{0.0};
};

inline SoftSample star_soft_with_grad(double u, double v, double beta) {
  const double r2 = u * u + v * v;
  if (r2 == 0.0) return {};
  const double theta = std::atan2(v, u);
  const double s = std::sin(8.0 * theta);
  const double p = sigmoid(-beta * s);
  // dP/dtheta = -8 beta cos(8 theta) sigma'(-beta sin 8 theta), sigma' = p (1 - p)
  const double dp_dtheta = -8.0 * beta * std::cos(8.0 * theta) * p * (1.0 - p);
  return {p, dp_dtheta * (-v / r2), dp_dtheta * (u / r2)};
}

namespace detail {

struct SeamWeight {
  double own{1.0};
  double d_own{0.0};  // derivative w.r.t. the cell-local coordinate
  int step{0};        // direction of the neighbouring cell, 0 when outside the blend band
};

inline SeamWeight seam_weight(double t, double width) {
  const double edge = 1.0 - std::abs(t);
  if (width <= 0.0 || edge >= 0.5 * width) return {};
  const double sign = t >= 0.0 ? 1.0 : -1.0;
  return {0.5 + edge / width, -sign / width, t >= 0.0 ? 1 : -1};
}

}  // namespace detail

/// Soft star at pattern point q with its gradient w.r.t. q, blended across cell borders
/// over `seam_width`.
inline SoftSample star_soft_at(const Vec2& q, double beta, double seam_width) {
  const CellCoords c = cell_local(q);
  const detail::SeamWeight wx = detail::seam_weight(c.u, seam_width);
  const detail::SeamWeight wy = detail::seam_weight(c.v, seam_width);
  if (wx.step == 0 && wy.step == 0) return star_soft_with_grad(c.u, c.v, beta);
  SoftSample out{0.0, 0.0, 0.0};
  for (int a = 0; a < (wx.step != 0 ? 2 : 1); ++a)
    for (int b = 0; b < (wy.step != 0 ? 2 : 1); ++b) {
      const double fx = a == 0 ? wx.own : 1.0 - wx.own;
      const double dfx = a == 0 ? wx.d_own : -wx.d_own;
      const double fy = b == 0 ? wy.own : 1.0 - wy.own;
      const double dfy = b == 0 ? wy.d_own : -wy.d_own;
      const SoftSample s = star_soft_with_grad(c.u - 2.0 * a * wx.step, c.v - 2.0 * b * wy.step, beta);
      out.value += fx * fy * s.value;
      out.d_du += fx * fy * s.d_du + dfx * fy * s.value;
      out.d_dv += fx * fy * s.d_dv + fx * dfy * s.value;
    }
  return out;
}

inline double checkerboard_hard(const Vec2& q) {
  const long long s = static_cast<long long>(std::floor(q.x())) + static_cast<long long>(std::floor(q.y()));
  return static_cast<double>(((s % 2) + 2) % 2);
}

inline double checkerboard_soft(const Vec2& q, double beta) {
  return sigmoid(-beta * std::sin(std::numbers::pi * q.x()) * std::sin(std::numbers::pi * q.y()));
}

inline double pattern_value(const PatternSpec& spec, const Vec2& q, bool soft) {
  if (spec.kind == PatternKind::checkerboard) return soft ? checkerboard_soft(q, spec.beta) : checkerboard_hard(q);
  if (soft) return star_soft_at(q, spec.beta, spec.seam_width).value;
  const CellCoords c = cell_local(q);
  return star_hard(c.u, c.v);
}

namespace detail {

inline Vec2 dehomogenize(const Mat3& m, double x, double y) {
  const double w = m(2, 0) * x + m(2, 1) * y + m(2, 2);
  return {(m(0, 0) * x + m(0, 1) * y + m(0, 2)) / w, (m(1, 0) * x + m(1, 1) * y + m(1, 2)) / w};
}

}  // namespace detail

/// Length in pattern units of one pixel near pattern point q (geometric mean of the two axes).
inline double pattern_units_per_pixel(const Homography& h, const Vec2& q = Vec2::Zero()) {
  const Mat3& m = h.matrix();
  const double w = m(2, 0) * q.x() + m(2, 1) * q.y() + m(2, 2);
  const Vec2 p = apply(h, q);
  Eigen::Matrix2d j;
  for (int c = 0; c < 2; ++c) {
    j(0, c) = (m(0, c) - p.x() * m(2, c)) / w;
    j(1, c) = (m(1, c) - p.y() * m(2, c)) / w;
  }
  const double det = std::abs(j.determinant());
  if (!(det > 0.0)) throw GeometryError(GeometryError::Kind::singular_homography, "degenerate local scale");
  return 1.0 / std::sqrt(det);
}

/// Rasterizes the pattern seen through H (pattern -> pixel) over a pixel window.
inline GrayImage render(const PatternSpec& spec, const Homography& h, const PixelRect& window,
                        RenderMode mode = RenderMode::soft) {
  const Mat3 inv = h.inverse().matrix();
  GrayImage out(window.width, window.height);
  constexpr int ss = 4;
  for (int y = 0; y < window.height; ++y) {
    for (int x = 0; x < window.width; ++x) {
      const double px = window.x0 + x;
      const double py = window.y0 + y;
      double value = 0.0;
      if (mode == RenderMode::antialiased) {
        for (int j = 0; j < ss; ++j)
          for (int i = 0; i < ss; ++i) {
            const double ox = (i + 0.5) / ss - 0.5;
            const double oy = (j + 0.5) / ss - 0.5;
            value += pattern_value(spec, detail::dehomogenize(inv, px + ox, py + oy), false);
          }
        value /= ss * ss;
      } else {
        value = pattern_value(spec, detail::dehomogenize(inv, px, py), mode == RenderMode::soft);
      }
      out.at(x, y) = value;
    }
  }
  return out;
}

}  // namespace blurcal
