#include "blurcal/pattern.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace blurcal;

TEST(Pattern, StarHasSixteenAlternatingSectors) {
  for (int s = 0; s < 16; ++s) {
    const double a = (s + 0.5) * std::numbers::pi / 8.0;
    EXPECT_EQ(star_hard(0.5 * std::cos(a), 0.5 * std::sin(a)), static_cast<double>(s % 2)) << "sector " << s;
  }
  EXPECT_EQ(star_hard(0.0, 0.0), 0.5);
}

TEST(Pattern, SoftStarApproachesHardAwayFromEdges) {
  for (int s = 0; s < 16; ++s) {
    const double a = (s + 0.5) * std::numbers::pi / 8.0;
    const double u = 0.6 * std::cos(a);
    const double v = 0.6 * std::sin(a);
    EXPECT_NEAR(star_soft(u, v, 200.0), star_hard(u, v), 1e-12);
  }
}

TEST(Pattern, SoftStarIsHalfOnSectorEdges) {
  for (int s = 0; s < 16; ++s) {
    const double a = s * std::numbers::pi / 8.0;
    EXPECT_NEAR(star_soft(std::cos(a), std::sin(a), 25.0), 0.5, 1e-12);
  }
}

TEST(Pattern, SoftStarGradientMatchesFiniteDifferences) {
  const double h = 1e-6;
  for (double beta : {10.0, 25.0, 50.0})
    for (double u : {-0.7, -0.2, 0.31, 0.8})
      for (double v : {-0.6, 0.05, 0.45}) {
        const SoftSample s = star_soft_with_grad(u, v, beta);
        const double du = (star_soft(u + h, v, beta) - star_soft(u - h, v, beta)) / (2 * h);
        const double dv = (star_soft(u, v + h, beta) - star_soft(u, v - h, beta)) / (2 * h);
        EXPECT_NEAR(s.value, star_soft(u, v, beta), 1e-15);
        EXPECT_NEAR(s.d_du, du, 1e-5 * std::max(1.0, std::abs(du)));
        EXPECT_NEAR(s.d_dv, dv, 1e-5 * std::max(1.0, std::abs(dv)));
      }
}

TEST(Pattern, SeamBlendGradientMatchesFiniteDifferences) {
  const double h = 1e-7;
  const double width = 0.1;
  // points inside the blend bands, away from their edges
  for (const Vec2& q : {Vec2(0.98, 0.3), Vec2(1.02, -0.4), Vec2(-0.97, 0.99), Vec2(3.01, 4.985)}) {
    const SoftSample s = star_soft_at(q, 25.0, width);
    const double du = (star_soft_at(q + Vec2(h, 0), 25.0, width).value - star_soft_at(q - Vec2(h, 0), 25.0, width).value) / (2 * h);
    const double dv = (star_soft_at(q + Vec2(0, h), 25.0, width).value - star_soft_at(q - Vec2(0, h), 25.0, width).value) / (2 * h);
    EXPECT_NEAR(s.d_du, du, 1e-5 * std::max(1.0, std::abs(du)));
    EXPECT_NEAR(s.d_dv, dv, 1e-5 * std::max(1.0, std::abs(dv)));
  }
}

TEST(Pattern, SeamBlendIsContinuousAcrossCellBorder) {
  const double width = 0.1;
  for (double v : {-0.8, -0.3, 0.2, 0.65}) {
    const double lo = star_soft_at(Vec2(1.0 - 1e-9, v), 25.0, width).value;
    const double hi = star_soft_at(Vec2(1.0 + 1e-9, v), 25.0, width).value;
    EXPECT_NEAR(lo, hi, 1e-6);
  }
}

TEST(Pattern, StarIsPeriodicOverCells) {
  for (const Vec2& q : {Vec2(0.3, -0.2), Vec2(-0.7, 0.55)}) {
    const double base = star_soft_at(q, 25.0, 0.0).value;
    EXPECT_NEAR(star_soft_at(q + Vec2(2.0, 0.0), 25.0, 0.0).value, base, 1e-14);
    EXPECT_NEAR(star_soft_at(q + Vec2(-4.0, 6.0), 25.0, 0.0).value, base, 1e-14);
  }
}

TEST(Pattern, CellLocalCoordinates) {
  const CellCoords c = cell_local(Vec2(3.4, -1.2));
  EXPECT_DOUBLE_EQ(c.cx, 4.0);
  EXPECT_DOUBLE_EQ(c.cy, -2.0);
  EXPECT_NEAR(c.u, -0.6, 1e-15);
  EXPECT_NEAR(c.v, 0.8, 1e-15);
}

TEST(Pattern, Checkerboard) {
  EXPECT_EQ(checkerboard_hard(Vec2(0.5, 0.5)), 0.0);
  EXPECT_EQ(checkerboard_hard(Vec2(1.5, 0.5)), 1.0);
  EXPECT_EQ(checkerboard_hard(Vec2(-0.5, 0.5)), 1.0);
  EXPECT_NEAR(checkerboard_soft(Vec2(1.5, 0.5), 100.0), 1.0, 1e-12);
  EXPECT_NEAR(checkerboard_soft(Vec2(0.5, 0.5), 100.0), 0.0, 1e-12);
}

TEST(Pattern, RenderedCellAveragesToHalf) {
  // 40 px per unit, one cell covering an 80 x 80 window; the centre is nudged off the
  // pixel diagonal so hard sampling never lands on a sector edge
  Mat3 m = Mat3::Identity();
  m(0, 0) = 40.0;
  m(1, 1) = 40.0;
  m(0, 2) = 39.3;
  m(1, 2) = 39.7;
  const PatternSpec spec{PatternKind::star16, 25.0, 0.0};
  for (RenderMode mode : {RenderMode::soft, RenderMode::hard, RenderMode::antialiased}) {
    const GrayImage img = render(spec, Homography(m), {0, 0, 80, 80}, mode);
    EXPECT_NEAR(img.sum() / static_cast<double>(img.size()), 0.5, 0.01);
  }
}

TEST(Pattern, UnitsPerPixelOfScaledHomography) {
  Mat3 m = Mat3::Identity();
  m(0, 0) = 20.0;
  m(1, 1) = 20.0;
  EXPECT_NEAR(pattern_units_per_pixel(Homography(m)), 1.0 / 20.0, 1e-15);
}
