#include "blurcal/geometry.hpp"
#include "blurcal/synth.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace blurcal;

namespace {

const CameraIntrinsics kCam{800.0, 810.0, 320.0, 240.0, 0.5};

Pose tilted_pose(double tilt) {
  return Pose{rotation_x(tilt) * rotation_z(0.2), Vec3(-3.0, -2.0, 25.0)};
}

}  // namespace

TEST(Geometry, PlaneHomographyMatchesPinholeProjection) {
  const Pose pose = tilted_pose(0.4);
  const Homography h = homography_from_pose(kCam, pose);
  for (double x : {-2.0, 0.0, 3.5})
    for (double y : {-1.0, 0.5, 4.0}) {
      const Vec2 a = apply(h, Vec2(x, y));
      const Vec2 b = project(kCam, Distortion{}, pose, Vec3(x, y, 0.0));
      EXPECT_NEAR((a - b).norm(), 0.0, 1e-9);
    }
}

TEST(Geometry, ProjectByHand) {
  // identity rotation, point straight ahead shifted by one unit: x = fx * 1 / z + skew * 0 + cx
  const Pose pose{Mat3::Identity(), Vec3(0.0, 0.0, 10.0)};
  const Vec2 p = project(kCam, Distortion{}, pose, Vec3(1.0, 0.0, 0.0));
  EXPECT_NEAR(p.x(), 320.0 + 80.0, 1e-12);
  EXPECT_NEAR(p.y(), 240.0, 1e-12);
}

TEST(Geometry, BehindCameraThrows) {
  const Pose pose{Mat3::Identity(), Vec3(0.0, 0.0, -1.0)};
  EXPECT_THROW((void)project(kCam, Distortion{}, pose, Vec3::Zero()), GeometryError);
}

TEST(Geometry, UndistortInvertsDistort) {
  const Distortion d{-0.25, 0.08, -0.01, 0.001, -0.0015};
  for (double x : {-0.4, -0.1, 0.0, 0.2, 0.35})
    for (double y : {-0.3, 0.05, 0.3}) {
      const Vec2 p(x, y);
      EXPECT_NEAR((undistort(distort(p, d), d) - p).norm(), 0.0, 1e-12);
    }
}

TEST(Geometry, DistortionByHand) {
  // radial only: x' = x (1 + k1 r^2)
  const Distortion d{0.1, 0.0, 0.0, 0.0, 0.0};
  const Vec2 p = distort(Vec2(0.5, 0.0), d);
  EXPECT_NEAR(p.x(), 0.5 * (1.0 + 0.1 * 0.25), 1e-15);
  EXPECT_NEAR(p.y(), 0.0, 1e-15);
}

TEST(Geometry, HomographyInverseRoundTrip) {
  Mat3 m;
  m << 30.0, 4.0, 200.0, -3.0, 29.0, 180.0, 0.002, -0.001, 1.0;
  const Homography h(m);
  const Vec2 q(0.3, -0.7);
  EXPECT_NEAR((apply(h.inverse(), apply(h, q)) - q).norm(), 0.0, 1e-12);
  EXPECT_THROW((void)Homography(Mat3::Zero()).inverse(), GeometryError);
}

TEST(Geometry, ScaleInvariantApply) {
  Mat3 m;
  m << 30.0, 4.0, 200.0, -3.0, 29.0, 180.0, 0.002, -0.001, 1.0;
  const Vec2 q(0.9, 0.1);
  EXPECT_NEAR((apply(Homography(m), q) - apply(Homography(-3.7 * m), q)).norm(), 0.0, 1e-12);
}

TEST(Geometry, TranslationHomographyShifts) {
  const Vec2 p = apply(translation_homography(Vec2(1.5, -2.0)), Vec2(3.0, 4.0));
  EXPECT_DOUBLE_EQ(p.x(), 4.5);
  EXPECT_DOUBLE_EQ(p.y(), 2.0);
}

TEST(Geometry, OpticalAxisAngle) {
  EXPECT_NEAR(optical_axis_angle(Pose{}), 0.0, 1e-15);
  for (double tilt : {0.1, 0.5, 1.2}) {
    const Pose p = make_pose(tilt, 0.7, 0.3, Vec3(0.0, 0.0, 20.0), 5, 5);
    EXPECT_NEAR(optical_axis_angle(p), tilt, 1e-12);
  }
}

TEST(Geometry, RotationVectorRoundTrip) {
  const Vec3 r(0.1, -0.4, 0.25);
  const Pose p = Pose::from_rotation_vector(r, Vec3(1.0, 2.0, 3.0));
  EXPECT_NEAR((p.rotation_vector() - r).norm(), 0.0, 1e-12);
  EXPECT_NEAR((p.R.transpose() * p.R - Mat3::Identity()).norm(), 0.0, 1e-12);
}

TEST(Geometry, OrthonormalizeIsNearestRotation) {
  Mat3 noisy = rotation_y(0.3);
  noisy(0, 1) += 1e-3;
  const Mat3 r = orthonormalize(noisy);
  EXPECT_NEAR((r.transpose() * r - Mat3::Identity()).norm(), 0.0, 1e-12);
  EXPECT_NEAR(r.determinant(), 1.0, 1e-12);
  EXPECT_LT((r - rotation_y(0.3)).norm(), 2e-3);
}

TEST(Geometry, InvalidCameraRejected) {
  CameraIntrinsics c = kCam;
  c.fx = 0.0;
  EXPECT_THROW(c.validate(), GeometryError);
}

TEST(Geometry, ElementHomographyIsPlaneHomographyShiftedByCell) {
  const Pose pose = tilted_pose(0.5);
  const Homography h = element_homography(kCam, Distortion{}, pose, 2, 3);
  const Vec2 a = apply(h, Vec2(0.5, -0.25));
  const Vec2 b = project(kCam, Distortion{}, pose, Vec3(6.5, 3.75, 0.0));
  EXPECT_NEAR((a - b).norm(), 0.0, 1e-9);
}

TEST(Geometry, DistortedElementHomographyIsCloseFit) {
  const Distortion d{-0.1, 0.02, 0.0, 0.0005, -0.0003};
  const Pose pose = tilted_pose(0.5);
  const Homography h = element_homography(kCam, d, pose, 1, 1);
  for (double u : {-1.0, 0.0, 1.0})
    for (double v : {-1.0, 0.0, 1.0}) {
      const Vec2 a = apply(h, Vec2(u, v));
      const Vec2 b = project(kCam, d, pose, Vec3(2.0 + u, 2.0 + v, 0.0));
      EXPECT_LT((a - b).norm(), 0.05);
    }
}
