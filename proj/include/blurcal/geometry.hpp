#pragma once

// Pinhole + Brown-Conrady projection, planar homographies and pose helpers.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace blurcal {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

class GeometryError : public std::runtime_error {
 public:
  enum class Kind { behind_camera, singular_homography, point_at_infinity, invalid_camera, degenerate };

  GeometryError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  [[nodiscard]] Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

struct CameraIntrinsics {
  double fx{1.0};
  double fy{1.0};
  double cx{0.0};
  double cy{0.0};
  double skew{0.0};

  [[nodiscard]] Mat3 matrix() const {
    Mat3 k;
    k << fx, skew, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(skew)) {
      throw GeometryError(GeometryError::Kind::invalid_camera, "camera intrinsics: fx and fy must be positive");
    }
  }
};

struct Distortion {
  double k1{0.0};
  double k2{0.0};
  double k3{0.0};
  double p1{0.0};
  double p2{0.0};

  [[nodiscard]] bool is_zero() const noexcept {
    return k1 == 0.0 && k2 == 0.0 && k3 == 0.0 && p1 == 0.0 && p2 == 0.0;
  }
};

/// Rigid transform world -> camera. R is kept orthonormal by every constructor.
struct Pose {
  Mat3 R{Mat3::Identity()};
  Vec3 t{Vec3::Zero()};

  static Pose from_rotation_vector(const Vec3& rvec, const Vec3& t) {
    const double angle = rvec.norm();
    Pose pose;
    pose.R = angle < 1e-300 ? Mat3::Identity() : Mat3(Eigen::AngleAxisd(angle, rvec / angle));
    pose.t = t;
    return pose;
  }

  [[nodiscard]] Vec3 rotation_vector() const {
    const Eigen::AngleAxisd aa(R);
    return aa.axis() * aa.angle();
  }

  [[nodiscard]] Vec3 transform(const Vec3& p) const { return R * p + t; }
};

/// Projects R onto SO(3) (nearest rotation in Frobenius norm).
inline Mat3 orthonormalize(const Mat3& m) {
  const Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0.0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  return r;
}

/// 3x3 projective map from pattern coordinates to pixels. Stored unnormalized;
/// call normalized() when a canonical H(2,2) = 1 form is needed.
class Homography {
 public:
  Homography() : m_(Mat3::Identity()) {}
  explicit Homography(const Mat3& m) : m_(m) {}

  [[nodiscard]] const Mat3& matrix() const noexcept { return m_; }
  [[nodiscard]] Mat3& matrix() noexcept { return m_; }
  [[nodiscard]] double operator()(int r, int c) const { return m_(r, c); }

  [[nodiscard]] Homography normalized() const {
    if (m_(2, 2) == 0.0) return *this;
    return Homography(m_ / m_(2, 2));
  }

  [[nodiscard]] bool is_singular(double tol = 1e-300) const { return std::abs(m_.determinant()) <= tol; }

  [[nodiscard]] Homography inverse() const {
    const double det = m_.determinant();
    if (!std::isfinite(det) || std::abs(det) <= 1e-300) {
      throw GeometryError(GeometryError::Kind::singular_homography, "homography is singular");
    }
    return Homography(m_.inverse());
  }

  friend Homography operator*(const Homography& a, const Homography& b) { return Homography(a.m_ * b.m_); }

 private:
  Mat3 m_;
};

/// Brown-Conrady distortion of a normalized image point.
inline Vec2 distort(const Vec2& x, const Distortion& d) {
  const double r2 = x.squaredNorm();
  const double radial = 1.0 + d.k1 * r2 + d.k2 * r2 * r2 + d.k3 * r2 * r2 * r2;
  const double xy = x.x() * x.y();
  return {radial * x.x() + 2.0 * d.p1 * xy + d.p2 * (r2 + 2.0 * x.x() * x.x()),
          radial * x.y() + d.p1 * (r2 + 2.0 * x.y() * x.y()) + 2.0 * d.p2 * xy};
}

/// Inverts distort() by fixed-point iteration followed by Newton polishing.
inline Vec2 undistort(const Vec2& xd, const Distortion& d, int iterations = 50) {
  if (d.is_zero()) return xd;
  Vec2 x = xd;
  for (int it = 0; it < iterations; ++it) {
    const Vec2 f = distort(x, d) - xd;
    if (f.norm() < 1e-15) break;
    constexpr double h = 1e-7;
    Eigen::Matrix2d jac;
    jac.col(0) = (distort(x + Vec2(h, 0.0), d) - distort(x - Vec2(h, 0.0), d)) / (2.0 * h);
    jac.col(1) = (distort(x + Vec2(0.0, h), d) - distort(x - Vec2(0.0, h), d)) / (2.0 * h);
    x -= jac.partialPivLu().solve(f);
  }
  return x;
}

inline Vec2 apply(const Homography& h, const Vec2& pt) {
  const Vec3 q = h.matrix() * Vec3(pt.x(), pt.y(), 1.0);
  if (q.z() == 0.0 || !std::isfinite(q.z())) {
    throw GeometryError(GeometryError::Kind::point_at_infinity, "homography maps point to infinity");
  }
  return {q.x() / q.z(), q.y() / q.z()};
}

inline Vec2 intrinsics_apply(const CameraIntrinsics& cam, const Vec2& xn) {
  return {cam.fx * xn.x() + cam.skew * xn.y() + cam.cx, cam.fy * xn.y() + cam.cy};
}

inline Vec2 intrinsics_unapply(const CameraIntrinsics& cam, const Vec2& px) {
  const double y = (px.y() - cam.cy) / cam.fy;
  const double x = (px.x() - cam.cx - cam.skew * y) / cam.fx;
  return {x, y};
}

/// p = K d([M P]~)
inline Vec2 project(const CameraIntrinsics& cam, const Distortion& dist, const Pose& pose, const Vec3& point) {
  const Vec3 pc = pose.transform(point);
  if (!(pc.z() > 0.0)) {
    throw GeometryError(GeometryError::Kind::behind_camera, "point is behind the camera");
  }
  return intrinsics_apply(cam, distort(Vec2(pc.x() / pc.z(), pc.y() / pc.z()), dist));
}

/// H = K (r1 | r2 | t) for the world plane z = 0.
inline Homography homography_from_pose(const CameraIntrinsics& cam, const Pose& pose) {
  Mat3 cols;
  cols.col(0) = pose.R.col(0);
  cols.col(1) = pose.R.col(1);
  cols.col(2) = pose.t;
  Homography h(cam.matrix() * cols);
  if (h.is_singular(1e-14 * std::max(1.0, h.matrix().cwiseAbs().maxCoeff()))) {
    throw GeometryError(GeometryError::Kind::singular_homography, "pose yields a singular plane homography");
  }
  return h;
}

inline Homography translation_homography(const Vec2& shift) {
  Mat3 m = Mat3::Identity();
  m(0, 2) = shift.x();
  m(1, 2) = shift.y();
  return Homography(m);
}

/// Angle between the optical axis and the target normal, in [0, pi/2]; 0 is a frontal view.
inline double optical_axis_angle(const Pose& pose) {
  return std::acos(std::min(1.0, std::abs(pose.R(2, 2))));
}

inline Mat3 rotation_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
inline Mat3 rotation_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
inline Mat3 rotation_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

}  // namespace blurcal
