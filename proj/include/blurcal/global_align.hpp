#pragma once

// Per-frame alignment of element features against a calibrated camera: planar PnP,
// robust pose + global shift, and pose + bilinear bias field.
//
// The shift and the bias field enter the residual linearly. For a given pose they have
// a closed-form weighted LS solution, so the pose is refined on the residual with the
// linear correction already eliminated; the correction is then re-fitted exactly.

#include "blurcal/geometry.hpp"
#include "blurcal/local_align.hpp"
#include "blurcal/psf.hpp"
#include "blurcal/region_grow.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

namespace blurcal {

class AlignError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Observation {
  int i{0};
  int j{0};
  Vec2 pixel{0.0, 0.0};
  Vec3 world{0.0, 0.0, 0.0};
  double weight{1.0};
};

/// World point of element (i, j): its cell centre on the z = 0 target plane.
inline Vec3 element_world_point(int i, int j) { return {2.0 * j, 2.0 * i, 0.0}; }

/// Cell-centre observations of the masked elements, weighted 1 / (loss + eps) with
/// eps = 1e-6 * median loss.
inline std::vector<Observation> make_observations(const ElementGrid& grid, const ElementMask& mask) {
  std::vector<double> losses;
  for (std::size_t n = 0; n < grid.cells.size(); ++n)
    if (mask.keep[n]) losses.push_back(grid.cells[n].loss);
  if (losses.empty()) return {};
  const double eps = std::max(1e-6 * median(losses), std::numeric_limits<double>::min());
  std::vector<Observation> obs;
  for (std::size_t n = 0; n < grid.cells.size(); ++n) {
    if (!mask.keep[n]) continue;
    const ElementEstimate& e = grid.cells[n];
    obs.push_back({e.i, e.j, apply(e.h, Vec2::Zero()), element_world_point(e.i, e.j), 1.0 / (e.loss + eps)});
  }
  return obs;
}

struct BiasField {
  std::array<double, 4> a{};  // x
  std::array<double, 4> c{};  // y
};

inline Eigen::Vector4d bias_basis(double ib, double jb) { return {1.0, ib, jb, ib * jb}; }

inline Vec2 eval_bias(const BiasField& f, double ib, double jb) {
  const Eigen::Vector4d phi = bias_basis(ib, jb);
  return {phi.dot(Eigen::Vector4d(f.a.data())), phi.dot(Eigen::Vector4d(f.c.data()))};
}

/// Grid index mapped to [-1, 1]; a single row or column maps to 0.
inline double normalized_index(int k, int count) { return count > 1 ? 2.0 * k / (count - 1) - 1.0 : 0.0; }

/// Weighted LS bias: (sum w phi phi^T + ridge I) a = sum w r_x phi, likewise for y.
inline BiasField fit_bias_field(const std::vector<Vec2>& residuals, const std::vector<double>& weights,
                                const std::vector<Vec2>& coords, double ridge = 0.0) {
  if (residuals.size() != weights.size() || residuals.size() != coords.size()) {
    throw AlignError("fit_bias_field: input size mismatch");
  }
  Eigen::Matrix4d gram = Eigen::Matrix4d::Zero();
  Eigen::Vector4d bx = Eigen::Vector4d::Zero();
  Eigen::Vector4d by = Eigen::Vector4d::Zero();
  for (std::size_t k = 0; k < residuals.size(); ++k) {
    const Eigen::Vector4d phi = bias_basis(coords[k].x(), coords[k].y());
    gram += weights[k] * phi * phi.transpose();
    bx += weights[k] * residuals[k].x() * phi;
    by += weights[k] * residuals[k].y() * phi;
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(gram, Eigen::EigenvaluesOnly);
  const double emax = eig.eigenvalues().maxCoeff();
  if (ridge <= 0.0 && (!(emax > 0.0) || eig.eigenvalues().minCoeff() <= 1e-12 * emax)) {
    throw AlignError("fit_bias_field: rank-deficient design");
  }
  gram.diagonal().array() += std::max(ridge, 0.0);
  const Eigen::LDLT<Eigen::Matrix4d> ldlt(gram);
  const Eigen::Vector4d a = ldlt.solve(bx);
  const Eigen::Vector4d c = ldlt.solve(by);
  BiasField f;
  for (int k = 0; k < 4; ++k) {
    f.a[static_cast<std::size_t>(k)] = a(k);
    f.c[static_cast<std::size_t>(k)] = c(k);
  }
  return f;
}

namespace detail {

inline Eigen::Matrix<double, 6, 1> pose_params(const Pose& p) {
  Eigen::Matrix<double, 6, 1> v;
  v << p.rotation_vector(), p.t;
  return v;
}

inline Pose pose_from_params(const Eigen::Matrix<double, 6, 1>& v) {
  return Pose::from_rotation_vector(v.head<3>(), v.tail<3>());
}

/// Damped Gauss-Newton on f(x) = |r(x)|^2 with a central-difference Jacobian. Steps are
/// accepted only when f decreases. Returns the final f.
inline double minimize_lm(const std::function<std::optional<Eigen::VectorXd>(const Eigen::VectorXd&)>& residual,
                          Eigen::VectorXd& x, int max_iters, std::vector<double>* trace = nullptr) {
  auto cost = [&](const Eigen::VectorXd& v) {
    const auto r = residual(v);
    return r ? r->squaredNorm() : std::numeric_limits<double>::infinity();
  };
  auto r0 = residual(x);
  if (!r0) throw AlignError("alignment: initial pose puts target points behind the camera");
  Eigen::VectorXd r = *r0;
  double f = r.squaredNorm();
  double damping = 1e-3;
  for (int it = 0; it < max_iters; ++it) {
    Eigen::MatrixXd jac(r.size(), x.size());
    for (Eigen::Index c = 0; c < x.size(); ++c) {
      const double h = 1e-6 * std::max(1.0, std::abs(x(c)));
      Eigen::VectorXd xp = x;
      Eigen::VectorXd xm = x;
      xp(c) += h;
      xm(c) -= h;
      const auto rp = residual(xp);
      const auto rm = residual(xm);
      if (!rp || !rm) return f;
      jac.col(c) = (*rp - *rm) / (2.0 * h);
    }
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    const Eigen::VectorXd g = jac.transpose() * r;
    if (g.norm() <= 1e-15 * std::max(1.0, f)) break;
    bool accepted = false;
    for (int attempt = 0; attempt < 10; ++attempt, damping *= 10.0) {
      Eigen::MatrixXd a = jtj;
      a.diagonal() += damping * jtj.diagonal().cwiseMax(1e-12);
      const Eigen::VectorXd step = a.ldlt().solve(-g);
      if (!step.allFinite()) continue;
      const Eigen::VectorXd xn = x + step;
      const double fn = cost(xn);
      if (fn < f) {
        const double gain = f - fn;
        x = xn;
        f = fn;
        r = *residual(x);
        damping = std::max(damping * 0.1, 1e-12);
        accepted = true;
        if (trace) trace->push_back(f);
        if (gain <= 1e-14 * std::max(f, 1e-300) || step.norm() < 1e-13) it = max_iters;
        break;
      }
    }
    if (!accepted) break;
  }
  return f;
}

/// Plane-to-plane DLT with Hartley normalization: dst ~ H src.
inline Mat3 planar_dlt(const std::vector<Vec2>& src, const std::vector<Vec2>& dst) {
  auto normalizer = [](const std::vector<Vec2>& pts) {
    Vec2 mean = Vec2::Zero();
    for (const auto& p : pts) mean += p;
    mean /= static_cast<double>(pts.size());
    double spread = 0.0;
    for (const auto& p : pts) spread += (p - mean).norm();
    spread /= static_cast<double>(pts.size());
    const double s = spread > 0.0 ? std::sqrt(2.0) / spread : 1.0;
    Mat3 t;
    t << s, 0, -s * mean.x(), 0, s, -s * mean.y(), 0, 0, 1;
    return t;
  };
  const Mat3 ts = normalizer(src);
  const Mat3 td = normalizer(dst);
  Eigen::MatrixXd a(2 * src.size(), 9);
  for (std::size_t k = 0; k < src.size(); ++k) {
    const Vec3 s = ts * src[k].homogeneous();
    const Vec3 d = td * dst[k].homogeneous();
    const auto r = static_cast<Eigen::Index>(2 * k);
    a.row(r) << 0, 0, 0, -d.z() * s.x(), -d.z() * s.y(), -d.z() * s.z(), d.y() * s.x(), d.y() * s.y(), d.y() * s.z();
    a.row(r + 1) << d.z() * s.x(), d.z() * s.y(), d.z() * s.z(), 0, 0, 0, -d.x() * s.x(), -d.x() * s.y(),
        -d.x() * s.z();
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return td.inverse() * hn * ts;
}

inline std::optional<Vec2> try_project(const CameraIntrinsics& cam, const Distortion& dist, const Pose& pose,
                                       const Vec3& p) {
  try {
    return project(cam, dist, pose, p);
  } catch (const GeometryError&) {
    return std::nullopt;
  }
}

}  // namespace detail

/// Planar PnP: homography decomposition on undistorted normalized points, then damped
/// least-squares refinement of the distorted reprojection error.
inline Pose pnp_planar(const std::vector<Observation>& obs, const CameraIntrinsics& cam, const Distortion& dist,
                       int max_iters = 100) {
  cam.validate();
  if (obs.size() < 6) throw AlignError("pnp_planar: need at least 6 observations");
  Vec2 mean = Vec2::Zero();
  for (const auto& o : obs) mean += o.world.head<2>();
  mean /= static_cast<double>(obs.size());
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& o : obs) {
    const Vec2 d = o.world.head<2>() - mean;
    cov += d * d.transpose();
  }
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(cov);
  if (!(eig.eigenvalues()(1) > 0.0) || eig.eigenvalues()(0) <= 1e-9 * eig.eigenvalues()(1)) {
    throw AlignError("pnp_planar: collinear target points");
  }

  std::vector<Vec2> src;
  std::vector<Vec2> dst;
  for (const auto& o : obs) {
    src.push_back(o.world.head<2>());
    dst.push_back(undistort(intrinsics_unapply(cam, o.pixel), dist));
  }
  const Mat3 h = detail::planar_dlt(src, dst);
  const double scale = 2.0 / (h.col(0).norm() + h.col(1).norm());
  Vec3 r1 = scale * h.col(0);
  Vec3 r2 = scale * h.col(1);
  Vec3 t = scale * h.col(2);
  if (t.z() < 0.0) {
    r1 = -r1;
    r2 = -r2;
    t = -t;
  }
  Mat3 r;
  r.col(0) = r1;
  r.col(1) = r2;
  r.col(2) = r1.cross(r2);
  Pose init{orthonormalize(r), t};

  Eigen::VectorXd x = detail::pose_params(init);
  detail::minimize_lm(
      [&](const Eigen::VectorXd& v) -> std::optional<Eigen::VectorXd> {
        const Pose p = detail::pose_from_params(v);
        Eigen::VectorXd res(2 * static_cast<Eigen::Index>(obs.size()));
        for (std::size_t k = 0; k < obs.size(); ++k) {
          const auto q = detail::try_project(cam, dist, p, obs[k].world);
          if (!q) return std::nullopt;
          res.segment<2>(2 * static_cast<Eigen::Index>(k)) = *q - obs[k].pixel;
        }
        return res;
      },
      x, max_iters);
  return detail::pose_from_params(x);
}

enum class LossKind { huber, mean, median };

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::huber: return "huber";
    case LossKind::mean: return "mean";
    default: return "median";
  }
}

/// What absorbs the per-frame systematic offset next to the pose.
enum class Correction { none, global_shift, bilinear };

struct AlignOptions {
  LossKind loss{LossKind::huber};
  Correction correction{Correction::bilinear};
  int max_outer{50};
  int pose_iters{50};
  double shift_tol{1e-6};
  /// Frames whose optical axis is within this angle of the plane normal are excluded.
  double min_axis_angle{std::numbers::pi / 10.0};
  bool angle_filter{true};
  /// Each correction coefficient is pulled toward zero as if by this many extra
  /// observations of average weight. 0 is the plain least-squares fit. A positive value
  /// settles the directions in which a pose change and the correction are nearly
  /// interchangeable (most of them for small targets) in favour of the pose.
  double correction_prior{0.0};
};

struct AlignmentResult {
  Pose pose;
  Vec2 global_shift{0.0, 0.0};
  BiasField bias;
  std::vector<Vec2> residuals;  // projection - (pixel + correction)
  std::vector<Vec2> aligned;    // pixel + correction
  double median_err{0.0};
  double mean_err{0.0};
  int n_obs{0};
  bool filtered_by_angle{false};
  bool converged{false};
  int iterations{0};
  double axis_angle{0.0};
  /// Weighted objective after each correction fit.
  std::vector<double> objective;
};

namespace detail {

/// Robust IRLS weights from residual magnitudes.
inline std::vector<double> robust_weights(LossKind kind, const std::vector<double>& mag) {
  std::vector<double> w(mag.size(), 1.0);
  if (kind == LossKind::mean || mag.empty()) return w;
  const double med = median(mag);
  if (kind == LossKind::huber) {
    const double delta = std::max(1.345 * 1.4826 * med, 1e-12);
    for (std::size_t k = 0; k < mag.size(); ++k) w[k] = mag[k] <= delta ? 1.0 : delta / mag[k];
    return w;
  }
  std::vector<double> dev(mag.size());
  for (std::size_t k = 0; k < mag.size(); ++k) dev[k] = std::abs(mag[k] - med);
  const double width = std::max(1.4826 * median(dev), 1e-12);
  for (std::size_t k = 0; k < mag.size(); ++k) {
    const double z = (mag[k] - med) / width;
    w[k] = std::max(std::exp(-0.5 * z * z), 1e-12);
  }
  return w;
}

struct CorrectionFit {
  Vec2 shift{0.0, 0.0};
  BiasField bias;
};

/// Ridge weight for `prior` pseudo-observations of average weight.
inline double correction_ridge(const std::vector<double>& w, double prior) {
  if (prior <= 0.0 || w.empty()) return 0.0;
  double sw = 0.0;
  for (double v : w) sw += v;
  return prior * sw / static_cast<double>(w.size());
}

inline CorrectionFit fit_correction(Correction kind, const std::vector<Vec2>& r, const std::vector<double>& w,
                                    const std::vector<Vec2>& coords, double ridge = 0.0) {
  CorrectionFit out;
  if (kind == Correction::global_shift) {
    double sw = ridge;
    for (std::size_t k = 0; k < r.size(); ++k) {
      out.shift += w[k] * r[k];
      sw += w[k];
    }
    out.shift /= sw;
  } else if (kind == Correction::bilinear) {
    out.bias = fit_bias_field(r, w, coords, ridge);
  }
  return out;
}

/// Squared norm of the correction coefficients.
inline double correction_norm2(Correction kind, const CorrectionFit& f) {
  if (kind == Correction::global_shift) return f.shift.squaredNorm();
  if (kind != Correction::bilinear) return 0.0;
  double s = 0.0;
  for (int k = 0; k < 4; ++k) s += f.bias.a[static_cast<std::size_t>(k)] * f.bias.a[static_cast<std::size_t>(k)] +
                                   f.bias.c[static_cast<std::size_t>(k)] * f.bias.c[static_cast<std::size_t>(k)];
  return s;
}

inline int correction_dof(Correction kind) {
  return kind == Correction::global_shift ? 2 : kind == Correction::bilinear ? 8 : 0;
}

inline Vec2 correction_at(Correction kind, const CorrectionFit& f, const Vec2& coord) {
  if (kind == Correction::global_shift) return f.shift;
  if (kind == Correction::bilinear) return eval_bias(f.bias, coord.x(), coord.y());
  return Vec2::Zero();
}

}  // namespace detail

/// Robust pose + per-frame correction. Each outer round fixes IRLS weights, refines the
/// pose with the correction eliminated, and re-fits the correction; rounds stop once the
/// correction moves by less than shift_tol px.
inline AlignmentResult align_frame(const std::vector<Observation>& obs, int rows, int cols,
                                   const CameraIntrinsics& cam, const Distortion& dist, const AlignOptions& opt) {
  if (obs.size() < 6) throw AlignError("alignment: need at least 6 observations");
  AlignmentResult res;
  res.n_obs = static_cast<int>(obs.size());
  Pose pose = pnp_planar(obs, cam, dist);
  res.axis_angle = optical_axis_angle(pose);
  if (opt.angle_filter && res.axis_angle < opt.min_axis_angle) {
    res.filtered_by_angle = true;
    res.pose = pose;
    return res;
  }

  std::vector<Vec2> coords;
  for (const auto& o : obs) coords.emplace_back(normalized_index(o.i, rows), normalized_index(o.j, cols));
  std::vector<double> robust(obs.size(), 1.0);
  detail::CorrectionFit fit;

  auto raw_residuals = [&](const Pose& p) -> std::optional<std::vector<Vec2>> {
    std::vector<Vec2> r(obs.size());
    for (std::size_t k = 0; k < obs.size(); ++k) {
      const auto q = detail::try_project(cam, dist, p, obs[k].world);
      if (!q) return std::nullopt;
      r[k] = *q - obs[k].pixel;
    }
    return r;
  };

  Eigen::VectorXd x = detail::pose_params(pose);
  for (int outer = 0; outer < opt.max_outer; ++outer) {
    std::vector<double> w(obs.size());
    for (std::size_t k = 0; k < obs.size(); ++k) w[k] = obs[k].weight * robust[k];
    const double ridge = detail::correction_ridge(w, opt.correction_prior);
    const int dof = detail::correction_dof(opt.correction);
    detail::minimize_lm(
        [&](const Eigen::VectorXd& v) -> std::optional<Eigen::VectorXd> {
          const auto r = raw_residuals(detail::pose_from_params(v));
          if (!r) return std::nullopt;
          const detail::CorrectionFit f = detail::fit_correction(opt.correction, *r, w, coords, ridge);
          const auto n = static_cast<Eigen::Index>(obs.size());
          Eigen::VectorXd out(2 * n + (ridge > 0.0 ? dof : 0));
          for (std::size_t k = 0; k < obs.size(); ++k) {
            out.segment<2>(2 * static_cast<Eigen::Index>(k)) =
                std::sqrt(w[k]) * ((*r)[k] - detail::correction_at(opt.correction, f, coords[k]));
          }
          if (ridge > 0.0) {
            const double sr = std::sqrt(ridge);
            if (opt.correction == Correction::global_shift) {
              out.segment<2>(2 * n) = sr * f.shift;
            } else if (opt.correction == Correction::bilinear) {
              for (int k = 0; k < 4; ++k) {
                out(2 * n + k) = sr * f.bias.a[static_cast<std::size_t>(k)];
                out(2 * n + 4 + k) = sr * f.bias.c[static_cast<std::size_t>(k)];
              }
            }
          }
          return out;
        },
        x, opt.pose_iters);
    pose = detail::pose_from_params(x);
    const std::vector<Vec2> r = *raw_residuals(pose);
    const detail::CorrectionFit next = detail::fit_correction(opt.correction, r, w, coords, ridge);

    double objective = ridge * detail::correction_norm2(opt.correction, next);
    double motion = 0.0;
    std::vector<double> mag(obs.size());
    for (std::size_t k = 0; k < obs.size(); ++k) {
      const Vec2 c = detail::correction_at(opt.correction, next, coords[k]);
      const Vec2 e = r[k] - c;
      objective += w[k] * e.squaredNorm();
      mag[k] = e.norm();
      motion = std::max(motion, (c - detail::correction_at(opt.correction, fit, coords[k])).norm());
    }
    res.objective.push_back(objective);
    fit = next;
    res.iterations = outer + 1;
    const bool reweighted = opt.loss != LossKind::mean;
    if (!reweighted || (outer > 0 && motion < opt.shift_tol)) {
      res.converged = true;
      break;
    }
    robust = detail::robust_weights(opt.loss, mag);
  }

  res.pose = pose;
  res.global_shift = opt.correction == Correction::global_shift ? fit.shift : Vec2::Zero();
  if (opt.correction == Correction::bilinear) res.bias = fit.bias;
  const std::vector<Vec2> r = *raw_residuals(pose);
  std::vector<double> mag;
  for (std::size_t k = 0; k < obs.size(); ++k) {
    const Vec2 c = detail::correction_at(opt.correction, fit, coords[k]);
    res.residuals.push_back(r[k] - c);
    res.aligned.push_back(obs[k].pixel + c);
    mag.push_back(res.residuals.back().norm());
  }
  res.median_err = median(mag);
  double sum = 0.0;
  for (double m : mag) sum += m;
  res.mean_err = sum / static_cast<double>(mag.size());
  return res;
}

/// Pose and one global pixel shift x_G (the correcting shift added to every observation).
inline AlignmentResult robust_align(const std::vector<Observation>& obs, int rows, int cols,
                                    const CameraIntrinsics& cam, const Distortion& dist, LossKind loss,
                                    bool angle_filter = false) {
  AlignOptions opt;
  opt.loss = loss;
  opt.correction = Correction::global_shift;
  opt.angle_filter = angle_filter;
  return align_frame(obs, rows, cols, cam, dist, opt);
}

/// Pose and bilinear bias field; the field's constant terms take the place of x_G.
inline AlignmentResult alternate_align(const std::vector<Observation>& obs, int rows, int cols,
                                       const CameraIntrinsics& cam, const Distortion& dist, LossKind loss,
                                       int iters = 50, bool angle_filter = true) {
  AlignOptions opt;
  opt.loss = loss;
  opt.correction = Correction::bilinear;
  opt.max_outer = iters;
  opt.angle_filter = angle_filter;
  return align_frame(obs, rows, cols, cam, dist, opt);
}

}  // namespace blurcal
