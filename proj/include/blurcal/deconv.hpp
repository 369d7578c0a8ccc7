#pragma once

// Per-block joint estimation of homography, blur kernel and illumination:
//
//   min_{H,k,p} mean |I - k * (S(H) A(p) + B(p))|^2 + lambda |k|^2
//
// k and p have closed-form least-squares solves. The analytic gradient w.r.t. H
// back-propagates the residual through the flipped kernel and the soft star pattern,
// with A, B and the cell centres held constant. The default optimizer takes damped
// Gauss-Newton steps on all unknowns at once with sum(k) = 1.

#include "blurcal/geometry.hpp"
#include "blurcal/image.hpp"
#include "blurcal/log.hpp"
#include "blurcal/pattern.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace blurcal {

class DeconvError : public std::runtime_error {
 public:
  enum class Kind { degenerate_block, dimension_mismatch, out_of_frame, frame_failure, invalid_config };

  DeconvError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  [[nodiscard]] Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Amplitude plane A = a1 u + a2 v + a3 and bias plane B = b1 u + b2 v + b3, stored as
/// [a1, a2, a3, b1, b2, b3] over block-normalized coordinates (u, v) in [-1, 1]^2.
struct IlluminationParams {
  std::array<double, 6> p{0.0, 0.0, 1.0, 0.0, 0.0, 0.0};

  [[nodiscard]] double amplitude(double u, double v) const { return p[0] * u + p[1] * v + p[2]; }
  [[nodiscard]] double bias(double u, double v) const { return p[3] * u + p[4] * v + p[5]; }

  /// Minimum of the amplitude plane over the corners of [-1, 1]^2.
  [[nodiscard]] double min_amplitude() const {
    return p[2] - std::abs(p[0]) - std::abs(p[1]);
  }
};

enum class HSolver { gauss_newton, gradient_descent };

struct DeconvConfig {
  int kernel_size{17};
  double lambda{1e-4};
  double beta{25.0};
  int max_iters{150};
  int inner_steps{5};
  double step_size{1e-3};
  double convergence_tol{1e-10};
  /// Also stop once an outer round moves no block corner by more than this (px).
  double vertex_tol{1e-3};
  int block_size{64};
  /// Elements whose model explains less than this fraction of the block variance are failed.
  double min_explained_variance{0.5};
  /// H update inside the alternation. Plain gradient descent needs hundreds of steps per
  /// block; damped Gauss-Newton on the same objective usually settles in a handful.
  HSolver h_solver{HSolver::gauss_newton};
  /// Width in pixels of the blend across star cell borders in the soft model.
  double seam_px{1.0};
  /// Also pin the kernel's first moments to its centre while fitting.
  bool centre_kernel{false};

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw DeconvError(DeconvError::Kind::invalid_config, field + ": " + why);
    };
    if (kernel_size <= 0 || kernel_size % 2 == 0) fail("kernel_size", "must be a positive odd integer");
    if (!(lambda >= 0.0)) fail("lambda", "must be non-negative");
    if (!(beta > 0.0)) fail("beta", "must be positive");
    if (max_iters <= 0) fail("max_iters", "must be positive");
    if (inner_steps <= 0) fail("inner_steps", "must be positive");
    if (!(step_size > 0.0)) fail("step_size", "must be positive");
    if (!(convergence_tol >= 0.0)) fail("convergence_tol", "must be non-negative");
    if (!(vertex_tol >= 0.0)) fail("vertex_tol", "must be non-negative");
    if (block_size < 8) fail("block_size", "must be at least 8");
    if (!(seam_px >= 0.0)) fail("seam_px", "must be non-negative");
  }
};

/// Observed pixel window of one element plus the valid-convolution margin of the latent window.
struct BlockGeometry {
  PixelRect observed;
  int margin{8};

  [[nodiscard]] PixelRect latent() const {
    return {observed.x0 - margin, observed.y0 - margin, observed.width + 2 * margin, observed.height + 2 * margin};
  }
  [[nodiscard]] int kernel_size() const { return 2 * margin + 1; }
  [[nodiscard]] Vec2 center() const {
    return {observed.x0 + (observed.width - 1) / 2.0, observed.y0 + (observed.height - 1) / 2.0};
  }
  [[nodiscard]] double half_width() const { return observed.width / 2.0; }
  [[nodiscard]] double half_height() const { return observed.height / 2.0; }
  [[nodiscard]] Vec2 normalized(double x, double y) const {
    const Vec2 c = center();
    return {(x - c.x()) / half_width(), (y - c.y()) / half_height()};
  }

  /// Square block of side `block_size` centred (to the nearest pixel) on `pixel`.
  static BlockGeometry centered(const Vec2& pixel, int block_size, int kernel_size) {
    BlockGeometry g;
    g.observed = {static_cast<int>(std::lround(pixel.x() - (block_size - 1) / 2.0)),
                  static_cast<int>(std::lround(pixel.y() - (block_size - 1) / 2.0)), block_size, block_size};
    g.margin = kernel_size / 2;
    return g;
  }
};

/// Normalized (u, v) of every latent-window pixel.
struct LatentCoords {
  GrayImage u;
  GrayImage v;

  static LatentCoords of(const BlockGeometry& g) {
    const PixelRect lat = g.latent();
    LatentCoords c{GrayImage(lat.width, lat.height), GrayImage(lat.width, lat.height)};
    for (int y = 0; y < lat.height; ++y)
      for (int x = 0; x < lat.width; ++x) {
        const Vec2 n = g.normalized(lat.x0 + x, lat.y0 + y);
        c.u.at(x, y) = n.x();
        c.v.at(x, y) = n.y();
      }
    return c;
  }
};

struct BlockProblem {
  GrayImage observed;
  BlockGeometry geometry;
  PatternSpec pattern;
  LatentCoords coords;

  BlockProblem(GrayImage obs, const BlockGeometry& g, const PatternSpec& spec)
      : observed(std::move(obs)), geometry(g), pattern(spec), coords(LatentCoords::of(g)) {
    if (observed.width() != g.observed.width || observed.height() != g.observed.height) {
      throw DeconvError(DeconvError::Kind::dimension_mismatch, "observed block does not match its geometry");
    }
  }

  [[nodiscard]] int kernel_size() const { return geometry.kernel_size(); }

  /// Cuts the block centred on H0's cell centre out of a frame.
  static BlockProblem from_frame(const GrayImage& frame, const Homography& h0, const DeconvConfig& cfg) {
    const BlockGeometry g = BlockGeometry::centered(apply(h0, Vec2::Zero()), cfg.block_size, cfg.kernel_size);
    if (!PixelRect{0, 0, frame.width(), frame.height()}.contains(g.observed)) {
      throw DeconvError(DeconvError::Kind::out_of_frame, "element block leaves the frame");
    }
    const PatternSpec spec{PatternKind::star16, cfg.beta, cfg.seam_px * pattern_units_per_pixel(h0)};
    return BlockProblem(frame.crop(g.observed), g, spec);
  }
};

inline GrayImage render_latent_pattern(const BlockProblem& prob, const Homography& h) {
  return render(prob.pattern, h, prob.geometry.latent(), RenderMode::soft);
}

/// L = S A + B
inline GrayImage compose_latent(const GrayImage& pattern, const IlluminationParams& illum, const LatentCoords& c) {
  GrayImage out(pattern.width(), pattern.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = c.u.data()[i];
    const double v = c.v.data()[i];
    out.data()[i] = pattern.data()[i] * illum.amplitude(u, v) + illum.bias(u, v);
  }
  return out;
}

inline double mean_squared_difference(const GrayImage& a, const GrayImage& b) {
  if (!a.same_shape(b)) throw DeconvError(DeconvError::Kind::dimension_mismatch, "residual: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

/// Least-squares illumination for fixed kernel and pattern: p* = (F^T F)^-1 F^T vec(I),
/// F = [vec(k * phi_i)], phi = [S u, S v, S, u, v, 1].
inline IlluminationParams solve_illumination(const GrayImage& observed, const Kernel& k, const GrayImage& pattern,
                                             const LatentCoords& c) {
  if (!pattern.same_shape(c.u) || pattern.width() - k.size() + 1 != observed.width() ||
      pattern.height() - k.size() + 1 != observed.height()) {
    throw DeconvError(DeconvError::Kind::dimension_mismatch, "solve_illumination: inconsistent block dimensions");
  }
  const std::size_t n = observed.size();
  Eigen::MatrixXd f(n, 6);
  GrayImage basis(pattern.width(), pattern.height());
  for (int b = 0; b < 6; ++b) {
    for (std::size_t i = 0; i < basis.size(); ++i) {
      const double s = pattern.data()[i];
      const double u = c.u.data()[i];
      const double v = c.v.data()[i];
      switch (b) {
        case 0: basis.data()[i] = s * u; break;
        case 1: basis.data()[i] = s * v; break;
        case 2: basis.data()[i] = s; break;
        case 3: basis.data()[i] = u; break;
        case 4: basis.data()[i] = v; break;
        default: basis.data()[i] = 1.0; break;
      }
    }
    const GrayImage fb = convolve(basis, k, ConvMode::valid);
    f.col(b) = Eigen::Map<const Eigen::VectorXd>(fb.data().data(), static_cast<Eigen::Index>(n));
  }
  const Eigen::Matrix<double, 6, 6> gram = f.transpose() * f;
  const Eigen::Matrix<double, 6, 1> rhs =
      f.transpose() * Eigen::Map<const Eigen::VectorXd>(observed.data().data(), static_cast<Eigen::Index>(n));
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> eig(gram, Eigen::EigenvaluesOnly);
  const double emax = eig.eigenvalues().maxCoeff();
  if (!(emax > 0.0) || eig.eigenvalues().minCoeff() <= 1e-12 * emax) {
    throw DeconvError(DeconvError::Kind::degenerate_block, "solve_illumination: rank-deficient design (flat block)");
  }
  const Eigen::Matrix<double, 6, 1> sol = gram.ldlt().solve(rhs);
  IlluminationParams out;
  for (int i = 0; i < 6; ++i) out.p[static_cast<std::size_t>(i)] = sol(i);
  return out;
}

namespace detail {

/// X^T vec(V) for the kernel design X of `latent` (see kernel_normal_equations).
inline Eigen::VectorXd design_transpose_times(const GrayImage& latent, const GrayImage& v, int ks) {
  const int lw = latent.width();
  const int ow = v.width();
  const int oh = v.height();
  Eigen::VectorXd out(ks * ks);
  const double* ld = latent.data().data();
  for (int beta = 0; beta < ks; ++beta)
    for (int alpha = 0; alpha < ks; ++alpha) {
      double s = 0.0;
      for (int y = 0; y < oh; ++y) {
        const double* lrow = ld + static_cast<std::size_t>(y + beta) * lw + alpha;
        const double* vrow = v.data().data() + static_cast<std::size_t>(y) * ow;
        for (int x = 0; x < ow; ++x) s += vrow[x] * lrow[x];
      }
      out((ks - 1 - beta) * ks + (ks - 1 - alpha)) = s;
    }
  return out;
}

/// Normal equations of the valid-convolution kernel design: column (a, b) of X is the
/// latent window at offset (K-1-a, K-1-b). The Gram matrix is assembled from prefix sums
/// of lagged products instead of forming X.
inline void kernel_normal_equations(const GrayImage& observed, const GrayImage& latent, int ks,
                                    Eigen::MatrixXd& gram, Eigen::VectorXd& rhs) {
  const int lw = latent.width();
  const int lh = latent.height();
  const int ow = observed.width();
  const int oh = observed.height();
  const int nk = ks * ks;
  gram.setZero(nk, nk);
  rhs.setZero(nk);

  auto column = [ks](int alpha, int beta) { return (ks - 1 - beta) * ks + (ks - 1 - alpha); };

  std::vector<double> prefix(static_cast<std::size_t>(lw + 1) * (lh + 1));
  auto pre = [&](int x, int y) -> double& { return prefix[static_cast<std::size_t>(y) * (lw + 1) + x]; };
  const double* ld = latent.data().data();

  for (int dy = -(ks - 1); dy <= ks - 1; ++dy) {
    for (int dx = -(ks - 1); dx <= ks - 1; ++dx) {
      // Pairs with c1 <= c2 only occur at lags with dy * ks + dx <= 0; the rest is symmetric.
      if (dy > 0 || (dy == 0 && dx > 0)) continue;
      std::fill(prefix.begin(), prefix.end(), 0.0);
      for (int y = 0; y < lh; ++y) {
        double row = 0.0;
        const int y2 = y + dy;
        for (int x = 0; x < lw; ++x) {
          const int x2 = x + dx;
          if (y2 >= 0 && y2 < lh && x2 >= 0 && x2 < lw) {
            row += ld[static_cast<std::size_t>(y) * lw + x] * ld[static_cast<std::size_t>(y2) * lw + x2];
          }
          pre(x + 1, y + 1) = pre(x + 1, y) + row;
        }
      }
      for (int b1 = std::max(0, -dy); b1 < ks && b1 + dy < ks; ++b1) {
        for (int a1 = std::max(0, -dx); a1 < ks && a1 + dx < ks; ++a1) {
          const int c1 = column(a1, b1);
          const int c2 = column(a1 + dx, b1 + dy);
          if (c1 > c2) continue;
          const double s = pre(a1 + ow, b1 + oh) - pre(a1, b1 + oh) - pre(a1 + ow, b1) + pre(a1, b1);
          gram(c1, c2) = s;
          gram(c2, c1) = s;
        }
      }
    }
  }
  rhs = design_transpose_times(latent, observed, ks);
}

}  // namespace detail

/// Ridge kernel for a fixed latent block: minimizes mean |I - k * L|^2 + lambda |k|^2,
/// i.e. (X^T X + N lambda I) k = X^T vec(I).
inline Kernel solve_kernel(const GrayImage& observed, const GrayImage& latent, double lambda, int ks) {
  if (ks <= 0 || ks % 2 == 0) throw DeconvError(DeconvError::Kind::invalid_config, "kernel size must be odd");
  if (latent.width() - ks + 1 != observed.width() || latent.height() - ks + 1 != observed.height()) {
    throw DeconvError(DeconvError::Kind::dimension_mismatch,
                      "solve_kernel: latent block must exceed the observation by ksize-1");
  }
  Eigen::MatrixXd gram;
  Eigen::VectorXd rhs;
  detail::kernel_normal_equations(observed, latent, ks, gram, rhs);
  gram.diagonal().array() += static_cast<double>(observed.size()) * lambda;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  if (lambda == 0.0 && (ldlt.info() != Eigen::Success || ldlt.rcond() < 1e-12)) {
    warn("solve_kernel: ill-conditioned kernel system with lambda = 0");
  }
  const Eigen::VectorXd sol = ldlt.solve(rhs);
  Kernel k(ks);
  for (int i = 0; i < ks * ks; ++i) k.weights()[static_cast<std::size_t>(i)] = sol(i);
  return k;
}

namespace detail {

/// Rows of the kernel gauge constraints C k = d: unit sum, optionally with the first
/// moments at the kernel centre. The data term only fixes the product of kernel and
/// amplitude, so without the sum row the ridge term keeps shrinking k.
inline Eigen::MatrixXd kernel_gauge(int ks, bool centred) {
  Eigen::MatrixXd c(centred ? 3 : 1, ks * ks);
  const int r = ks / 2;
  for (int y = 0; y < ks; ++y)
    for (int x = 0; x < ks; ++x) {
      c(0, y * ks + x) = 1.0;
      if (centred) {
        c(1, y * ks + x) = x - r;
        c(2, y * ks + x) = y - r;
      }
    }
  return c;
}

}  // namespace detail

/// Ridge kernel restricted to unit sum and, if `centred`, zero first moments.
inline Kernel solve_kernel_gauged(const GrayImage& observed, const GrayImage& latent, double lambda, int ks,
                                  bool centred = false) {
  if (ks <= 0 || ks % 2 == 0) throw DeconvError(DeconvError::Kind::invalid_config, "kernel size must be odd");
  if (latent.width() - ks + 1 != observed.width() || latent.height() - ks + 1 != observed.height()) {
    throw DeconvError(DeconvError::Kind::dimension_mismatch,
                      "solve_kernel_gauged: latent block must exceed the observation by ksize-1");
  }
  Eigen::MatrixXd gram;
  Eigen::VectorXd rhs;
  detail::kernel_normal_equations(observed, latent, ks, gram, rhs);
  gram.diagonal().array() += static_cast<double>(observed.size()) * lambda;
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(gram);
  const Eigen::MatrixXd c = detail::kernel_gauge(ks, centred);
  Eigen::VectorXd d = Eigen::VectorXd::Zero(c.rows());
  d(0) = 1.0;
  const Eigen::VectorXd gb = ldlt.solve(rhs);
  const Eigen::MatrixXd gc = ldlt.solve(c.transpose());
  const Eigen::VectorXd nu = (c * gc).fullPivLu().solve(c * gb - d);
  const Eigen::VectorXd sol = gb - gc * nu;
  if (!sol.allFinite()) {
    throw DeconvError(DeconvError::Kind::degenerate_block, "solve_kernel_gauged: singular system");
  }
  Kernel k(ks);
  for (int i = 0; i < ks * ks; ++i) k.weights()[static_cast<std::size_t>(i)] = sol(i);
  return k;
}

inline GrayImage predict_block(const BlockProblem& prob, const Homography& h, const Kernel& k,
                               const IlluminationParams& illum) {
  return convolve(compose_latent(render_latent_pattern(prob, h), illum, prob.coords), k, ConvMode::valid);
}

/// Per-pixel mean squared residual plus lambda |k|^2 (the ridge term is not divided by N).
inline double eval_loss(const BlockProblem& prob, const Homography& h, const Kernel& k,
                        const IlluminationParams& illum, double lambda) {
  if (k.size() != prob.kernel_size()) {
    throw DeconvError(DeconvError::Kind::dimension_mismatch, "eval_loss: kernel size does not match block margin");
  }
  return mean_squared_difference(predict_block(prob, h, k, illum), prob.observed) + lambda * k.squared_norm();
}

/// Gradient of eval_loss w.r.t. all nine homography entries (row-major). The H(2,2)
/// entry is reported but held fixed by the optimizer.
inline Mat3 loss_gradient_full(const BlockProblem& prob, const Homography& h, const Kernel& k,
                               const IlluminationParams& illum) {
  const Mat3 m = h.inverse().matrix();
  const PixelRect lat = prob.geometry.latent();
  const double beta = prob.pattern.beta;
  const std::size_t nl = static_cast<std::size_t>(lat.width) * lat.height;

  GrayImage pattern(lat.width, lat.height);
  std::vector<Vec3> qh(nl);
  std::vector<Vec2> dp(nl);
  for (int y = 0; y < lat.height; ++y)
    for (int x = 0; x < lat.width; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * lat.width + x;
      const Vec3 q = m * Vec3(lat.x0 + x, lat.y0 + y, 1.0);
      const Vec2 qd(q.x() / q.z(), q.y() / q.z());
      const SoftSample s = star_soft_at(qd, beta, prob.pattern.seam_width);  // cell centres held fixed
      pattern.at(x, y) = s.value;
      qh[idx] = q;
      dp[idx] = Vec2(s.d_du, s.d_dv);
    }

  const GrayImage latent = compose_latent(pattern, illum, prob.coords);
  GrayImage residual = convolve(latent, k, ConvMode::valid);
  const double scale = 2.0 / static_cast<double>(residual.size());
  for (std::size_t i = 0; i < residual.size(); ++i) {
    residual.data()[i] = scale * (residual.data()[i] - prob.observed.data()[i]);
  }
  const GrayImage grad_latent = convolve_adjoint(residual, k);

  // dL/dH = -M^T sum_p g_p q~_p^T, g_p = (cx, cy, -(cx qx + cy qy)) / q~_w, c = dL/dq.
  Mat3 acc = Mat3::Zero();
  for (std::size_t idx = 0; idx < nl; ++idx) {
    const double gp = grad_latent.data()[idx] * illum.amplitude(prob.coords.u.data()[idx], prob.coords.v.data()[idx]);
    if (gp == 0.0) continue;
    const Vec3& q = qh[idx];
    const double cx = gp * dp[idx].x();
    const double cy = gp * dp[idx].y();
    const double iw = 1.0 / q.z();
    const Vec3 g(cx * iw, cy * iw, -(cx * q.x() + cy * q.y()) * iw * iw);
    acc.noalias() += g * q.transpose();
  }
  return -m.transpose() * acc;
}

using HomographyGradient = Eigen::Matrix<double, 8, 1>;

/// Analytic d(eval_loss)/dH for the eight free entries h00 h01 h02 h10 h11 h12 h20 h21.
inline HomographyGradient grad_H(const BlockProblem& prob, const Homography& h, const Kernel& k,
                                 const IlluminationParams& illum) {
  const Mat3 g = loss_gradient_full(prob, h, k, illum);
  HomographyGradient out;
  out << g(0, 0), g(0, 1), g(0, 2), g(1, 0), g(1, 1), g(1, 2), g(2, 0), g(2, 1);
  return out;
}

enum class ElementStatus { unvisited, converged, failed };

struct ElementEstimate {
  int i{0};
  int j{0};
  ElementStatus status{ElementStatus::unvisited};
  Homography h;
  Kernel kernel;
  IlluminationParams illum;
  double loss{std::numeric_limits<double>::infinity()};
  bool converged{false};
  int iterations{0};
  double explained_variance{0.0};
  BlockGeometry block;
  std::string note;
};

/// Loss after every closed-form solve and after every accepted gradient step.
struct BlockTrace {
  struct Step {
    enum class Kind { kernel_solve, illumination_solve, gradient, joint } kind;
    double loss;
  };
  std::vector<Step> steps;
};

namespace detail {

// H = T(c) Hc with Hc(2,2) = w fixed. theta holds Hc's first two rows divided by w and the
// perspective entries scaled by the block half-size, so a unit change in any component
// moves the block corners by roughly one pixel.
struct BlockParameterization {
  Vec2 center;
  double scale;
  double w;

  [[nodiscard]] HomographyGradient to_theta(const Homography& h) const {
    const Mat3 hc = translation_homography(-center).matrix() * h.matrix();
    HomographyGradient t;
    t << hc(0, 0) / w, hc(0, 1) / w, hc(0, 2) / w, hc(1, 0) / w, hc(1, 1) / w, hc(1, 2) / w, scale * hc(2, 0) / w,
        scale * hc(2, 1) / w;
    return t;
  }

  [[nodiscard]] Homography from_theta(const HomographyGradient& t) const {
    Mat3 hc;
    hc << t(0), t(1), t(2), t(3), t(4), t(5), t(6) / scale, t(7) / scale, 1.0;
    return Homography(translation_homography(center).matrix() * (w * hc));
  }

  /// dH / dtheta_i
  [[nodiscard]] Mat3 derivative(int i) const {
    Mat3 e = Mat3::Zero();
    e(i / 3, i % 3) = i >= 6 ? w / scale : w;
    return translation_homography(center).matrix() * e;
  }

  [[nodiscard]] HomographyGradient chain(const Mat3& grad_h) const {
    const Mat3 gc = translation_homography(center).matrix().transpose() * grad_h;
    HomographyGradient g;
    g << w * gc(0, 0), w * gc(0, 1), w * gc(0, 2), w * gc(1, 0), w * gc(1, 1), w * gc(1, 2), w / scale * gc(2, 0),
        w / scale * gc(2, 1);
    return g;
  }
};

inline double explained_variance(const GrayImage& observed, const GrayImage& prediction) {
  double mean = 0.0;
  for (double v : observed.data()) mean += v;
  mean /= static_cast<double>(observed.size());
  double sst = 0.0;
  double sse = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    sst += (observed.data()[i] - mean) * (observed.data()[i] - mean);
    const double r = observed.data()[i] - prediction.data()[i];
    sse += r * r;
  }
  return sst > 0.0 ? 1.0 - sse / sst : 0.0;
}

/// Residual r = k * (S(H) A + B) - I and its Jacobian w.r.t. theta (N x 8), with A, B,
/// k and the cell centres held fixed.
inline void residual_jacobian(const BlockProblem& prob, const Homography& h, const Kernel& k,
                              const IlluminationParams& illum, const BlockParameterization& param,
                              Eigen::MatrixXd& jac, Eigen::VectorXd& res, GrayImage* pattern_out = nullptr) {
  const Mat3 m = h.inverse().matrix();
  const PixelRect lat = prob.geometry.latent();
  const double beta = prob.pattern.beta;
  std::array<Mat3, 8> dm;
  for (int i = 0; i < 8; ++i) dm[static_cast<std::size_t>(i)] = -m * param.derivative(i);

  GrayImage pattern(lat.width, lat.height);
  std::array<GrayImage, 8> dlatent;
  for (auto& d : dlatent) d = GrayImage(lat.width, lat.height);
  for (int y = 0; y < lat.height; ++y)
    for (int x = 0; x < lat.width; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * lat.width + x;
      const Vec3 q = m * Vec3(lat.x0 + x, lat.y0 + y, 1.0);
      const double qx = q.x() / q.z();
      const double qy = q.y() / q.z();
      const SoftSample s = star_soft_at(Vec2(qx, qy), beta, prob.pattern.seam_width);
      pattern.data()[idx] = s.value;
      const double amp = illum.amplitude(prob.coords.u.data()[idx], prob.coords.v.data()[idx]);
      if (s.d_du == 0.0 && s.d_dv == 0.0) continue;
      for (std::size_t i = 0; i < 8; ++i) {
        // dq~ = -M dH M p = dm_i q~
        const Vec3 dq = dm[i] * q;
        const double dqx = (dq.x() - qx * dq.z()) / q.z();
        const double dqy = (dq.y() - qy * dq.z()) / q.z();
        dlatent[i].data()[idx] = amp * (s.d_du * dqx + s.d_dv * dqy);
      }
    }
  const GrayImage pred = convolve(compose_latent(pattern, illum, prob.coords), k, ConvMode::valid);
  const auto n = static_cast<Eigen::Index>(pred.size());
  res = Eigen::Map<const Eigen::VectorXd>(pred.data().data(), n) -
        Eigen::Map<const Eigen::VectorXd>(prob.observed.data().data(), n);
  jac.resize(n, 8);
  for (int i = 0; i < 8; ++i) {
    const GrayImage col = convolve(dlatent[static_cast<std::size_t>(i)], k, ConvMode::valid);
    jac.col(i) = Eigen::Map<const Eigen::VectorXd>(col.data().data(), n);
  }
  if (pattern_out) *pattern_out = std::move(pattern);
}

inline GrayImage illumination_basis(const GrayImage& pattern, const LatentCoords& c, int b) {
  GrayImage out(pattern.width(), pattern.height());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = pattern.data()[i];
    const double u = c.u.data()[i];
    const double v = c.v.data()[i];
    switch (b) {
      case 0: out.data()[i] = s * u; break;
      case 1: out.data()[i] = s * v; break;
      case 2: out.data()[i] = s; break;
      case 3: out.data()[i] = u; break;
      case 4: out.data()[i] = v; break;
      default: out.data()[i] = 1.0; break;
    }
  }
  return out;
}

/// Gauss-Newton model of the block loss in all unknowns at once, ordered
/// [theta (8), kernel (K*K), illumination (6)]: hess = 2/N J^T J + 2 lambda P_k,
/// grad = 2/N J^T r + 2 lambda k.
inline void joint_normal_equations(const BlockProblem& prob, const Homography& h, const Kernel& k,
                                   const IlluminationParams& illum, const BlockParameterization& param,
                                   double lambda, Eigen::MatrixXd& hess, Eigen::VectorXd& grad) {
  const int ks = k.size();
  const int nk = ks * ks;
  const int np = 8 + nk + 6;
  Eigen::MatrixXd jh;
  Eigen::VectorXd res;
  GrayImage pattern;
  residual_jacobian(prob, h, k, illum, param, jh, res, &pattern);
  const auto n = res.size();
  const GrayImage latent = compose_latent(pattern, illum, prob.coords);

  Eigen::MatrixXd jf(n, 6);
  for (int b = 0; b < 6; ++b) {
    const GrayImage fb = convolve(illumination_basis(pattern, prob.coords, b), k, ConvMode::valid);
    jf.col(b) = Eigen::Map<const Eigen::VectorXd>(fb.data().data(), n);
  }

  Eigen::MatrixXd xtx;
  Eigen::VectorXd xti;
  kernel_normal_equations(prob.observed, latent, ks, xtx, xti);
  const Eigen::VectorXd kv = Eigen::Map<const Eigen::VectorXd>(k.weights().data(), nk);

  auto as_image = [&](const Eigen::VectorXd& col) {
    GrayImage img(prob.observed.width(), prob.observed.height());
    Eigen::Map<Eigen::VectorXd>(img.data().data(), n) = col;
    return img;
  };
  Eigen::MatrixXd xth(nk, 8);
  for (int i = 0; i < 8; ++i) xth.col(i) = design_transpose_times(latent, as_image(jh.col(i)), ks);
  Eigen::MatrixXd xtf(nk, 6);
  for (int i = 0; i < 6; ++i) xtf.col(i) = design_transpose_times(latent, as_image(jf.col(i)), ks);

  hess.setZero(np, np);
  hess.block(0, 0, 8, 8) = jh.transpose() * jh;
  hess.block(0, 8, 8, nk) = xth.transpose();
  hess.block(0, 8 + nk, 8, 6) = jh.transpose() * jf;
  hess.block(8, 8, nk, nk) = xtx;
  hess.block(8, 8 + nk, nk, 6) = xtf;
  hess.block(8 + nk, 8 + nk, 6, 6) = jf.transpose() * jf;
  hess.triangularView<Eigen::StrictlyLower>() = hess.transpose();

  grad.resize(np);
  grad.segment(0, 8) = jh.transpose() * res;
  grad.segment(8, nk) = xtx * kv - xti;  // X^T (X k - I)
  grad.segment(8 + nk, 6) = jf.transpose() * res;

  const double scale = 2.0 / static_cast<double>(n);
  hess *= scale;
  grad *= scale;
  hess.block(8, 8, nk, nk).diagonal().array() += 2.0 * lambda;
  grad.segment(8, nk) += 2.0 * lambda * kv;
}

}  // namespace detail

namespace detail {

inline double max_corner_motion(const Homography& a, const Homography& b, const BlockGeometry& g) {
  const Vec2 c = g.center();
  const double hw = g.half_width();
  const double hh = g.half_height();
  double worst = 0.0;
  for (const Vec2& corner : {Vec2(c.x() - hw, c.y() - hh), Vec2(c.x() + hw, c.y() - hh), Vec2(c.x() + hw, c.y() + hh),
                             Vec2(c.x() - hw, c.y() + hh)}) {
    const Vec2 q = apply(a.inverse(), corner);
    worst = std::max(worst, (apply(b, q) - corner).norm());
  }
  return worst;
}

/// One damped Gauss-Newton step on (H, k, A, B) inside the kernel gauge. Returns
/// false when no damping level lowers the loss.
inline bool joint_step(const BlockProblem& prob, const BlockParameterization& param, double lambda,
                       HomographyGradient& theta, Homography& h, Kernel& k, IlluminationParams& illum,
                       double& loss, double& damping, bool centred) {
  const int nk = k.size() * k.size();
  Eigen::MatrixXd hess;
  Eigen::VectorXd grad;
  joint_normal_equations(prob, h, k, illum, param, lambda, hess, grad);
  if (!grad.allFinite() || !hess.allFinite()) return false;
  const Eigen::VectorXd diag = hess.diagonal().cwiseMax(1e-12 * hess.diagonal().maxCoeff());
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(centred ? 3 : 1, grad.size());
  c.middleCols(8, nk) = kernel_gauge(k.size(), centred);
  for (int attempt = 0; attempt < 12; ++attempt, damping *= 4.0) {
    Eigen::MatrixXd a = hess;
    a.diagonal() += damping * diag;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
    const Eigen::VectorXd ag = ldlt.solve(grad);
    const Eigen::MatrixXd ac = ldlt.solve(c.transpose());
    const Eigen::VectorXd nu = (c * ac).fullPivLu().solve(c * ag);
    const Eigen::VectorXd delta = -(ag - ac * nu);
    if (!delta.allFinite()) continue;
    const HomographyGradient t = theta + delta.head<8>();
    const Homography hc = param.from_theta(t);
    if (hc.is_singular()) continue;
    Kernel kc = k;
    for (int i = 0; i < nk; ++i) kc.weights()[static_cast<std::size_t>(i)] += delta(8 + i);
    IlluminationParams ic = illum;
    for (int i = 0; i < 6; ++i) ic.p[static_cast<std::size_t>(i)] += delta(8 + nk + i);
    double trial = std::numeric_limits<double>::infinity();
    try {
      trial = eval_loss(prob, hc, kc, ic, lambda);
    } catch (const GeometryError&) {
      continue;
    }
    if (trial < loss) {
      theta = t;
      h = hc;
      k = std::move(kc);
      illum = ic;
      loss = trial;
      damping = std::max(damping / 3.0, 1e-9);
      return true;
    }
  }
  return false;
}

}  // namespace detail

/// Fits H, kernel and illumination to one element block. Starts with a gauge-fixed kernel
/// solve and an illumination solve from H0, then either takes joint damped Gauss-Newton
/// steps or alternates kernel solve, illumination solve and `inner_steps` backtracking
/// gradient steps on H. Every accepted update lowers the loss; iteration stops once the
/// change falls below `convergence_tol` or after `max_iters` rounds.
inline ElementEstimate optimize_block(const BlockProblem& prob, const Homography& h0, const DeconvConfig& cfg,
                                      BlockTrace* trace = nullptr) {
  cfg.validate();
  if (cfg.kernel_size != prob.kernel_size()) {
    throw DeconvError(DeconvError::Kind::dimension_mismatch, "optimize_block: kernel size does not match block");
  }
  ElementEstimate est;
  est.block = prob.geometry;
  est.h = h0;

  const detail::BlockParameterization param{prob.geometry.center(), prob.geometry.half_width(), h0(2, 2)};
  HomographyGradient theta = param.to_theta(h0);
  Homography h = h0;

  auto record = [trace](BlockTrace::Step::Kind kind, double loss) {
    if (trace) trace->steps.push_back({kind, loss});
  };

  GrayImage pattern = render_latent_pattern(prob, h);
  Kernel k = Kernel::delta(prob.kernel_size());
  IlluminationParams illum;
  double loss = std::numeric_limits<double>::infinity();
  double previous = std::numeric_limits<double>::infinity();
  double step = cfg.step_size;
  double damping = 1e-3;
  bool converged = false;
  int iter = 0;
  try {
    illum = solve_illumination(prob.observed, k, pattern, prob.coords);
    for (; iter < cfg.max_iters; ++iter) {
      const Homography h_before = h;
      const bool alternate = iter == 0 || cfg.h_solver == HSolver::gradient_descent;
      if (alternate) {
        k = solve_kernel_gauged(prob.observed, compose_latent(pattern, illum, prob.coords), cfg.lambda,
                                prob.kernel_size(), cfg.centre_kernel);
        record(BlockTrace::Step::Kind::kernel_solve, eval_loss(prob, h, k, illum, cfg.lambda));
        illum = solve_illumination(prob.observed, k, pattern, prob.coords);
        loss = eval_loss(prob, h, k, illum, cfg.lambda);
        record(BlockTrace::Step::Kind::illumination_solve, loss);
      }
      if (cfg.h_solver == HSolver::gauss_newton) {
        if (!detail::joint_step(prob, param, cfg.lambda, theta, h, k, illum, loss, damping, cfg.centre_kernel)) {
          // No damping level improves the loss: numerically stationary.
          converged = true;
          ++iter;
          break;
        }
        record(BlockTrace::Step::Kind::joint, loss);
      } else {
        for (int s = 0; s < cfg.inner_steps; ++s) {
          const HomographyGradient g = param.chain(loss_gradient_full(prob, h, k, illum));
          if (!g.allFinite() || g.norm() == 0.0) break;
          bool accepted = false;
          while (step > 1e-12) {
            const HomographyGradient candidate = theta - step * g;
            const Homography hc = param.from_theta(candidate);
            double trial = std::numeric_limits<double>::infinity();
            if (!hc.is_singular()) trial = eval_loss(prob, hc, k, illum, cfg.lambda);
            if (trial < loss) {
              theta = candidate;
              h = hc;
              loss = trial;
              step *= 1.1;
              accepted = true;
              record(BlockTrace::Step::Kind::gradient, loss);
              break;
            }
            step *= 0.5;
          }
          if (!accepted) {
            step = cfg.step_size;
            break;
          }
        }
        pattern = render_latent_pattern(prob, h);
      }
      if (std::abs(previous - loss) < cfg.convergence_tol ||
          (iter > 0 && detail::max_corner_motion(h_before, h, prob.geometry) < cfg.vertex_tol)) {
        converged = true;
        ++iter;
        break;
      }
      previous = loss;
    }
  } catch (const std::exception& e) {
    est.status = ElementStatus::failed;
    est.note = e.what();
    est.h = h;
    return est;
  }

  est.h = h;
  est.kernel = k;
  est.illum = illum;
  est.loss = loss;
  est.iterations = iter;
  est.explained_variance = detail::explained_variance(prob.observed, predict_block(prob, h, k, illum));
  est.converged = converged && std::isfinite(loss);
  if (!est.converged) {
    est.note = "no convergence within max_iters";
  } else if (est.explained_variance < cfg.min_explained_variance) {
    est.converged = false;
    est.note = "model explains too little of the block (flat or occluded)";
  } else if (illum.amplitude(0.0, 0.0) <= 0.0) {
    est.converged = false;
    est.note = "non-positive pattern amplitude";
  }
  if (est.converged && illum.min_amplitude() <= 0.0) {
    warn("element amplitude plane is non-positive somewhere in the block");
  }
  est.status = est.converged ? ElementStatus::converged : ElementStatus::failed;
  return est;
}

}  // namespace blurcal
