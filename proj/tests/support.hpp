#pragma once

// Random instances shared by the unit tests and the acceptance binary.

#include "blurcal/deconv.hpp"
#include "blurcal/global_align.hpp"
#include "blurcal/local_align.hpp"
#include "blurcal/synth.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace blurcal::testing {

/// Pattern -> pixel homography of a cell centred near `centre`: scale px per pattern
/// unit, rotation, mild shear and perspective.
inline Homography random_cell_homography(std::mt19937_64& rng, const Vec2& centre, double scale_lo = 24.0,
                                         double scale_hi = 36.0) {
  const double s = uniform(rng, scale_lo, scale_hi);
  const double a = uniform(rng, -std::numbers::pi, std::numbers::pi);
  const double shear = uniform(rng, -0.1, 0.1);
  Mat3 m = Mat3::Identity();
  m(0, 0) = s * std::cos(a);
  m(0, 1) = -s * std::sin(a) + s * shear;
  m(1, 0) = s * std::sin(a);
  m(1, 1) = s * std::cos(a);
  m(2, 0) = uniform(rng, -0.01, 0.01);
  m(2, 1) = uniform(rng, -0.01, 0.01);
  // keep the cell centre where asked
  m(0, 2) = centre.x();
  m(1, 2) = centre.y();
  return Homography(m);
}

/// Smooth anisotropic Gaussian blob, unit sum, centred near the window centre.
inline Kernel random_blob_kernel(std::mt19937_64& rng, int ks) {
  const int r = ks / 2;
  const double cx = uniform(rng, -1.0, 1.0);
  const double cy = uniform(rng, -1.0, 1.0);
  const double sa = uniform(rng, 1.0, 0.45 * r);
  const double sb = uniform(rng, 0.7, 2.0);
  const double th = uniform(rng, 0.0, std::numbers::pi);
  Kernel k(ks);
  for (int y = 0; y < ks; ++y)
    for (int x = 0; x < ks; ++x) {
      const double dx = x - r - cx;
      const double dy = y - r - cy;
      const double u = std::cos(th) * dx + std::sin(th) * dy;
      const double v = -std::sin(th) * dx + std::cos(th) * dy;
      k.at(x, y) = std::exp(-0.5 * (u * u / (sa * sa) + v * v / (sb * sb)));
    }
  return normalized_unit_sum(k);
}

inline IlluminationParams random_illumination(std::mt19937_64& rng) {
  IlluminationParams p;
  p.p = {uniform(rng, -0.08, 0.08), uniform(rng, -0.08, 0.08), uniform(rng, 0.5, 0.9),
         uniform(rng, -0.04, 0.04), uniform(rng, -0.04, 0.04), uniform(rng, 0.05, 0.2)};
  return p;
}

/// Parameters that generated a block, plus the problem itself.
struct SyntheticBlock {
  Homography h;
  Kernel kernel;
  IlluminationParams illum;
  BlockProblem problem;
};

/// Block rendered with the soft model itself, so the truth is an exact zero-residual fit
/// when noise is 0.
inline SyntheticBlock synthetic_block(std::mt19937_64& rng, int block, int ks, double beta, double seam_px,
                                      double noise = 0.0) {
  const Vec2 centre(uniform(rng, 150.0, 250.0), uniform(rng, 150.0, 250.0));
  const Homography h = random_cell_homography(rng, centre);
  const Kernel k = random_blob_kernel(rng, ks);
  const IlluminationParams p = random_illumination(rng);
  const BlockGeometry g = BlockGeometry::centered(apply(h, Vec2::Zero()), block, ks);
  const PatternSpec spec{PatternKind::star16, beta, seam_px * pattern_units_per_pixel(h)};
  BlockProblem prob(GrayImage(block, block), g, spec);
  GrayImage obs = predict_block(prob, h, k, p);
  if (noise > 0.0) obs = add_gaussian_noise(obs, noise, rng());
  prob.observed = std::move(obs);
  return {h, k, p, std::move(prob)};
}

/// Dense design matrix of valid-mode convolution with the kernel as the unknown:
/// conv(L, k)(x, y) = sum_{a,b} k(a, b) L(x + K-1-a, y + K-1-b), built element by element.
inline Eigen::MatrixXd dense_kernel_design(const GrayImage& latent, int ks, int ow, int oh) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(ow) * oh, ks * ks);
  for (int py = 0; py < oh; ++py)
    for (int px = 0; px < ow; ++px)
      for (int b = 0; b < ks; ++b)
        for (int a = 0; a < ks; ++a) x(py * ow + px, b * ks + a) = latent.at(px + ks - 1 - a, py + ks - 1 - b);
  return x;
}

/// Illumination planes moved with the latent by `d` pixels: A'(x) = A(x - d), likewise B.
inline IlluminationParams shifted_illumination(const IlluminationParams& p, const Vec2& d, const BlockGeometry& g) {
  IlluminationParams out = p;
  const double du = d.x() / g.half_width();
  const double dv = d.y() / g.half_height();
  out.p[2] -= p.p[0] * du + p.p[1] * dv;
  out.p[5] -= p.p[3] * du + p.p[4] * dv;
  return out;
}

/// Largest relative change of the block loss when H moves by an integer pixel shift d and
/// the kernel by -d, over all |dx|, |dy| <= max_shift. The kernel is supported within
/// max_shift of the centre of a (4 max_shift + 1)-wide window so no mass leaves it.
inline double coshift_deviation(std::mt19937_64& rng, int max_shift) {
  const int ks = 4 * max_shift + 1;
  const int r = ks / 2;
  SyntheticBlock sb = synthetic_block(rng, 48, ks, uniform(rng, 15.0, 40.0), 1.0, 0.02);
  Kernel k(ks);
  for (int y = r - max_shift; y <= r + max_shift; ++y)
    for (int x = r - max_shift; x <= r + max_shift; ++x) k.at(x, y) = uniform(rng, 0.0, 1.0);
  k = normalized_unit_sum(k);
  const double lambda = 1e-4;
  const double base = eval_loss(sb.problem, sb.h, k, sb.illum, lambda);
  double worst = 0.0;
  for (int dy = -max_shift; dy <= max_shift; ++dy)
    for (int dx = -max_shift; dx <= max_shift; ++dx) {
      const Vec2 d(dx, dy);
      const Homography h = translation_homography(d) * sb.h;
      const double l = eval_loss(sb.problem, h, k.shifted(-dx, -dy),
                                 shifted_illumination(sb.illum, d, sb.problem.geometry), lambda);
      worst = std::max(worst, std::abs(l - base) / base);
    }
  return worst;
}

/// Worst relative error of grad_H against central differences on one random instance,
/// evaluated away from the generating parameters. Steps are absolute: 1e-6 on the first
/// two rows of H, 3e-8 on the perspective entries.
inline double gradient_check(std::mt19937_64& rng) {
  const double beta = uniform(rng, 10.0, 50.0);
  SyntheticBlock sb = synthetic_block(rng, 64, 17, beta, 1.0, 0.01);
  Mat3 m = sb.h.matrix();
  m(0, 2) += uniform(rng, -0.7, 0.7);
  m(1, 2) += uniform(rng, -0.7, 0.7);
  m(0, 0) *= 1.0 + uniform(rng, -0.02, 0.02);
  m(2, 1) += uniform(rng, -1e-3, 1e-3);
  const Kernel k = random_blob_kernel(rng, 17);
  const IlluminationParams p = random_illumination(rng);
  const double lambda = 1e-4;
  const HomographyGradient g = grad_H(sb.problem, Homography(m), k, p);
  double worst = 0.0;
  for (int e = 0; e < 8; ++e) {
    const int row = e / 3;
    const int col = e % 3;
    const double step = row < 2 ? 1e-6 : 3e-8;
    auto loss_at = [&](double delta) {
      Mat3 q = m;
      q(row, col) += delta;
      return eval_loss(sb.problem, Homography(q), k, p, lambda);
    };
    const double fd = (loss_at(step) - loss_at(-step)) / (2.0 * step);
    const double rel = std::abs(fd - g(e)) / std::max({std::abs(fd), std::abs(g(e)), 1e-12});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace blurcal::testing
