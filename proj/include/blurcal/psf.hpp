#pragma once

// PSF moments, boundary energy, recentering and the element / frame filters.

#include "blurcal/deconv.hpp"
#include "blurcal/image.hpp"
#include "blurcal/log.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace blurcal {

class PsfError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PsfStats {
  Vec2 centroid{0.0, 0.0};  // px, relative to the kernel centre
  double sigma_major{0.0};
  double sigma_minor{0.0};
  double eccentricity{0.0};
  double boundary_energy{0.0};
};

struct FilterConfig {
  double tau_be{0.12};
  /// Per-pixel mean squared residual on the 0..255 intensity scale.
  double tau_loss{30.0};
  double sigma_major_gate{3.8};

  void validate() const {
    if (!(tau_be > 0.0)) throw PsfError("tau_be: must be positive");
    if (!(tau_loss > 0.0)) throw PsfError("tau_loss: must be positive");
    if (!(sigma_major_gate > 0.0)) throw PsfError("sigma_major_gate: must be positive");
  }
};

/// Loss in the units of FilterConfig::tau_loss.
inline double raw_loss(double mean_loss) { return mean_loss * 255.0 * 255.0; }

/// Moments of the clamped, mass-normalized kernel. The boundary ring is the outer
/// `ring` pixels of the window.
inline PsfStats psf_stats(const Kernel& k, int ring = 2) {
  const int n = k.size();
  const int r = k.radius();
  double mass = 0.0;
  double edge = 0.0;
  double mx = 0.0;
  double my = 0.0;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double w = std::max(0.0, k.at(x, y));
      mass += w;
      mx += w * (x - r);
      my += w * (y - r);
      if (x < ring || y < ring || x >= n - ring || y >= n - ring) edge += w;
    }
  if (!(mass > 0.0)) throw PsfError("psf_stats: kernel has no positive mass");
  PsfStats s;
  s.centroid = Vec2(mx / mass, my / mass);
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double w = std::max(0.0, k.at(x, y)) / mass;
      const Eigen::Vector2d d(x - r - s.centroid.x(), y - r - s.centroid.y());
      cov += w * d * d.transpose();
    }
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(cov);
  const double lmin = std::max(0.0, eig.eigenvalues()(0));
  const double lmax = std::max(0.0, eig.eigenvalues()(1));
  s.sigma_major = std::sqrt(lmax);
  s.sigma_minor = std::sqrt(lmin);
  s.eccentricity = lmax > 0.0 ? std::sqrt(std::max(0.0, 1.0 - lmin / lmax)) : 0.0;
  s.boundary_energy = std::clamp(edge / mass, 0.0, 1.0);
  return s;
}

/// out(x) = in(x + offset), bilinear, zero outside the window.
inline Kernel sample_shifted(const Kernel& k, const Vec2& offset) {
  const int n = k.size();
  const int ix = static_cast<int>(std::floor(offset.x()));
  const int iy = static_cast<int>(std::floor(offset.y()));
  const double fx = offset.x() - ix;
  const double fy = offset.y() - iy;
  auto in = [&](int x, int y) { return x >= 0 && y >= 0 && x < n && y < n ? k.at(x, y) : 0.0; };
  Kernel out(n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const int sx = x + ix;
      const int sy = y + iy;
      out.at(x, y) = (1 - fx) * (1 - fy) * in(sx, sy) + fx * (1 - fy) * in(sx + 1, sy) +
                     (1 - fx) * fy * in(sx, sy + 1) + fx * fy * in(sx + 1, sy + 1);
    }
  return out;
}

/// Moves the PSF centroid to the kernel centre and the matching translation into H
/// (H' = T(c) H), which leaves k * S(H) unchanged up to interpolation. A few passes are
/// taken because clamping makes the centroid of the resampled kernel slightly nonlinear.
inline ElementEstimate recenter(const ElementEstimate& e, int passes = 4) {
  auto positive_mass = [](const Kernel& k) {
    double m = 0.0;
    for (double w : k.weights()) m += std::max(w, 0.0);
    return m;
  };
  ElementEstimate out = e;
  const double mass_before = positive_mass(e.kernel);
  for (int pass = 0; pass < passes; ++pass) {
    const Vec2 c = psf_stats(out.kernel).centroid;
    if (c.norm() < 1e-6) break;
    out.kernel = sample_shifted(out.kernel, c);
    out.h = translation_homography(c) * out.h;
  }
  // Noise-level mass near the edge always moves a little; warn on real truncation only.
  if (positive_mass(out.kernel) < 0.95 * mass_before) {
    warn("recenter: element (" + std::to_string(e.i) + "," + std::to_string(e.j) +
         ") lost kernel mass past the window edge");
  }
  return out;
}

/// Central ceil(G/3) rows/cols of a G-long grid axis: [first, first + count).
inline std::pair<int, int> center_span(int g) {
  const int count = (g + 2) / 3;
  return {(g - count) / 2, count};
}

inline bool in_center_region(int i, int j, int rows, int cols) {
  const auto [r0, rn] = center_span(rows);
  const auto [c0, cn] = center_span(cols);
  return i >= r0 && i < r0 + rn && j >= c0 && j < c0 + cn;
}

/// Per-element stats; empty where the element did not converge or has no positive mass.
struct StatsGrid {
  int rows{0};
  int cols{0};
  std::vector<std::optional<PsfStats>> cells;

  [[nodiscard]] const std::optional<PsfStats>& at(int i, int j) const {
    return cells[static_cast<std::size_t>(i) * cols + j];
  }
};

/// Row-major element mask.
struct ElementMask {
  int rows{0};
  int cols{0};
  std::vector<char> keep;

  [[nodiscard]] bool at(int i, int j) const { return keep[static_cast<std::size_t>(i) * cols + j] != 0; }
  [[nodiscard]] int count() const { return static_cast<int>(std::count(keep.begin(), keep.end(), 1)); }
  [[nodiscard]] bool empty() const { return count() == 0; }
};

/// Keeps elements with BE <= tau_be and raw loss <= tau_loss, restricted to the
/// 4-connected component grown from the lowest-loss passing element of the centre region.
/// `losses` are per-pixel mean losses; `passes` marks converged elements.
inline ElementMask filter_elements(int rows, int cols, const std::vector<double>& losses, const StatsGrid& stats,
                                   const FilterConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::size_t>(rows) * cols;
  if (n == 0 || losses.size() != n || stats.cells.size() != n) throw PsfError("filter_elements: grid size mismatch");
  std::vector<char> pass(n, 0);
  for (std::size_t idx = 0; idx < n; ++idx) {
    const auto& s = stats.cells[idx];
    if (!s || !std::isfinite(losses[idx])) continue;
    if (s->boundary_energy > cfg.tau_be) continue;
    if (raw_loss(losses[idx]) > cfg.tau_loss) continue;
    pass[idx] = 1;
  }
  ElementMask mask{rows, cols, std::vector<char>(n, 0)};
  int seed = -1;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const int idx = i * cols + j;
      if (!pass[static_cast<std::size_t>(idx)] || !in_center_region(i, j, rows, cols)) continue;
      if (seed < 0 || losses[static_cast<std::size_t>(idx)] < losses[static_cast<std::size_t>(seed)]) seed = idx;
    }
  if (seed < 0) return mask;
  std::deque<int> queue{seed};
  mask.keep[static_cast<std::size_t>(seed)] = 1;
  while (!queue.empty()) {
    const int idx = queue.front();
    queue.pop_front();
    const int i = idx / cols;
    const int j = idx % cols;
    const int nbr[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
    for (const auto& nb : nbr) {
      if (nb[0] < 0 || nb[1] < 0 || nb[0] >= rows || nb[1] >= cols) continue;
      const auto nidx = static_cast<std::size_t>(nb[0] * cols + nb[1]);
      if (!pass[nidx] || mask.keep[nidx]) continue;
      mask.keep[nidx] = 1;
      queue.push_back(static_cast<int>(nidx));
    }
  }
  return mask;
}

enum class GateDecision { keep_blurry, drop_sharp };

inline double median(std::vector<double> v) {
  if (v.empty()) throw PsfError("median of an empty set");
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

/// Median sigma_major over the centre region's elements with stats. A frame with no such
/// element carries no evidence of blur and is dropped.
inline GateDecision frame_gate(const StatsGrid& stats, double gate = 3.8) {
  std::vector<double> sig;
  for (int i = 0; i < stats.rows; ++i)
    for (int j = 0; j < stats.cols; ++j) {
      if (!in_center_region(i, j, stats.rows, stats.cols)) continue;
      if (const auto& s = stats.at(i, j)) sig.push_back(s->sigma_major);
    }
  if (sig.empty()) return GateDecision::drop_sharp;
  return median(sig) < gate ? GateDecision::drop_sharp : GateDecision::keep_blurry;
}

}  // namespace blurcal
