#pragma once

// Synthetic blurred views of the star target with full ground truth.
//
// Each element is rendered on its own: the anti-aliased hard pattern under the element
// homography, times the amplitude plane plus the bias plane, convolved (valid mode)
// with the element's kernel. Elements are blended with a separable tent partition of
// unity that is 2 px wide across every interior cell border.

#include "blurcal/deconv.hpp"
#include "blurcal/geometry.hpp"
#include "blurcal/global_align.hpp"
#include "blurcal/image.hpp"
#include "blurcal/parallel.hpp"
#include "blurcal/pattern.hpp"
#include "blurcal/psf.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace blurcal {

class SynthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Independent, reproducible stream for (seed, a, b).
inline std::mt19937_64 rng_stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return std::mt19937_64(mix(mix(mix(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL)));
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

/// Separable Gaussian smoothing inside the kernel window (mass leaving it is dropped).
inline Kernel gaussian_smooth(const Kernel& k, double sigma) {
  if (sigma <= 0.0) return k;
  const int n = k.size();
  const int rad = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> g(static_cast<std::size_t>(2 * rad + 1));
  double s = 0.0;
  for (int i = -rad; i <= rad; ++i) s += g[static_cast<std::size_t>(i + rad)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : g) v /= s;
  Kernel tmp(n);
  Kernel out(n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i)
        if (x + i >= 0 && x + i < n) acc += g[static_cast<std::size_t>(i + rad)] * k.at(x + i, y);
      tmp.at(x, y) = acc;
    }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int i = -rad; i <= rad; ++i)
        if (y + i >= 0 && y + i < n) acc += g[static_cast<std::size_t>(i + rad)] * tmp.at(x, y + i);
      out.at(x, y) = acc;
    }
  return out;
}

inline Kernel normalized_unit_sum(Kernel k) {
  for (double& v : k.weights()) v = std::max(v, 0.0);
  const double s = k.sum();
  if (!(s > 0.0)) throw SynthError("kernel has no mass");
  for (double& v : k.weights()) v /= s;
  return k;
}

/// Stand-in for a smoothed font glyph: two or three random thin strokes (quadratic
/// curves), rasterized with bilinear splatting and smoothed with a Gaussian.
inline Kernel glyph_like_kernel(std::uint64_t seed, int size = 15, double smooth_sigma = 0.8) {
  if (size <= 0 || size % 2 == 0) throw SynthError("glyph_like_kernel: size must be odd");
  std::mt19937_64 rng = rng_stream(seed, 0x676c79ULL);
  Kernel k(size);
  const double c = size / 2;
  const double reach = std::max(0.5, c - 2.0);
  auto splat = [&](double x, double y, double w) {
    const int ix = static_cast<int>(std::floor(x));
    const int iy = static_cast<int>(std::floor(y));
    const double fx = x - ix;
    const double fy = y - iy;
    const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    const int ox[4] = {0, 1, 0, 1};
    const int oy[4] = {0, 0, 1, 1};
    for (int n = 0; n < 4; ++n) {
      const int px = ix + ox[n];
      const int py = iy + oy[n];
      if (px >= 0 && py >= 0 && px < size && py < size) k.at(px, py) += w * ws[n];
    }
  };
  const int strokes = 2 + static_cast<int>(rng() % 2);
  for (int s = 0; s < strokes; ++s) {
    Vec2 p[3];
    for (auto& q : p) q = Vec2(uniform(rng, -reach, reach), uniform(rng, -reach, reach));
    const double len = (p[1] - p[0]).norm() + (p[2] - p[1]).norm();
    const int samples = std::max(8, static_cast<int>(len * 32.0));
    const double weight = uniform(rng, 0.6, 1.0);
    for (int t = 0; t < samples; ++t) {
      const double u = (t + 0.5) / samples;
      const Vec2 b = (1 - u) * (1 - u) * p[0] + 2 * u * (1 - u) * p[1] + u * u * p[2];
      splat(c + b.x(), c + b.y(), weight / samples * len);
    }
  }
  return normalized_unit_sum(gaussian_smooth(k, smooth_sigma));
}

/// Line segment of the given length through the centre, box-filtered onto pixels (each
/// pixel gets the length of segment inside its square). Lengths up to one pixel give a
/// delta.
inline Kernel motion_line_kernel(double length, double angle, int size) {
  if (size <= 0 || size % 2 == 0) throw SynthError("motion_line_kernel: size must be odd");
  if (!(length >= 0.0) || length >= size) throw SynthError("motion_line_kernel: length must be below the window size");
  Kernel k(size);
  const int r = size / 2;
  const double dx = std::cos(angle);
  const double dy = std::sin(angle);
  const int samples = std::max(1, static_cast<int>(std::ceil(length * 2048.0)));
  for (int t = 0; t < samples; ++t) {
    const double s = length * ((t + 0.5) / samples - 0.5);
    const int x = static_cast<int>(std::lround(s * dx)) + r;
    const int y = static_cast<int>(std::lround(s * dy)) + r;
    k.at(x, y) += 1.0;
  }
  // A line through the centre is point-symmetric; enforce it exactly.
  Kernel sym(size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) sym.at(x, y) = 0.5 * (k.at(x, y) + k.at(size - 1 - x, size - 1 - y));
  return normalized_unit_sum(sym);
}

/// Full (linear) convolution of two kernels, cropped or padded to `size`.
inline Kernel compose_kernels(const Kernel& a, const Kernel& b, int size) {
  const int n = a.size() + b.size() - 1;
  Kernel full(n);
  for (int y1 = 0; y1 < a.size(); ++y1)
    for (int x1 = 0; x1 < a.size(); ++x1) {
      const double w = a.at(x1, y1);
      if (w == 0.0) continue;
      for (int y2 = 0; y2 < b.size(); ++y2)
        for (int x2 = 0; x2 < b.size(); ++x2) full.at(x1 + x2, y1 + y2) += w * b.at(x2, y2);
    }
  return full.resized(size);
}

/// Kernel with its (clamped) centroid moved to the window centre.
inline Kernel centred(const Kernel& k) {
  Kernel out = k;
  for (int pass = 0; pass < 4; ++pass) {
    const Vec2 c = psf_stats(out).centroid;
    if (c.norm() < 1e-9) break;
    out = sample_shifted(out, c);
  }
  return normalized_unit_sum(out);
}

enum class KernelKind { delta, motion, glyph, motion_glyph };

struct KernelFieldSpec {
  KernelKind kind{KernelKind::motion_glyph};
  double length_min{13.0};
  double length_max{14.0};
  int glyph_size{5};
  double glyph_sigma{0.8};
  int size{17};
};

/// Per-element kernels interpolated bilinearly from four corner anchors
/// (0: top-left, 1: top-right, 2: bottom-left, 3: bottom-right).
struct KernelField {
  std::array<Kernel, 4> anchors;

  [[nodiscard]] Kernel at(int i, int j, int rows, int cols) const {
    const double s = rows > 1 ? static_cast<double>(i) / (rows - 1) : 0.5;
    const double t = cols > 1 ? static_cast<double>(j) / (cols - 1) : 0.5;
    const double w[4] = {(1 - s) * (1 - t), (1 - s) * t, s * (1 - t), s * t};
    Kernel out(anchors[0].size());
    for (int n = 0; n < 4; ++n)
      for (std::size_t m = 0; m < out.weights().size(); ++m) out.weights()[m] += w[n] * anchors[static_cast<std::size_t>(n)].weights()[m];
    return out;
  }

  static KernelField constant(const Kernel& k) { return {{k, k, k, k}}; }
};

inline KernelField sample_kernel_field(const KernelFieldSpec& spec, std::mt19937_64& rng) {
  KernelField f;
  const double base_angle = uniform(rng, 0.0, std::numbers::pi);
  for (auto& a : f.anchors) {
    const double angle = base_angle + uniform(rng, -0.4, 0.4);
    const double len = uniform(rng, spec.length_min, spec.length_max);
    switch (spec.kind) {
      case KernelKind::delta: a = Kernel::delta(spec.size); break;
      case KernelKind::motion: a = motion_line_kernel(len, angle, spec.size); break;
      case KernelKind::glyph: a = centred(glyph_like_kernel(rng(), spec.size - 2, spec.glyph_sigma).resized(spec.size)); break;
      case KernelKind::motion_glyph:
        a = centred(compose_kernels(motion_line_kernel(len, angle, spec.size),
                                    glyph_like_kernel(rng(), spec.glyph_size, spec.glyph_sigma), spec.size));
        break;
    }
  }
  return f;
}

/// Amplitude and bias planes, linear in frame pixel coordinates.
struct IlluminationField {
  double a0{1.0}, ax{0.0}, ay{0.0};
  double b0{0.0}, bx{0.0}, by{0.0};

  [[nodiscard]] double amplitude(double x, double y) const { return a0 + ax * x + ay * y; }
  [[nodiscard]] double bias(double x, double y) const { return b0 + bx * x + by * y; }

  /// The same planes in the normalized coordinates of a block.
  [[nodiscard]] IlluminationParams params_for(const BlockGeometry& g) const {
    const Vec2 c = g.center();
    const double hw = g.half_width();
    const double hh = g.half_height();
    IlluminationParams p;
    p.p = {ax * hw, ay * hh, amplitude(c.x(), c.y()), bx * hw, by * hh, bias(c.x(), c.y())};
    return p;
  }
};

struct SceneConfig {
  CameraIntrinsics camera{800.0, 800.0, 319.5, 239.5, 0.0};
  Distortion distortion;
  int width{640};
  int height{480};
  int rows{5};
  int cols{5};
  int frames{12};
  double tilt_min{0.35};
  double tilt_max{0.6};
  double roll_max{0.3};
  double distance_min{24.0};
  double distance_max{26.0};
  double lateral_max{0.5};
  /// Pattern extent beyond the outer cell borders (pattern units).
  double target_margin{1.0};
  double background{0.5};
  double feather_px{2.0};
  /// antialiased for ground truth; soft renders exactly the deconvolution model
  /// (sigmoid beta and seam blend as in DeconvConfig).
  RenderMode render_mode{RenderMode::antialiased};
  double beta{25.0};
  double seam_px{1.0};
  KernelFieldSpec kernels;
  double amplitude_min{0.75};
  double amplitude_max{0.8};
  double bias_min{0.08};
  double bias_max{0.12};
  /// Largest change of amplitude across the frame width (half of it for the bias).
  double illumination_slope{0.08};
  double noise_sigma{0.05};
  std::uint64_t seed{1};
  int block_size{64};
  int kernel_size{17};

  void validate() const {
    camera.validate();
    auto fail = [](const std::string& field, const std::string& why) { throw SynthError(field + ": " + why); };
    if (width <= 0 || height <= 0) fail("width/height", "must be positive");
    if (rows < 1 || cols < 1) fail("rows/cols", "must be positive");
    if (frames < 0) fail("frames", "must be non-negative");
    if (tilt_min < 0.0 || tilt_max < tilt_min || tilt_max >= std::numbers::pi / 2) fail("tilt", "need 0 <= min <= max < pi/2");
    if (!(distance_min > 0.0) || distance_max < distance_min) fail("distance", "need 0 < min <= max");
    if (kernels.size <= 0 || kernels.size % 2 == 0) fail("kernels.size", "must be a positive odd integer");
    if (kernel_size <= 0 || kernel_size % 2 == 0) fail("kernel_size", "must be a positive odd integer");
    if (kernels.length_max >= kernels.size) fail("kernels.length_max", "must be below the kernel window");
    if (!(noise_sigma >= 0.0)) fail("noise_sigma", "must be non-negative");
    if (!(feather_px > 0.0)) fail("feather_px", "must be positive");
    if (!(beta > 0.0)) fail("beta", "must be positive");
    if (!(seam_px >= 0.0)) fail("seam_px", "must be non-negative");
  }
};

/// Pose with the given tilt (angle between optical axis and target normal) about an
/// in-plane axis at `azimuth`, a roll about the optical axis, and the grid centre at
/// (lateral, depth) in camera coordinates.
inline Pose make_pose(double tilt, double azimuth, double roll, const Vec3& centre_cam, int rows, int cols) {
  const Vec3 axis(std::cos(azimuth), std::sin(azimuth), 0.0);
  const Mat3 r = rotation_z(roll) * Eigen::AngleAxisd(tilt, axis).toRotationMatrix();
  const Vec3 grid_centre(static_cast<double>(cols - 1), static_cast<double>(rows - 1), 0.0);
  return {r, centre_cam - r * grid_centre};
}

inline Pose sample_pose(const SceneConfig& cfg, std::mt19937_64& rng) {
  const double tilt = uniform(rng, cfg.tilt_min, cfg.tilt_max);
  const double az = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double roll = uniform(rng, -cfg.roll_max, cfg.roll_max);
  const Vec3 c(uniform(rng, -cfg.lateral_max, cfg.lateral_max), uniform(rng, -cfg.lateral_max, cfg.lateral_max),
               uniform(rng, cfg.distance_min, cfg.distance_max));
  return make_pose(tilt, az, roll, c, cfg.rows, cfg.cols);
}

/// Homography of element (i, j): cell-local coordinates [-1, 1]^2 to pixels. With lens
/// distortion it is the DLT fit to distorted projections of a 9 x 9 grid over the cell.
inline Homography element_homography(const CameraIntrinsics& cam, const Distortion& dist, const Pose& pose, int i,
                                     int j) {
  const Homography offset = translation_homography(Vec2(2.0 * j, 2.0 * i));
  if (dist.is_zero()) return Homography((homography_from_pose(cam, pose) * offset).normalized());
  std::vector<Vec2> src;
  std::vector<Vec2> dst;
  for (int a = 0; a <= 8; ++a)
    for (int b = 0; b <= 8; ++b) {
      const Vec2 local(-1.0 + 0.25 * b, -1.0 + 0.25 * a);
      src.push_back(local);
      dst.push_back(project(cam, dist, pose, Vec3(2.0 * j + local.x(), 2.0 * i + local.y(), 0.0)));
    }
  return Homography(detail::planar_dlt(src, dst)).normalized();
}

struct GroundTruthElement {
  int i{0};
  int j{0};
  Homography h;
  Kernel kernel;
  IlluminationParams illum;
  BlockGeometry block;
  Vec2 center{0.0, 0.0};
  std::array<Vec2, 4> vertices{};  // (-1,-1), (1,-1), (1,1), (-1,1)
};

struct GroundTruthFrame {
  GrayImage image;
  Pose pose;
  int rows{0};
  int cols{0};
  KernelField kernels;
  IlluminationField illumination;
  std::vector<GroundTruthElement> elements;  // row-major

  [[nodiscard]] const GroundTruthElement& at(int i, int j) const {
    return elements[static_cast<std::size_t>(i) * cols + j];
  }
};

namespace detail {

/// Weight of the own cell along one local axis: 1 inside, a linear ramp of `width`
/// centred on the border, and for outer sides the border moved out by `margin`.
inline double tent_weight(double t, double width, bool open_low, bool open_high, double margin) {
  const double lo = -1.0 - (open_low ? margin : 0.0);
  const double hi = 1.0 + (open_high ? margin : 0.0);
  const double edge = std::min(t - lo, hi - t);
  return std::clamp(0.5 + edge / width, 0.0, 1.0);
}

}  // namespace detail

/// Renders one frame. `threads` splits the per-element renders.
inline GroundTruthFrame render_frame(const SceneConfig& cfg, const Pose& pose, const KernelField& field,
                                     const IlluminationField& illum, std::uint64_t noise_seed, int threads = 1) {
  cfg.validate();
  GroundTruthFrame f;
  f.pose = pose;
  f.rows = cfg.rows;
  f.cols = cfg.cols;
  f.kernels = field;
  f.illumination = illum;
  const int ks = field.anchors[0].size();
  const int kr = ks / 2;

  for (int i = 0; i < cfg.rows; ++i)
    for (int j = 0; j < cfg.cols; ++j) {
      GroundTruthElement e;
      e.i = i;
      e.j = j;
      try {
        e.h = element_homography(cfg.camera, cfg.distortion, pose, i, j);
        e.center = apply(e.h, Vec2::Zero());
        const Vec2 corners[4] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}};
        for (int c = 0; c < 4; ++c) e.vertices[static_cast<std::size_t>(c)] = apply(e.h, corners[c]);
      } catch (const GeometryError& err) {
        throw SynthError(std::string("target out of view: ") + err.what());
      }
      e.kernel = field.at(i, j, cfg.rows, cfg.cols);
      e.block = BlockGeometry::centered(e.center, cfg.block_size, cfg.kernel_size);
      e.illum = illum.params_for(e.block);
      const PixelRect lat = e.block.latent();
      if (lat.x0 < 0 || lat.y0 < 0 || lat.x0 + lat.width > cfg.width || lat.y0 + lat.height > cfg.height) {
        throw SynthError("target out of view: element (" + std::to_string(i) + "," + std::to_string(j) +
                         ") leaves the frame");
      }
      f.elements.push_back(std::move(e));
    }

  const GroundTruthElement& mid = f.at(cfg.rows / 2, cfg.cols / 2);
  const double feather = cfg.feather_px * pattern_units_per_pixel(mid.h);
  const double margin = cfg.target_margin;

  GrayImage accum(cfg.width, cfg.height, 0.0);
  GrayImage weight(cfg.width, cfg.height, 0.0);
  std::vector<GrayImage> tiles(f.elements.size());
  std::vector<GrayImage> tile_weights(f.elements.size());
  std::vector<PixelRect> regions(f.elements.size());

  parallel_for(f.elements.size(), threads, [&](std::size_t n) {
    const GroundTruthElement& e = f.elements[n];
    const bool open_l = e.j == 0;
    const bool open_r = e.j == cfg.cols - 1;
    const bool open_t = e.i == 0;
    const bool open_b = e.i == cfg.rows - 1;
    const double ex = 1.0 + 0.5 * feather + ((open_l || open_r) ? margin : 0.0);
    const double ey = 1.0 + 0.5 * feather + ((open_t || open_b) ? margin : 0.0);
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (double u : {-ex, ex})
      for (double v : {-ey, ey}) {
        const Vec2 p = apply(e.h, Vec2(u, v));
        x0 = std::min(x0, p.x());
        x1 = std::max(x1, p.x());
        y0 = std::min(y0, p.y());
        y1 = std::max(y1, p.y());
      }
    const int rx0 = std::max(0, static_cast<int>(std::floor(x0)) - 1);
    const int ry0 = std::max(0, static_cast<int>(std::floor(y0)) - 1);
    const int rx1 = std::min(cfg.width - 1, static_cast<int>(std::ceil(x1)) + 1);
    const int ry1 = std::min(cfg.height - 1, static_cast<int>(std::ceil(y1)) + 1);
    const PixelRect region{rx0, ry0, rx1 - rx0 + 1, ry1 - ry0 + 1};
    const PixelRect latent{region.x0 - kr, region.y0 - kr, region.width + 2 * kr, region.height + 2 * kr};
    const PatternSpec spec{PatternKind::star16, cfg.beta,
                           cfg.render_mode == RenderMode::soft ? cfg.seam_px * pattern_units_per_pixel(e.h) : 0.0};
    GrayImage lat = render(spec, e.h, latent, cfg.render_mode);
    for (int y = 0; y < latent.height; ++y)
      for (int x = 0; x < latent.width; ++x) {
        const double px = latent.x0 + x;
        const double py = latent.y0 + y;
        lat.at(x, y) = lat.at(x, y) * illum.amplitude(px, py) + illum.bias(px, py);
      }
    tiles[n] = convolve(lat, e.kernel, ConvMode::valid);
    GrayImage w(region.width, region.height);
    const Mat3 inv = e.h.inverse().matrix();
    for (int y = 0; y < region.height; ++y)
      for (int x = 0; x < region.width; ++x) {
        const Vec2 q = blurcal::detail::dehomogenize(inv, region.x0 + x, region.y0 + y);
        w.at(x, y) = detail::tent_weight(q.x(), feather, open_l, open_r, margin) *
                     detail::tent_weight(q.y(), feather, open_t, open_b, margin);
      }
    tile_weights[n] = std::move(w);
    regions[n] = region;
  });

  for (std::size_t n = 0; n < tiles.size(); ++n) {
    const PixelRect& r = regions[n];
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x) {
        const double w = tile_weights[n].at(x, y);
        if (w == 0.0) continue;
        accum.at(r.x0 + x, r.y0 + y) += w * tiles[n].at(x, y);
        weight.at(r.x0 + x, r.y0 + y) += w;
      }
  }
  for (std::size_t p = 0; p < accum.size(); ++p) {
    const double w = std::min(weight.data()[p], 1.0);
    accum.data()[p] += (1.0 - w) * cfg.background;
  }
  f.image = cfg.noise_sigma > 0.0 ? add_gaussian_noise(accum, cfg.noise_sigma, noise_seed) : accum;
  return f;
}

inline IlluminationField sample_illumination(const SceneConfig& cfg, std::mt19937_64& rng) {
  IlluminationField f;
  const double ga = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double gb = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double sa = uniform(rng, 0.0, cfg.illumination_slope) / cfg.width;
  const double sb = 0.5 * uniform(rng, 0.0, cfg.illumination_slope) / cfg.width;
  f.ax = sa * std::cos(ga);
  f.ay = sa * std::sin(ga);
  f.bx = sb * std::cos(gb);
  f.by = sb * std::sin(gb);
  const double cx = 0.5 * (cfg.width - 1);
  const double cy = 0.5 * (cfg.height - 1);
  f.a0 = uniform(rng, cfg.amplitude_min, cfg.amplitude_max) - f.ax * cx - f.ay * cy;
  f.b0 = uniform(rng, cfg.bias_min, cfg.bias_max) - f.bx * cx - f.by * cy;
  return f;
}

/// Frame `index` of the scene, reproducible from (config, seed, index).
inline GroundTruthFrame make_frame(const SceneConfig& cfg, int index, int threads = 1) {
  auto pose_rng = rng_stream(cfg.seed, static_cast<std::uint64_t>(index), 1);
  auto kernel_rng = rng_stream(cfg.seed, static_cast<std::uint64_t>(index), 2);
  auto illum_rng = rng_stream(cfg.seed, static_cast<std::uint64_t>(index), 3);
  const std::uint64_t noise_seed = rng_stream(cfg.seed, static_cast<std::uint64_t>(index), 4)();
  const Pose pose = sample_pose(cfg, pose_rng);
  const KernelField field = sample_kernel_field(cfg.kernels, kernel_rng);
  const IlluminationField illum = sample_illumination(cfg, illum_rng);
  return render_frame(cfg, pose, field, illum, noise_seed, threads);
}

struct PerturbedFeatures {
  std::vector<Vec2> features;
  Vec2 shift{0.0, 0.0};
};

/// One uniform shift in [-range, range]^2 for the whole frame plus i.i.d. Gaussian noise.
inline PerturbedFeatures perturb_features(const std::vector<Vec2>& features, double shift_range, double noise_sigma,
                                          std::uint64_t seed) {
  std::mt19937_64 rng = rng_stream(seed, 0x70657274ULL);
  PerturbedFeatures out;
  if (shift_range > 0.0) out.shift = Vec2(uniform(rng, -shift_range, shift_range), uniform(rng, -shift_range, shift_range));
  std::normal_distribution<double> noise(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
  for (const Vec2& p : features) {
    Vec2 q = p + out.shift;
    if (noise_sigma > 0.0) q += Vec2(noise(rng), noise(rng));
    out.features.push_back(q);
  }
  return out;
}

}  // namespace blurcal
