#pragma once

// Desk-scale experiments: kernel recovery per pattern, alignment under injected shifts,
// and the full synthetic pipeline.

#include "blurcal/deconv.hpp"
#include "blurcal/global_align.hpp"
#include "blurcal/local_align.hpp"
#include "blurcal/parallel.hpp"
#include "blurcal/psf.hpp"
#include "blurcal/region_grow.hpp"
#include "blurcal/synth.hpp"

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace blurcal {

// ---------------------------------------------------------------------------
// Kernel recovery with everything but the kernel known.

struct PatternCompareConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6};
  std::vector<double> noise_levels{0.0, 0.05};
  int block_size{64};
  int kernel_size{15};
  double glyph_sigma{0.8};
  /// Pixels per pattern cell side; checkerboard squares are half of this.
  double cell_px{64.0};
  /// Ridge weight: the MAP value noise^2 / (N tau^2) for a Gaussian prior of standard
  /// deviation tau on each kernel entry, floored at lambda_min.
  double lambda_min{1e-4};
  double kernel_prior_sd{1.0 / 128.0};
  double amplitude{0.7};
  double bias{0.15};
};

struct PatternCompareCell {
  PatternKind pattern{PatternKind::star16};
  double noise{0.0};
  std::uint64_t seed{0};
  double lambda{0.0};
  double ssim{0.0};
  double psnr{0.0};
};

struct PatternCompareSummary {
  PatternKind pattern{PatternKind::star16};
  double noise{0.0};
  double mean_ssim{0.0};
  double mean_psnr{0.0};
};

struct PatternCompareReport {
  std::vector<PatternCompareCell> cells;
  std::vector<PatternCompareSummary> summary;

  [[nodiscard]] const PatternCompareSummary& at(PatternKind p, double noise) const {
    for (const auto& s : summary)
      if (s.pattern == p && s.noise == noise) return s;
    throw std::out_of_range("pattern compare: no such condition");
  }
};

inline const char* to_string(PatternKind p) { return p == PatternKind::star16 ? "star" : "checkerboard"; }

/// Kernel as an image scaled so the true kernel peaks at 1.
inline GrayImage kernel_image(const Kernel& k, double peak) {
  GrayImage img(k.size(), k.size());
  for (int y = 0; y < k.size(); ++y)
    for (int x = 0; x < k.size(); ++x) img.at(x, y) = k.at(x, y) / peak;
  return img;
}

inline PatternCompareCell pattern_compare_one(const PatternCompareConfig& cfg, PatternKind pattern, double noise,
                                              std::uint64_t seed) {
  const Kernel truth = glyph_like_kernel(seed, cfg.kernel_size, cfg.glyph_sigma);
  // Block centred on a cell centre, pattern axes slightly rotated off the pixel grid.
  auto rng = rng_stream(seed, 0x70617474ULL, pattern == PatternKind::star16 ? 1 : 2);
  const double angle = uniform(rng, -0.3, 0.3);
  const double s = cfg.cell_px / 2.0;
  const double c = (cfg.block_size + cfg.kernel_size - 1) / 2.0 - 0.5;
  Mat3 m;
  m << s * std::cos(angle), -s * std::sin(angle), c + uniform(rng, -2.0, 2.0), s * std::sin(angle),
      s * std::cos(angle), c + uniform(rng, -2.0, 2.0), 0.0, 0.0, 1.0;
  const Homography h(m);
  const int n = cfg.block_size + cfg.kernel_size - 1;
  GrayImage latent = render({pattern, 25.0, 0.0}, h, {0, 0, n, n}, RenderMode::antialiased);
  for (double& v : latent.data()) v = cfg.amplitude * v + cfg.bias;
  GrayImage observed = convolve(latent, truth, ConvMode::valid);
  if (noise > 0.0) observed = add_gaussian_noise(observed, noise, rng_stream(seed, 0x6e6f6973ULL, pattern == PatternKind::star16 ? 1 : 2)());
  const double n_obs = static_cast<double>(observed.size());
  const double lambda =
      std::max(cfg.lambda_min, noise * noise / (n_obs * cfg.kernel_prior_sd * cfg.kernel_prior_sd));
  const Kernel est = solve_kernel(observed, latent, lambda, cfg.kernel_size);
  double peak = 0.0;
  for (double w : truth.weights()) peak = std::max(peak, w);
  const GrayImage a = kernel_image(truth, peak);
  const GrayImage b = kernel_image(est, peak);
  return {pattern, noise, seed, lambda, ssim(a, b), psnr(a, b)};
}

inline PatternCompareReport exp_pattern_compare(const PatternCompareConfig& cfg, int threads = 1) {
  struct Job {
    PatternKind p;
    double noise;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (PatternKind p : {PatternKind::star16, PatternKind::checkerboard})
    for (double noise : cfg.noise_levels)
      for (std::uint64_t seed : cfg.seeds) jobs.push_back({p, noise, seed});
  PatternCompareReport rep;
  rep.cells.resize(jobs.size());
  parallel_for(jobs.size(), threads,
               [&](std::size_t k) { rep.cells[k] = pattern_compare_one(cfg, jobs[k].p, jobs[k].noise, jobs[k].seed); });
  for (PatternKind p : {PatternKind::star16, PatternKind::checkerboard})
    for (double noise : cfg.noise_levels) {
      PatternCompareSummary s{p, noise, 0.0, 0.0};
      int count = 0;
      for (const auto& cell : rep.cells)
        if (cell.pattern == p && cell.noise == noise) {
          s.mean_ssim += cell.ssim;
          s.mean_psnr += cell.psnr;
          ++count;
        }
      if (count > 0) {
        s.mean_ssim /= count;
        s.mean_psnr /= count;
      }
      rep.summary.push_back(s);
    }
  return rep;
}

// ---------------------------------------------------------------------------
// Alignment under synthetic per-frame shifts.

struct AlignVerifyConfig {
  int frames{20};
  int rows{8};
  int cols{8};
  double shift_range{5.0};
  double feature_noise{0.05};
  double outlier_fraction{0.05};
  /// Outliers are displaced by a uniform vector of this length range (px).
  double outlier_min{3.0};
  double outlier_max{8.0};
  std::vector<double> angle_thresholds{0.0, std::numbers::pi / 10.0};
  std::uint64_t seed{7};
  CameraIntrinsics camera{800.0, 800.0, 319.5, 239.5, 0.0};
  Distortion distortion;
};

struct AlignVerifyRow {
  std::string method;  // "random_shifted" or "global_aligned"
  LossKind loss{LossKind::huber};
  double angle_threshold{0.0};
  double median_err{0.0};
  double mean_err{0.0};
  double median_residual{0.0};
  double mean_residual{0.0};
  int frames_used{0};
};

struct AlignVerifyReport {
  std::vector<AlignVerifyRow> rows;

  [[nodiscard]] const AlignVerifyRow& at(const std::string& method, LossKind loss, double threshold) const {
    for (const auto& r : rows)
      if (r.method == method && r.loss == loss && r.angle_threshold == threshold) return r;
    throw std::out_of_range("align verify: no such row");
  }
};

/// Poses alternate between near-frontal and oblique so the angle filter has work to do.
inline Pose align_verify_pose(const AlignVerifyConfig& cfg, int frame) {
  auto rng = rng_stream(cfg.seed, static_cast<std::uint64_t>(frame), 11);
  const bool frontal = frame % 4 == 0;
  const double tilt = frontal ? uniform(rng, 0.0, 0.2) : uniform(rng, 0.4, 0.8);
  const double az = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double roll = uniform(rng, -0.3, 0.3);
  const double span = 2.0 * std::max(cfg.rows, cfg.cols);
  const Vec3 c(uniform(rng, -0.5, 0.5), uniform(rng, -0.5, 0.5), span * 1.6);
  return make_pose(tilt, az, roll, c, cfg.rows, cfg.cols);
}

struct AlignVerifyFrame {
  Pose pose;
  std::vector<Observation> obs;
  std::vector<Vec2> truth;  // unshifted, noise-free projections
  Vec2 shift{0.0, 0.0};
};

inline AlignVerifyFrame align_verify_frame(const AlignVerifyConfig& cfg, int frame) {
  AlignVerifyFrame f;
  f.pose = align_verify_pose(cfg, frame);
  std::vector<Vec2> clean;
  for (int i = 0; i < cfg.rows; ++i)
    for (int j = 0; j < cfg.cols; ++j) clean.push_back(project(cfg.camera, cfg.distortion, f.pose, element_world_point(i, j)));
  const std::uint64_t pseed = rng_stream(cfg.seed, static_cast<std::uint64_t>(frame), 12)();
  const PerturbedFeatures pert = perturb_features(clean, cfg.shift_range, cfg.feature_noise, pseed);
  f.shift = pert.shift;
  auto orng = rng_stream(cfg.seed, static_cast<std::uint64_t>(frame), 13);
  std::size_t k = 0;
  for (int i = 0; i < cfg.rows; ++i)
    for (int j = 0; j < cfg.cols; ++j, ++k) {
      Vec2 p = pert.features[k];
      if (uniform(orng, 0.0, 1.0) < cfg.outlier_fraction) {
        const double a = uniform(orng, 0.0, 2.0 * std::numbers::pi);
        p += uniform(orng, cfg.outlier_min, cfg.outlier_max) * Vec2(std::cos(a), std::sin(a));
      }
      f.obs.push_back({i, j, p, element_world_point(i, j), 1.0});
      f.truth.push_back(clean[k]);
    }
  return f;
}

/// Random-Shifted fits the pose alone to the shifted features; Global-Aligned fits the pose
/// and one per-frame shift. The error of a feature is the distance between the fitted
/// model's prediction of it (projection minus correction) and its shifted but noise- and
/// outlier-free position, so it measures the fit rather than the injected noise. Residual
/// magnitudes are reported alongside. Both are pooled over frames passing the angle filter.
inline AlignVerifyReport exp_align_verify(const AlignVerifyConfig& cfg, int threads = 1) {
  std::vector<AlignVerifyFrame> frames(static_cast<std::size_t>(cfg.frames));
  for (int f = 0; f < cfg.frames; ++f) frames[static_cast<std::size_t>(f)] = align_verify_frame(cfg, f);

  struct Job {
    LossKind loss;
    Correction corr;
  };
  const std::vector<Job> jobs{{LossKind::huber, Correction::none},   {LossKind::mean, Correction::none},
                              {LossKind::median, Correction::none},  {LossKind::huber, Correction::global_shift},
                              {LossKind::mean, Correction::global_shift}, {LossKind::median, Correction::global_shift}};
  std::vector<std::vector<AlignmentResult>> results(jobs.size(), std::vector<AlignmentResult>(frames.size()));
  parallel_for(jobs.size() * frames.size(), threads, [&](std::size_t n) {
    const std::size_t jb = n / frames.size();
    const std::size_t f = n % frames.size();
    AlignOptions opt;
    opt.loss = jobs[jb].loss;
    opt.correction = jobs[jb].corr;
    opt.angle_filter = false;
    results[jb][f] = align_frame(frames[f].obs, cfg.rows, cfg.cols, cfg.camera, cfg.distortion, opt);
  });

  AlignVerifyReport rep;
  for (double threshold : cfg.angle_thresholds)
    for (std::size_t jb = 0; jb < jobs.size(); ++jb) {
      std::vector<double> mags;
      std::vector<double> res;
      int used = 0;
      for (std::size_t f = 0; f < frames.size(); ++f) {
        const AlignmentResult& r = results[jb][f];
        if (r.axis_angle < threshold) continue;
        ++used;
        for (std::size_t k = 0; k < r.residuals.size(); ++k) {
          const Vec2 predicted = frames[f].obs[k].pixel + r.residuals[k];
          mags.push_back((predicted - frames[f].truth[k] - frames[f].shift).norm());
          res.push_back(r.residuals[k].norm());
        }
      }
      AlignVerifyRow row;
      row.method = jobs[jb].corr == Correction::none ? "random_shifted" : "global_aligned";
      row.loss = jobs[jb].loss;
      row.angle_threshold = threshold;
      row.frames_used = used;
      if (!mags.empty()) {
        row.median_err = median(mags);
        double s = 0.0;
        for (double m : mags) s += m;
        row.mean_err = s / static_cast<double>(mags.size());
        row.median_residual = median(res);
        s = 0.0;
        for (double m : res) s += m;
        row.mean_residual = s / static_cast<double>(res.size());
      }
      rep.rows.push_back(row);
    }
  return rep;
}

// ---------------------------------------------------------------------------
// Full pipeline on one frame: region growing from a seed, recentering, filtering, local
// and global alignment.

/// Alignment defaults for the pipeline: bilinear bias field with one pseudo-observation
/// of prior per coefficient.
inline AlignOptions pipeline_align_options() {
  AlignOptions o;
  o.correction = Correction::bilinear;
  o.correction_prior = 1.0;
  return o;
}

struct PipelineConfig {
  DeconvConfig deconv;
  FilterConfig filter;
  AlignOptions align{pipeline_align_options()};
  CameraIntrinsics camera{800.0, 800.0, 319.5, 239.5, 0.0};
  Distortion distortion;
  int rows{5};
  int cols{5};
};

enum class FrameOutcome { aligned, gated_sharp, too_few_elements, filtered_by_angle, failed };

inline const char* to_string(FrameOutcome o) {
  switch (o) {
    case FrameOutcome::aligned: return "aligned";
    case FrameOutcome::gated_sharp: return "insufficient blur";
    case FrameOutcome::too_few_elements: return "too few elements";
    case FrameOutcome::filtered_by_angle: return "filtered by orientation";
    default: return "failed";
  }
}

struct FrameResult {
  FrameOutcome outcome{FrameOutcome::failed};
  std::string reason;
  ElementGrid grid;       // after recentering and local shifts
  ElementGrid raw;        // straight from region growing
  StatsGrid stats;
  ElementMask mask;
  std::optional<LocalShiftField> shifts;
  std::optional<AlignmentResult> alignment;
  double median_sigma_major{0.0};
  /// Final feature position of each masked element (pixel + correction), row-major with
  /// NaN elsewhere.
  std::vector<Vec2> features;
};

/// Deconvolution and filtering only (no alignment).
inline FrameResult run_frame_deconv(const GrayImage& image, const std::vector<Seed>& seeds, const PipelineConfig& cfg,
                                    int threads = 1) {
  FrameResult out;
  out.raw = region_grow(image, cfg.rows, cfg.cols, seeds, cfg.deconv, threads);
  out.grid = out.raw;
  for (auto& e : out.grid.cells) {
    if (e.status != ElementStatus::converged) continue;
    try {
      e = recenter(e);
    } catch (const PsfError&) {
      e.status = ElementStatus::failed;
      e.note = "kernel has no positive mass";
    }
  }
  out.stats = stats_of(out.grid);
  std::vector<double> sig;
  for (int i = 0; i < cfg.rows; ++i)
    for (int j = 0; j < cfg.cols; ++j)
      if (in_center_region(i, j, cfg.rows, cfg.cols) && out.stats.at(i, j)) sig.push_back(out.stats.at(i, j)->sigma_major);
  out.median_sigma_major = sig.empty() ? 0.0 : median(sig);
  if (frame_gate(out.stats, cfg.filter.sigma_major_gate) == GateDecision::drop_sharp) {
    out.outcome = FrameOutcome::gated_sharp;
    out.reason = "insufficient blur";
    return out;
  }
  out.mask = filter_elements(cfg.rows, cfg.cols, losses_of(out.grid), out.stats, cfg.filter);
  out.outcome = FrameOutcome::aligned;
  return out;
}

/// Filtering (with cfg.filter), local shifts and global alignment of a deconvolved frame.
inline FrameResult finish_frame(FrameResult out, const PipelineConfig& cfg) {
  if (out.outcome == FrameOutcome::gated_sharp || out.outcome == FrameOutcome::failed) return out;
  out.mask = filter_elements(cfg.rows, cfg.cols, losses_of(out.grid), out.stats, cfg.filter);
  out.outcome = FrameOutcome::aligned;
  if (out.mask.count() < 6) {
    out.outcome = FrameOutcome::too_few_elements;
    out.reason = std::to_string(out.mask.count()) + " elements passed the filters";
    return out;
  }
  out.shifts = solve_local_shifts(out.grid, out.mask);
  out.grid = apply_shifts(out.grid, *out.shifts);
  const std::vector<Observation> obs = make_observations(out.grid, out.mask);
  out.alignment = align_frame(obs, cfg.rows, cfg.cols, cfg.camera, cfg.distortion, cfg.align);
  if (out.alignment->filtered_by_angle) {
    out.outcome = FrameOutcome::filtered_by_angle;
    out.reason = "optical axis within " + std::to_string(cfg.align.min_axis_angle) + " rad of the target normal";
    return out;
  }
  out.features.assign(out.grid.cells.size(), Vec2::Constant(std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t k = 0; k < obs.size(); ++k) {
    out.features[static_cast<std::size_t>(obs[k].i) * cfg.cols + obs[k].j] = out.alignment->aligned[k];
  }
  return out;
}

inline FrameResult run_frame(const GrayImage& image, const std::vector<Seed>& seeds, const PipelineConfig& cfg,
                             int threads = 1) {
  return finish_frame(run_frame_deconv(image, seeds, cfg, threads), cfg);
}

/// Seed for the centre element: the true homography shifted by `offset_px` in a seeded
/// random direction.
inline Seed perturbed_seed(const GroundTruthFrame& f, double offset_px, std::uint64_t seed) {
  auto rng = rng_stream(seed, 0x73656564ULL);
  const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const int i = f.rows / 2;
  const int j = f.cols / 2;
  return {i, j, translation_homography(offset_px * Vec2(std::cos(a), std::sin(a))) * f.at(i, j).h};
}

/// tau_L for synthetic noise: the loss floor sigma^2 (in 0..255 units) plus 50 %.
inline double noise_loss_threshold(double noise_sigma) { return 1.5 * raw_loss(noise_sigma * noise_sigma); }

struct EndToEndConfig {
  SceneConfig scene;
  PipelineConfig pipeline;
  double seed_offset_px{1.0};

  EndToEndConfig() { pipeline.filter.tau_loss = noise_loss_threshold(scene.noise_sigma); }
};

struct EndToEndFrame {
  int index{0};
  FrameOutcome outcome{FrameOutcome::failed};
  std::string reason;
  double axis_angle{0.0};
  double median_sigma_major{0.0};
  int kept{0};
  std::vector<double> errors;  // per kept element, px
  double seconds{0.0};
};

struct EndToEndReport {
  std::vector<EndToEndFrame> frames;
  double median_error{std::numeric_limits<double>::quiet_NaN()};
  double mean_error{std::numeric_limits<double>::quiet_NaN()};
  double seconds{0.0};
};

/// Runs every frame once through deconvolution, then through filtering and alignment
/// once per entry of `filters` (one report each). Feature error of an element is the
/// distance from its final feature position to the true projection of its cell centre.
inline std::vector<EndToEndReport> run_end_to_end(const EndToEndConfig& cfg, const std::vector<FilterConfig>& filters,
                                                  int threads = 1) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<EndToEndReport> reps(filters.size());
  std::vector<std::vector<double>> all(filters.size());
  for (int f = 0; f < cfg.scene.frames; ++f) {
    const auto tf = std::chrono::steady_clock::now();
    const GroundTruthFrame truth = make_frame(cfg.scene, f, threads);
    std::optional<FrameResult> deconv;
    std::string deconv_error;
    try {
      const Seed seed = perturbed_seed(truth, cfg.seed_offset_px, cfg.scene.seed * 1000003ULL + static_cast<std::uint64_t>(f));
      deconv = run_frame_deconv(truth.image, {seed}, cfg.pipeline, threads);
    } catch (const std::exception& err) {
      deconv_error = err.what();
    }
    for (std::size_t v = 0; v < filters.size(); ++v) {
      EndToEndFrame row;
      row.index = f;
      row.axis_angle = optical_axis_angle(truth.pose);
      if (!deconv) {
        row.outcome = FrameOutcome::failed;
        row.reason = deconv_error;
      } else {
        try {
          PipelineConfig pc = cfg.pipeline;
          pc.filter = filters[v];
          const FrameResult r = finish_frame(*deconv, pc);
          row.outcome = r.outcome;
          row.reason = r.reason;
          row.median_sigma_major = r.median_sigma_major;
          row.kept = r.mask.keep.empty() ? 0 : r.mask.count();
          if (r.outcome == FrameOutcome::aligned) {
            for (std::size_t n = 0; n < r.features.size(); ++n) {
              if (!r.mask.keep[n]) continue;
              const double e = (r.features[n] - truth.elements[n].center).norm();
              row.errors.push_back(e);
              all[v].push_back(e);
            }
          }
        } catch (const std::exception& err) {
          row.outcome = FrameOutcome::failed;
          row.reason = err.what();
        }
      }
      row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - tf).count();
      reps[v].frames.push_back(std::move(row));
    }
  }
  for (std::size_t v = 0; v < filters.size(); ++v) {
    if (!all[v].empty()) {
      reps[v].median_error = median(all[v]);
      double s = 0.0;
      for (double e : all[v]) s += e;
      reps[v].mean_error = s / static_cast<double>(all[v].size());
    }
    reps[v].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  return reps;
}

inline EndToEndReport run_end_to_end(const EndToEndConfig& cfg, int threads = 1) {
  return run_end_to_end(cfg, std::vector<FilterConfig>{cfg.pipeline.filter}, threads).front();
}

}  // namespace blurcal
