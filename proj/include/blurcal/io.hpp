#pragma once

// JSON encodings of configs, ground truth and estimates, and the dataset layout:
//   scene.json, frames/NNNN.pgm, truth/NNNN.json
// Every top-level document carries "schema_version".

#include "blurcal/deconv.hpp"
#include "blurcal/experiments.hpp"
#include "blurcal/geometry.hpp"
#include "blurcal/global_align.hpp"
#include "blurcal/image.hpp"
#include "blurcal/psf.hpp"
#include "blurcal/synth.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>

namespace blurcal {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Config error naming the offending field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Small value types

inline json to_json_mat3(const Mat3& m) {
  json a = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}

inline Mat3 mat3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 9) throw IoError("expected a 3x3 matrix as 9 numbers");
  Mat3 m;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(static_cast<std::size_t>(3 * r + c)).get<double>();
  return m;
}

inline json vec_json(const Vec2& v) { return json::array({v.x(), v.y()}); }
inline Vec2 vec2_from_json(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

inline json to_json(const CameraIntrinsics& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"skew", c.skew}};
}
inline json to_json(const Distortion& d) {
  return {{"k1", d.k1}, {"k2", d.k2}, {"k3", d.k3}, {"p1", d.p1}, {"p2", d.p2}};
}
inline json to_json(const Pose& p) {
  return {{"R", to_json_mat3(p.R)}, {"t", json::array({p.t.x(), p.t.y(), p.t.z()})}};
}
inline json to_json(const Kernel& k) { return {{"size", k.size()}, {"weights", k.weights()}}; }
inline json to_json(const IlluminationParams& p) { return json(p.p); }
inline json to_json(const BlockGeometry& g) {
  return {{"x0", g.observed.x0}, {"y0", g.observed.y0}, {"width", g.observed.width},
          {"height", g.observed.height}, {"margin", g.margin}};
}
inline json to_json(const PsfStats& s) {
  return {{"be", s.boundary_energy}, {"sigma_major", s.sigma_major}, {"sigma_minor", s.sigma_minor},
          {"ecc", s.eccentricity}, {"centroid", vec_json(s.centroid)}};
}

inline CameraIntrinsics camera_from_json(const json& j) {
  CameraIntrinsics c;
  c.fx = j.value("fx", c.fx);
  c.fy = j.value("fy", c.fy);
  c.cx = j.value("cx", c.cx);
  c.cy = j.value("cy", c.cy);
  c.skew = j.value("skew", c.skew);
  return c;
}
inline Distortion distortion_from_json(const json& j) {
  Distortion d;
  d.k1 = j.value("k1", 0.0);
  d.k2 = j.value("k2", 0.0);
  d.k3 = j.value("k3", 0.0);
  d.p1 = j.value("p1", 0.0);
  d.p2 = j.value("p2", 0.0);
  return d;
}
inline Pose pose_from_json(const json& j) {
  Pose p;
  p.R = orthonormalize(mat3_from_json(j.at("R")));
  const auto& t = j.at("t");
  p.t = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
  return p;
}
inline Kernel kernel_from_json(const json& j) {
  Kernel k(j.at("size").get<int>());
  const auto w = j.at("weights").get<std::vector<double>>();
  if (w.size() != k.weights().size()) throw IoError("kernel: weight count does not match size");
  k.weights() = w;
  return k;
}
inline IlluminationParams illum_from_json(const json& j) {
  IlluminationParams p;
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 6) throw IoError("illumination: expected 6 numbers");
  std::copy(v.begin(), v.end(), p.p.begin());
  return p;
}
inline BlockGeometry block_from_json(const json& j) {
  BlockGeometry g;
  g.observed = {j.at("x0").get<int>(), j.at("y0").get<int>(), j.at("width").get<int>(), j.at("height").get<int>()};
  g.margin = j.at("margin").get<int>();
  return g;
}

// ---------------------------------------------------------------------------
// Configs. Readers start from defaults and take only the fields present, so a partial
// document is a set of overrides.

namespace detail {

template <typename T>
void read_field(const json& j, const char* name, T& out) {
  if (!j.contains(name)) return;
  try {
    out = j.at(name).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(name) + ": wrong type");
  }
}

}  // namespace detail

inline const char* to_string(KernelKind k) {
  switch (k) {
    case KernelKind::delta: return "delta";
    case KernelKind::motion: return "motion";
    case KernelKind::glyph: return "glyph";
    default: return "motion_glyph";
  }
}

inline KernelKind kernel_kind_from_string(const std::string& s) {
  if (s == "delta") return KernelKind::delta;
  if (s == "motion") return KernelKind::motion;
  if (s == "glyph") return KernelKind::glyph;
  if (s == "motion_glyph") return KernelKind::motion_glyph;
  throw ConfigError("kernels.kind: unknown kind '" + s + "'");
}

inline const char* to_string(RenderMode m) {
  switch (m) {
    case RenderMode::soft: return "soft";
    case RenderMode::hard: return "hard";
    default: return "antialiased";
  }
}

inline RenderMode render_mode_from_string(const std::string& s) {
  if (s == "soft") return RenderMode::soft;
  if (s == "hard") return RenderMode::hard;
  if (s == "antialiased") return RenderMode::antialiased;
  throw ConfigError("render_mode: unknown mode '" + s + "'");
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "huber") return LossKind::huber;
  if (s == "mean") return LossKind::mean;
  if (s == "median") return LossKind::median;
  throw ConfigError("loss: unknown kind '" + s + "'");
}

inline const char* to_string(Correction c) {
  switch (c) {
    case Correction::none: return "none";
    case Correction::global_shift: return "global_shift";
    default: return "bilinear";
  }
}

inline Correction correction_from_string(const std::string& s) {
  if (s == "none") return Correction::none;
  if (s == "global_shift") return Correction::global_shift;
  if (s == "bilinear") return Correction::bilinear;
  throw ConfigError("correction: unknown kind '" + s + "'");
}

inline json to_json(const SceneConfig& c) {
  return {{"camera", to_json(c.camera)},
          {"distortion", to_json(c.distortion)},
          {"width", c.width},
          {"height", c.height},
          {"rows", c.rows},
          {"cols", c.cols},
          {"frames", c.frames},
          {"tilt_min", c.tilt_min},
          {"tilt_max", c.tilt_max},
          {"roll_max", c.roll_max},
          {"distance_min", c.distance_min},
          {"distance_max", c.distance_max},
          {"lateral_max", c.lateral_max},
          {"target_margin", c.target_margin},
          {"background", c.background},
          {"feather_px", c.feather_px},
          {"render_mode", to_string(c.render_mode)},
          {"beta", c.beta},
          {"seam_px", c.seam_px},
          {"kernels",
           {{"kind", to_string(c.kernels.kind)},
            {"length_min", c.kernels.length_min},
            {"length_max", c.kernels.length_max},
            {"glyph_size", c.kernels.glyph_size},
            {"glyph_sigma", c.kernels.glyph_sigma},
            {"size", c.kernels.size}}},
          {"amplitude_min", c.amplitude_min},
          {"amplitude_max", c.amplitude_max},
          {"bias_min", c.bias_min},
          {"bias_max", c.bias_max},
          {"illumination_slope", c.illumination_slope},
          {"noise_sigma", c.noise_sigma},
          {"seed", c.seed},
          {"block_size", c.block_size},
          {"kernel_size", c.kernel_size}};
}

inline void apply_json(const json& j, SceneConfig& c) {
  using detail::read_field;
  if (j.contains("camera")) c.camera = camera_from_json(j.at("camera"));
  if (j.contains("distortion")) c.distortion = distortion_from_json(j.at("distortion"));
  read_field(j, "width", c.width);
  read_field(j, "height", c.height);
  read_field(j, "rows", c.rows);
  read_field(j, "cols", c.cols);
  read_field(j, "frames", c.frames);
  read_field(j, "tilt_min", c.tilt_min);
  read_field(j, "tilt_max", c.tilt_max);
  read_field(j, "roll_max", c.roll_max);
  read_field(j, "distance_min", c.distance_min);
  read_field(j, "distance_max", c.distance_max);
  read_field(j, "lateral_max", c.lateral_max);
  read_field(j, "target_margin", c.target_margin);
  read_field(j, "background", c.background);
  read_field(j, "feather_px", c.feather_px);
  if (j.contains("render_mode")) c.render_mode = render_mode_from_string(j.at("render_mode").get<std::string>());
  read_field(j, "beta", c.beta);
  read_field(j, "seam_px", c.seam_px);
  if (j.contains("kernels")) {
    const json& k = j.at("kernels");
    if (k.contains("kind")) c.kernels.kind = kernel_kind_from_string(k.at("kind").get<std::string>());
    read_field(k, "length_min", c.kernels.length_min);
    read_field(k, "length_max", c.kernels.length_max);
    read_field(k, "glyph_size", c.kernels.glyph_size);
    read_field(k, "glyph_sigma", c.kernels.glyph_sigma);
    read_field(k, "size", c.kernels.size);
  }
  read_field(j, "amplitude_min", c.amplitude_min);
  read_field(j, "amplitude_max", c.amplitude_max);
  read_field(j, "bias_min", c.bias_min);
  read_field(j, "bias_max", c.bias_max);
  read_field(j, "illumination_slope", c.illumination_slope);
  read_field(j, "noise_sigma", c.noise_sigma);
  read_field(j, "seed", c.seed);
  read_field(j, "block_size", c.block_size);
  read_field(j, "kernel_size", c.kernel_size);
}

inline json to_json(const DeconvConfig& c) {
  return {{"kernel_size", c.kernel_size},
          {"lambda", c.lambda},
          {"beta", c.beta},
          {"max_iters", c.max_iters},
          {"inner_steps", c.inner_steps},
          {"step_size", c.step_size},
          {"convergence_tol", c.convergence_tol},
          {"vertex_tol", c.vertex_tol},
          {"block_size", c.block_size},
          {"min_explained_variance", c.min_explained_variance},
          {"h_solver", c.h_solver == HSolver::gauss_newton ? "gauss_newton" : "gradient_descent"},
          {"seam_px", c.seam_px},
          {"centre_kernel", c.centre_kernel}};
}

inline void apply_json(const json& j, DeconvConfig& c) {
  using detail::read_field;
  read_field(j, "kernel_size", c.kernel_size);
  read_field(j, "lambda", c.lambda);
  read_field(j, "beta", c.beta);
  read_field(j, "max_iters", c.max_iters);
  read_field(j, "inner_steps", c.inner_steps);
  read_field(j, "step_size", c.step_size);
  read_field(j, "convergence_tol", c.convergence_tol);
  read_field(j, "vertex_tol", c.vertex_tol);
  read_field(j, "block_size", c.block_size);
  read_field(j, "min_explained_variance", c.min_explained_variance);
  if (j.contains("h_solver")) {
    const auto s = j.at("h_solver").get<std::string>();
    if (s == "gauss_newton") {
      c.h_solver = HSolver::gauss_newton;
    } else if (s == "gradient_descent") {
      c.h_solver = HSolver::gradient_descent;
    } else {
      throw ConfigError("h_solver: unknown solver '" + s + "'");
    }
  }
  read_field(j, "seam_px", c.seam_px);
  read_field(j, "centre_kernel", c.centre_kernel);
}

inline json to_json(const FilterConfig& c) {
  return {{"tau_be", c.tau_be}, {"tau_loss", c.tau_loss}, {"sigma_major_gate", c.sigma_major_gate}};
}

inline void apply_json(const json& j, FilterConfig& c) {
  detail::read_field(j, "tau_be", c.tau_be);
  detail::read_field(j, "tau_loss", c.tau_loss);
  detail::read_field(j, "sigma_major_gate", c.sigma_major_gate);
}

inline json to_json(const AlignOptions& o) {
  return {{"loss", to_string(o.loss)},
          {"correction", to_string(o.correction)},
          {"max_outer", o.max_outer},
          {"pose_iters", o.pose_iters},
          {"shift_tol", o.shift_tol},
          {"min_axis_angle", o.min_axis_angle},
          {"angle_filter", o.angle_filter},
          {"correction_prior", o.correction_prior}};
}

inline void apply_json(const json& j, AlignOptions& o) {
  using detail::read_field;
  if (j.contains("loss")) o.loss = loss_kind_from_string(j.at("loss").get<std::string>());
  if (j.contains("correction")) o.correction = correction_from_string(j.at("correction").get<std::string>());
  read_field(j, "max_outer", o.max_outer);
  read_field(j, "pose_iters", o.pose_iters);
  read_field(j, "shift_tol", o.shift_tol);
  read_field(j, "min_axis_angle", o.min_axis_angle);
  read_field(j, "angle_filter", o.angle_filter);
  read_field(j, "correction_prior", o.correction_prior);
  if (o.max_outer <= 0) throw ConfigError("max_outer: must be positive");
  if (o.pose_iters <= 0) throw ConfigError("pose_iters: must be positive");
  if (!(o.min_axis_angle >= 0.0)) throw ConfigError("min_axis_angle: must be non-negative");
  if (!(o.correction_prior >= 0.0)) throw ConfigError("correction_prior: must be non-negative");
}

// ---------------------------------------------------------------------------
// Ground truth and estimates

inline json to_json(const GroundTruthFrame& f, int index) {
  json elements = json::array();
  json features = json::array();
  for (const auto& e : f.elements) {
    json v = json::array();
    for (const Vec2& p : e.vertices) v.push_back(vec_json(p));
    elements.push_back({{"i", e.i},
                        {"j", e.j},
                        {"H", to_json_mat3(e.h.matrix())},
                        {"kernel", to_json(e.kernel)},
                        {"illumination", to_json(e.illum)},
                        {"block", to_json(e.block)}});
    features.push_back({{"i", e.i}, {"j", e.j}, {"center", vec_json(e.center)}, {"vertices", v}});
  }
  const auto& il = f.illumination;
  return {{"schema_version", kSchemaVersion},
          {"frame", index},
          {"rows", f.rows},
          {"cols", f.cols},
          {"pose", to_json(f.pose)},
          {"illumination_field",
           {{"a0", il.a0}, {"ax", il.ax}, {"ay", il.ay}, {"b0", il.b0}, {"bx", il.bx}, {"by", il.by}}},
          {"elements", elements},
          {"features", features}};
}

/// Ground truth as read back from disk (the image is loaded separately).
struct TruthElement {
  int i{0};
  int j{0};
  Homography h;
  Kernel kernel;
  IlluminationParams illum;
  Vec2 center{0.0, 0.0};
};

struct TruthFrame {
  int index{0};
  int rows{0};
  int cols{0};
  Pose pose;
  std::vector<TruthElement> elements;

  [[nodiscard]] const TruthElement& at(int i, int j) const { return elements[static_cast<std::size_t>(i) * cols + j]; }
};

inline void check_schema(const json& j, const std::string& what) {
  if (!j.contains("schema_version") || j.at("schema_version").get<int>() != kSchemaVersion) {
    throw IoError(what + ": missing or unsupported schema_version");
  }
}

inline TruthFrame truth_from_json(const json& j) {
  check_schema(j, "truth");
  TruthFrame t;
  t.index = j.at("frame").get<int>();
  t.rows = j.at("rows").get<int>();
  t.cols = j.at("cols").get<int>();
  t.pose = pose_from_json(j.at("pose"));
  const auto& els = j.at("elements");
  const auto& feats = j.at("features");
  if (els.size() != static_cast<std::size_t>(t.rows * t.cols) || feats.size() != els.size()) {
    throw IoError("truth: element count does not match the grid");
  }
  for (std::size_t n = 0; n < els.size(); ++n) {
    TruthElement e;
    e.i = els[n].at("i").get<int>();
    e.j = els[n].at("j").get<int>();
    e.h = Homography(mat3_from_json(els[n].at("H")));
    e.kernel = kernel_from_json(els[n].at("kernel"));
    e.illum = illum_from_json(els[n].at("illumination"));
    e.center = vec2_from_json(feats[n].at("center"));
    t.elements.push_back(std::move(e));
  }
  return t;
}

inline json to_json(const ElementEstimate& e, const std::optional<PsfStats>& stats, bool kept) {
  json j = {{"i", e.i},
            {"j", e.j},
            {"status", e.status == ElementStatus::converged ? "converged"
                       : e.status == ElementStatus::failed  ? "failed"
                                                            : "unvisited"},
            {"kept", kept}};
  if (e.status == ElementStatus::unvisited) return j;
  j["H"] = to_json_mat3(e.h.matrix());
  j["kernel"] = to_json(e.kernel);
  j["illumination"] = to_json(e.illum);
  j["block"] = to_json(e.block);
  j["loss"] = std::isfinite(e.loss) ? json(e.loss) : json(nullptr);
  j["loss_raw"] = std::isfinite(e.loss) ? json(raw_loss(e.loss)) : json(nullptr);
  j["iterations"] = e.iterations;
  j["explained_variance"] = e.explained_variance;
  if (!e.note.empty()) j["note"] = e.note;
  if (stats) j["stats"] = to_json(*stats);
  return j;
}

inline ElementEstimate estimate_from_json(const json& j) {
  ElementEstimate e;
  e.i = j.at("i").get<int>();
  e.j = j.at("j").get<int>();
  const auto status = j.at("status").get<std::string>();
  e.status = status == "converged" ? ElementStatus::converged
             : status == "failed"  ? ElementStatus::failed
                                   : ElementStatus::unvisited;
  if (e.status == ElementStatus::unvisited) return e;
  e.h = Homography(mat3_from_json(j.at("H")));
  e.kernel = kernel_from_json(j.at("kernel"));
  e.illum = illum_from_json(j.at("illumination"));
  e.block = block_from_json(j.at("block"));
  e.loss = j.at("loss").is_null() ? std::numeric_limits<double>::infinity() : j.at("loss").get<double>();
  e.iterations = j.value("iterations", 0);
  e.explained_variance = j.value("explained_variance", 0.0);
  e.converged = e.status == ElementStatus::converged;
  e.note = j.value("note", std::string());
  return e;
}

inline json to_json(const AlignmentResult& r) {
  json res = json::array();
  for (const Vec2& v : r.residuals) res.push_back(vec_json(v));
  json al = json::array();
  for (const Vec2& v : r.aligned) al.push_back(vec_json(v));
  return {{"pose", to_json(r.pose)},
          {"global_shift", vec_json(r.global_shift)},
          {"bias", {{"a", r.bias.a}, {"c", r.bias.c}}},
          {"residuals", res},
          {"aligned", al},
          {"median_err", r.median_err},
          {"mean_err", r.mean_err},
          {"n_obs", r.n_obs},
          {"filtered_by_angle", r.filtered_by_angle},
          {"converged", r.converged},
          {"iterations", r.iterations},
          {"axis_angle", r.axis_angle},
          {"objective", r.objective}};
}

// ---------------------------------------------------------------------------
// Files

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw IoError("cannot open '" + p.string() + "'");
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw IoError("'" + p.string() + "': " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& p, const json& j) {
  std::ofstream os(p);
  if (!os) throw IoError("cannot write '" + p.string() + "'");
  os << std::setw(2) << j << '\n';
  if (!os) throw IoError("write failed for '" + p.string() + "'");
}

inline void write_text_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw IoError("cannot write '" + p.string() + "'");
  os << text;
  if (!os) throw IoError("write failed for '" + p.string() + "'");
}

inline std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return buf;
}

inline json to_json(const PatternCompareConfig& c) {
  return {{"seeds", c.seeds},           {"noise_levels", c.noise_levels},
          {"block_size", c.block_size}, {"kernel_size", c.kernel_size},
          {"glyph_sigma", c.glyph_sigma}, {"cell_px", c.cell_px},
          {"lambda_min", c.lambda_min}, {"kernel_prior_sd", c.kernel_prior_sd},
          {"amplitude", c.amplitude},   {"bias", c.bias}};
}

inline json to_json(const AlignVerifyConfig& c) {
  return {{"frames", c.frames},
          {"rows", c.rows},
          {"cols", c.cols},
          {"shift_range", c.shift_range},
          {"feature_noise", c.feature_noise},
          {"outlier_fraction", c.outlier_fraction},
          {"outlier_min", c.outlier_min},
          {"outlier_max", c.outlier_max},
          {"angle_thresholds", c.angle_thresholds},
          {"seed", c.seed},
          {"camera", to_json(c.camera)},
          {"distortion", to_json(c.distortion)}};
}

/// FNV-1a over the compact dump, as 16 hex digits.
inline std::string config_hash(const json& j) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Writes scene.json, frames/NNNN.pgm (16 bit, clamped to [0, 1]) and truth/NNNN.json.
/// Frames are rendered in parallel; each frame's content depends only on (config, index).
inline void write_dataset(const std::filesystem::path& dir, const SceneConfig& cfg, int threads = 1) {
  namespace fs = std::filesystem;
  cfg.validate();
  std::error_code ec;
  fs::create_directories(dir / "frames", ec);
  fs::create_directories(dir / "truth", ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  write_json_file(dir / "scene.json", {{"schema_version", kSchemaVersion}, {"scene", to_json(cfg)}});
  parallel_for(static_cast<std::size_t>(cfg.frames), threads, [&](std::size_t n) {
    const int f = static_cast<int>(n);
    const GroundTruthFrame frame = make_frame(cfg, f);
    save_pgm((dir / "frames" / (frame_name(f) + ".pgm")).string(), frame.image, 16);
    write_json_file(dir / "truth" / (frame_name(f) + ".json"), to_json(frame, f));
  });
}

inline SceneConfig read_scene(const std::filesystem::path& dir) {
  const json j = read_json_file(dir / "scene.json");
  check_schema(j, "scene.json");
  SceneConfig c;
  apply_json(j.at("scene"), c);
  return c;
}

}  // namespace blurcal
