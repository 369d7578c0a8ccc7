// blurcal: synth | deconv | align | report | experiment
//
// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.

#include "blurcal/experiments.hpp"
#include "blurcal/io.hpp"
#include "blurcal/local_align.hpp"
#include "blurcal/log.hpp"
#include "blurcal/parallel.hpp"
#include "blurcal/synth.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace blurcal;

namespace {

enum Exit { ok = 0, usage = 1, data = 2, numerical = 3 };

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  if (!std::isfinite(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return read_json_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

const json& section(const json& j, const char* name) {
  static const json empty = json::object();
  return j.contains(name) ? j.at(name) : empty;
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::string config;
  std::string out;
  std::optional<int> frames;
  std::optional<std::uint64_t> seed;
  std::optional<double> noise;
  std::optional<int> rows;
  std::optional<int> cols;
  std::optional<int> kernel_size;
  std::optional<std::string> kernel_kind;
};

int cmd_synth(const SynthArgs& a, int threads) {
  SceneConfig cfg;
  const json j = load_config(a.config);
  apply_json(j.contains("scene") ? j.at("scene") : j, cfg);
  if (a.frames) cfg.frames = *a.frames;
  if (a.seed) cfg.seed = *a.seed;
  if (a.noise) cfg.noise_sigma = *a.noise;
  if (a.rows) cfg.rows = *a.rows;
  if (a.cols) cfg.cols = *a.cols;
  if (a.kernel_size) cfg.kernels.size = *a.kernel_size;
  if (a.kernel_kind) cfg.kernels.kind = kernel_kind_from_string(*a.kernel_kind);
  cfg.validate();
  write_dataset(a.out, cfg, threads);
  std::cout << "wrote " << cfg.frames << " frames to " << a.out << '\n';
  return ok;
}

// ---------------------------------------------------------------------------
// deconv

struct DeconvArgs {
  std::string dataset;
  std::string out;
  std::string config;
  std::string seeds;
  double seed_offset{1.0};
  std::optional<double> lambda;
  std::optional<double> tau_be;
  std::optional<double> tau_loss;
  std::optional<double> sigma_gate;
};

/// Seeds per frame from a seeds file: {"schema_version":1,"frames":{"0000":[{"i","j","H"}]}}.
std::map<int, std::vector<Seed>> read_seeds(const std::string& path) {
  const json j = read_json_file(path);
  check_schema(j, "seeds");
  std::map<int, std::vector<Seed>> out;
  for (const auto& [key, list] : j.at("frames").items()) {
    std::vector<Seed> seeds;
    for (const auto& s : list) seeds.push_back({s.at("i").get<int>(), s.at("j").get<int>(), Homography(mat3_from_json(s.at("H")))});
    out[std::stoi(key)] = std::move(seeds);
  }
  return out;
}

GrayImage kernel_mosaic(const ElementGrid& g, int ks) {
  const int cell = ks + 1;
  GrayImage img(g.cols * cell + 1, g.rows * cell + 1, 0.0);
  for (const auto& e : g.cells) {
    if (e.status != ElementStatus::converged) continue;
    double peak = 0.0;
    for (double w : e.kernel.weights()) peak = std::max(peak, w);
    if (!(peak > 0.0)) continue;
    for (int y = 0; y < ks; ++y)
      for (int x = 0; x < ks; ++x)
        img.at(e.j * cell + 1 + x, e.i * cell + 1 + y) = std::max(0.0, e.kernel.at(x, y) / peak);
  }
  return img;
}

struct FrameRow {
  int frame{0};
  std::string outcome;
  std::string reason;
  double median_sigma{std::numeric_limits<double>::quiet_NaN()};
  int kept{0};
  int converged{0};
};

int cmd_deconv(const DeconvArgs& a, int threads) {
  PipelineConfig pcfg;
  const json j = load_config(a.config);
  apply_json(section(j, "deconv"), pcfg.deconv);
  apply_json(section(j, "filter"), pcfg.filter);
  if (a.lambda) pcfg.deconv.lambda = *a.lambda;
  if (a.tau_be) pcfg.filter.tau_be = *a.tau_be;
  if (a.tau_loss) pcfg.filter.tau_loss = *a.tau_loss;
  if (a.sigma_gate) pcfg.filter.sigma_major_gate = *a.sigma_gate;
  try {
    pcfg.deconv.validate();
    pcfg.filter.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (!(a.seed_offset >= 0.0)) throw ConfigError("seed_offset: must be non-negative");

  const fs::path ds(a.dataset);
  if (!fs::exists(ds / "scene.json")) throw DataError("dataset: no scene.json in '" + a.dataset + "'");
  const SceneConfig scene = read_scene(ds);
  pcfg.rows = scene.rows;
  pcfg.cols = scene.cols;
  std::map<int, std::vector<Seed>> seed_file;
  if (!a.seeds.empty()) seed_file = read_seeds(a.seeds);

  const fs::path run(a.out);
  fs::create_directories(run / "deconv");
  write_json_file(run / "config.deconv.json", {{"schema_version", kSchemaVersion},
                                               {"dataset", fs::absolute(ds).string()},
                                               {"seeds", a.seeds},
                                               {"seed_offset", a.seed_offset},
                                               {"deconv", to_json(pcfg.deconv)},
                                               {"filter", to_json(pcfg.filter)}});

  std::vector<FrameRow> rows(static_cast<std::size_t>(scene.frames));
  std::vector<std::string> element_lines(static_cast<std::size_t>(scene.frames));
  parallel_for(rows.size(), threads, [&](std::size_t n) {
    const int f = static_cast<int>(n);
    FrameRow& row = rows[n];
    row.frame = f;
    const std::string name = frame_name(f);
    std::vector<Seed> seeds;
    if (!a.seeds.empty()) {
      const auto it = seed_file.find(f);
      if (it != seed_file.end()) seeds = it->second;
    } else if (fs::exists(ds / "truth" / (name + ".json"))) {
      const TruthFrame t = truth_from_json(read_json_file(ds / "truth" / (name + ".json")));
      auto rng = rng_stream(scene.seed, static_cast<std::uint64_t>(f), 0x5eedULL);
      const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      const TruthElement& c = t.at(t.rows / 2, t.cols / 2);
      seeds.push_back({c.i, c.j, translation_homography(a.seed_offset * Vec2(std::cos(ang), std::sin(ang))) * c.h});
    }
    if (seeds.empty()) {
      row.outcome = "failed";
      row.reason = "missing seeds";
      return;
    }
    GrayImage img;
    try {
      img = load_pgm((ds / "frames" / (name + ".pgm")).string());
    } catch (const std::exception& e) {
      row.outcome = "failed";
      row.reason = std::string("unreadable frame: ") + e.what();
      return;
    }
    FrameResult r;
    try {
      r = run_frame_deconv(img, seeds, pcfg, 1);
    } catch (const std::exception& e) {
      row.outcome = "failed";
      row.reason = e.what();
      return;
    }
    row.outcome = r.outcome == FrameOutcome::gated_sharp ? "gated" : "kept";
    row.reason = r.reason;
    row.median_sigma = r.median_sigma_major;
    row.kept = r.mask.keep.empty() ? 0 : r.mask.count();
    json els = json::array();
    std::ostringstream lines;
    for (std::size_t k = 0; k < r.grid.cells.size(); ++k) {
      const ElementEstimate& e = r.grid.cells[k];
      const bool kept = !r.mask.keep.empty() && r.mask.keep[k];
      if (e.status == ElementStatus::converged) ++row.converged;
      els.push_back(to_json(e, r.stats.cells[k], kept));
      if (e.status != ElementStatus::converged) continue;
      const auto& s = r.stats.cells[k];
      lines << f << ',' << e.i << ',' << e.j << ',' << fmt(raw_loss(e.loss)) << ',' << (s ? fmt(s->sigma_major) : "")
            << ',' << (s ? fmt(s->boundary_energy) : "") << ',' << (s ? fmt(s->eccentricity) : "") << ','
            << (kept ? 1 : 0) << '\n';
    }
    element_lines[n] = lines.str();
    write_json_file(run / "deconv" / (name + ".json"), {{"schema_version", kSchemaVersion},
                                                        {"frame", f},
                                                        {"rows", pcfg.rows},
                                                        {"cols", pcfg.cols},
                                                        {"outcome", row.outcome},
                                                        {"reason", row.reason},
                                                        {"median_sigma_major", row.median_sigma},
                                                        {"elements", els}});
    save_pgm((run / "deconv" / (name + "_kernels.pgm")).string(), kernel_mosaic(r.grid, pcfg.deconv.kernel_size), 8);
  });

  std::ostringstream fcsv;
  fcsv << "frame,outcome,reason,median_sigma_major,converged,kept\n";
  std::ostringstream ecsv;
  ecsv << "frame,i,j,loss_raw,sigma_major,be,ecc,kept\n";
  int converged_frames = 0;
  for (std::size_t n = 0; n < rows.size(); ++n) {
    const FrameRow& r = rows[n];
    std::string reason = r.reason;
    std::replace(reason.begin(), reason.end(), ',', ';');
    fcsv << r.frame << ',' << r.outcome << ',' << reason << ',' << fmt(r.median_sigma) << ',' << r.converged << ','
         << r.kept << '\n';
    ecsv << element_lines[n];
    if (r.converged > 0) ++converged_frames;
    if (r.outcome != "kept") std::clog << "frame " << frame_name(r.frame) << ": " << r.outcome << " (" << r.reason << ")\n";
  }
  write_text_file(run / "deconv" / "frames.csv", fcsv.str());
  write_text_file(run / "deconv" / "elements.csv", ecsv.str());
  bool missing = false;
  for (const auto& r : rows) missing = missing || r.reason == "missing seeds";
  if (missing && converged_frames == 0) throw DataError("deconv: missing seeds");
  if (converged_frames == 0 && !rows.empty()) throw NumericalError("deconv: no frame converged");
  std::cout << "deconvolved " << rows.size() << " frames into " << (run / "deconv").string() << '\n';
  return ok;
}

// ---------------------------------------------------------------------------
// align

struct AlignArgs {
  std::string run;
  std::string camera;
  std::string config;
  std::string loss{"all"};
  bool no_angle_filter{false};
  std::optional<double> min_angle;
  std::vector<double> tau_sweep{5, 10, 20, 30, 50, 100, 200, 300, 500};
};

struct LoadedFrame {
  int index{0};
  ElementGrid grid;
  std::vector<char> kept;
  std::optional<TruthFrame> truth;
};

/// Local shifts, observations and one alignment for a frame and mask.
std::optional<std::pair<AlignmentResult, std::vector<Observation>>> align_masked(const LoadedFrame& f,
                                                                                 const ElementMask& mask,
                                                                                 const CameraIntrinsics& cam,
                                                                                 const Distortion& dist,
                                                                                 const AlignOptions& opt) {
  if (mask.count() < 6) return std::nullopt;
  const LocalShiftField shifts = solve_local_shifts(f.grid, mask);
  const ElementGrid g = apply_shifts(f.grid, shifts);
  const std::vector<Observation> obs = make_observations(g, mask);
  AlignmentResult r = align_frame(obs, f.grid.rows, f.grid.cols, cam, dist, opt);
  return std::make_pair(std::move(r), obs);
}

std::vector<double> truth_errors(const LoadedFrame& f, const std::vector<Observation>& obs, const AlignmentResult& r) {
  std::vector<double> e;
  if (!f.truth) return e;
  for (std::size_t k = 0; k < obs.size(); ++k) e.push_back((r.aligned[k] - f.truth->at(obs[k].i, obs[k].j).center).norm());
  return e;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double median_or_nan(const std::vector<double>& v) {
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : median(v);
}

int cmd_align(const AlignArgs& a, int threads) {
  const fs::path run(a.run);
  if (!fs::exists(run / "config.deconv.json")) throw DataError("align: '" + a.run + "' has no deconvolution results");
  const json dcfg = read_json_file(run / "config.deconv.json");
  const fs::path ds = dcfg.at("dataset").get<std::string>();
  FilterConfig filter;
  apply_json(dcfg.at("filter"), filter);

  const json j = load_config(a.config);
  AlignOptions base = pipeline_align_options();
  apply_json(section(j, "align"), base);
  if (a.no_angle_filter) base.angle_filter = false;
  if (a.min_angle) base.min_axis_angle = *a.min_angle;
  std::vector<LossKind> losses;
  if (a.loss == "all") {
    losses = {LossKind::huber, LossKind::mean, LossKind::median};
  } else {
    losses = {loss_kind_from_string(a.loss)};
  }

  CameraIntrinsics cam;
  Distortion dist;
  if (!a.camera.empty()) {
    const json c = read_json_file(a.camera);
    cam = camera_from_json(c.contains("camera") ? c.at("camera") : c);
    if (c.contains("distortion")) dist = distortion_from_json(c.at("distortion"));
  } else if (fs::exists(ds / "scene.json")) {
    const SceneConfig scene = read_scene(ds);
    cam = scene.camera;
    dist = scene.distortion;
  } else {
    throw DataError("align: no reference camera (pass --camera)");
  }
  try {
    cam.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("camera: ") + e.what());
  }

  std::vector<LoadedFrame> frames;
  for (const auto& entry : fs::directory_iterator(run / "deconv")) {
    const fs::path p = entry.path();
    if (p.extension() != ".json") continue;
    const json fj = read_json_file(p);
    check_schema(fj, p.string());
    if (fj.at("outcome").get<std::string>() != "kept") continue;
    LoadedFrame f;
    f.index = fj.at("frame").get<int>();
    f.grid = ElementGrid(fj.at("rows").get<int>(), fj.at("cols").get<int>());
    for (const auto& e : fj.at("elements")) {
      ElementEstimate est = estimate_from_json(e);
      const std::size_t idx = static_cast<std::size_t>(est.i) * f.grid.cols + est.j;
      f.grid.cells[idx] = std::move(est);
      f.kept.resize(f.grid.cells.size(), 0);
      f.kept[idx] = e.at("kept").get<bool>() ? 1 : 0;
    }
    f.kept.resize(f.grid.cells.size(), 0);
    const fs::path tp = ds / "truth" / (frame_name(f.index) + ".json");
    if (fs::exists(tp)) f.truth = truth_from_json(read_json_file(tp));
    frames.push_back(std::move(f));
  }
  std::sort(frames.begin(), frames.end(), [](const auto& x, const auto& y) { return x.index < y.index; });

  fs::create_directories(run / "align");
  json resolved = {{"schema_version", kSchemaVersion}, {"align", to_json(base)}, {"camera", to_json(cam)},
                   {"distortion", to_json(dist)}, {"losses", json::array()}, {"tau_sweep", a.tau_sweep}};
  for (LossKind l : losses) resolved["losses"].push_back(to_string(l));
  write_json_file(run / "config.align.json", resolved);

  struct Cell {
    bool done{false};
    std::string skip;
    AlignmentResult unaligned;
    AlignmentResult aligned;
    std::vector<Observation> obs;
    std::vector<double> truth_err;
  };
  std::vector<std::vector<Cell>> cells(frames.size(), std::vector<Cell>(losses.size()));
  parallel_for(frames.size() * losses.size(), threads, [&](std::size_t n) {
    const std::size_t fi = n / losses.size();
    const std::size_t li = n % losses.size();
    const LoadedFrame& f = frames[fi];
    Cell& c = cells[fi][li];
    const ElementMask mask{f.grid.rows, f.grid.cols, f.kept};
    AlignOptions opt = base;
    opt.loss = losses[li];
    try {
      auto r = align_masked(f, mask, cam, dist, opt);
      if (!r) {
        c.skip = "fewer than 6 kept elements";
        return;
      }
      if (r->first.filtered_by_angle) {
        c.skip = "filtered by orientation";
        return;
      }
      AlignOptions none = opt;
      none.correction = Correction::none;
      c.unaligned = align_frame(r->second, f.grid.rows, f.grid.cols, cam, dist, none);
      c.aligned = std::move(r->first);
      c.obs = std::move(r->second);
      c.truth_err = truth_errors(f, c.obs, c.aligned);
      c.done = true;
    } catch (const std::exception& e) {
      c.skip = e.what();
    }
  });

  std::ostringstream csv;
  csv << "frame,loss,axis_angle,n_obs,unaligned_median,unaligned_mean,aligned_median,aligned_mean,truth_median,"
         "truth_mean\n";
  std::ostringstream rcsv;
  rcsv << "frame,loss,i,j,dx,dy\n";
  std::map<LossKind, std::vector<double>> pooled_res;
  std::map<LossKind, std::vector<double>> pooled_truth;
  std::map<LossKind, int> pooled_frames;
  int aligned_frames = 0;
  for (std::size_t fi = 0; fi < frames.size(); ++fi) {
    json fj = {{"schema_version", kSchemaVersion}, {"frame", frames[fi].index}, {"results", json::object()}};
    bool any = false;
    for (std::size_t li = 0; li < losses.size(); ++li) {
      const Cell& c = cells[fi][li];
      const char* ln = to_string(losses[li]);
      if (!c.done) {
        fj["results"][ln] = {{"skipped", c.skip}};
        continue;
      }
      any = true;
      fj["results"][ln] = {{"unaligned", to_json(c.unaligned)}, {"aligned", to_json(c.aligned)}};
      csv << frames[fi].index << ',' << ln << ',' << fmt(c.aligned.axis_angle) << ',' << c.aligned.n_obs << ','
          << fmt(c.unaligned.median_err) << ',' << fmt(c.unaligned.mean_err) << ',' << fmt(c.aligned.median_err) << ','
          << fmt(c.aligned.mean_err) << ',' << fmt(median_or_nan(c.truth_err)) << ',' << fmt(mean_of(c.truth_err))
          << '\n';
      for (std::size_t k = 0; k < c.obs.size(); ++k) {
        rcsv << frames[fi].index << ',' << ln << ',' << c.obs[k].i << ',' << c.obs[k].j << ','
             << fmt(c.aligned.residuals[k].x()) << ',' << fmt(c.aligned.residuals[k].y()) << '\n';
        pooled_res[losses[li]].push_back(c.aligned.residuals[k].norm());
      }
      pooled_truth[losses[li]].insert(pooled_truth[losses[li]].end(), c.truth_err.begin(), c.truth_err.end());
      ++pooled_frames[losses[li]];
    }
    if (any) ++aligned_frames;
    write_json_file(run / "align" / (frame_name(frames[fi].index) + ".json"), fj);
  }
  write_text_file(run / "align" / "alignment.csv", csv.str());
  write_text_file(run / "align" / "residuals.csv", rcsv.str());

  std::ostringstream scsv;
  scsv << "loss,frames,n_obs,aligned_median,aligned_mean,truth_median,truth_mean\n";
  for (LossKind l : losses) {
    const auto& r = pooled_res[l];
    const auto& t = pooled_truth[l];
    scsv << to_string(l) << ',' << pooled_frames[l] << ',' << r.size() << ',' << fmt(median_or_nan(r)) << ','
         << fmt(mean_of(r)) << ',' << fmt(median_or_nan(t)) << ',' << fmt(mean_of(t)) << '\n';
  }
  write_text_file(run / "align" / "summary.csv", scsv.str());

  // Median error against tau_L, Huber loss, same angle filter.
  std::ostringstream tcsv;
  tcsv << "tau_loss,frames,n_obs,aligned_median,truth_median\n";
  for (double tau : a.tau_sweep) {
    FilterConfig fc = filter;
    fc.tau_loss = tau;
    std::vector<double> res;
    std::vector<double> tru;
    int used = 0;
    for (const LoadedFrame& f : frames) {
      try {
        const ElementMask mask = filter_elements(f.grid.rows, f.grid.cols, losses_of(f.grid), stats_of(f.grid), fc);
        AlignOptions opt = base;
        opt.loss = LossKind::huber;
        const auto r = align_masked(f, mask, cam, dist, opt);
        if (!r || r->first.filtered_by_angle) continue;
        ++used;
        for (const Vec2& v : r->first.residuals) res.push_back(v.norm());
        const auto te = truth_errors(f, r->second, r->first);
        tru.insert(tru.end(), te.begin(), te.end());
      } catch (const std::exception&) {
      }
    }
    tcsv << fmt(tau) << ',' << used << ',' << res.size() << ',' << fmt(median_or_nan(res)) << ','
         << fmt(median_or_nan(tru)) << '\n';
  }
  write_text_file(run / "align" / "tau_sweep.csv", tcsv.str());

  if (aligned_frames == 0) throw DataError("align: no frame passed the orientation filter; the report is empty");
  std::cout << "aligned " << aligned_frames << " of " << frames.size() << " frames\n";
  return ok;
}

// ---------------------------------------------------------------------------
// report

using Table = std::vector<std::map<std::string, std::string>>;

Table read_csv(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw DataError("report: incomplete run, missing " + p.string());
  std::string line;
  std::vector<std::string> header;
  Table t;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(is, line)) throw DataError("report: empty file " + p.string());
  header = split(line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t k = 0; k < header.size(); ++k) row[header[k]] = k < cells.size() ? cells[k] : "";
    t.push_back(std::move(row));
  }
  return t;
}

std::optional<double> num(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

struct Series {
  std::vector<std::pair<double, double>> pts;
  const char* colour;
  bool line{false};
};

std::string svg_plot(const std::string& title, const std::string& xl, const std::string& yl,
                     const std::vector<Series>& series) {
  constexpr double w = 480, h = 340, l = 60, r = 20, t = 30, b = 45;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (const auto& [x, y] : s.pts) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
  y0 = std::min(y0, 0.0);
  auto px = [&](double x) { return l + (x - x0) / (x1 - x0) * (w - l - r); };
  auto py = [&](double y) { return h - b - (y - y0) / (y1 - y0) * (h - t - b); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << title << "</text>\n";
  os << "<line x1=\"" << l << "\" y1=\"" << h - b << "\" x2=\"" << w - r << "\" y2=\"" << h - b << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << l << "\" y1=\"" << t << "\" x2=\"" << l << "\" y2=\"" << h - b << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0;
    const double yv = y0 + (y1 - y0) * k / 4.0;
    os << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << h - b + 15 << "\" text-anchor=\"middle\" font-size=\"10\">"
       << fmt(xv) << "</text>\n";
    os << "<text x=\"" << l - 5 << "\" y=\"" << fmt(py(yv) + 3) << "\" text-anchor=\"end\" font-size=\"10\">" << fmt(yv)
       << "</text>\n";
  }
  os << "<text x=\"" << (l + w - r) / 2 << "\" y=\"" << h - 8 << "\" text-anchor=\"middle\" font-size=\"11\">" << xl
     << "</text>\n";
  os << "<text x=\"14\" y=\"" << (t + h - b) / 2 << "\" text-anchor=\"middle\" font-size=\"11\" transform=\"rotate(-90 14 "
     << (t + h - b) / 2 << ")\">" << yl << "</text>\n";
  for (const auto& s : series) {
    if (s.line && s.pts.size() > 1) {
      os << "<polyline fill=\"none\" stroke=\"" << s.colour << "\" points=\"";
      for (const auto& [x, y] : s.pts) os << fmt(px(x)) << ',' << fmt(py(y)) << ' ';
      os << "\"/>\n";
    }
    for (const auto& [x, y] : s.pts)
      os << "<circle cx=\"" << fmt(px(x)) << "\" cy=\"" << fmt(py(y)) << "\" r=\"2.5\" fill=\"" << s.colour << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

std::string svg_bars(const std::string& title, const std::string& xl, const std::vector<double>& counts) {
  std::vector<std::pair<double, double>> pts;
  for (std::size_t k = 0; k < counts.size(); ++k) pts.emplace_back(static_cast<double>(k) * 360.0 / counts.size(), counts[k]);
  return svg_plot(title, xl, "count", {{pts, "steelblue", true}});
}

int cmd_report(const std::string& run_dir) {
  const fs::path run(run_dir);
  if (!fs::exists(run) || fs::is_empty(run)) throw DataError("report: '" + run_dir + "' is empty or missing; run deconv and align first");
  const Table frames = read_csv(run / "deconv" / "frames.csv");
  const Table elements = read_csv(run / "deconv" / "elements.csv");
  const Table alignment = read_csv(run / "align" / "alignment.csv");
  const Table summary = read_csv(run / "align" / "summary.csv");
  const Table sweep = read_csv(run / "align" / "tau_sweep.csv");
  const Table residuals = read_csv(run / "align" / "residuals.csv");
  fs::create_directories(run / "report");

  Series kept_s{{}, "seagreen"};
  Series drop_s{{}, "indianred"};
  Series kept_b{{}, "seagreen"};
  Series drop_b{{}, "indianred"};
  for (const auto& e : elements) {
    const auto loss = num(e.at("loss_raw"));
    const auto sig = num(e.at("sigma_major"));
    const auto be = num(e.at("be"));
    if (!loss) continue;
    const bool kept = e.at("kept") == "1";
    if (sig) (kept ? kept_s : drop_s).pts.emplace_back(*sig, *loss);
    if (be) (kept ? kept_b : drop_b).pts.emplace_back(*be, *loss);
  }
  write_text_file(run / "report" / "loss_vs_sigma.svg",
                  svg_plot("loss vs blur size (green kept, red dropped)", "sigma_major [px]", "loss (0..255 scale)", {kept_s, drop_s}));
  write_text_file(run / "report" / "loss_vs_be.svg",
                  svg_plot("loss vs boundary energy (green kept, red dropped)", "BE", "loss (0..255 scale)", {kept_b, drop_b}));

  Series res_s{{}, "steelblue", true};
  Series tru_s{{}, "darkorange", true};
  for (const auto& r : sweep) {
    const auto tau = num(r.at("tau_loss"));
    if (!tau) continue;
    if (const auto v = num(r.at("aligned_median"))) res_s.pts.emplace_back(*tau, *v);
    if (const auto v = num(r.at("truth_median"))) tru_s.pts.emplace_back(*tau, *v);
  }
  write_text_file(run / "report" / "error_vs_tau.svg",
                  svg_plot("median error vs tau_L (blue residual, orange vs truth)", "tau_L", "px", {res_s, tru_s}));

  std::vector<double> bins(16, 0.0);
  for (const auto& r : residuals) {
    if (r.at("loss") != "huber") continue;
    const auto dx = num(r.at("dx"));
    const auto dy = num(r.at("dy"));
    if (!dx || !dy) continue;
    double a = std::atan2(*dy, *dx) * 180.0 / std::numbers::pi;
    if (a < 0) a += 360.0;
    bins[static_cast<std::size_t>(std::min(15.0, std::floor(a / 22.5)))] += 1.0;
  }
  write_text_file(run / "report" / "error_directions.svg",
                  svg_bars("residual directions after alignment (huber)", "direction [deg]", bins));

  std::ostringstream md;
  md << "# Run summary\n\n## Frames\n\n| frame | outcome | reason | median sigma_major | converged | kept |\n|---|---|---|---|---|---|\n";
  for (const auto& r : frames)
    md << "| " << r.at("frame") << " | " << r.at("outcome") << " | " << r.at("reason") << " | " << r.at("median_sigma_major")
       << " | " << r.at("converged") << " | " << r.at("kept") << " |\n";
  md << "\n## Alignment (pooled)\n\n| loss | frames | features | residual median | residual mean | error vs truth median | error vs truth mean |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : summary)
    md << "| " << r.at("loss") << " | " << r.at("frames") << " | " << r.at("n_obs") << " | " << r.at("aligned_median") << " | "
       << r.at("aligned_mean") << " | " << r.at("truth_median") << " | " << r.at("truth_mean") << " |\n";
  md << "\n## Per frame\n\n| frame | loss | axis angle | features | unaligned median | aligned median | vs truth median |\n|---|---|---|---|---|---|---|\n";
  for (const auto& r : alignment)
    md << "| " << r.at("frame") << " | " << r.at("loss") << " | " << r.at("axis_angle") << " | " << r.at("n_obs") << " | "
       << r.at("unaligned_median") << " | " << r.at("aligned_median") << " | " << r.at("truth_median") << " |\n";
  md << "\n## Median error against tau_L (huber)\n\n| tau_L | frames | features | residual median | vs truth median |\n|---|---|---|---|---|\n";
  for (const auto& r : sweep)
    md << "| " << r.at("tau_loss") << " | " << r.at("frames") << " | " << r.at("n_obs") << " | " << r.at("aligned_median")
       << " | " << r.at("truth_median") << " |\n";
  md << "\nPlots: loss_vs_sigma.svg, loss_vs_be.svg, error_vs_tau.svg, error_directions.svg\n";
  write_text_file(run / "report" / "summary.md", md.str());
  std::cout << "report written to " << (run / "report").string() << '\n';
  return ok;
}

// ---------------------------------------------------------------------------
// experiment

struct ExperimentArgs {
  std::string kind{"all"};
  std::string out;
  std::optional<int> frames;
  std::optional<double> feature_noise;
  std::optional<double> outlier_fraction;
  std::vector<std::uint64_t> seeds;
};

void write_pattern_compare(const fs::path& dir, const PatternCompareConfig& cfg, int threads) {
  const json cj = to_json(cfg);
  const std::string hash = config_hash(cj);
  const PatternCompareReport rep = exp_pattern_compare(cfg, threads);
  std::ostringstream csv;
  csv << "pattern,noise,seed,lambda,ssim,psnr,config_hash\n";
  for (const auto& c : rep.cells)
    csv << to_string(c.pattern) << ',' << fmt(c.noise) << ',' << c.seed << ',' << fmt(c.lambda) << ',' << fmt(c.ssim)
        << ',' << fmt(c.psnr) << ',' << hash << '\n';
  std::ostringstream md;
  md << "# Kernel recovery by pattern\n\nconfig hash " << hash << "\n\n| pattern | noise | mean SSIM | mean PSNR (dB) |\n|---|---|---|---|\n";
  for (const auto& s : rep.summary)
    md << "| " << to_string(s.pattern) << " | " << fmt(s.noise) << " | " << fmt(s.mean_ssim) << " | " << fmt(s.mean_psnr)
       << " |\n";
  write_json_file(dir / "pattern_compare.config.json", {{"schema_version", kSchemaVersion}, {"config", cj}, {"hash", hash}});
  write_text_file(dir / "pattern_compare.csv", csv.str());
  write_text_file(dir / "pattern_compare.md", md.str());
}

void write_align_verify(const fs::path& dir, const AlignVerifyConfig& cfg, int threads) {
  const json cj = to_json(cfg);
  const std::string hash = config_hash(cj);
  const AlignVerifyReport rep = exp_align_verify(cfg, threads);
  std::ostringstream csv;
  csv << "method,loss,angle_threshold,frames_used,median_err,mean_err,median_residual,mean_residual,seed,config_hash\n";
  std::ostringstream md;
  md << "# Alignment verification\n\nconfig hash " << hash << ", seed " << cfg.seed
     << "\n\n| method | loss | angle threshold | frames | median error | mean error |\n|---|---|---|---|---|---|\n";
  for (const auto& r : rep.rows) {
    csv << r.method << ',' << to_string(r.loss) << ',' << fmt(r.angle_threshold) << ',' << r.frames_used << ','
        << fmt(r.median_err) << ',' << fmt(r.mean_err) << ',' << fmt(r.median_residual) << ',' << fmt(r.mean_residual)
        << ',' << cfg.seed << ',' << hash << '\n';
    md << "| " << r.method << " | " << to_string(r.loss) << " | " << fmt(r.angle_threshold) << " | " << r.frames_used
       << " | " << fmt(r.median_err) << " | " << fmt(r.mean_err) << " |\n";
  }
  write_json_file(dir / "align_verify.config.json", {{"schema_version", kSchemaVersion}, {"config", cj}, {"hash", hash}});
  write_text_file(dir / "align_verify.csv", csv.str());
  write_text_file(dir / "align_verify.md", md.str());
}

int cmd_experiment(const ExperimentArgs& a, int threads) {
  if (a.kind != "all" && a.kind != "pattern" && a.kind != "align") throw ConfigError("kind: expected pattern, align or all");
  const fs::path dir(a.out);
  fs::create_directories(dir);
  if (a.kind != "align") {
    PatternCompareConfig cfg;
    if (!a.seeds.empty()) cfg.seeds = a.seeds;
    write_pattern_compare(dir, cfg, threads);
  }
  if (a.kind != "pattern") {
    AlignVerifyConfig cfg;
    if (a.frames) cfg.frames = *a.frames;
    if (a.feature_noise) cfg.feature_noise = *a.feature_noise;
    if (a.outlier_fraction) cfg.outlier_fraction = *a.outlier_fraction;
    if (cfg.frames < 1) throw ConfigError("frames: must be positive");
    write_align_verify(dir, cfg, threads);
  }
  std::cout << "experiment reports written to " << dir.string() << '\n';
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blur-robust calibration features from a star target"};
  app.require_subcommand(1);
  int threads = default_thread_count();
  app.add_option("--threads", threads, "Worker threads (default: $BLURCAL_THREADS or all cores)")
      ->check(CLI::PositiveNumber);
  bool quiet = false;
  app.add_flag("--quiet", quiet, "Suppress warnings");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Render a synthetic dataset with ground truth");
  synth->add_option("--config", sa.config, "Scene config JSON");
  synth->add_option("--out", sa.out, "Output dataset directory")->required();
  synth->add_option("--frames", sa.frames);
  synth->add_option("--seed", sa.seed);
  synth->add_option("--noise", sa.noise, "Gaussian noise sigma (fraction of full range)");
  synth->add_option("--rows", sa.rows);
  synth->add_option("--cols", sa.cols);
  synth->add_option("--kernel-size", sa.kernel_size, "Anchor kernel window (odd)");
  synth->add_option("--kernel-kind", sa.kernel_kind, "delta | motion | glyph | motion_glyph");

  DeconvArgs da;
  auto* deconv = app.add_subcommand("deconv", "Estimate per-element homographies, kernels and illumination");
  deconv->add_option("--dataset", da.dataset, "Dataset directory")->required();
  deconv->add_option("--out", da.out, "Run directory")->required();
  deconv->add_option("--config", da.config, "JSON with \"deconv\" and \"filter\" sections");
  deconv->add_option("--seeds", da.seeds, "Seeds JSON; without it the ground truth centre element is used");
  deconv->add_option("--seed-offset", da.seed_offset, "Displacement (px) applied to ground-truth seeds");
  deconv->add_option("--lambda", da.lambda);
  deconv->add_option("--tau-be", da.tau_be);
  deconv->add_option("--tau-loss", da.tau_loss);
  deconv->add_option("--sigma-gate", da.sigma_gate);

  AlignArgs aa;
  auto* align = app.add_subcommand("align", "Local and global alignment of the kept elements");
  align->add_option("--run", aa.run, "Run directory")->required();
  align->add_option("--camera", aa.camera, "Reference camera JSON (default: the dataset's)");
  align->add_option("--config", aa.config, "JSON with an \"align\" section");
  align->add_option("--loss", aa.loss, "huber | mean | median | all");
  align->add_flag("--no-angle-filter", aa.no_angle_filter);
  align->add_option("--min-angle", aa.min_angle, "Orientation filter threshold (rad)");
  align->add_option("--tau-sweep", aa.tau_sweep, "tau_L values for the error sweep");

  std::string report_run;
  auto* report = app.add_subcommand("report", "Plots and a markdown summary of a run");
  report->add_option("--run", report_run, "Run directory")->required();

  ExperimentArgs ea;
  auto* experiment = app.add_subcommand("experiment", "Kernel recovery and alignment verification experiments");
  experiment->add_option("--kind", ea.kind, "pattern | align | all");
  experiment->add_option("--out", ea.out, "Output directory")->required();
  experiment->add_option("--frames", ea.frames, "Alignment experiment frames");
  experiment->add_option("--feature-noise", ea.feature_noise, "Per-feature noise sigma (px)");
  experiment->add_option("--outliers", ea.outlier_fraction, "Outlier fraction");
  experiment->add_option("--seeds", ea.seeds, "Kernel seeds for the pattern comparison");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : usage;
  }
  if (quiet) set_warning_sink({});

  try {
    if (*synth) return cmd_synth(sa, threads);
    if (*deconv) return cmd_deconv(da, threads);
    if (*align) return cmd_align(aa, threads);
    if (*report) return cmd_report(report_run);
    if (*experiment) return cmd_experiment(ea, threads);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return usage;
  } catch (const SynthError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return usage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return data;
  }
  return usage;
}
