#pragma once

// Breadth-first element estimation over the pattern grid of one frame.

#include "blurcal/deconv.hpp"
#include "blurcal/parallel.hpp"
#include "blurcal/psf.hpp"

#include <array>
#include <vector>

namespace blurcal {

struct ElementGrid {
  int rows{0};
  int cols{0};
  std::vector<ElementEstimate> cells;

  ElementGrid() = default;
  ElementGrid(int r, int c) : rows(r), cols(c), cells(static_cast<std::size_t>(r) * c) {
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        at(i, j).i = i;
        at(i, j).j = j;
      }
  }

  [[nodiscard]] ElementEstimate& at(int i, int j) { return cells[static_cast<std::size_t>(i) * cols + j]; }
  [[nodiscard]] const ElementEstimate& at(int i, int j) const { return cells[static_cast<std::size_t>(i) * cols + j]; }
  [[nodiscard]] bool inside(int i, int j) const { return i >= 0 && j >= 0 && i < rows && j < cols; }
};

struct Seed {
  int i{0};
  int j{0};
  Homography h;
};

/// Homography of the neighbouring cell (di, dj) steps away: H T_pattern(2 dj, 2 di).
inline Homography neighbor_homography(const Homography& h, int di, int dj) {
  return h * translation_homography(Vec2(2.0 * dj, 2.0 * di));
}

/// Breadth-first growth over the 4-connected element grid. Each BFS level is solved in
/// parallel; a new element starts from the lowest-loss converged neighbour's homography
/// shifted by one cell. Sources are recentered first so the translation the kernel has
/// absorbed does not accumulate along the growth front. Failed elements are never used
/// as sources.
inline ElementGrid region_grow(const GrayImage& frame, int rows, int cols, const std::vector<Seed>& seeds,
                               const DeconvConfig& cfg, int threads = 1) {
  cfg.validate();
  if (seeds.empty()) throw DeconvError(DeconvError::Kind::frame_failure, "region_grow: no seeds");
  ElementGrid grid(rows, cols);
  std::vector<char> queued(static_cast<std::size_t>(rows) * cols, 0);
  std::vector<Seed> level;
  for (const Seed& s : seeds) {
    if (!grid.inside(s.i, s.j)) throw DeconvError(DeconvError::Kind::frame_failure, "region_grow: seed outside grid");
    auto& q = queued[static_cast<std::size_t>(s.i) * cols + s.j];
    if (q) continue;
    q = 1;
    level.push_back(s);
  }

  bool any_seed_converged = false;
  bool first_level = true;
  while (!level.empty()) {
    std::vector<ElementEstimate> results(level.size());
    parallel_for(level.size(), threads, [&](std::size_t n) {
      const Seed& s = level[n];
      ElementEstimate e;
      try {
        const BlockProblem prob = BlockProblem::from_frame(frame, s.h, cfg);
        e = optimize_block(prob, s.h, cfg);
      } catch (const DeconvError& err) {
        e.status = ElementStatus::failed;
        e.h = s.h;
        e.note = err.what();
      }
      e.i = s.i;
      e.j = s.j;
      results[n] = std::move(e);
    });
    for (auto& r : results) {
      if (first_level && r.status == ElementStatus::converged) any_seed_converged = true;
      grid.at(r.i, r.j) = std::move(r);
    }
    first_level = false;

    std::vector<Seed> next;
    std::vector<double> source_loss;
    for (const Seed& s : level) {
      const ElementEstimate& e = grid.at(s.i, s.j);
      if (e.status != ElementStatus::converged) continue;
      constexpr std::array<std::array<int, 2>, 4> dirs{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
      for (const auto& d : dirs) {
        const int ni = s.i + d[0];
        const int nj = s.j + d[1];
        if (!grid.inside(ni, nj)) continue;
        const std::size_t idx = static_cast<std::size_t>(ni) * cols + nj;
        Homography base = e.h;
        try {
          base = recenter(e).h;
        } catch (const PsfError&) {
        }
        const Homography h0 = neighbor_homography(base, d[0], d[1]);
        if (!queued[idx]) {
          queued[idx] = 1;
          next.push_back({ni, nj, h0});
          source_loss.push_back(e.loss);
        } else {
          for (std::size_t n = 0; n < next.size(); ++n) {
            if (next[n].i == ni && next[n].j == nj && e.loss < source_loss[n]) {
              next[n].h = h0;
              source_loss[n] = e.loss;
            }
          }
        }
      }
    }
    level = std::move(next);
  }
  if (!any_seed_converged) throw DeconvError(DeconvError::Kind::frame_failure, "region_grow: no seed converged");
  return grid;
}

/// Stats of every converged element.
inline StatsGrid stats_of(const ElementGrid& grid) {
  StatsGrid s{grid.rows, grid.cols, std::vector<std::optional<PsfStats>>(grid.cells.size())};
  for (std::size_t n = 0; n < grid.cells.size(); ++n) {
    if (grid.cells[n].status != ElementStatus::converged) continue;
    try {
      s.cells[n] = psf_stats(grid.cells[n].kernel);
    } catch (const PsfError&) {
    }
  }
  return s;
}

inline std::vector<double> losses_of(const ElementGrid& grid) {
  std::vector<double> out;
  out.reserve(grid.cells.size());
  for (const auto& e : grid.cells) {
    out.push_back(e.status == ElementStatus::converged ? e.loss : std::numeric_limits<double>::infinity());
  }
  return out;
}

}  // namespace blurcal
