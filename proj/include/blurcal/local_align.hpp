#pragma once

// Per-element translations that make the shared corners of 4-neighbouring elements agree.
//
// With corners at apply(H, v) + x, the objective is linear in the shifts x. Each
// coordinate solves the graph-Laplacian system L x = b; the gauge is fixed to mean zero
// by solving (L + 1 1^T / n) x = b, whose solution is the mean-zero minimizer because
// b sums to zero.

#include "blurcal/psf.hpp"
#include "blurcal/region_grow.hpp"

#include <Eigen/Dense>

#include <deque>
#include <stdexcept>
#include <vector>

namespace blurcal {

class LocalAlignError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LocalShiftField {
  int rows{0};
  int cols{0};
  std::vector<Vec2> shift;  // zero outside the mask
  ElementMask mask;

  [[nodiscard]] const Vec2& at(int i, int j) const { return shift[static_cast<std::size_t>(i) * cols + j]; }
};

/// One shared-corner constraint: element a's corner va should coincide with element b's vb.
struct VertexPair {
  int a;
  int b;
  Vec2 va;
  Vec2 vb;
};

/// Right neighbours share (1, m) <-> (-1, m); lower neighbours share (m, 1) <-> (m, -1).
inline std::vector<VertexPair> shared_vertex_pairs(const ElementMask& mask) {
  std::vector<VertexPair> pairs;
  for (int i = 0; i < mask.rows; ++i)
    for (int j = 0; j < mask.cols; ++j) {
      if (!mask.at(i, j)) continue;
      const int a = i * mask.cols + j;
      for (double m : {-1.0, 1.0}) {
        if (j + 1 < mask.cols && mask.at(i, j + 1)) pairs.push_back({a, a + 1, Vec2(1.0, m), Vec2(-1.0, m)});
        if (i + 1 < mask.rows && mask.at(i + 1, j)) pairs.push_back({a, a + mask.cols, Vec2(m, 1.0), Vec2(m, -1.0)});
      }
    }
  return pairs;
}

inline bool mask_connected(const ElementMask& mask) {
  int start = -1;
  for (std::size_t n = 0; n < mask.keep.size(); ++n)
    if (mask.keep[n]) {
      start = static_cast<int>(n);
      break;
    }
  if (start < 0) return false;
  std::vector<char> seen(mask.keep.size(), 0);
  std::deque<int> queue{start};
  seen[static_cast<std::size_t>(start)] = 1;
  int reached = 1;
  while (!queue.empty()) {
    const int idx = queue.front();
    queue.pop_front();
    const int i = idx / mask.cols;
    const int j = idx % mask.cols;
    const int nbr[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
    for (const auto& nb : nbr) {
      if (nb[0] < 0 || nb[1] < 0 || nb[0] >= mask.rows || nb[1] >= mask.cols) continue;
      const auto n = static_cast<std::size_t>(nb[0] * mask.cols + nb[1]);
      if (!mask.keep[n] || seen[n]) continue;
      seen[n] = 1;
      ++reached;
      queue.push_back(static_cast<int>(n));
    }
  }
  return reached == mask.count();
}

/// Sum of squared shared-corner distances for the given shifts.
inline double shared_vertex_objective(const ElementGrid& grid, const ElementMask& mask,
                                      const std::vector<Vec2>& shift) {
  double total = 0.0;
  for (const VertexPair& p : shared_vertex_pairs(mask)) {
    const auto a = static_cast<std::size_t>(p.a);
    const auto b = static_cast<std::size_t>(p.b);
    const Vec2 d = apply(grid.cells[a].h, p.va) + shift[a] - apply(grid.cells[b].h, p.vb) - shift[b];
    total += d.squaredNorm();
  }
  return total;
}

inline LocalShiftField solve_local_shifts(const ElementGrid& grid, const ElementMask& mask) {
  if (mask.rows != grid.rows || mask.cols != grid.cols) throw LocalAlignError("local align: mask/grid size mismatch");
  if (mask.count() < 2) throw LocalAlignError("local align: need at least two masked elements");
  if (!mask_connected(mask)) throw LocalAlignError("local align: masked elements are not 4-connected");

  std::vector<int> index(mask.keep.size(), -1);
  std::vector<std::size_t> cell_of;
  for (std::size_t n = 0; n < mask.keep.size(); ++n)
    if (mask.keep[n]) {
      index[n] = static_cast<int>(cell_of.size());
      cell_of.push_back(n);
    }
  const auto m = static_cast<Eigen::Index>(cell_of.size());
  Eigen::MatrixXd lap = Eigen::MatrixXd::Zero(m, m);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(m, 2);
  for (const VertexPair& p : shared_vertex_pairs(mask)) {
    const int a = index[static_cast<std::size_t>(p.a)];
    const int b = index[static_cast<std::size_t>(p.b)];
    const Vec2 d = apply(grid.cells[static_cast<std::size_t>(p.a)].h, p.va) -
                   apply(grid.cells[static_cast<std::size_t>(p.b)].h, p.vb);
    // |x_a - x_b + d|^2
    lap(a, a) += 1.0;
    lap(b, b) += 1.0;
    lap(a, b) -= 1.0;
    lap(b, a) -= 1.0;
    rhs.row(a) -= d.transpose();
    rhs.row(b) += d.transpose();
  }
  lap.array() += 1.0 / static_cast<double>(m);
  const Eigen::LDLT<Eigen::MatrixXd> ldlt(lap);
  if (ldlt.info() != Eigen::Success) throw LocalAlignError("local align: singular gauge system");
  const Eigen::MatrixXd x = ldlt.solve(rhs);
  if (!x.allFinite()) throw LocalAlignError("local align: singular gauge system");

  LocalShiftField field{grid.rows, grid.cols, std::vector<Vec2>(mask.keep.size(), Vec2::Zero()), mask};
  for (Eigen::Index k = 0; k < m; ++k) field.shift[cell_of[static_cast<std::size_t>(k)]] = x.row(k).transpose();
  return field;
}

/// H <- T(x) H for every masked element, with the kernel moved by -x so that k * S(H)
/// is preserved up to interpolation.
inline ElementGrid apply_shifts(const ElementGrid& grid, const LocalShiftField& field) {
  ElementGrid out = grid;
  for (std::size_t n = 0; n < out.cells.size(); ++n) {
    if (!field.mask.keep[n]) continue;
    const Vec2& x = field.shift[n];
    if (x.isZero(0.0)) continue;
    out.cells[n].h = translation_homography(x) * out.cells[n].h;
    out.cells[n].kernel = sample_shifted(out.cells[n].kernel, x);
  }
  return out;
}

}  // namespace blurcal
