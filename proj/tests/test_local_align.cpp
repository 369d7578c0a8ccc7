#include "blurcal/local_align.hpp"
#include "blurcal/synth.hpp"

#include <gtest/gtest.h>

using namespace blurcal;

namespace {

ElementMask full_mask(int rows, int cols) {
  return {rows, cols, std::vector<char>(static_cast<std::size_t>(rows) * cols, 1)};
}

ElementGrid true_grid(int rows, int cols) {
  const SceneConfig cfg;
  const Pose pose = make_pose(0.4, 0.3, 0.1, Vec3(0.2, -0.1, 25.0), rows, cols);
  ElementGrid g(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) g.at(i, j).h = element_homography(cfg.camera, cfg.distortion, pose, i, j);
  return g;
}

}  // namespace

TEST(LocalAlign, PairCount) {
  // 3 x 3: 6 horizontal and 6 vertical neighbours, two shared corners each
  EXPECT_EQ(shared_vertex_pairs(full_mask(3, 3)).size(), 24u);
}

TEST(LocalAlign, ConsistentGridHasZeroObjective) {
  const ElementGrid g = true_grid(4, 5);
  const ElementMask m = full_mask(4, 5);
  EXPECT_LT(shared_vertex_objective(g, m, std::vector<Vec2>(20, Vec2::Zero())), 1e-18);
}

TEST(LocalAlign, UndoesPerElementTranslations) {
  ElementGrid g = true_grid(4, 5);
  auto rng = rng_stream(300, 0);
  std::vector<Vec2> t(g.cells.size());
  Vec2 mean = Vec2::Zero();
  for (std::size_t n = 0; n < g.cells.size(); ++n) {
    t[n] = Vec2(uniform(rng, -2.0, 2.0), uniform(rng, -2.0, 2.0));
    mean += t[n] / static_cast<double>(g.cells.size());
    g.cells[n].h = translation_homography(t[n]) * g.cells[n].h;
  }
  const ElementMask m = full_mask(4, 5);
  const LocalShiftField f = solve_local_shifts(g, m);
  for (std::size_t n = 0; n < g.cells.size(); ++n) EXPECT_NEAR((f.shift[n] + t[n] - mean).norm(), 0.0, 1e-9);
  EXPECT_LT(shared_vertex_objective(g, m, f.shift), 1e-16);
  const ElementGrid shifted = apply_shifts(g, f);
  EXPECT_LT(shared_vertex_objective(shifted, m, std::vector<Vec2>(20, Vec2::Zero())), 1e-16);
}

TEST(LocalAlign, MatchesMinimumNormLeastSquares) {
  ElementGrid g = true_grid(5, 5);
  auto rng = rng_stream(301, 0);
  for (auto& c : g.cells) {
    Mat3 p = c.h.matrix();
    p(0, 0) *= 1.0 + uniform(rng, -0.03, 0.03);
    p(1, 1) *= 1.0 + uniform(rng, -0.03, 0.03);
    p(0, 2) += uniform(rng, -1.0, 1.0);
    c.h = Homography(p);
  }
  ElementMask m = full_mask(5, 5);
  m.keep[0] = 0;
  m.keep[24] = 0;
  m.keep[12] = 0;
  const LocalShiftField f = solve_local_shifts(g, m);

  std::vector<int> index(25, -1);
  int k = 0;
  for (int n = 0; n < 25; ++n)
    if (m.keep[static_cast<std::size_t>(n)]) index[static_cast<std::size_t>(n)] = k++;
  const auto pairs = shared_vertex_pairs(m);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(pairs.size()), k);
  Eigen::MatrixXd b(static_cast<Eigen::Index>(pairs.size()), 2);
  for (std::size_t r = 0; r < pairs.size(); ++r) {
    const auto& p = pairs[r];
    a(static_cast<Eigen::Index>(r), index[static_cast<std::size_t>(p.a)]) = 1.0;
    a(static_cast<Eigen::Index>(r), index[static_cast<std::size_t>(p.b)]) = -1.0;
    const Vec2 d = apply(g.cells[static_cast<std::size_t>(p.a)].h, p.va) - apply(g.cells[static_cast<std::size_t>(p.b)].h, p.vb);
    b.row(static_cast<Eigen::Index>(r)) = -d.transpose();
  }
  const Eigen::MatrixXd oracle = a.completeOrthogonalDecomposition().solve(b);
  for (int n = 0; n < 25; ++n) {
    const int c = index[static_cast<std::size_t>(n)];
    if (c < 0) {
      EXPECT_EQ(f.shift[static_cast<std::size_t>(n)], Vec2::Zero());
      continue;
    }
    EXPECT_NEAR(f.shift[static_cast<std::size_t>(n)].x(), oracle(c, 0), 1e-9);
    EXPECT_NEAR(f.shift[static_cast<std::size_t>(n)].y(), oracle(c, 1), 1e-9);
  }
}

TEST(LocalAlign, RejectsBadMasks) {
  const ElementGrid g = true_grid(3, 3);
  ElementMask m = full_mask(3, 3);
  std::fill(m.keep.begin(), m.keep.end(), 0);
  m.keep[0] = 1;
  EXPECT_THROW((void)solve_local_shifts(g, m), LocalAlignError);
  m.keep[8] = 1;
  EXPECT_FALSE(mask_connected(m));
  EXPECT_THROW((void)solve_local_shifts(g, m), LocalAlignError);
  EXPECT_THROW((void)solve_local_shifts(g, full_mask(3, 4)), LocalAlignError);
}

TEST(LocalAlign, ApplyShiftsKeepsKernelCentroidConsistent) {
  ElementGrid g = true_grid(2, 2);
  for (auto& c : g.cells) c.kernel = Kernel::delta(9);
  LocalShiftField f{2, 2, std::vector<Vec2>(4, Vec2(1.0, 0.0)), full_mask(2, 2)};
  const ElementGrid out = apply_shifts(g, f);
  // H moved by +1 in x, kernel by -1
  EXPECT_NEAR((apply(out.cells[0].h, Vec2::Zero()) - apply(g.cells[0].h, Vec2::Zero())).x(), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(out.cells[0].kernel.at(3, 4), 1.0);
}
