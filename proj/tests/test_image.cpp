#include "blurcal/image.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace blurcal;

namespace {

GrayImage random_image(std::mt19937_64& rng, int w, int h) {
  GrayImage img(w, h);
  for (double& v : img.data()) v = uniform(rng, 0.0, 1.0);
  return img;
}

Kernel random_kernel(std::mt19937_64& rng, int ks) {
  Kernel k(ks);
  for (double& v : k.weights()) v = uniform(rng, -0.2, 1.0);
  return k;
}

}  // namespace

TEST(Image, ValidConvolutionMatchesDirectSum) {
  auto rng = rng_stream(3, 0);
  const GrayImage img = random_image(rng, 23, 19);
  const Kernel k = random_kernel(rng, 5);
  const GrayImage out = convolve(img, k);
  ASSERT_EQ(out.width(), 19);
  ASSERT_EQ(out.height(), 15);
  // textbook convolution: out(p) = sum_d k(r + d) in(p + r - d), output pixel p over input p + r
  const int r = 2;
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      double s = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) s += k.at(r + dx, r + dy) * img.at(x + r - dx, y + r - dy);
      EXPECT_NEAR(out.at(x, y), s, 1e-12);
    }
}

TEST(Image, AdjointIdentity) {
  auto rng = rng_stream(4, 0);
  const GrayImage x = random_image(rng, 30, 26);
  const Kernel k = random_kernel(rng, 7);
  const GrayImage y = random_image(rng, 24, 20);
  const GrayImage kx = convolve(x, k);
  const GrayImage aty = convolve_adjoint(y, k);
  double lhs = 0.0;
  double rhs = 0.0;
  for (std::size_t i = 0; i < kx.size(); ++i) lhs += kx.data()[i] * y.data()[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data()[i] * aty.data()[i];
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST(Image, DenseDesignReproducesConvolution) {
  auto rng = rng_stream(5, 0);
  const GrayImage lat = random_image(rng, 14, 12);
  const Kernel k = random_kernel(rng, 5);
  const GrayImage out = convolve(lat, k);
  const Eigen::MatrixXd x = blurcal::testing::dense_kernel_design(lat, 5, out.width(), out.height());
  const Eigen::VectorXd kv = Eigen::Map<const Eigen::VectorXd>(k.weights().data(), 25);
  const Eigen::VectorXd o = x * kv;
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(o(static_cast<Eigen::Index>(i)), out.data()[i], 1e-12);
}

TEST(Image, SameModeIsZeroPadded) {
  GrayImage img(5, 5, 0.0);
  img.at(2, 2) = 1.0;
  Kernel k(3);
  k.at(0, 1) = 1.0;  // tap at offset -1 moves content by -1 in x
  const GrayImage out = convolve(img, k, ConvMode::same_zero_pad);
  ASSERT_EQ(out.width(), 5);
  EXPECT_DOUBLE_EQ(out.at(1, 2), 1.0);
  EXPECT_DOUBLE_EQ(out.sum(), 1.0);
}

TEST(Image, IntegerCoShiftLeavesValidConvolutionUnchanged) {
  auto rng = rng_stream(6, 0);
  const int ks = 9;
  const int r = ks / 2;
  Kernel k(ks);
  // support inside the central 5 x 5 so every shift up to 2 keeps it in the window
  for (int y = r - 2; y <= r + 2; ++y)
    for (int x = r - 2; x <= r + 2; ++x) k.at(x, y) = uniform(rng, 0.0, 1.0);
  const GrayImage big = random_image(rng, 40, 40);
  const PixelRect lat{8, 8, 24, 24};
  const GrayImage base = convolve(big.crop(lat), k);
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      // latent moved by (dx, dy), kernel by (-dx, -dy): same observation
      const GrayImage moved = big.crop({lat.x0 - dx, lat.y0 - dy, lat.width, lat.height});
      const GrayImage out = convolve(moved, k.shifted(-dx, -dy));
      for (std::size_t i = 0; i < out.size(); ++i) ASSERT_NEAR(out.data()[i], base.data()[i], 1e-12);
    }
}

TEST(Image, KernelHelpers) {
  Kernel k = Kernel::delta(5);
  EXPECT_DOUBLE_EQ(k.sum(), 1.0);
  EXPECT_DOUBLE_EQ(k.shifted(1, -1).at(3, 1), 1.0);
  EXPECT_DOUBLE_EQ(k.resized(9).at(4, 4), 1.0);
  EXPECT_DOUBLE_EQ(k.resized(3).at(1, 1), 1.0);
  EXPECT_THROW(Kernel(4), ImageError);
}

TEST(Image, SsimAndPsnr) {
  auto rng = rng_stream(7, 0);
  const GrayImage a = random_image(rng, 32, 32);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  GrayImage b = a;
  for (double& v : b.data()) v += 0.1;
  // MSE 0.01 on unit range -> 20 dB
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_LT(ssim(a, add_gaussian_noise(a, 0.2, 1)), 0.9);
}

TEST(Image, PgmRoundTrip) {
  auto rng = rng_stream(8, 0);
  const GrayImage a = random_image(rng, 17, 11);
  const auto path = (std::filesystem::temp_directory_path() / "blurcal_pgm_roundtrip.pgm").string();
  save_pgm(path, a, 16);
  const GrayImage b = load_pgm(path);
  ASSERT_TRUE(a.same_shape(b));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 0.5 / 65535.0 + 1e-12);
  std::filesystem::remove(path);
  EXPECT_THROW((void)load_pgm(path), ImageError);
}

TEST(Image, NoiseIsSeeded) {
  const GrayImage a(16, 16, 0.5);
  EXPECT_EQ(add_gaussian_noise(a, 0.05, 9).data(), add_gaussian_noise(a, 0.05, 9).data());
  EXPECT_NE(add_gaussian_noise(a, 0.05, 9).data(), add_gaussian_noise(a, 0.05, 10).data());
}
