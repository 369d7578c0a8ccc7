#pragma once

// Grayscale image container, direct convolution, noise, quality metrics and PGM I/O.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace blurcal {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PixelRect {
  int x0{0};
  int y0{0};
  int width{0};
  int height{0};

  [[nodiscard]] bool contains(const PixelRect& o) const {
    return o.x0 >= x0 && o.y0 >= y0 && o.x0 + o.width <= x0 + width && o.y0 + o.height <= y0 + height;
  }
};

class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(int width, int height, double fill = 0.0)
      : width_(width), height_(height), data_(static_cast<std::size_t>(checked(width) * checked(height)), fill) {}

  [[nodiscard]] int width() const noexcept { return width_; }
  [[nodiscard]] int height() const noexcept { return height_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] double& at(int x, int y) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
  [[nodiscard]] double at(int x, int y) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }

  [[nodiscard]] std::vector<double>& data() noexcept { return data_; }
  [[nodiscard]] const std::vector<double>& data() const noexcept { return data_; }

  [[nodiscard]] bool same_shape(const GrayImage& o) const noexcept {
    return width_ == o.width_ && height_ == o.height_;
  }

  [[nodiscard]] GrayImage crop(const PixelRect& r) const {
    if (!PixelRect{0, 0, width_, height_}.contains(r)) throw ImageError("crop rectangle outside image");
    GrayImage out(r.width, r.height);
    for (int y = 0; y < r.height; ++y)
      for (int x = 0; x < r.width; ++x) out.at(x, y) = at(r.x0 + x, r.y0 + y);
    return out;
  }

  [[nodiscard]] double sum() const {
    double s = 0.0;
    for (double v : data_) s += v;
    return s;
  }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  static int checked(int n) {
    if (n < 0) throw ImageError("negative image dimension");
    return n;
  }

  int width_{0};
  int height_{0};
  std::vector<double> data_;
};

/// Square blur kernel with odd side length; weights are row-major.
class Kernel {
 public:
  Kernel() : Kernel(1) {}
  explicit Kernel(int size, double fill = 0.0) : size_(size), w_(static_cast<std::size_t>(size) * size, fill) {
    if (size <= 0 || size % 2 == 0) throw ImageError("kernel size must be a positive odd integer");
  }

  static Kernel delta(int size) {
    Kernel k(size);
    k.at(k.radius(), k.radius()) = 1.0;
    return k;
  }

  [[nodiscard]] int size() const noexcept { return size_; }
  [[nodiscard]] int radius() const noexcept { return size_ / 2; }
  [[nodiscard]] double& at(int x, int y) { return w_[static_cast<std::size_t>(y) * size_ + x]; }
  [[nodiscard]] double at(int x, int y) const { return w_[static_cast<std::size_t>(y) * size_ + x]; }
  [[nodiscard]] std::vector<double>& weights() noexcept { return w_; }
  [[nodiscard]] const std::vector<double>& weights() const noexcept { return w_; }

  [[nodiscard]] double sum() const {
    double s = 0.0;
    for (double v : w_) s += v;
    return s;
  }
  [[nodiscard]] double squared_norm() const {
    double s = 0.0;
    for (double v : w_) s += v * v;
    return s;
  }

  [[nodiscard]] GrayImage as_image() const {
    GrayImage img(size_, size_);
    img.data() = w_;
    return img;
  }

  /// Zero-pads (or centre-crops) to another odd size.
  [[nodiscard]] Kernel resized(int new_size) const {
    Kernel out(new_size);
    const int off = out.radius() - radius();
    for (int y = 0; y < size_; ++y)
      for (int x = 0; x < size_; ++x) {
        const int nx = x + off;
        const int ny = y + off;
        if (nx >= 0 && ny >= 0 && nx < new_size && ny < new_size) out.at(nx, ny) = at(x, y);
      }
    return out;
  }

  /// Integer translation: out(x) = in(x - shift), mass leaving the window is dropped.
  [[nodiscard]] Kernel shifted(int dx, int dy) const {
    Kernel out(size_);
    for (int y = 0; y < size_; ++y)
      for (int x = 0; x < size_; ++x) {
        const int sx = x - dx;
        const int sy = y - dy;
        if (sx >= 0 && sy >= 0 && sx < size_ && sy < size_) out.at(x, y) = at(sx, sy);
      }
    return out;
  }

  friend bool operator==(const Kernel&, const Kernel&) = default;

 private:
  int size_;
  std::vector<double> w_;
};

enum class ConvMode { valid, same_zero_pad };

/// out(x, y) = sum_{a,b} k(a, b) in(x + 2r - a, y + 2r - b) for valid mode, where the
/// output pixel (x, y) sits over input pixel (x + r, y + r).
inline GrayImage convolve(const GrayImage& img, const Kernel& k, ConvMode mode = ConvMode::valid) {
  const int ks = k.size();
  const int r = k.radius();
  if (mode == ConvMode::valid) {
    if (img.width() < ks || img.height() < ks) throw ImageError("valid convolution: image smaller than kernel");
    const int ow = img.width() - ks + 1;
    const int oh = img.height() - ks + 1;
    GrayImage out(ow, oh);
    const int iw = img.width();
    const double* src = img.data().data();
    double* dst = out.data().data();
    for (int b = 0; b < ks; ++b) {
      for (int a = 0; a < ks; ++a) {
        const double w = k.at(a, b);
        if (w == 0.0) continue;
        for (int y = 0; y < oh; ++y) {
          const double* row = src + static_cast<std::size_t>(y + ks - 1 - b) * iw + (ks - 1 - a);
          double* orow = dst + static_cast<std::size_t>(y) * ow;
          for (int x = 0; x < ow; ++x) orow[x] += w * row[x];
        }
      }
    }
    return out;
  }
  GrayImage padded(img.width() + 2 * r, img.height() + 2 * r, 0.0);
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) padded.at(x + r, y + r) = img.at(x, y);
  return convolve(padded, k, ConvMode::valid);
}

/// Adjoint of valid convolution: spreads an output-sized map back onto the input grid
/// (correlation with the flipped kernel, full mode).
inline GrayImage convolve_adjoint(const GrayImage& out_map, const Kernel& k) {
  const int ks = k.size();
  const int ow = out_map.width();
  const int oh = out_map.height();
  GrayImage in(ow + ks - 1, oh + ks - 1);
  const int iw = in.width();
  for (int b = 0; b < ks; ++b) {
    for (int a = 0; a < ks; ++a) {
      const double w = k.at(a, b);
      if (w == 0.0) continue;
      for (int y = 0; y < oh; ++y) {
        double* row = in.data().data() + static_cast<std::size_t>(y + ks - 1 - b) * iw + (ks - 1 - a);
        const double* orow = out_map.data().data() + static_cast<std::size_t>(y) * ow;
        for (int x = 0; x < ow; ++x) row[x] += w * orow[x];
      }
    }
  }
  return in;
}

/// Additive i.i.d. N(0, sigma^2) noise; values are deliberately left unclamped.
inline GrayImage add_gaussian_noise(const GrayImage& img, double sigma, std::uint64_t seed) {
  if (sigma < 0.0) throw ImageError("noise sigma must be non-negative");
  GrayImage out = img;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma);
  for (double& v : out.data()) v += dist(rng);
  return out;
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size) * size);
  const int r = size / 2;
  double total = 0.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double v = std::exp(-((x - r) * (x - r) + (y - r) * (y - r)) / (2.0 * sigma * sigma));
      w[static_cast<std::size_t>(y) * size + x] = v;
      total += v;
    }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace detail

/// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), dynamic range 1, averaged over
/// all fully-covered window positions.
inline double ssim(const GrayImage& a, const GrayImage& b) {
  if (!a.same_shape(b)) throw ImageError("ssim: image dimensions differ");
  constexpr int win = 11;
  if (a.width() < win || a.height() < win) throw ImageError("ssim: images smaller than the 11x11 window");
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const auto w = detail::gaussian_window(win, 1.5);
  double acc = 0.0;
  int count = 0;
  for (int y = 0; y + win <= a.height(); ++y) {
    for (int x = 0; x + win <= a.width(); ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int j = 0; j < win; ++j)
        for (int i = 0; i < win; ++i) {
          const double g = w[static_cast<std::size_t>(j) * win + i];
          const double va = a.at(x + i, y + j);
          const double vb = b.at(x + i, y + j);
          ma += g * va;
          mb += g * vb;
          saa += g * va * va;
          sbb += g * vb * vb;
          sab += g * va * vb;
        }
      const double va = saa - ma * ma;
      const double vb = sbb - mb * mb;
      const double cov = sab - ma * mb;
      acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      ++count;
    }
  }
  return acc / count;
}

/// Peak 1. Identical images return +infinity.
inline double psnr(const GrayImage& a, const GrayImage& b) {
  if (!a.same_shape(b)) throw ImageError("psnr: image dimensions differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

// Binary PGM (P5). maxval 255 -> 8 bit, otherwise 16-bit big-endian samples.

inline void save_pgm(const std::string& path, const GrayImage& img, int bit_depth = 16) {
  if (bit_depth != 8 && bit_depth != 16) throw ImageError("pgm: bit depth must be 8 or 16");
  const int maxval = bit_depth == 8 ? 255 : 65535;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ImageError("pgm: cannot open '" + path + "' for writing");
  os << "P5\n" << img.width() << " " << img.height() << "\n" << maxval << "\n";
  for (double v : img.data()) {
    const auto q = static_cast<unsigned>(std::lround(std::clamp(v, 0.0, 1.0) * maxval));
    if (bit_depth == 8) {
      os.put(static_cast<char>(q));
    } else {
      os.put(static_cast<char>(q >> 8));
      os.put(static_cast<char>(q & 0xff));
    }
  }
  if (!os) throw ImageError("pgm: write failed for '" + path + "'");
}

inline GrayImage load_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("pgm: cannot open '" + path + "'");
  auto next_token = [&is]() {
    std::string tok;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    return tok;
  };
  if (next_token() != "P5") throw ImageError("pgm: bad magic number in '" + path + "'");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw ImageError("pgm: malformed header in '" + path + "'");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) throw ImageError("pgm: malformed header in '" + path + "'");
  GrayImage img(w, h);
  const bool wide = maxval > 255;
  for (double& v : img.data()) {
    unsigned q = 0;
    unsigned char hi = 0, lo = 0;
    if (!is.read(reinterpret_cast<char*>(&hi), 1)) throw ImageError("pgm: truncated data in '" + path + "'");
    q = hi;
    if (wide) {
      if (!is.read(reinterpret_cast<char*>(&lo), 1)) throw ImageError("pgm: truncated data in '" + path + "'");
      q = (q << 8) | lo;
    }
    v = static_cast<double>(q) / maxval;
  }
  return img;
}

}  // namespace blurcal
