#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "ldl/error.hpp"
#include "ldl/tensor.hpp"

namespace ldl {

/// RGB image stored as Tensor[3,H,W] with values in [0,1].
using Image = Tensor<float>;

inline void require_image(const Image& img, const char* op) {
  if (img.rank() != 3 || img.dim(0) != 3) {
    throw DimensionError(std::string(op) + ": expected image [3,H,W], got " + shape_string(img.shape()));
  }
}

/// Half-open pixel box [x0,x1) x [y0,y1).
struct CropBox {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

inline Image crop(const Image& img, const CropBox& box) {
  require_image(img, "crop");
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (box.x1 > w || box.y1 > h || box.x0 > box.x1 || box.y0 > box.y1) {
    throw RangeError("crop box " + std::to_string(box.x0) + ";" + std::to_string(box.y0) + ";" +
                     std::to_string(box.x1) + ";" + std::to_string(box.y1) + " lies outside image " +
                     std::to_string(w) + "x" + std::to_string(h));
  }
  if (box.x1 == box.x0 || box.y1 == box.y0) throw DegenerateInputError("crop box has zero area");
  const std::size_t ch = box.y1 - box.y0, cw = box.x1 - box.x0;
  Image out({3, ch, cw});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < ch; ++y)
      for (std::size_t x = 0; x < cw; ++x) out[(c * ch + y) * cw + x] = img[(c * h + box.y0 + y) * w + box.x0 + x];
  return out;
}

/// Zero-pads the shorter side symmetrically to a square; an odd remainder puts
/// the extra row/column at the bottom/right.
inline Image pad_to_square(const Image& img) {
  require_image(img, "pad_to_square");
  const std::size_t h = img.dim(1), w = img.dim(2), side = std::max(h, w);
  if (h == w) return img;
  const std::size_t top = (side - h) / 2, left = (side - w) / 2;
  Image out({3, side, side});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(img.raw() + (c * h + y) * w, w, out.raw() + (c * side + top + y) * side + left);
  return out;
}

/// Bilinear resize with half-pixel centers; identity when the size is unchanged.
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
  require_image(img, "resize_bilinear");
  const std::size_t h = img.dim(1), w = img.dim(2);
  if (h == out_h && w == out_w) return img;
  Image out({3, out_h, out_w});
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const float* p = img.raw() + c * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bottom = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(c * out_h + y) * out_w + x] = static_cast<float>(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

/// Crop (optional), zero-pad to square, resize to target x target.
inline Image normalize_image(const Image& raw, const std::optional<CropBox>& box, std::size_t target) {
  require_image(raw, "normalize_image");
  if (target == 0) throw ConfigurationError("normalize_image: target size must be positive");
  Image img = box ? crop(raw, *box) : raw;
  img = pad_to_square(img);
  return resize_bilinear(img, target, target);
}

/// Rotation about the image center by `degrees` (counter-clockwise), bilinear, zero fill.
inline Image rotate(const Image& img, double degrees) {
  require_image(img, "rotate");
  const std::size_t h = img.dim(1), w = img.dim(2);
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  Image out({3, h, w});
  auto at = [&](std::size_t c, long y, long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) return 0.0;
    return img[(c * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)];
  };
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      // inverse map: rotate the output coordinate by -angle
      const double sx = cs * dx - sn * dy + cx;
      const double sy = sn * dx + cs * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double wx = sx - fx, wy = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = at(c, y0, x0) * (1 - wx) * (1 - wy);
        if (wx > 0) v += at(c, y0, x0 + 1) * wx * (1 - wy);
        if (wy > 0) v += at(c, y0 + 1, x0) * (1 - wx) * wy;
        if (wx > 0 && wy > 0) v += at(c, y0 + 1, x0 + 1) * wx * wy;
        out[(c * h + y) * w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

/// Scales each channel about its mean by `factor`, then clamps to [0,1].
inline Image adjust_contrast(const Image& img, double factor) {
  require_image(img, "adjust_contrast");
  const std::size_t hw = img.dim(1) * img.dim(2);
  Image out(img.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    const float* p = img.raw() + c * hw;
    double mean = 0;
    for (std::size_t i = 0; i < hw; ++i) mean += p[i];
    mean /= static_cast<double>(hw);
    float* q = out.raw() + c * hw;
    for (std::size_t i = 0; i < hw; ++i) q[i] = static_cast<float>(std::clamp(mean + factor * (p[i] - mean), 0.0, 1.0));
  }
  return out;
}

/// Principal components of RGB pixel values. Column k of `vectors` pairs with `values[k]`.
struct ColorPca {
  Eigen::Matrix3d vectors = Eigen::Matrix3d::Identity();
  Eigen::Vector3d values = Eigen::Vector3d::Zero();
};

inline ColorPca compute_color_pca(std::span<const Image* const> images) {
  Eigen::Vector3d sum = Eigen::Vector3d::Zero();
  Eigen::Matrix3d outer = Eigen::Matrix3d::Zero();
  double count = 0;
  for (const Image* img : images) {
    require_image(*img, "compute_color_pca");
    const std::size_t hw = img->dim(1) * img->dim(2);
    for (std::size_t i = 0; i < hw; ++i) {
      const Eigen::Vector3d px((*img)[i], (*img)[hw + i], (*img)[2 * hw + i]);
      sum += px;
      outer += px * px.transpose();
      count += 1;
    }
  }
  ColorPca pca;
  if (count < 2) return pca;
  const Eigen::Vector3d mean = sum / count;
  const Eigen::Matrix3d cov = (outer - count * mean * mean.transpose()) / (count - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov);
  pca.vectors = solver.eigenvectors();
  pca.values = solver.eigenvalues().cwiseMax(0.0);
  return pca;
}

/// Adds sum_k alpha_k sqrt(lambda_k) p_k to every pixel, then clamps to [0,1].
inline Image color_jitter(const Image& img, const ColorPca& pca, const std::array<double, 3>& alpha) {
  require_image(img, "color_jitter");
  Eigen::Vector3d shift = Eigen::Vector3d::Zero();
  for (int k = 0; k < 3; ++k) shift += pca.vectors.col(k) * (alpha[k] * std::sqrt(pca.values[k]));
  const std::size_t hw = img.dim(1) * img.dim(2);
  Image out(img.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i)
      out[c * hw + i] = static_cast<float>(std::clamp(img[c * hw + i] + shift[static_cast<int>(c)], 0.0, 1.0));
  return out;
}

namespace detail {

inline std::string ppm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw FormatError("truncated PPM header in '" + path + "'");
  return tok;
}

}  // namespace detail

/// Reads binary (P6) or ASCII (P3) PPM into [3,H,W] floats in [0,1].
inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open image '" + path.string() + "'");
  const std::string p = path.string();
  const std::string magic = detail::ppm_token(in, p);
  if (magic != "P6" && magic != "P3") throw FormatError("'" + p + "' is not a PPM image (magic " + magic + ")");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(detail::ppm_token(in, p));
    h = std::stoul(detail::ppm_token(in, p));
    maxval = std::stoul(detail::ppm_token(in, p));
  } catch (const std::invalid_argument&) {
    throw FormatError("malformed PPM header in '" + p + "'");
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw FormatError("invalid PPM header in '" + p + "'");
  Image img({3, h, w});
  const double scale = 1.0 / static_cast<double>(maxval);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        std::size_t v = 0;
        if (magic == "P3") {
          v = std::stoul(detail::ppm_token(in, p));
        } else if (maxval < 256) {
          const int b = in.get();
          if (b == EOF) throw FormatError("truncated PPM data in '" + p + "'");
          v = static_cast<std::size_t>(b);
        } else {
          const int hi = in.get(), lo = in.get();
          if (lo == EOF) throw FormatError("truncated PPM data in '" + p + "'");
          v = static_cast<std::size_t>(hi) << 8 | static_cast<std::size_t>(lo);
        }
        img[(c * h + y) * w + x] = static_cast<float>(std::min(1.0, static_cast<double>(v) * scale));
      }
  return img;
}

/// Writes 8-bit binary PPM.
inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  require_image(img, "write_ppm");
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FileError("cannot write image '" + path.string() + "'");
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<char> row(w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(static_cast<double>(img[(c * h + y) * w + x]), 0.0, 1.0);
        row[x * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0)));
      }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw FileError("failed writing image '" + path.string() + "'");
}

}  // namespace ldl
