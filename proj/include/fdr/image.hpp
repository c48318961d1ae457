#ifndef FDR_IMAGE_HPP
#define FDR_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fdr/error.hpp"

namespace fdr {

/// Row-major, channel-interleaved raster of intensities (nominally in [0,1]).
///
/// Pixel centers sit on integer coordinates: (0,0) is the center of the
/// top-left pixel. Values are stored in double precision so that spectral
/// round trips stay exact to ~1e-12.
class ImageBuf {
 public:
  ImageBuf() = default;

  ImageBuf(int width, int height, int channels = 1, double fill = 0.0)
      : width_(width), height_(height), channels_(channels) {
    check_shape(width, height, channels);
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }

  ImageBuf(int width, int height, int channels, std::vector<double> data)
      : width_(width), height_(height), channels_(channels), data_(std::move(data)) {
    check_shape(width, height, channels);
    if (data_.size() != static_cast<std::size_t>(width) * height * channels) {
      throw ArgumentError("ImageBuf: data length does not match width*height*channels");
    }
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  std::size_t pixel_count() const noexcept {
    return static_cast<std::size_t>(width_) * height_;
  }
  bool empty() const noexcept { return data_.empty(); }

  double at(int x, int y, int c = 0) const noexcept { return data_[index(x, y, c)]; }
  double& at(int x, int y, int c = 0) noexcept { return data_[index(x, y, c)]; }

  /// Zero outside the raster.
  double at_or_zero(int x, int y, int c = 0) const noexcept {
    if (x < 0 || y < 0 || x >= width_ || y >= height_) return 0.0;
    return data_[index(x, y, c)];
  }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }

  bool same_shape(const ImageBuf& other) const noexcept {
    return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  static void check_shape(int w, int h, int c) {
    if (w < 1 || h < 1) throw ArgumentError("ImageBuf: dimensions must be positive");
    if (c != 1 && c != 3) throw ArgumentError("ImageBuf: channels must be 1 or 3");
  }
  std::size_t index(int x, int y, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

/// Bilinear read together with its analytic spatial derivatives.
struct SampleGrad {
  double value = 0.0;
  double d_dx = 0.0;
  double d_dy = 0.0;
};

/// Bilinear interpolation with zero padding outside the raster.
///
/// Inside a cell the surface is bilinear, so d_dx/d_dy are exact partials
/// (piecewise constant along the respective axis). At integer coordinates
/// the derivatives are the forward differences of the neighbours.
inline SampleGrad bilinear_sample(const ImageBuf& img, double x, double y, int c = 0) noexcept {
  const double fx0 = std::floor(x);
  const double fy0 = std::floor(y);
  // Far outside: avoid int overflow and return the padding value.
  if (fx0 < -2.0 || fy0 < -2.0 || fx0 > img.width() + 1.0 || fy0 > img.height() + 1.0) {
    return {};
  }
  const int x0 = static_cast<int>(fx0);
  const int y0 = static_cast<int>(fy0);
  const double tx = x - fx0;
  const double ty = y - fy0;
  const double v00 = img.at_or_zero(x0, y0, c);
  const double v10 = img.at_or_zero(x0 + 1, y0, c);
  const double v01 = img.at_or_zero(x0, y0 + 1, c);
  const double v11 = img.at_or_zero(x0 + 1, y0 + 1, c);
  const double top = v00 + tx * (v10 - v00);
  const double bottom = v01 + tx * (v11 - v01);
  SampleGrad s;
  s.value = top + ty * (bottom - top);
  s.d_dx = (1.0 - ty) * (v10 - v00) + ty * (v11 - v01);
  s.d_dy = bottom - top;
  return s;
}

/// Luma conversion (0.299, 0.587, 0.114); single-channel input is copied.
inline ImageBuf to_grayscale(const ImageBuf& img) {
  if (img.channels() == 1) return img;
  ImageBuf out(img.width(), img.height(), 1);
  auto src = img.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < out.pixel_count(); ++i) {
    dst[i] = 0.299 * src[3 * i] + 0.587 * src[3 * i + 1] + 0.114 * src[3 * i + 2];
  }
  return out;
}

/// One channel of a multi-channel image.
inline ImageBuf extract_channel(const ImageBuf& img, int c) {
  if (c < 0 || c >= img.channels()) throw ArgumentError("extract_channel: channel out of range");
  ImageBuf out(img.width(), img.height(), 1);
  auto src = img.data();
  auto dst = out.data();
  const int n = img.channels();
  for (std::size_t i = 0; i < out.pixel_count(); ++i) dst[i] = src[i * n + c];
  return out;
}

/// Interleaves single-channel planes into one image.
inline ImageBuf merge_channels(std::span<const ImageBuf> planes) {
  if (planes.size() != 1 && planes.size() != 3) {
    throw ArgumentError("merge_channels: need 1 or 3 planes");
  }
  const int w = planes[0].width();
  const int h = planes[0].height();
  const int n = static_cast<int>(planes.size());
  ImageBuf out(w, h, n);
  auto dst = out.data();
  for (int c = 0; c < n; ++c) {
    if (planes[c].width() != w || planes[c].height() != h || planes[c].channels() != 1) {
      throw ArgumentError("merge_channels: planes must be single-channel and equally sized");
    }
    auto src = planes[c].data();
    for (std::size_t i = 0; i < out.pixel_count(); ++i) dst[i * n + c] = src[i];
  }
  return out;
}

/// Bilinear resize with pixel-center alignment; source reads clamp to the border.
inline ImageBuf resize(const ImageBuf& img, int new_w, int new_h) {
  if (new_w < 1 || new_h < 1) throw ArgumentError("resize: target dimensions must be >= 1");
  if (new_w == img.width() && new_h == img.height()) return img;
  const int nc = img.channels();
  ImageBuf out(new_w, new_h, nc);
  const double sx = static_cast<double>(img.width()) / new_w;
  const double sy = static_cast<double>(img.height()) / new_h;
  const double max_x = img.width() - 1;
  const double max_y = img.height() - 1;
  for (int y = 0; y < new_h; ++y) {
    const double src_y = std::clamp((y + 0.5) * sy - 0.5, 0.0, max_y);
    const int y0 = static_cast<int>(std::floor(src_y));
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const double ty = src_y - y0;
    for (int x = 0; x < new_w; ++x) {
      const double src_x = std::clamp((x + 0.5) * sx - 0.5, 0.0, max_x);
      const int x0 = static_cast<int>(std::floor(src_x));
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const double tx = src_x - x0;
      for (int c = 0; c < nc; ++c) {
        const double top = img.at(x0, y0, c) + tx * (img.at(x1, y0, c) - img.at(x0, y0, c));
        const double bot = img.at(x0, y1, c) + tx * (img.at(x1, y1, c) - img.at(x0, y1, c));
        out.at(x, y, c) = top + ty * (bot - top);
      }
    }
  }
  return out;
}

/// Separable Gaussian blur, border-clamped. sigma <= 0 returns a copy.
inline ImageBuf gaussian_blur(const ImageBuf& img, double sigma) {
  if (sigma <= 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[i + radius];
  }
  for (double& k : kernel) k /= sum;

  const int w = img.width();
  const int h = img.height();
  const int nc = img.channels();
  ImageBuf tmp(w, h, nc);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < nc; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[i + radius] * img.at(std::clamp(x + i, 0, w - 1), y, c);
        }
        tmp.at(x, y, c) = acc;
      }
    }
  }
  ImageBuf out(w, h, nc);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < nc; ++c) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) {
          acc += kernel[i + radius] * tmp.at(x, std::clamp(y + i, 0, h - 1), c);
        }
        out.at(x, y, c) = acc;
      }
    }
  }
  return out;
}

/// Elementwise alpha * img.
inline ImageBuf scaled(const ImageBuf& img, double alpha) {
  ImageBuf out = img;
  for (double& v : out.data()) v *= alpha;
  return out;
}

inline double mean_value(const ImageBuf& img) noexcept {
  double acc = 0.0;
  for (double v : img.data()) acc += v;
  return img.data().empty() ? 0.0 : acc / static_cast<double>(img.data().size());
}

/// Mean absolute difference of two equally shaped images.
inline double mean_abs_diff(const ImageBuf& a, const ImageBuf& b) {
  if (!a.same_shape(b)) throw ArgumentError("mean_abs_diff: shape mismatch");
  auto da = a.data();
  auto db = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < da.size(); ++i) acc += std::abs(da[i] - db[i]);
  return acc / static_cast<double>(da.size());
}

}  // namespace fdr

#endif  // FDR_IMAGE_HPP
