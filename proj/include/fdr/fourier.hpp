#ifndef FDR_FOURIER_HPP
#define FDR_FOURIER_HPP

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "fdr/error.hpp"
#include "fdr/image.hpp"
#include "fdr/image_io.hpp"

namespace fdr {

using cdouble = std::complex<double>;

/// Unnormalized forward DFT of arbitrary length.
///
/// Lengths whose prime factors are all <= 7 use a recursive mixed-radix
/// Cooley-Tukey; anything else goes through Bluestein's chirp-z with a
/// power-of-two convolution. Twiddles come from a single table of exact
/// angles rather than recurrences.
class FftPlan {
 public:
  explicit FftPlan(std::size_t n) : n_(n) {
    if (n == 0) throw ArgumentError("FftPlan: length must be positive");
    std::size_t rest = n;
    for (std::size_t p : {4u, 2u, 3u, 5u, 7u}) {
      while (rest % p == 0) {
        factors_.push_back(p);
        rest /= p;
      }
    }
    if (rest == 1) {
      twiddle_.resize(n);
      for (std::size_t j = 0; j < n; ++j) twiddle_[j] = unit_root(j, n);
      scratch_.resize(n);
    } else {
      init_bluestein();
    }
  }

  std::size_t size() const noexcept { return n_; }

  /// In-place forward transform of `data` (length n).
  void forward(cdouble* data) {
    if (n_ == 1) return;
    if (bluestein_) {
      run_bluestein(data);
      return;
    }
    std::copy(data, data + n_, scratch_.begin());
    recurse(scratch_.data(), data, n_, 1, 0);
  }

  /// In-place inverse transform, scaled by 1/n.
  void inverse(cdouble* data) {
    for (std::size_t i = 0; i < n_; ++i) data[i] = std::conj(data[i]);
    forward(data);
    const double s = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < n_; ++i) data[i] = std::conj(data[i]) * s;
  }

 private:
  static cdouble unit_root(std::size_t j, std::size_t n) {
    const double a = -2.0 * std::numbers::pi * static_cast<double>(j) / static_cast<double>(n);
    return {std::cos(a), std::sin(a)};
  }

  // Decimation in time: `in` is read with `stride`, `out` is contiguous.
  void recurse(const cdouble* in, cdouble* out, std::size_t n, std::size_t stride, std::size_t level) {
    if (n == 1) {
      out[0] = in[0];
      return;
    }
    const std::size_t p = factors_[level];
    const std::size_t m = n / p;
    for (std::size_t q = 0; q < p; ++q) recurse(in + q * stride, out + q * m, m, stride * p, level + 1);

    const std::size_t step = n_ / n;  // twiddle_[j*step] = exp(-2 pi i j / n)
    cdouble tmp[7];
    for (std::size_t k = 0; k < m; ++k) {
      for (std::size_t q = 0; q < p; ++q) tmp[q] = out[q * m + k] * twiddle_[(q * k * step) % n_];
      if (p == 2) {
        out[k] = tmp[0] + tmp[1];
        out[m + k] = tmp[0] - tmp[1];
      } else if (p == 4) {
        const cdouble a = tmp[0] + tmp[2];
        const cdouble b = tmp[0] - tmp[2];
        const cdouble c = tmp[1] + tmp[3];
        const cdouble d = (tmp[1] - tmp[3]) * cdouble(0.0, -1.0);
        out[k] = a + c;
        out[m + k] = b + d;
        out[2 * m + k] = a - c;
        out[3 * m + k] = b - d;
      } else {
        const std::size_t pstep = n_ / p;
        for (std::size_t s = 0; s < p; ++s) {
          cdouble acc = 0.0;
          for (std::size_t q = 0; q < p; ++q) acc += tmp[q] * twiddle_[((q * s) % p) * pstep];
          out[s * m + k] = acc;
        }
      }
    }
  }

  void init_bluestein() {
    bluestein_ = true;
    std::size_t m = 1;
    while (m < 2 * n_ - 1) m <<= 1;
    inner_ = std::make_unique<FftPlan>(m);
    chirp_.resize(n_);
    const std::size_t two_n = 2 * n_;
    for (std::size_t k = 0; k < n_; ++k) {
      const std::size_t k2 = (k * k) % two_n;  // exact angle reduction
      const double a = -std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n_);
      chirp_[k] = {std::cos(a), std::sin(a)};
    }
    kernel_.assign(m, 0.0);
    kernel_[0] = std::conj(chirp_[0]);
    for (std::size_t k = 1; k < n_; ++k) {
      kernel_[k] = std::conj(chirp_[k]);
      kernel_[m - k] = std::conj(chirp_[k]);
    }
    inner_->forward(kernel_.data());
    work_.resize(m);
  }

  void run_bluestein(cdouble* data) {
    const std::size_t m = work_.size();
    std::fill(work_.begin(), work_.end(), cdouble(0.0));
    for (std::size_t k = 0; k < n_; ++k) work_[k] = data[k] * chirp_[k];
    inner_->forward(work_.data());
    for (std::size_t i = 0; i < m; ++i) work_[i] *= kernel_[i];
    inner_->inverse(work_.data());
    for (std::size_t k = 0; k < n_; ++k) data[k] = work_[k] * chirp_[k];
  }

  std::size_t n_;
  std::vector<std::size_t> factors_;
  std::vector<cdouble> twiddle_;
  std::vector<cdouble> scratch_;
  bool bluestein_ = false;
  std::unique_ptr<FftPlan> inner_;
  std::vector<cdouble> chirp_;
  std::vector<cdouble> kernel_;
  std::vector<cdouble> work_;
};

/// Centered 2D spectrum: DC at (floor(H/2), floor(W/2)), so shifted index i
/// holds signed frequency i - floor(H/2).
struct Spectrum {
  int width = 0;
  int height = 0;
  std::vector<double> re;
  std::vector<double> im;

  cdouble at(int row, int col) const {
    const std::size_t i = static_cast<std::size_t>(row) * width + col;
    return {re[i], im[i]};
  }
};

namespace detail {

// Row then column transforms over a row-major complex buffer.
inline void fft2_inplace(std::vector<cdouble>& buf, int w, int h, bool inverse) {
  FftPlan row_plan(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    cdouble* row = buf.data() + static_cast<std::size_t>(y) * w;
    inverse ? row_plan.inverse(row) : row_plan.forward(row);
  }
  FftPlan col_plan(static_cast<std::size_t>(h));
  std::vector<cdouble> col(static_cast<std::size_t>(h));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) col[y] = buf[static_cast<std::size_t>(y) * w + x];
    inverse ? col_plan.inverse(col.data()) : col_plan.forward(col.data());
    for (int y = 0; y < h; ++y) buf[static_cast<std::size_t>(y) * w + x] = col[y];
  }
}

inline int shifted_index(int natural, int n) noexcept { return (natural + n / 2) % n; }
inline int natural_index(int shifted, int n) noexcept { return (shifted - n / 2 + n) % n; }

}  // namespace detail

/// Centered, unnormalized forward DFT of a single-channel image.
inline Spectrum fft2(const ImageBuf& img) {
  if (img.channels() != 1) throw ArgumentError("fft2: expects a single-channel image");
  const int w = img.width();
  const int h = img.height();
  std::vector<cdouble> buf(img.pixel_count());
  auto src = img.data();
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = src[i];
  detail::fft2_inplace(buf, w, h, false);
  Spectrum s{w, h, std::vector<double>(buf.size()), std::vector<double>(buf.size())};
  for (int y = 0; y < h; ++y) {
    const int sy = detail::shifted_index(y, h);
    for (int x = 0; x < w; ++x) {
      const int sx = detail::shifted_index(x, w);
      const cdouble v = buf[static_cast<std::size_t>(y) * w + x];
      const std::size_t o = static_cast<std::size_t>(sy) * w + sx;
      s.re[o] = v.real();
      s.im[o] = v.imag();
    }
  }
  return s;
}

/// Largest |imaginary part| ifft2 tolerates before refusing the spectrum.
inline constexpr double kMaxImagResidue = 1e-8;

/// Inverse of fft2 (scaled by 1/(H*W)). Output is not clamped.
/// `imag_residue`, when given, receives max |Im| of the spatial result.
inline ImageBuf ifft2(const Spectrum& s, double* imag_residue = nullptr) {
  const int w = s.width;
  const int h = s.height;
  if (w < 1 || h < 1 || s.re.size() != static_cast<std::size_t>(w) * h || s.im.size() != s.re.size()) {
    throw ArgumentError("ifft2: malformed spectrum");
  }
  std::vector<cdouble> buf(s.re.size());
  for (int y = 0; y < h; ++y) {
    const int ny = detail::natural_index(y, h);
    for (int x = 0; x < w; ++x) {
      const int nx = detail::natural_index(x, w);
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      buf[static_cast<std::size_t>(ny) * w + nx] = {s.re[i], s.im[i]};
    }
  }
  detail::fft2_inplace(buf, w, h, true);
  ImageBuf out(w, h, 1);
  auto dst = out.data();
  double residue = 0.0;
  for (std::size_t i = 0; i < buf.size(); ++i) {
    dst[i] = buf[i].real();
    residue = std::max(residue, std::abs(buf[i].imag()));
  }
  if (imag_residue) *imag_residue = residue;
  if (!(residue <= kMaxImagResidue)) {
    std::ostringstream msg;
    msg << "ifft2: imaginary residue " << residue << " exceeds " << kMaxImagResidue
        << " (spectrum is not conjugate-symmetric)";
    throw NumericalError(msg.str());
  }
  return out;
}

/// Half-extent (in bins) of the replaced low-frequency block along an axis of length n.
inline int lowpass_half_extent(int n, double beta) noexcept {
  return static_cast<int>(std::floor(beta * n));
}

/// High-pass mask on the centered spectrum: 0 inside the block
/// |h| <= floor(beta H), |w| <= floor(beta W) of signed frequencies, 1 elsewhere.
/// Row-major H x W of {0,1}.
inline std::vector<unsigned char> highpass_mask(int H, int W, double beta) {
  if (!(beta >= 0.0 && beta <= 0.5)) {
    throw ArgumentError("highpass_mask: beta must lie in [0, 0.5]");
  }
  if (H < 1 || W < 1) throw ArgumentError("highpass_mask: dimensions must be >= 1");
  const int eh = lowpass_half_extent(H, beta);
  const int ew = lowpass_half_extent(W, beta);
  std::vector<unsigned char> mask(static_cast<std::size_t>(H) * W, 1);
  for (int y = 0; y < H; ++y) {
    const int fy = y - H / 2;
    if (std::abs(fy) > eh) continue;
    for (int x = 0; x < W; ++x) {
      const int fx = x - W / 2;
      if (std::abs(fx) <= ew) mask[static_cast<std::size_t>(y) * W + x] = 0;
    }
  }
  return mask;
}

/// Blank-paper source for the low-frequency swap: a uniform intensity or an image file.
struct FourierConfig {
  static constexpr double kTrainBeta = 0.06;
  static constexpr double kRestoreBeta = 0.008;
  static constexpr double kDefaultBlank = 0.96;

  double beta = kTrainBeta;
  std::variant<double, std::string> blank = kDefaultBlank;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 0.5)) {
      throw ArgumentError("beta must lie in the range [0, 0.5]");
    }
    if (const double* v = std::get_if<double>(&blank); v && !(*v >= 0.0 && *v <= 1.0)) {
      throw ArgumentError("uniform blank intensity must lie in [0, 1]");
    }
  }
};

/// Blank-paper plane matched to a width x height single-channel target.
/// `channel` selects a plane of a colour blank file (-1: luma).
inline ImageBuf blank_plane(const FourierConfig& cfg, int width, int height, int channel = -1) {
  if (const double* v = std::get_if<double>(&cfg.blank)) return ImageBuf(width, height, 1, *v);
  const ImageBuf file = load_image(std::get<std::string>(cfg.blank));
  ImageBuf plane = (channel >= 0 && file.channels() == 3) ? extract_channel(file, channel)
                                                          : to_grayscale(file);
  return resize(plane, width, height);
}

/// Replaces the low-frequency block of `img` with the blank's:
/// x' = M * x + (1 - M) * x_blank on the centered spectra. Single channel in,
/// single channel out; the result is real and unclamped.
inline ImageBuf fourier_swap(const ImageBuf& img, const ImageBuf& blank, double beta,
                             double* imag_residue = nullptr) {
  if (img.channels() != 1 || blank.channels() != 1 || !img.same_shape(blank)) {
    throw ArgumentError("fourier_swap: expects equally sized single-channel images");
  }
  const auto mask = highpass_mask(img.height(), img.width(), beta);
  Spectrum x = fft2(img);
  // A uniform blank has a DC-only spectrum; skip its transform.
  const auto bd = blank.data();
  const bool uniform = std::all_of(bd.begin(), bd.end(), [&](double v) { return v == bd[0]; });
  if (uniform) {
    const std::size_t dc = static_cast<std::size_t>(img.height() / 2) * img.width() + img.width() / 2;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) continue;
      x.re[i] = 0.0;
      x.im[i] = 0.0;
    }
    x.re[dc] = bd[0] * static_cast<double>(img.pixel_count());
  } else {
    const Spectrum xw = fft2(blank);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) continue;
      x.re[i] = xw.re[i];
      x.im[i] = xw.im[i];
    }
  }
  return ifft2(x, imag_residue);
}

/// Fourier Converter on the luma of `img` (colour input is converted first).
inline ImageBuf fourier_convert(const ImageBuf& img, const FourierConfig& cfg) {
  cfg.validate();
  const ImageBuf gray = to_grayscale(img);
  return fourier_swap(gray, blank_plane(cfg, gray.width(), gray.height()), cfg.beta);
}

/// Fourier Converter applied to every channel independently (restoration output).
inline ImageBuf fourier_convert_channels(const ImageBuf& img, const FourierConfig& cfg) {
  cfg.validate();
  if (img.channels() == 1) return fourier_convert(img, cfg);
  std::vector<ImageBuf> planes;
  for (int c = 0; c < img.channels(); ++c) {
    planes.push_back(fourier_swap(extract_channel(img, c), blank_plane(cfg, img.width(), img.height(), c),
                                  cfg.beta));
  }
  return merge_channels(planes);
}

}  // namespace fdr

#endif  // FDR_FOURIER_HPP
