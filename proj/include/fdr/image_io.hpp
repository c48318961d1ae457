#ifndef FDR_IMAGE_IO_HPP
#define FDR_IMAGE_IO_HPP

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fdr/error.hpp"
#include "fdr/image.hpp"

namespace fdr {

/// 8-bit quantization: clamp to [0,1], scale by 255, round half up.
inline std::uint8_t quantize_8bit(double v) noexcept {
  if (!(v > 0.0)) return 0;  // also maps NaN to 0
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for '" + path.string() + "'");
  return bytes;
}

inline ImageBuf decode_png(const std::vector<unsigned char>& bytes, const std::string& name) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw FormatError("'" + name + "': " + image.message);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw FormatError("'" + name + "': 16-bit PNG is not supported");
  }
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  // Read with alpha so the simplified API does not composite; alpha is dropped below.
  image.format = color ? PNG_FORMAT_RGBA : PNG_FORMAT_GA;
  const int stored = color ? 4 : 2;
  std::vector<unsigned char> raw(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, raw.data(), 0, nullptr)) {
    throw FormatError("'" + name + "': " + image.message);
  }
  const int w = static_cast<int>(image.width);
  const int h = static_cast<int>(image.height);
  const int nc = color ? 3 : 1;
  ImageBuf out(w, h, nc);
  auto dst = out.data();
  for (std::size_t i = 0; i < out.pixel_count(); ++i) {
    for (int c = 0; c < nc; ++c) dst[i * nc + c] = raw[i * stored + c] / 255.0;
  }
  return out;
}

// Binary PGM (P5) / PPM (P6), maxval 255.
inline ImageBuf decode_pnm(const std::vector<unsigned char>& bytes, const std::string& name) {
  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) {
      throw FormatError("'" + name + "': malformed PNM header");
    }
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1'000'000'000L) throw FormatError("'" + name + "': PNM header value too large");
      ++pos;
    }
    return v;
  };
  const int nc = bytes[1] == '5' ? 1 : 3;
  const long w = next_int();
  const long h = next_int();
  const long maxval = next_int();
  if (w < 1 || h < 1) throw FormatError("'" + name + "': PNM dimensions must be positive");
  if (maxval != 255) throw FormatError("'" + name + "': only maxval 255 is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw FormatError("'" + name + "': malformed PNM header");
  }
  ++pos;  // single whitespace before raster
  const std::size_t need = static_cast<std::size_t>(w) * h * nc;
  if (bytes.size() - pos < need) throw FormatError("'" + name + "': truncated PNM raster");
  ImageBuf out(static_cast<int>(w), static_cast<int>(h), nc);
  auto dst = out.data();
  for (std::size_t i = 0; i < need; ++i) dst[i] = bytes[pos + i] / 255.0;
  return out;
}

inline std::string lower_extension(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return ext;
}

}  // namespace detail

/// Loads an 8-bit PNG (gray/RGB, alpha dropped) or a binary PGM/PPM.
/// The format is detected from the file signature, not the extension.
inline ImageBuf load_image(const std::filesystem::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  const std::string name = path.string();
  static constexpr unsigned char kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (bytes.size() >= 8 && std::equal(kPngSig, kPngSig + 8, bytes.begin())) {
    return detail::decode_png(bytes, name);
  }
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return detail::decode_pnm(bytes, name);
  }
  throw FormatError("'" + name + "': unsupported image format (expected PNG, P5 or P6)");
}

/// Writes PNG (by .png extension) or PGM/PPM (.pgm/.ppm/.pnm).
/// Values are clamped to [0,1] and rounded half up to 8 bits.
inline void save_image(const ImageBuf& img, const std::filesystem::path& path) {
  if (img.empty()) throw ArgumentError("save_image: empty image");
  const std::string ext = detail::lower_extension(path);
  std::vector<unsigned char> raw(img.data().size());
  std::transform(img.data().begin(), img.data().end(), raw.begin(), quantize_8bit);

  if (ext == ".png") {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width());
    image.height = static_cast<png_uint_32>(img.height());
    image.format = img.channels() == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.string().c_str(), 0, raw.data(), 0, nullptr)) {
      throw IoError("cannot write '" + path.string() + "': " + image.message);
    }
    return;
  }
  if (ext == ".pgm" || ext == ".ppm" || ext == ".pnm") {
    if (ext == ".pgm" && img.channels() != 1) {
      throw ArgumentError("save_image: .pgm requires a single-channel image");
    }
    if (ext == ".ppm" && img.channels() != 3) {
      throw ArgumentError("save_image: .ppm requires a three-channel image");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << (img.channels() == 1 ? "P5" : "P6") << '\n'
        << img.width() << ' ' << img.height() << "\n255\n";
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
    return;
  }
  throw FormatError("save_image: unsupported extension '" + ext + "'");
}

}  // namespace fdr

#endif  // FDR_IMAGE_IO_HPP
