#ifndef FDR_METRICS_HPP
#define FDR_METRICS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fdr/error.hpp"
#include "fdr/flow.hpp"
#include "fdr/image.hpp"
#include "fdr/image_io.hpp"

namespace fdr {

// ---------------------------------------------------------------------------
// MS-SSIM

inline constexpr std::array<double, 5> kMsSsimWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr int kMsSsimMinSide = 176;

namespace detail {

inline std::array<double, kSsimWindow> ssim_kernel() {
  std::array<double, kSsimWindow> k{};
  double sum = 0.0;
  for (int i = 0; i < kSsimWindow; ++i) {
    const double d = i - kSsimWindow / 2;
    k[i] = std::exp(-0.5 * d * d / (kSsimSigma * kSsimSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

// Separable "valid" filtering of a row-major w x h plane with the SSIM window.
inline std::vector<double> ssim_filter(const std::vector<double>& src, int w, int h) {
  static const auto k = ssim_kernel();
  const int ow = w - kSsimWindow + 1;
  const int oh = h - kSsimWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) acc += k[i] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < kSsimWindow; ++i) acc += k[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  }
  return out;
}

struct SsimTerms {
  double luminance = 1.0;  // mean of the luminance map
  double cs = 1.0;         // mean of the contrast-structure map
};

inline SsimTerms ssim_terms(const ImageBuf& a, const ImageBuf& b) {
  constexpr double C1 = 0.01 * 0.01;
  constexpr double C2 = 0.03 * 0.03;
  const int w = a.width();
  const int h = a.height();
  const std::size_t n = a.pixel_count();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = da[i];
    y[i] = db[i];
    xx[i] = da[i] * da[i];
    yy[i] = db[i] * db[i];
    xy[i] = da[i] * db[i];
  }
  const auto mx = ssim_filter(x, w, h);
  const auto my = ssim_filter(y, w, h);
  const auto sxx = ssim_filter(xx, w, h);
  const auto syy = ssim_filter(yy, w, h);
  const auto sxy = ssim_filter(xy, w, h);
  double lum = 0.0;
  double cs = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    lum += (2 * mx[i] * my[i] + C1) / (mx[i] * mx[i] + my[i] * my[i] + C1);
    cs += (2 * cov + C2) / (vx + vy + C2);
  }
  const double m = static_cast<double>(mx.size());
  return {lum / m, cs / m};
}

}  // namespace detail

/// Five-scale MS-SSIM of two equally sized grayscale images with unit dynamic range.
/// Negative per-scale means are clamped to zero so the score stays in [0, 1].
inline double ms_ssim(const ImageBuf& a, const ImageBuf& b) {
  if (a.channels() != 1 || b.channels() != 1) throw ArgumentError("ms_ssim: expects grayscale images");
  if (a.width() != b.width() || a.height() != b.height()) throw ArgumentError("ms_ssim: image dimensions differ");
  if (std::min(a.width(), a.height()) < kMsSsimMinSide) {
    throw ArgumentError("ms_ssim: images must be at least 176 pixels on the shorter side");
  }
  ImageBuf x = a;
  ImageBuf y = b;
  double score = 1.0;
  for (std::size_t s = 0; s < kMsSsimWeights.size(); ++s) {
    const detail::SsimTerms t = detail::ssim_terms(x, y);
    const bool last = s + 1 == kMsSsimWeights.size();
    score *= std::pow(std::max(0.0, t.cs), kMsSsimWeights[s]);
    if (last) {
      score *= std::pow(std::max(0.0, t.luminance), kMsSsimWeights[s]);
    } else {
      x = detail::half_mean(x);
      y = detail::half_mean(y);
    }
  }
  return std::clamp(score, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Local distortion

/// Flow settings of the distortion metric.
inline FlowOptions local_distortion_flow() {
  FlowOptions opt;
  opt.levels = 3;
  opt.block = 16;
  opt.step = 8;
  opt.search = 24;
  opt.median = 5;
  opt.min_variance = 1e-4;
  return opt;
}

/// Blocks whose best match correlates below this carry no usable displacement
/// (their content left the frame or was destroyed).
inline constexpr double kMinMatchScore = 0.5;

/// Mean magnitude of the block-matching displacement from `dewarped` to
/// `reference` over textured, confidently matched blocks. `dewarped` is
/// resized to the reference frame first.
inline double local_distortion(const ImageBuf& dewarped, const ImageBuf& reference) {
  const ImageBuf ref = to_grayscale(reference);
  const ImageBuf mov = resize(to_grayscale(dewarped), ref.width(), ref.height());
  const FlowField f = block_match_flow(mov, ref, local_distortion_flow());
  if (f.textured_fraction() < 0.5) {
    throw MetricUndefinedError("local_distortion: more than half of the blocks are textureless");
  }
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < f.disp.size(); ++k) {
    if (!f.textured[k] || !(f.score[k] >= kMinMatchScore)) continue;
    acc += norm(f.disp[k]);
    ++n;
  }
  if (n == 0) throw MetricUndefinedError("local_distortion: no block found a confident match");
  return acc / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Character error rate

/// UTF-8 to code points; malformed bytes decode to U+FFFD one byte at a time.
inline std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    int len = 0;
    char32_t cp = 0;
    if (b0 < 0x80) {
      len = 1;
      cp = b0;
    } else if ((b0 & 0xE0) == 0xC0) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 & 0xF0) == 0xE0) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 & 0xF8) == 0xF0) {
      len = 4;
      cp = b0 & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (int j = 1; ok && j < len; ++j) {
      const auto b = static_cast<unsigned char>(s[i + j]);
      if ((b & 0xC0) != 0x80) ok = false;
      cp = (cp << 6) | (b & 0x3F);
    }
    if (!ok) {
      out.push_back(U'\uFFFD');
      ++i;
      continue;
    }
    out.push_back(cp);
    i += static_cast<std::size_t>(len);
  }
  return out;
}

inline bool is_unicode_space(char32_t c) noexcept {
  return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000;
}

/// Whitespace runs become one space; leading and trailing whitespace is dropped.
inline std::u32string normalize_whitespace(const std::u32string& s) {
  std::u32string out;
  bool pending = false;
  for (char32_t c : s) {
    if (is_unicode_space(c)) {
      pending = !out.empty();
      continue;
    }
    if (pending) out.push_back(U' ');
    pending = false;
    out.push_back(c);
  }
  return out;
}

/// Unit-cost Levenshtein distance, two-row dynamic programme.
inline std::size_t edit_distance(const std::u32string& a, const std::u32string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Edit distance between normalized hypothesis and reference, over the reference length.
inline double cer(std::string_view hypothesis, std::string_view reference) {
  const std::u32string ref = normalize_whitespace(decode_utf8(reference));
  if (ref.empty()) throw ArgumentError("cer: reference text is empty");
  const std::u32string hyp = normalize_whitespace(decode_utf8(hypothesis));
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

// ---------------------------------------------------------------------------
// Corpus evaluation

struct EvalPair {
  std::string name;
  std::filesystem::path dewarped;
  std::filesystem::path reference;
  std::optional<std::filesystem::path> ocr_text;        // OCR output for the dewarped image
  std::optional<std::filesystem::path> reference_text;  // ground-truth transcription
};

struct ImageMetrics {
  std::string name;
  std::optional<double> ms_ssim;
  std::optional<double> ld;
  std::optional<double> cer;
  std::optional<std::string> error;
};

struct EvalReport {
  std::optional<double> ms_ssim;
  std::optional<double> ld;
  std::optional<double> cer;
  std::vector<ImageMetrics> images;
};

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline ImageMetrics evaluate_pair(const EvalPair& pair) {
  ImageMetrics m;
  m.name = pair.name;
  std::vector<std::string> problems;
  try {
    const ImageBuf ref = to_grayscale(load_image(pair.reference));
    const ImageBuf out = resize(to_grayscale(load_image(pair.dewarped)), ref.width(), ref.height());
    try {
      m.ms_ssim = ms_ssim(out, ref);
    } catch (const Error& e) {
      problems.emplace_back(e.what());
    }
    try {
      m.ld = local_distortion(out, ref);
    } catch (const Error& e) {
      problems.emplace_back(e.what());
    }
  } catch (const Error& e) {
    problems.emplace_back(e.what());
  }
  if (pair.ocr_text && pair.reference_text) {
    try {
      m.cer = cer(read_text_file(*pair.ocr_text), read_text_file(*pair.reference_text));
    } catch (const Error& e) {
      problems.emplace_back(e.what());
    }
  }
  if (!problems.empty()) {
    std::string joined;
    for (const auto& p : problems) joined += (joined.empty() ? "" : "; ") + p;
    m.error = joined;
  }
  return m;
}

/// Per-pair metrics plus unweighted means over the pairs where each metric
/// is defined. Pairs are processed on up to `threads` workers; the report
/// order follows the input order.
inline EvalReport evaluate_corpus(const std::vector<EvalPair>& pairs, int threads = 1) {
  EvalReport report;
  report.images.resize(pairs.size());
  const std::size_t workers = static_cast<std::size_t>(std::max(1, threads));
  for (std::size_t start = 0; start < pairs.size(); start += workers) {
    std::vector<std::future<ImageMetrics>> jobs;
    const std::size_t end = std::min(pairs.size(), start + workers);
    for (std::size_t i = start; i < end; ++i) {
      jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred,
                                [&pairs, i] { return evaluate_pair(pairs[i]); }));
    }
    for (std::size_t i = start; i < end; ++i) report.images[i] = jobs[i - start].get();
  }
  auto mean_of = [&](auto field) -> std::optional<double> {
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& img : report.images) {
      if (const auto& v = img.*field) {
        acc += *v;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return acc / static_cast<double>(n);
  };
  report.ms_ssim = mean_of(&ImageMetrics::ms_ssim);
  report.ld = mean_of(&ImageMetrics::ld);
  report.cer = mean_of(&ImageMetrics::cer);
  return report;
}

namespace detail {

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline std::optional<double> optional_number(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("report: missing field ") + key);
  const auto& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  if (!v.is_number()) throw FormatError(std::string("report: field ") + key + " is not a number");
  return v.get<double>();
}

}  // namespace detail

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& m : r.images) {
    images.push_back({{"name", m.name},
                      {"ms_ssim", detail::optional_json(m.ms_ssim)},
                      {"ld", detail::optional_json(m.ld)},
                      {"cer", detail::optional_json(m.cer)},
                      {"error", m.error ? nlohmann::json(*m.error) : nlohmann::json(nullptr)}});
  }
  return {{"aggregate",
           {{"ms_ssim", detail::optional_json(r.ms_ssim)},
            {"ld", detail::optional_json(r.ld)},
            {"cer", detail::optional_json(r.cer)}}},
          {"images", images}};
}

/// Strict reader of the report schema; throws FormatError on any mismatch.
inline EvalReport report_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("aggregate") || !j.contains("images") || !j.at("images").is_array()) {
    throw FormatError("report: expected {aggregate, images}");
  }
  EvalReport r;
  const auto& agg = j.at("aggregate");
  if (!agg.is_object()) throw FormatError("report: aggregate must be an object");
  r.ms_ssim = detail::optional_number(agg, "ms_ssim");
  r.ld = detail::optional_number(agg, "ld");
  r.cer = detail::optional_number(agg, "cer");
  for (const auto& e : j.at("images")) {
    if (!e.is_object() || !e.contains("name") || !e.at("name").is_string() || !e.contains("error")) {
      throw FormatError("report: malformed image entry");
    }
    ImageMetrics m;
    m.name = e.at("name").get<std::string>();
    m.ms_ssim = detail::optional_number(e, "ms_ssim");
    m.ld = detail::optional_number(e, "ld");
    m.cer = detail::optional_number(e, "cer");
    const auto& err = e.at("error");
    if (!err.is_null() && !err.is_string()) throw FormatError("report: error must be a string or null");
    if (err.is_string()) m.error = err.get<std::string>();
    r.images.push_back(std::move(m));
  }
  auto in_range = [](const std::optional<double>& v, double lo, double hi) { return !v || (*v >= lo && *v <= hi); };
  auto check = [&](const auto& rec) {
    if (!in_range(rec.ms_ssim, 0.0, 1.0) || !in_range(rec.ld, 0.0, HUGE_VAL) || !in_range(rec.cer, 0.0, HUGE_VAL)) {
      throw FormatError("report: metric out of range");
    }
  };
  check(r);
  for (const auto& m : r.images) check(m);
  return r;
}

}  // namespace fdr

#endif  // FDR_METRICS_HPP
