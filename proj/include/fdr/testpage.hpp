#ifndef FDR_TESTPAGE_HPP
#define FDR_TESTPAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fdr/error.hpp"
#include "fdr/image.hpp"
#include "fdr/mesh.hpp"
#include "fdr/rng.hpp"

namespace fdr {

namespace detail {

// Anti-aliased stroke: coverage falls off linearly over one pixel past the half width.
inline void draw_stroke(ImageBuf& img, Point a, Point b, double half_width, double ink) {
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - half_width - 1)));
  const int x1 = std::min(img.width() - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + half_width + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - half_width - 1)));
  const int y1 = std::min(img.height() - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + half_width + 1)));
  const Point ab = b - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const Point p{static_cast<double>(x), static_cast<double>(y)};
      double t = len2 > 0 ? ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2 : 0.0;
      t = std::clamp(t, 0.0, 1.0);
      const double dist = norm(p - (a + t * ab));
      const double cover = std::clamp(half_width + 0.5 - dist, 0.0, 1.0);
      if (cover > 0) {
        double& v = img.at(x, y);
        v = std::min(v, v * (1 - cover) + ink * cover);
      }
    }
  }
}

// Glyph strokes on a unit box (x right, y down): segment-display style.
inline void draw_glyph(ImageBuf& img, Xoshiro256& rng, double x, double y, double w, double h,
                       double half_width, double ink) {
  static constexpr double kSeg[][4] = {
      {0, 0, 1, 0},     {0, 0.5, 1, 0.5}, {0, 1, 1, 1},     {0, 0, 0, 0.5},   {0, 0.5, 0, 1},
      {1, 0, 1, 0.5},   {1, 0.5, 1, 1},   {0, 0, 1, 1},     {1, 0, 0, 1},     {0.5, 0, 0.5, 1},
      {0, 1, 0.5, 0.5}, {0.5, 0.5, 1, 1}};
  constexpr int kCount = sizeof(kSeg) / sizeof(kSeg[0]);
  const int strokes = 2 + static_cast<int>(rng.below(3));
  for (int s = 0; s < strokes; ++s) {
    const auto& g = kSeg[rng.below(kCount)];
    draw_stroke(img, {x + g[0] * w, y + g[1] * h}, {x + g[2] * w, y + g[3] * h}, half_width, ink);
  }
}

}  // namespace detail

/// Deterministic synthetic document page: near-white paper, a heading,
/// justified paragraphs of glyph-like text, and a framed
/// hatched figure. Geometry scales with min(width, height) / 512.
inline ImageBuf text_page(int width, int height, std::uint64_t seed) {
  constexpr double kPaper = 0.95;
  constexpr double kInk = 0.12;
  ImageBuf img(width, height, 1, kPaper);
  Xoshiro256 rng(seed);
  const double s = std::min(width, height) / 512.0;
  const double margin_x = 10 * s;
  const double margin_y = 8 * s;
  const double glyph_w = 6 * s;
  const double glyph_h = 9 * s;
  const double advance = 8 * s;
  const double line_step = 17 * s;
  const double half_width = std::max(0.5, 0.8 * s);
  const double right = width - margin_x;
  const double bottom = height - margin_y;

  // Figure block placed on one side of a text band.
  const double fig_w = (0.30 + 0.1 * rng.uniform()) * (right - margin_x);
  const double fig_h = (0.18 + 0.06 * rng.uniform()) * (bottom - margin_y);
  const bool fig_left = rng.below(2) == 0;
  const double fig_top = margin_y + (0.35 + 0.25 * rng.uniform()) * (bottom - margin_y - fig_h);
  const double fig_x0 = fig_left ? margin_x : right - fig_w;
  const double fig_x1 = fig_x0 + fig_w;
  const double fig_y1 = fig_top + fig_h;
  {
    const double hw = 1.2 * s;
    detail::draw_stroke(img, {fig_x0, fig_top}, {fig_x1, fig_top}, hw, kInk);
    detail::draw_stroke(img, {fig_x1, fig_top}, {fig_x1, fig_y1}, hw, kInk);
    detail::draw_stroke(img, {fig_x1, fig_y1}, {fig_x0, fig_y1}, hw, kInk);
    detail::draw_stroke(img, {fig_x0, fig_y1}, {fig_x0, fig_top}, hw, kInk);
    const double gap = 9 * s;
    for (double t = gap; t < fig_w + fig_h; t += gap) {
      // Diagonal hatching clipped to the frame.
      Point a{fig_x0 + std::min(t, fig_w), fig_top + std::max(0.0, t - fig_w)};
      Point b{fig_x0 + std::max(0.0, t - fig_h), fig_top + std::min(t, fig_h)};
      detail::draw_stroke(img, a, b, 0.5 * half_width, 0.45);
    }
  }

  double y = margin_y;
  // Heading: larger, heavier glyphs.
  {
    double x = margin_x + (right - margin_x) * 0.15 * rng.uniform();
    const int words = 2 + static_cast<int>(rng.below(3));
    for (int wi = 0; wi < words; ++wi) {
      const int len = 3 + static_cast<int>(rng.below(6));
      for (int c = 0; c < len && x + 1.6 * advance < right; ++c) {
        detail::draw_glyph(img, rng, x, y, 1.6 * glyph_w, 1.6 * glyph_h, 1.5 * half_width, kInk);
        x += 1.6 * advance;
      }
      x += 2.0 * advance;
    }
    y += 2.4 * line_step;
  }

  int lines_left_in_para = 3 + static_cast<int>(rng.below(6));
  while (y + glyph_h < bottom) {
    const bool last_line = --lines_left_in_para == 0;
    double line_end = last_line ? margin_x + (0.25 + 0.5 * rng.uniform()) * (right - margin_x) : right;
    double x0 = margin_x;
    if (y + glyph_h > fig_top - 0.5 * line_step && y < fig_y1 + 0.5 * line_step) {
      // Text flows around the figure.
      if (fig_left) {
        x0 = fig_x1 + 2 * advance;
      } else {
        line_end = std::min(line_end, fig_x0 - 2 * advance);
      }
    }
    double x = x0;
    while (x < line_end) {
      int len = 1 + static_cast<int>(rng.below(9));
      // Full lines are filled to the margin: the last word is cut to fit.
      if (x + len * advance > line_end) {
        if (last_line) break;
        len = static_cast<int>((line_end - x) / advance);
        if (len < 1) break;
      }
      for (int c = 0; c < len; ++c) {
        detail::draw_glyph(img, rng, x, y, glyph_w, glyph_h, half_width, kInk);
        x += advance;
      }
      x += (1.0 + 0.5 * rng.uniform()) * advance;
    }
    y += line_step;
    if (last_line) {
      y += 0.6 * line_step;
      lines_left_in_para = 3 + static_cast<int>(rng.below(6));
    }
  }
  return img;
}

/// text_page drawn inside a zero (background) border of `inset` pixels, the
/// way a photographed sheet sits on a dark surface.
inline ImageBuf inset_text_page(int width, int height, std::uint64_t seed, int inset) {
  if (inset < 0 || 2 * inset >= std::min(width, height)) {
    throw ArgumentError("inset_text_page: inset must leave a non-empty page");
  }
  if (inset == 0) return text_page(width, height, seed);
  const ImageBuf page = text_page(width - 2 * inset, height - 2 * inset, seed);
  ImageBuf img(width, height, 1, 0.0);
  for (int y = 0; y < page.height(); ++y) {
    for (int x = 0; x < page.width(); ++x) img.at(x + inset, y + inset) = page.at(x, y);
  }
  return img;
}

}  // namespace fdr

#endif  // FDR_TESTPAGE_HPP
