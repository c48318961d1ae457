#ifndef FDR_FLOW_HPP
#define FDR_FLOW_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "fdr/error.hpp"
#include "fdr/image.hpp"
#include "fdr/mesh.hpp"

namespace fdr {

/// Coarse-to-fine block matching between two equally sized grayscale images.
struct FlowOptions {
  int levels = 3;               // pyramid levels (finest included)
  int block = 16;               // block side, in pixels of every level
  int step = 8;                 // block-center spacing at the finest level
  int search = 24;              // exhaustive radius at the coarsest level, in its own pixels
  int refine = 2;               // radius around the propagated estimate at finer levels
  int median = 5;               // median filter window over the block lattice (odd, 1 disables)
  double min_variance = 1e-4;   // reference blocks below this variance carry no texture
};

/// Sparse displacement field on the block lattice of the reference image:
/// moving(center + disp) matches reference(center).
struct FlowField {
  int nx = 0;
  int ny = 0;
  std::vector<Point> centers;
  std::vector<Point> disp;
  std::vector<double> score;              // ZNCC of the final match
  std::vector<unsigned char> textured;
  std::vector<unsigned char> valid;       // textured, or filled from textured neighbours

  double textured_fraction() const noexcept {
    if (textured.empty()) return 0.0;
    std::size_t n = 0;
    for (unsigned char t : textured) n += t;
    return static_cast<double>(n) / static_cast<double>(textured.size());
  }
};

namespace detail {

// 2x2 mean then decimation; odd trailing rows/columns are dropped.
inline ImageBuf half_mean(const ImageBuf& img) {
  const int w = std::max(1, img.width() / 2);
  const int h = std::max(1, img.height() / 2);
  ImageBuf out(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      out.at(x, y) = 0.25 * (img.at_or_zero(2 * x, 2 * y) + img.at_or_zero(2 * x + 1, 2 * y) +
                             img.at_or_zero(2 * x, 2 * y + 1) + img.at_or_zero(2 * x + 1, 2 * y + 1));
    }
  }
  return out;
}

// Summed-area table with a zero first row/column; sum over [x0,x1) x [y0,y1).
class SumTable {
 public:
  SumTable(int w, int h) : w_(w), h_(h), s_(static_cast<std::size_t>(w + 1) * (h + 1), 0.0) {}

  template <typename F>
  void build(F&& value) {
    for (int y = 0; y < h_; ++y) {
      double row = 0.0;
      for (int x = 0; x < w_; ++x) {
        row += value(x, y);
        s_[idx(x + 1, y + 1)] = s_[idx(x + 1, y)] + row;
      }
    }
  }

  double sum(int x0, int y0, int x1, int y1) const noexcept {
    return s_[idx(x1, y1)] - s_[idx(x0, y1)] - s_[idx(x1, y0)] + s_[idx(x0, y0)];
  }

 private:
  std::size_t idx(int x, int y) const noexcept { return static_cast<std::size_t>(y) * (w_ + 1) + x; }
  int w_;
  int h_;
  std::vector<double> s_;
};

// Pixel-center-aligned position of a finest-level point on a level with the given scale.
inline Point level_point(Point p, double scale) noexcept {
  return {(p.x + 0.5) * scale - 0.5, (p.y + 0.5) * scale - 0.5};
}

struct Block {
  int x0, y0, x1, y1;  // clipped to the reference image
  int n() const noexcept { return (x1 - x0) * (y1 - y0); }
};

inline Block block_at(Point c, int side, int w, int h) {
  const int half = side / 2;
  const int cx = static_cast<int>(std::lround(c.x));
  const int cy = static_cast<int>(std::lround(c.y));
  return {std::clamp(cx - half, 0, w), std::clamp(cy - half, 0, h), std::clamp(cx - half + side, 0, w),
          std::clamp(cy - half + side, 0, h)};
}

inline double zncc_from_sums(double n, double sf, double sff, double sm, double smm, double sfm) {
  const double vf = sff - sf * sf / n;
  const double vm = smm - sm * sm / n;
  if (!(vf > 1e-12 && vm > 1e-12)) return -1.0;
  return (sfm - sf * sm / n) / std::sqrt(vf * vm);
}

// Direct ZNCC of a reference block against the moving image shifted by integer (dx, dy).
inline double block_zncc(const ImageBuf& ref, const ImageBuf& mov, const Block& b, int dx, int dy) {
  double sf = 0, sff = 0, sm = 0, smm = 0, sfm = 0;
  for (int y = b.y0; y < b.y1; ++y) {
    for (int x = b.x0; x < b.x1; ++x) {
      const double f = ref.at(x, y);
      const double m = mov.at_or_zero(x + dx, y + dy);
      sf += f;
      sff += f * f;
      sm += m;
      smm += m * m;
      sfm += f * m;
    }
  }
  return zncc_from_sums(b.n(), sf, sff, sm, smm, sfm);
}

// Vertex of the parabola through (-1, a), (0, b), (1, c), clamped to half a pixel.
inline double parabola_offset(double a, double b, double c) noexcept {
  const double denom = a - 2.0 * b + c;
  if (!(denom < 0.0)) return 0.0;
  return std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
}

inline double median_of(std::vector<double>& v) {
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double hi = v[mid];
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

// Component-wise median over textured lattice neighbours; untextured entries
// with no textured neighbour are left untouched and marked invalid.
inline void median_filter(FlowField& f, int window) {
  if (window <= 1) {
    f.valid = f.textured;
    return;
  }
  const int r = window / 2;
  std::vector<Point> out(f.disp.size());
  std::vector<unsigned char> valid(f.disp.size(), 0);
  std::vector<double> xs, ys;
  for (int j = 0; j < f.ny; ++j) {
    for (int i = 0; i < f.nx; ++i) {
      xs.clear();
      ys.clear();
      for (int b = std::max(0, j - r); b <= std::min(f.ny - 1, j + r); ++b) {
        for (int a = std::max(0, i - r); a <= std::min(f.nx - 1, i + r); ++a) {
          const std::size_t k = static_cast<std::size_t>(b) * f.nx + a;
          if (!f.textured[k]) continue;
          xs.push_back(f.disp[k].x);
          ys.push_back(f.disp[k].y);
        }
      }
      const std::size_t k = static_cast<std::size_t>(j) * f.nx + i;
      if (xs.empty()) {
        out[k] = f.disp[k];
      } else {
        out[k] = {median_of(xs), median_of(ys)};
        valid[k] = 1;
      }
    }
  }
  f.disp = std::move(out);
  f.valid = std::move(valid);
}

}  // namespace detail

/// Dense-correspondence estimate from `reference` to `moving` on a block lattice.
///
/// The coarsest level searches every integer shift within +-search using
/// summed-area tables; finer levels re-search +-refine around the doubled
/// estimate; the finest level adds a separable parabolic sub-pixel fit. The
/// field is median-filtered after every level.
inline FlowField block_match_flow(const ImageBuf& moving, const ImageBuf& reference, const FlowOptions& opt = {}) {
  if (moving.channels() != 1 || reference.channels() != 1) {
    throw ArgumentError("block_match_flow: expects grayscale images");
  }
  if (moving.width() != reference.width() || moving.height() != reference.height()) {
    throw ArgumentError("block_match_flow: image dimensions differ");
  }
  if (opt.levels < 1 || opt.block < 2 || opt.step < 1 || opt.search < 0 || opt.refine < 0) {
    throw ArgumentError("block_match_flow: invalid options");
  }
  std::vector<ImageBuf> mov{moving};
  std::vector<ImageBuf> ref{reference};
  for (int l = 1; l < opt.levels; ++l) {
    mov.push_back(detail::half_mean(mov.back()));
    ref.push_back(detail::half_mean(ref.back()));
  }

  FlowField f;
  const int w0 = reference.width();
  const int h0 = reference.height();
  f.nx = std::max(1, (w0 - 1) / opt.step + 1);
  f.ny = std::max(1, (h0 - 1) / opt.step + 1);
  const std::size_t nb = static_cast<std::size_t>(f.nx) * f.ny;
  // Lattice centered in the frame.
  const double ox = 0.5 * ((w0 - 1) - (f.nx - 1) * opt.step);
  const double oy = 0.5 * ((h0 - 1) - (f.ny - 1) * opt.step);
  for (int j = 0; j < f.ny; ++j) {
    for (int i = 0; i < f.nx; ++i) f.centers.push_back({ox + i * opt.step, oy + j * opt.step});
  }
  f.disp.assign(nb, Point{});
  f.score.assign(nb, -1.0);
  f.textured.assign(nb, 0);

  // Texture is judged once, on the finest reference.
  for (std::size_t k = 0; k < nb; ++k) {
    const detail::Block b = detail::block_at(f.centers[k], opt.block, w0, h0);
    double s = 0, ss = 0;
    for (int y = b.y0; y < b.y1; ++y) {
      for (int x = b.x0; x < b.x1; ++x) {
        s += reference.at(x, y);
        ss += reference.at(x, y) * reference.at(x, y);
      }
    }
    const double n = b.n();
    f.textured[k] = n > 0 && (ss / n - (s / n) * (s / n)) >= opt.min_variance;
  }

  // Coarsest level: exhaustive search.
  {
    const int L = opt.levels - 1;
    const ImageBuf& R = ref[L];
    const ImageBuf& M = mov[L];
    const int w = R.width();
    const int h = R.height();
    const double scale = std::ldexp(1.0, -L);
    std::vector<detail::Block> blocks(nb);
    for (std::size_t k = 0; k < nb; ++k) blocks[k] = detail::block_at(detail::level_point(f.centers[k], scale), opt.block, w, h);

    detail::SumTable sf(w, h), sff(w, h);
    sf.build([&](int x, int y) { return R.at(x, y); });
    sff.build([&](int x, int y) { return R.at(x, y) * R.at(x, y); });
    const int P = opt.search;
    const int pw = w + 2 * P;
    const int ph = h + 2 * P;
    detail::SumTable sm(pw, ph), smm(pw, ph);
    sm.build([&](int x, int y) { return M.at_or_zero(x - P, y - P); });
    smm.build([&](int x, int y) {
      const double v = M.at_or_zero(x - P, y - P);
      return v * v;
    });
    std::vector<double> best(nb, -std::numeric_limits<double>::infinity());
    std::vector<Point> best_d(nb);
    detail::SumTable sfm(w, h);
    for (int dy = -P; dy <= P; ++dy) {
      for (int dx = -P; dx <= P; ++dx) {
        sfm.build([&](int x, int y) { return R.at(x, y) * M.at_or_zero(x + dx, y + dy); });
        for (std::size_t k = 0; k < nb; ++k) {
          const detail::Block& b = blocks[k];
          if (b.n() <= 0) continue;
          const double v = detail::zncc_from_sums(
              b.n(), sf.sum(b.x0, b.y0, b.x1, b.y1), sff.sum(b.x0, b.y0, b.x1, b.y1),
              sm.sum(b.x0 + dx + P, b.y0 + dy + P, b.x1 + dx + P, b.y1 + dy + P),
              smm.sum(b.x0 + dx + P, b.y0 + dy + P, b.x1 + dx + P, b.y1 + dy + P), sfm.sum(b.x0, b.y0, b.x1, b.y1));
          // Exact ties go to the smaller shift.
          const double tie = 1e-12 * (std::abs(dx) + std::abs(dy));
          if (v - tie > best[k]) {
            best[k] = v - tie;
            best_d[k] = {static_cast<double>(dx), static_cast<double>(dy)};
          }
        }
      }
    }
    for (std::size_t k = 0; k < nb; ++k) {
      f.disp[k] = best_d[k];
      f.score[k] = best[k];
    }
    detail::median_filter(f, opt.median);
  }

  // Finer levels: local re-search around the propagated estimate.
  for (int L = opt.levels - 2; L >= 0; --L) {
    const ImageBuf& R = ref[L];
    const ImageBuf& M = mov[L];
    const double scale = std::ldexp(1.0, -L);
    const int r = opt.refine;
    const int span = 2 * r + 1;
    std::vector<double> grid(static_cast<std::size_t>(span) * span);
    for (std::size_t k = 0; k < nb; ++k) {
      const detail::Block b = detail::block_at(detail::level_point(f.centers[k], scale), opt.block, R.width(), R.height());
      const int bx = static_cast<int>(std::lround(2.0 * f.disp[k].x));
      const int by = static_cast<int>(std::lround(2.0 * f.disp[k].y));
      if (b.n() <= 0) {
        f.disp[k] = {static_cast<double>(bx), static_cast<double>(by)};
        continue;
      }
      double best = -std::numeric_limits<double>::infinity();
      int bi = r, bj = r;
      for (int j = 0; j < span; ++j) {
        for (int i = 0; i < span; ++i) {
          const double v = detail::block_zncc(R, M, b, bx + i - r, by + j - r);
          grid[static_cast<std::size_t>(j) * span + i] = v;
          const double tie = 1e-12 * (std::abs(i - r) + std::abs(j - r));
          if (v - tie > best) {
            best = v - tie;
            bi = i;
            bj = j;
          }
        }
      }
      Point d{static_cast<double>(bx + bi - r), static_cast<double>(by + bj - r)};
      if (L == 0) {
        auto at = [&](int i, int j) { return grid[static_cast<std::size_t>(j) * span + i]; };
        if (bi > 0 && bi < span - 1) d.x += detail::parabola_offset(at(bi - 1, bj), at(bi, bj), at(bi + 1, bj));
        if (bj > 0 && bj < span - 1) d.y += detail::parabola_offset(at(bi, bj - 1), at(bi, bj), at(bi, bj + 1));
      }
      f.disp[k] = d;
      f.score[k] = best;
    }
    detail::median_filter(f, opt.median);
  }
  return f;
}

/// Blocks of `fwd` whose match stays inside the frame and whose reverse flow
/// `bwd` (same lattice, images swapped) returns to within `tol` pixels.
inline std::vector<unsigned char> consistent_blocks(const FlowField& fwd, const FlowField& bwd, int block, int width,
                                                    int height, double tol = 2.0) {
  if (fwd.nx != bwd.nx || fwd.ny != bwd.ny || fwd.centers.empty()) {
    throw ArgumentError("consistent_blocks: flow lattices differ");
  }
  const Point origin = fwd.centers.front();
  const double step = fwd.nx > 1 ? fwd.centers[1].x - origin.x : 1.0;
  const double half = 0.5 * block;
  auto node = [&](int i, int j) {
    return bwd.disp[static_cast<std::size_t>(std::clamp(j, 0, bwd.ny - 1)) * bwd.nx + std::clamp(i, 0, bwd.nx - 1)];
  };
  std::vector<unsigned char> ok(fwd.centers.size(), 0);
  for (std::size_t k = 0; k < fwd.centers.size(); ++k) {
    const Point q = fwd.centers[k] + fwd.disp[k];
    if (q.x - half < 0 || q.y - half < 0 || q.x + half > width || q.y + half > height) continue;
    const double gx = (q.x - origin.x) / step;
    const double gy = (q.y - origin.y) / step;
    const int i = static_cast<int>(std::floor(gx));
    const int j = static_cast<int>(std::floor(gy));
    const double tx = gx - i;
    const double ty = gy - j;
    const Point back = (1 - ty) * ((1 - tx) * node(i, j) + tx * node(i + 1, j)) +
                       ty * ((1 - tx) * node(i, j + 1) + tx * node(i + 1, j + 1));
    ok[k] = norm(fwd.disp[k] + back) <= tol;
  }
  return ok;
}

}  // namespace fdr

#endif  // FDR_FLOW_HPP
