#ifndef FDR_DEFORM_HPP
#define FDR_DEFORM_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "fdr/error.hpp"
#include "fdr/image.hpp"
#include "fdr/mesh.hpp"
#include "fdr/rng.hpp"
#include "fdr/tps.hpp"

namespace fdr {

/// Seeded random perturbation of a regular control mesh.
struct DeformationSpec {
  std::uint64_t seed = 0;
  double sigma = 0.05;        // offset std as a fraction of min(H, W)
  int rows = 9;
  int cols = 9;
  double clamp = 3.0;         // max |offset| in units of sigma * min(H, W)
  double correlation = 3.0;   // Gaussian correlation length, in grid cells
  int max_attempts = 10;

  void validate() const {
    if (!(sigma >= 0.0)) throw ArgumentError("DeformationSpec: sigma must be >= 0");
    if (!(clamp > 0.0)) throw ArgumentError("DeformationSpec: clamp must be > 0");
    if (rows < 2 || cols < 2) throw ArgumentError("DeformationSpec: grid must be at least 2x2");
    if (!(correlation >= 0.0)) throw ArgumentError("DeformationSpec: correlation must be >= 0");
    if (max_attempts < 1) throw ArgumentError("DeformationSpec: max_attempts must be >= 1");
  }
};

namespace detail {

// Unit-variance Gaussian field over the grid: i.i.d. normals smoothed by a
// Gaussian kernel of the given length (cells), each point renormalized so its
// marginal variance is exactly one. correlation == 0 keeps the normals i.i.d.
inline std::vector<double> correlated_field(Xoshiro256& rng, int rows, int cols, double correlation) {
  const std::size_t k = static_cast<std::size_t>(rows) * cols;
  std::vector<double> z(k);
  for (double& v : z) v = rng.normal();
  if (correlation <= 0.0) return z;
  std::vector<double> out(k);
  const double inv2l2 = 1.0 / (2.0 * correlation * correlation);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      double norm2 = 0.0;
      for (int rr = 0; rr < rows; ++rr) {
        for (int cc = 0; cc < cols; ++cc) {
          const double d2 = (r - rr) * (r - rr) + (c - cc) * (c - cc);
          const double w = std::exp(-d2 * inv2l2);
          acc += w * z[static_cast<std::size_t>(rr) * cols + cc];
          norm2 += w * w;
        }
      }
      out[static_cast<std::size_t>(r) * cols + c] = acc / std::sqrt(norm2);
    }
  }
  return out;
}

}  // namespace detail

/// Regular frame grid plus clamped, spatially correlated Gaussian offsets.
///
/// Every point's offset has std sigma*min(H,W) per axis; draws that fold the
/// mesh are rejected and redrawn from the same stream, up to max_attempts.
inline MeshGrid random_mesh(const DeformationSpec& spec, int width, int height) {
  spec.validate();
  if (width < 2 || height < 2) throw ArgumentError("random_mesh: frame must be at least 2x2");
  const MeshGrid regular = frame_grid(spec.rows, spec.cols, width, height);
  if (spec.sigma == 0.0) return regular;
  const double scale = spec.sigma * std::min(width, height);
  const double limit = spec.clamp * scale;
  Xoshiro256 rng(spec.seed);
  for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
    const auto fx = detail::correlated_field(rng, spec.rows, spec.cols, spec.correlation);
    const auto fy = detail::correlated_field(rng, spec.rows, spec.cols, spec.correlation);
    MeshGrid m = regular;
    for (std::size_t i = 0; i < m.size(); ++i) {
      m[i].x += std::clamp(scale * fx[i], -limit, limit);
      m[i].y += std::clamp(scale * fy[i], -limit, limit);
    }
    if (validate_mesh(m)) return m;
  }
  throw GenerationError("random_mesh: no fold-free mesh within the attempt budget");
}

/// Warps `img` so that the content at the regular grid lands on `mesh`:
/// out(q) = img(TPS_{mesh -> regular}(q)). Undone by warp_image(out, mesh, regular).
inline ImageBuf apply_deformation(const ImageBuf& img, const MeshGrid& mesh) {
  const MeshGrid regular = frame_grid(mesh.rows(), mesh.cols(), img.width(), img.height());
  return warp_image(img, regular, mesh, img.width(), img.height());
}

/// True when two closed-polygon edges (a,b), (c,d) properly cross or overlap.
inline bool segments_intersect(Point a, Point b, Point c, Point d) noexcept {
  const double d1 = cross(b - a, c - a);
  const double d2 = cross(b - a, d - a);
  const double d3 = cross(d - c, a - c);
  const double d4 = cross(d - c, b - c);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) {
    return true;
  }
  auto on_segment = [](Point p, Point q, Point r) {
    return std::min(p.x, q.x) <= r.x && r.x <= std::max(p.x, q.x) && std::min(p.y, q.y) <= r.y &&
           r.y <= std::max(p.y, q.y);
  };
  if (d1 == 0 && on_segment(a, b, c)) return true;
  if (d2 == 0 && on_segment(a, b, d)) return true;
  if (d3 == 0 && on_segment(c, d, a)) return true;
  if (d4 == 0 && on_segment(c, d, b)) return true;
  return false;
}

inline bool polygon_is_simple(const std::vector<Point>& ring) noexcept {
  const std::size_t n = ring.size();
  for (std::size_t i = 0; i < n; ++i) {
    const Point a = ring[i];
    const Point b = ring[(i + 1) % n];
    for (std::size_t j = i + 1; j < n; ++j) {
      // Skip edges sharing a vertex with edge i.
      if (j == i + 1 || (i == 0 && j == n - 1)) continue;
      if (segments_intersect(a, b, ring[j], ring[(j + 1) % n])) return false;
    }
  }
  return true;
}

/// Shoelace area of a closed polygon (absolute value).
inline double polygon_area(const std::vector<Point>& ring) noexcept {
  double acc = 0.0;
  for (std::size_t i = 0; i < ring.size(); ++i) acc += cross(ring[i], ring[(i + 1) % ring.size()]);
  return std::abs(acc) * 0.5;
}

/// Binary mask of pixel centers inside the mesh's outer ring (even-odd rule,
/// half-open: a center exactly on a right/bottom edge is outside).
inline ImageBuf mesh_region_mask(const MeshGrid& mesh, int width, int height) {
  if (width < 1 || height < 1) throw ArgumentError("mesh_region_mask: dimensions must be >= 1");
  const std::vector<Point> ring = boundary_ring(mesh);
  if (!polygon_is_simple(ring)) throw GeometryError("mesh_region_mask: boundary self-intersects");
  ImageBuf mask(width, height, 1, 0.0);
  std::vector<double> xs;
  const std::size_t n = ring.size();
  for (int y = 0; y < height; ++y) {
    xs.clear();
    const double py = y;
    for (std::size_t i = 0; i < n; ++i) {
      const Point a = ring[i];
      const Point b = ring[(i + 1) % n];
      if ((a.y > py) != (b.y > py)) xs.push_back(a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    std::sort(xs.begin(), xs.end());
    for (std::size_t i = 0; i + 1 < xs.size(); i += 2) {
      const int x0 = std::max(0, static_cast<int>(std::ceil(xs[i])));
      // px < xs[i+1]
      const int x1 = std::min(width - 1, static_cast<int>(std::ceil(xs[i + 1])) - 1);
      for (int x = x0; x <= x1; ++x) mask.at(x, y) = 1.0;
    }
  }
  return mask;
}

}  // namespace fdr

#endif  // FDR_DEFORM_HPP
