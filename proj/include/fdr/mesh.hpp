#ifndef FDR_MESH_HPP
#define FDR_MESH_HPP

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fdr/error.hpp"

namespace fdr {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend Point operator+(Point a, Point b) noexcept { return {a.x + b.x, a.y + b.y}; }
  friend Point operator-(Point a, Point b) noexcept { return {a.x - b.x, a.y - b.y}; }
  friend Point operator*(double s, Point a) noexcept { return {s * a.x, s * a.y}; }
  friend bool operator==(Point a, Point b) noexcept = default;
};

inline double cross(Point a, Point b) noexcept { return a.x * b.y - a.y * b.x; }
inline double norm(Point a) noexcept { return std::hypot(a.x, a.y); }

/// n_r x n_c control points in pixel coordinates, row-major.
class MeshGrid {
 public:
  MeshGrid() = default;
  MeshGrid(int rows, int cols, std::vector<Point> points)
      : rows_(rows), cols_(cols), points_(std::move(points)) {
    if (rows < 2 || cols < 2) throw ArgumentError("MeshGrid: need at least 2x2 points");
    if (points_.size() != static_cast<std::size_t>(rows) * cols) {
      throw ArgumentError("MeshGrid: point count does not match rows*cols");
    }
    for (const Point& p : points_) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
        throw ArgumentError("MeshGrid: non-finite coordinate");
      }
    }
  }

  int rows() const noexcept { return rows_; }
  int cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return points_.size(); }

  const Point& at(int r, int c) const noexcept { return points_[static_cast<std::size_t>(r) * cols_ + c]; }
  Point& at(int r, int c) noexcept { return points_[static_cast<std::size_t>(r) * cols_ + c]; }
  const Point& operator[](std::size_t i) const noexcept { return points_[i]; }
  Point& operator[](std::size_t i) noexcept { return points_[i]; }

  const std::vector<Point>& points() const noexcept { return points_; }
  std::vector<Point>& points() noexcept { return points_; }

  bool same_dims(const MeshGrid& other) const noexcept {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const MeshGrid&, const MeshGrid&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<Point> points_;
};

/// Evenly spaced lattice spanning [x0,x1] x [y0,y1] inclusive.
inline MeshGrid regular_grid(int rows, int cols, double x0, double y0, double x1, double y1) {
  if (rows < 2 || cols < 2) throw ArgumentError("regular_grid: rows and cols must be >= 2");
  if (!(x1 > x0) || !(y1 > y0)) throw ArgumentError("regular_grid: degenerate bounds");
  std::vector<Point> pts;
  pts.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    const double y = y0 + (y1 - y0) * r / (rows - 1);
    for (int c = 0; c < cols; ++c) {
      pts.push_back({x0 + (x1 - x0) * c / (cols - 1), y});
    }
  }
  return MeshGrid(rows, cols, std::move(pts));
}

/// Regular grid spanning the pixel centers of a width x height frame.
inline MeshGrid frame_grid(int rows, int cols, int width, int height) {
  return regular_grid(rows, cols, 0.0, 0.0, width - 1.0, height - 1.0);
}

/// True iff no cell is folded: all four triangles of both diagonal splits
/// of every quad have strictly positive signed area (image axes, y down).
inline bool validate_mesh(const MeshGrid& m) noexcept {
  for (int r = 0; r + 1 < m.rows(); ++r) {
    for (int c = 0; c + 1 < m.cols(); ++c) {
      const Point a = m.at(r, c);
      const Point b = m.at(r, c + 1);
      const Point d = m.at(r + 1, c + 1);
      const Point e = m.at(r + 1, c);
      if (!(cross(b - a, d - a) > 0.0) || !(cross(d - a, e - a) > 0.0) ||
          !(cross(b - a, e - a) > 0.0) || !(cross(d - b, e - b) > 0.0)) {
        return false;
      }
    }
  }
  return true;
}

/// Outer ring in traversal order: top row, right column, bottom row
/// (reversed), left column (reversed). Each corner appears once.
inline std::vector<Point> boundary_ring(const MeshGrid& m) {
  std::vector<Point> ring;
  const int R = m.rows();
  const int C = m.cols();
  ring.reserve(2 * (R + C) - 4);
  for (int c = 0; c < C; ++c) ring.push_back(m.at(0, c));
  for (int r = 1; r < R; ++r) ring.push_back(m.at(r, C - 1));
  for (int c = C - 2; c >= 0; --c) ring.push_back(m.at(R - 1, c));
  for (int r = R - 2; r >= 1; --r) ring.push_back(m.at(r, 0));
  return ring;
}

/// Root-mean-square point distance between equally sized meshes.
inline double mesh_rmse(const MeshGrid& a, const MeshGrid& b) {
  if (!a.same_dims(b)) throw ArgumentError("mesh_rmse: grid dimensions differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Point d = a[i] - b[i];
    acc += d.x * d.x + d.y * d.y;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

// ---- JSON: {"rows": n, "cols": n, "points": [[x,y], ...]} ----

inline nlohmann::json mesh_to_json(const MeshGrid& m) {
  nlohmann::json pts = nlohmann::json::array();
  for (const Point& p : m.points()) pts.push_back({p.x, p.y});
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"points", std::move(pts)}};
}

inline MeshGrid mesh_from_json(const nlohmann::json& j) {
  try {
    const int rows = j.at("rows").get<int>();
    const int cols = j.at("cols").get<int>();
    const auto& arr = j.at("points");
    if (!arr.is_array()) throw FormatError("mesh JSON: 'points' must be an array");
    std::vector<Point> pts;
    pts.reserve(arr.size());
    for (const auto& p : arr) {
      if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
        throw FormatError("mesh JSON: each point must be [x, y]");
      }
      pts.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    return MeshGrid(rows, cols, std::move(pts));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("mesh JSON: ") + e.what());
  } catch (const ArgumentError& e) {
    throw FormatError(std::string("mesh JSON: ") + e.what());
  }
}

inline void save_mesh(const MeshGrid& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << mesh_to_json(m).dump(2) << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline MeshGrid load_mesh(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
  return mesh_from_json(j);
}

}  // namespace fdr

#endif  // FDR_MESH_HPP
