#ifndef FDR_TPS_HPP
#define FDR_TPS_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fdr/error.hpp"
#include "fdr/image.hpp"
#include "fdr/mesh.hpp"

namespace fdr {

/// phi(r) = |r|^2 log |r|^2, with phi(0) = 0 (the continuous limit).
inline double tps_kernel(Point r) noexcept {
  const double d2 = r.x * r.x + r.y * r.y;
  return d2 > 0.0 ? d2 * std::log(d2) : 0.0;
}

/// Gradient of tps_kernel: 2 r (log|r|^2 + 1); zero at the origin.
inline Point tps_kernel_gradient(Point r) noexcept {
  const double d2 = r.x * r.x + r.y * r.y;
  if (!(d2 > 0.0)) return {};
  const double s = 2.0 * (std::log(d2) + 1.0);
  return {s * r.x, s * r.y};
}

/// Similarity map between pixel coordinates and the unit frame the
/// linear system is solved in.
struct Normalization {
  Point origin{};
  double scale = 1.0;

  Point to_unit(Point p) const noexcept { return {(p.x - origin.x) / scale, (p.y - origin.y) / scale}; }
  Point from_unit(Point u) const noexcept { return {origin.x + scale * u.x, origin.y + scale * u.y}; }

  /// Origin at the bounding-box corner, scale = longest side.
  static Normalization fit(const std::vector<Point>& pts) {
    double x0 = std::numeric_limits<double>::infinity();
    double y0 = x0;
    double x1 = -x0;
    double y1 = -x0;
    for (const Point& p : pts) {
      x0 = std::min(x0, p.x);
      y0 = std::min(y0, p.y);
      x1 = std::max(x1, p.x);
      y1 = std::max(y1, p.y);
    }
    const double s = std::max(x1 - x0, y1 - y0);
    return {{x0, y0}, s > 0.0 ? s : 1.0};
  }

  /// Unit frame spanning the pixel centers of a width x height image.
  static Normalization frame(int width, int height) {
    return {{0.0, 0.0}, std::max(1.0, std::max(width - 1.0, height - 1.0))};
  }
};

struct TpsOptions {
  std::optional<Normalization> normalization;  // default: from the source bounding box
  double bending = 0.0;                        // added to the kernel diagonal
  double max_condition = 1e12;
};

/// Solved coefficients C = [C_x, C_y]: a kernel weight per anchor point plus
/// an affine part, both expressed in the unit frame of `norm`.
struct TpsCoefficients {
  MeshGrid source;
  std::vector<Point> weights;      // k entries
  std::array<Point, 3> affine{};   // constant, x and y terms
  Normalization norm;
  double condition = 1.0;          // reciprocal of the LU rcond estimate
};

/// Factorized (k+3)x(k+3) system [[S,1,P],[1',0,0],[P',0,0]] of a fixed source point set.
class TpsSystem {
 public:
  TpsSystem(const std::vector<Point>& source_unit, double bending, double max_condition)
      : k_(source_unit.size()) {
    if (k_ < 3) throw ArgumentError("TPS: need at least 3 control points");
    const Eigen::Index n = static_cast<Eigen::Index>(k_) + 3;
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < k_; ++i) {
      for (std::size_t j = 0; j < k_; ++j) {
        L(i, j) = tps_kernel(source_unit[i] - source_unit[j]);
      }
      L(i, i) += bending;
      const auto ki = static_cast<Eigen::Index>(k_);
      L(i, ki) = 1.0;
      L(i, ki + 1) = source_unit[i].x;
      L(i, ki + 2) = source_unit[i].y;
      L(ki, i) = 1.0;
      L(ki + 1, i) = source_unit[i].x;
      L(ki + 2, i) = source_unit[i].y;
    }
    for (std::size_t i = 0; i < k_; ++i) {
      for (std::size_t j = i + 1; j < k_; ++j) {
        if (source_unit[i] == source_unit[j]) {
          std::ostringstream msg;
          msg << "TPS: duplicate source points " << i << " and " << j << " (system is singular)";
          throw NumericalError(msg.str());
        }
      }
    }
    lu_.compute(L);
    const double rcond = lu_.rcond();
    condition_ = rcond > 0.0 ? 1.0 / rcond : std::numeric_limits<double>::infinity();
    // The estimate is unreliable once a pivot vanishes, so check the pivots too.
    const Eigen::VectorXd pivots = lu_.matrixLU().diagonal().cwiseAbs();
    if (!(pivots.minCoeff() * max_condition > pivots.maxCoeff())) {
      condition_ = std::numeric_limits<double>::infinity();
    }
    if (!(condition_ <= max_condition)) {
      std::ostringstream msg;
      msg << "TPS: system is singular or ill-conditioned (condition estimate " << condition_
          << " > " << max_condition << "); source points may be collinear or coincident";
      throw NumericalError(msg.str());
    }
  }

  std::size_t size() const noexcept { return k_; }
  double condition() const noexcept { return condition_; }

  /// Solves L c = rhs for a (k+3) x m right-hand side.
  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const { return lu_.solve(rhs); }

  /// Columns 0..k-1 of L^{-1}: maps target coordinates to lifted coefficients.
  Eigen::MatrixXd target_operator() const {
    const auto n = static_cast<Eigen::Index>(k_) + 3;
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(k_));
    for (std::size_t i = 0; i < k_; ++i) rhs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
    return lu_.solve(rhs);
  }

 private:
  std::size_t k_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  double condition_ = 1.0;
};

/// Solves the interpolating spline with source_i -> target_i.
inline TpsCoefficients solve_tps(const MeshGrid& source, const MeshGrid& target,
                                 const TpsOptions& opts = {}) {
  if (source.size() != target.size()) {
    throw ArgumentError("solve_tps: source and target point counts differ");
  }
  const Normalization norm = opts.normalization.value_or(Normalization::fit(source.points()));
  const std::size_t k = source.size();
  std::vector<Point> src(k);
  for (std::size_t i = 0; i < k; ++i) src[i] = norm.to_unit(source[i]);
  TpsSystem system(src, opts.bending, opts.max_condition);

  const auto n = static_cast<Eigen::Index>(k) + 3;
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, 2);
  for (std::size_t i = 0; i < k; ++i) {
    const Point t = norm.to_unit(target[i]);
    rhs(static_cast<Eigen::Index>(i), 0) = t.x;
    rhs(static_cast<Eigen::Index>(i), 1) = t.y;
  }
  const Eigen::MatrixXd c = system.solve(rhs);

  TpsCoefficients out{source, std::vector<Point>(k), {}, norm, system.condition()};
  for (std::size_t i = 0; i < k; ++i) {
    out.weights[i] = {c(static_cast<Eigen::Index>(i), 0), c(static_cast<Eigen::Index>(i), 1)};
  }
  for (int a = 0; a < 3; ++a) {
    const auto row = static_cast<Eigen::Index>(k) + a;
    out.affine[a] = {c(row, 0), c(row, 1)};
  }
  return out;
}

/// Maps a pixel-space point: affine part plus kernel expansion, evaluated in the unit frame.
inline Point apply_tps(const TpsCoefficients& C, Point u) noexcept {
  const Point q = C.norm.to_unit(u);
  Point r = C.affine[0] + q.x * C.affine[1] + q.y * C.affine[2];
  const auto& pts = C.source.points();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double phi = tps_kernel(q - C.norm.to_unit(pts[i]));
    r.x += phi * C.weights[i].x;
    r.y += phi * C.weights[i].y;
  }
  return C.norm.from_unit(r);
}

/// 2x2 Jacobian d(apply_tps)/du as {dfx/dx, dfx/dy, dfy/dx, dfy/dy}.
/// Source and target share the normalization, so the unit-frame Jacobian is the pixel one.
inline std::array<double, 4> tps_jacobian(const TpsCoefficients& C, Point u) noexcept {
  const Point q = C.norm.to_unit(u);
  std::array<double, 4> J{C.affine[1].x, C.affine[2].x, C.affine[1].y, C.affine[2].y};
  const auto& pts = C.source.points();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Point g = tps_kernel_gradient(q - C.norm.to_unit(pts[i]));
    J[0] += C.weights[i].x * g.x;
    J[1] += C.weights[i].x * g.y;
    J[2] += C.weights[i].y * g.x;
    J[3] += C.weights[i].y * g.y;
  }
  return J;
}

/// Applies a spline to every point of a mesh.
inline MeshGrid apply_tps(const TpsCoefficients& C, const MeshGrid& m) {
  MeshGrid out = m;
  for (Point& p : out.points()) p = apply_tps(C, p);
  return out;
}

/// Backward-mapped resampling: out(p) = bilinear_sample(img, map(p)), per channel.
template <typename CoordMap>
ImageBuf warp_with(const ImageBuf& img, int out_w, int out_h, CoordMap&& map) {
  if (out_w < 1 || out_h < 1) throw ArgumentError("warp: output dimensions must be >= 1");
  ImageBuf out(out_w, out_h, img.channels());
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const Point s = map(Point{static_cast<double>(x), static_cast<double>(y)});
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = bilinear_sample(img, s.x, s.y, c).value;
    }
  }
  return out;
}

/// Dewarps by backward mapping: the spline regular -> predicted gives, for every
/// output pixel, the input location to read.
inline ImageBuf warp_image(const ImageBuf& img, const MeshGrid& predicted, const MeshGrid& regular,
                           int out_w, int out_h) {
  if (!predicted.same_dims(regular)) throw ArgumentError("warp_image: grid dimensions differ");
  if (out_w < 1 || out_h < 1) throw ArgumentError("warp_image: output dimensions must be >= 1");
  const TpsCoefficients C = solve_tps(regular, predicted);
  return warp_with(img, out_w, out_h, [&](Point p) { return apply_tps(C, p); });
}

/// Precomputed linear map from target coordinates to mapped evaluation points
/// for a FIXED source grid: mapped(q) = sum_j B(q, j) * target_j.
///
/// The source grid alone determines the system matrix, so the backward-mapped
/// sampling coordinates are linear in the predicted mesh.
class TpsBasis {
 public:
  TpsBasis() = default;

  TpsBasis(const MeshGrid& source, std::vector<Point> eval_points, const TpsOptions& opts = {})
      : k_(source.size()), points_(std::move(eval_points)) {
    const Normalization norm = opts.normalization.value_or(Normalization::fit(source.points()));
    std::vector<Point> src(k_);
    for (std::size_t i = 0; i < k_; ++i) src[i] = norm.to_unit(source[i]);
    TpsSystem system(src, opts.bending, opts.max_condition);
    const Eigen::MatrixXd inv = system.target_operator();  // (k+3) x k

    const std::size_t n = points_.size();
    basis_.assign(n * k_, 0.0);
    Eigen::VectorXd lifted(static_cast<Eigen::Index>(k_) + 3);
    for (std::size_t p = 0; p < n; ++p) {
      const Point q = norm.to_unit(points_[p]);
      for (std::size_t i = 0; i < k_; ++i) lifted(static_cast<Eigen::Index>(i)) = tps_kernel(q - src[i]);
      lifted(static_cast<Eigen::Index>(k_)) = 1.0;
      lifted(static_cast<Eigen::Index>(k_) + 1) = q.x;
      lifted(static_cast<Eigen::Index>(k_) + 2) = q.y;
      const Eigen::VectorXd row = inv.transpose() * lifted;
      for (std::size_t j = 0; j < k_; ++j) basis_[p * k_ + j] = row(static_cast<Eigen::Index>(j));
    }
  }

  std::size_t point_count() const noexcept { return points_.size(); }
  std::size_t control_count() const noexcept { return k_; }
  const std::vector<Point>& points() const noexcept { return points_; }
  double weight(std::size_t p, std::size_t j) const noexcept { return basis_[p * k_ + j]; }

  /// Mapped location of every evaluation point under the spline source -> target.
  std::vector<Point> map(const MeshGrid& target) const {
    std::vector<Point> out(points_.size());
    const auto& t = target.points();
    for (std::size_t p = 0; p < points_.size(); ++p) {
      const double* row = &basis_[p * k_];
      double x = 0.0;
      double y = 0.0;
      for (std::size_t j = 0; j < k_; ++j) {
        x += row[j] * t[j].x;
        y += row[j] * t[j].y;
      }
      out[p] = {x, y};
    }
    return out;
  }

  /// Transpose map: per-evaluation-point gradients to per-control-point gradients.
  std::vector<Point> adjoint(const std::vector<Point>& grads) const {
    std::vector<Point> out(k_);
    for (std::size_t p = 0; p < points_.size(); ++p) {
      const Point g = grads[p];
      if (g.x == 0.0 && g.y == 0.0) continue;
      const double* row = &basis_[p * k_];
      for (std::size_t j = 0; j < k_; ++j) {
        out[j].x += row[j] * g.x;
        out[j].y += row[j] * g.y;
      }
    }
    return out;
  }

 private:
  std::size_t k_ = 0;
  std::vector<Point> points_;
  std::vector<double> basis_;
};

/// Dense per-pixel coordinate field of a width x height output, evaluated
/// exactly at lattice nodes every `stride` pixels and bilinearly interpolated
/// in between (stride 1 is exact at every pixel).
///
/// Interpolation is linear in the node values, so forward and adjoint stay
/// exact transposes of each other at any stride.
class CoordLattice {
 public:
  CoordLattice() = default;

  CoordLattice(int width, int height, int stride) : width_(width), height_(height), stride_(stride) {
    if (width < 1 || height < 1) throw ArgumentError("CoordLattice: dimensions must be >= 1");
    if (stride < 1) throw ArgumentError("CoordLattice: stride must be >= 1");
    nx_ = (width - 1 + stride - 1) / stride + 1;
    ny_ = (height - 1 + stride - 1) / stride + 1;
    if (nx_ < 2) nx_ = 2;
    if (ny_ < 2) ny_ = 2;
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int stride() const noexcept { return stride_; }
  int nodes_x() const noexcept { return nx_; }
  int nodes_y() const noexcept { return ny_; }
  std::size_t node_count() const noexcept { return static_cast<std::size_t>(nx_) * ny_; }

  std::vector<Point> node_points() const {
    std::vector<Point> pts;
    pts.reserve(node_count());
    for (int j = 0; j < ny_; ++j) {
      for (int i = 0; i < nx_; ++i) {
        pts.push_back({static_cast<double>(i * stride_), static_cast<double>(j * stride_)});
      }
    }
    return pts;
  }

  /// Interpolated per-pixel field (row-major width x height).
  std::vector<Point> expand(const std::vector<Point>& nodes) const {
    std::vector<Point> out(static_cast<std::size_t>(width_) * height_);
    if (stride_ == 1 && nodes.size() == out.size()) {
      // Exact lattice layout matches the pixel layout only when widths agree.
      if (nx_ == width_) return nodes;
    }
    for (int y = 0; y < height_; ++y) {
      const Cell cy = cell(y, ny_);
      for (int x = 0; x < width_; ++x) {
        const Cell cx = cell(x, nx_);
        const Point a = nodes[idx(cx.i, cy.i)];
        const Point b = nodes[idx(cx.i + 1, cy.i)];
        const Point c = nodes[idx(cx.i, cy.i + 1)];
        const Point d = nodes[idx(cx.i + 1, cy.i + 1)];
        const double w00 = (1 - cx.t) * (1 - cy.t);
        const double w10 = cx.t * (1 - cy.t);
        const double w01 = (1 - cx.t) * cy.t;
        const double w11 = cx.t * cy.t;
        out[static_cast<std::size_t>(y) * width_ + x] = {
            w00 * a.x + w10 * b.x + w01 * c.x + w11 * d.x,
            w00 * a.y + w10 * b.y + w01 * c.y + w11 * d.y};
      }
    }
    return out;
  }

  /// Adjoint of expand: accumulates per-pixel gradients onto the nodes.
  std::vector<Point> contract(const std::vector<Point>& pixel_grads) const {
    std::vector<Point> out(node_count());
    for (int y = 0; y < height_; ++y) {
      const Cell cy = cell(y, ny_);
      for (int x = 0; x < width_; ++x) {
        const Point g = pixel_grads[static_cast<std::size_t>(y) * width_ + x];
        if (g.x == 0.0 && g.y == 0.0) continue;
        const Cell cx = cell(x, nx_);
        const double w00 = (1 - cx.t) * (1 - cy.t);
        const double w10 = cx.t * (1 - cy.t);
        const double w01 = (1 - cx.t) * cy.t;
        const double w11 = cx.t * cy.t;
        Point& a = out[idx(cx.i, cy.i)];
        Point& b = out[idx(cx.i + 1, cy.i)];
        Point& c = out[idx(cx.i, cy.i + 1)];
        Point& d = out[idx(cx.i + 1, cy.i + 1)];
        a = a + w00 * g;
        b = b + w10 * g;
        c = c + w01 * g;
        d = d + w11 * g;
      }
    }
    return out;
  }

 private:
  struct Cell {
    int i;
    double t;
  };
  Cell cell(int v, int n) const noexcept {
    int i = v / stride_;
    double t = static_cast<double>(v - i * stride_) / stride_;
    if (i >= n - 1) {
      i = n - 2;
      t = static_cast<double>(v - i * stride_) / stride_;
    }
    return {i, t};
  }
  std::size_t idx(int i, int j) const noexcept { return static_cast<std::size_t>(j) * nx_ + i; }

  int width_ = 0;
  int height_ = 0;
  int stride_ = 1;
  int nx_ = 0;
  int ny_ = 0;
};

}  // namespace fdr

#endif  // FDR_TPS_HPP
