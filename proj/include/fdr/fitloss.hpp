#ifndef FDR_FITLOSS_HPP
#define FDR_FITLOSS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "fdr/deform.hpp"
#include "fdr/error.hpp"
#include "fdr/flow.hpp"
#include "fdr/fourier.hpp"
#include "fdr/image.hpp"
#include "fdr/mesh.hpp"
#include "fdr/tps.hpp"

namespace fdr {

/// Residuals this small count as exact matches; their L1 subgradient is zero.
inline constexpr double kResidualDeadZone = 1e-9;

inline double l1_sign(double diff) noexcept {
  if (diff > kResidualDeadZone) return 1.0;
  if (diff < -kResidualDeadZone) return -1.0;
  return 0.0;
}

/// Mean absolute difference between two equally sized grayscale images.
inline double rectification_loss(const ImageBuf& a, const ImageBuf& b) {
  if (a.width() != b.width() || a.height() != b.height()) {
    throw ArgumentError("rectification_loss: image dimensions differ");
  }
  if (a.channels() != 1 || b.channels() != 1) {
    throw ArgumentError("rectification_loss: expects grayscale images");
  }
  return mean_abs_diff(a, b);
}

/// L_rect + lambda * L_mutual.
inline double coarse_loss(double rect, double mutual, double lambda) {
  if (!(lambda >= 0.0)) throw ArgumentError("coarse_loss: lambda must be >= 0");
  return rect + lambda * mutual;
}

// ---------------------------------------------------------------------------
// Rectification objective: L1 between the backward-warped input and the target,
// with the analytic gradient with respect to the predicted mesh.

/// L1 between warp(input; mesh) and target on the target frame.
///
/// The regular grid is fixed, so sampled coordinates are a precomputed linear
/// function of the mesh (TpsBasis on a CoordLattice). Gradient:
///   dL/dmesh_j = sum_p sign(diff_p) * grad_input(s(p)) * B_j(p) / N.
class RectObjective {
 public:
  RectObjective(ImageBuf input, ImageBuf target, int rows, int cols, int stride = 1)
      : input_(std::move(input)),
        target_(std::move(target)),
        regular_(frame_grid(rows, cols, target_.width(), target_.height())),
        lattice_(target_.width(), target_.height(), stride),
        basis_(regular_, lattice_.node_points(),
               TpsOptions{Normalization::frame(target_.width(), target_.height())}) {
    if (input_.channels() != 1 || target_.channels() != 1) {
      throw ArgumentError("RectObjective: expects grayscale images");
    }
  }

  const MeshGrid& regular() const noexcept { return regular_; }
  const ImageBuf& target() const noexcept { return target_; }
  void set_squared(bool on) noexcept { squared_ = on; }

  /// Backward-mapped sampling coordinates of every target pixel.
  std::vector<Point> coordinates(const MeshGrid& mesh) const {
    return lattice_.expand(basis_.map(mesh));
  }

  /// Loss value; gradient written to `grad` (one entry per mesh point) when non-null.
  double evaluate(const MeshGrid& mesh, std::vector<Point>* grad) const {
    if (!mesh.same_dims(regular_)) throw ArgumentError("RectObjective: mesh dimensions differ");
    const std::vector<Point> coords = coordinates(mesh);
    const auto tgt = target_.data();
    const double inv_n = 1.0 / static_cast<double>(coords.size());
    double loss = 0.0;
    std::vector<Point> pixel_grad;
    if (grad) pixel_grad.assign(coords.size(), Point{});
    for (std::size_t p = 0; p < coords.size(); ++p) {
      const SampleGrad s = bilinear_sample(input_, coords[p].x, coords[p].y);
      const double diff = s.value - tgt[p];
      loss += squared_ ? diff * diff : std::abs(diff);
      if (grad) {
        const double sg = (squared_ ? 2.0 * diff : l1_sign(diff)) * inv_n;
        pixel_grad[p] = {sg * s.d_dx, sg * s.d_dy};
      }
    }
    if (grad) *grad = basis_.adjoint(lattice_.contract(pixel_grad));
    return loss * inv_n;
  }

 private:
  ImageBuf input_;
  ImageBuf target_;
  MeshGrid regular_;
  CoordLattice lattice_;
  TpsBasis basis_;
  bool squared_ = false;
};

/// Analytic d L_rect / d mesh, exact per pixel.
inline std::vector<Point> mesh_gradient(const ImageBuf& img_hf, const ImageBuf& target_hf,
                                        const MeshGrid& mesh) {
  if (!validate_mesh(mesh)) throw GeometryError("mesh_gradient: mesh is folded");
  RectObjective obj(img_hf, target_hf, mesh.rows(), mesh.cols(), 1);
  std::vector<Point> g;
  obj.evaluate(mesh, &g);
  return g;
}

// ---------------------------------------------------------------------------
// Mutual transformation loss.

/// One direction of the mutual loss: mean over `mask` of |src(f(q)) - ref(q)|
/// where f is the spline source_pts -> target_pts. Both point sets move, so the
/// gradient flows through the factorized system as well as the kernel terms.
class MutualTerm {
 public:
  struct Result {
    double loss = 0.0;
    std::vector<Point> d_source;  // dL/d source point (pixels)
    std::vector<Point> d_target;  // dL/d target point (pixels)
  };

  MutualTerm(int width, int height, int stride)
      : width_(width), height_(height), lattice_(width, height, stride),
        norm_(Normalization::frame(width, height)) {
    nodes_ = lattice_.node_points();
    for (Point& q : nodes_) q = norm_.to_unit(q);
  }

  Result evaluate(const ImageBuf& src, const ImageBuf& ref, const ImageBuf& mask,
                  const MeshGrid& source_pts, const MeshGrid& target_pts, bool want_grad) const {
    const std::size_t k = source_pts.size();
    const auto K = static_cast<Eigen::Index>(k);
    std::vector<Point> s(k);
    for (std::size_t i = 0; i < k; ++i) s[i] = norm_.to_unit(source_pts[i]);
    TpsSystem system(s, 0.0, 1e12);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(K + 3, 2);
    for (std::size_t i = 0; i < k; ++i) {
      const Point t = norm_.to_unit(target_pts[i]);
      rhs(static_cast<Eigen::Index>(i), 0) = t.x;
      rhs(static_cast<Eigen::Index>(i), 1) = t.y;
    }
    const Eigen::MatrixXd c = system.solve(rhs);

    // Kernel values at lattice nodes; (log d2 + 1) cached for the gradient.
    const std::size_t n = nodes_.size();
    std::vector<double> logterm(want_grad ? n * k : 0);
    std::vector<Point> node_coords(n);
    for (std::size_t q = 0; q < n; ++q) {
      const Point u = nodes_[q];
      double fx = c(K, 0) + c(K + 1, 0) * u.x + c(K + 2, 0) * u.y;
      double fy = c(K, 1) + c(K + 1, 1) * u.x + c(K + 2, 1) * u.y;
      for (std::size_t i = 0; i < k; ++i) {
        const Point r = u - s[i];
        const double d2 = r.x * r.x + r.y * r.y;
        double phi = 0.0;
        double lt = 0.0;
        if (d2 > 0.0) {
          const double l = std::log(d2);
          phi = d2 * l;
          lt = l + 1.0;
        }
        if (want_grad) logterm[q * k + i] = lt;
        fx += c(static_cast<Eigen::Index>(i), 0) * phi;
        fy += c(static_cast<Eigen::Index>(i), 1) * phi;
      }
      node_coords[q] = norm_.from_unit({fx, fy});
    }

    const std::vector<Point> coords = lattice_.expand(node_coords);
    const auto ref_d = ref.data();
    const auto mask_d = mask.data();
    double area = 0.0;
    for (double m : mask_d) area += m;
    if (!(area > 0.0)) throw NumericalError("mutual_loss: document region mask is empty");

    Result out;
    std::vector<Point> pixel_grad;
    if (want_grad) pixel_grad.assign(coords.size(), Point{});
    double acc = 0.0;
    for (std::size_t p = 0; p < coords.size(); ++p) {
      if (mask_d[p] == 0.0) continue;
      const SampleGrad g = bilinear_sample(src, coords[p].x, coords[p].y);
      const double diff = g.value - ref_d[p];
      acc += mask_d[p] * std::abs(diff);
      if (want_grad) {
        const double sg = mask_d[p] * l1_sign(diff) / area;
        pixel_grad[p] = {sg * g.d_dx, sg * g.d_dy};
      }
    }
    out.loss = acc / area;
    if (!want_grad) return out;

    // Node gradients in the unit frame: dL/df_unit = scale * dL/df_pixel.
    std::vector<Point> gn = lattice_.contract(pixel_grad);
    const double scale = norm_.scale;
    for (Point& g : gn) g = scale * g;

    Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(K + 3, 2);
    std::vector<Point> ds(k);
    for (std::size_t q = 0; q < n; ++q) {
      const Point g = gn[q];
      if (g.x == 0.0 && g.y == 0.0) continue;
      const Point u = nodes_[q];
      for (std::size_t i = 0; i < k; ++i) {
        const Point r = u - s[i];
        const double d2 = r.x * r.x + r.y * r.y;
        const double lt = logterm[q * k + i];
        const double phi = d2 > 0.0 ? d2 * (lt - 1.0) : 0.0;
        dc(static_cast<Eigen::Index>(i), 0) += phi * g.x;
        dc(static_cast<Eigen::Index>(i), 1) += phi * g.y;
        // Direct dependence of phi(u - s_i) on s_i.
        const double a = g.x * c(static_cast<Eigen::Index>(i), 0) + g.y * c(static_cast<Eigen::Index>(i), 1);
        ds[i] = ds[i] - (2.0 * a * lt) * r;
      }
      dc(K, 0) += g.x;
      dc(K, 1) += g.y;
      dc(K + 1, 0) += u.x * g.x;
      dc(K + 1, 1) += u.x * g.y;
      dc(K + 2, 0) += u.y * g.x;
      dc(K + 2, 1) += u.y * g.y;
    }
    // Adjoint of the solve (the system matrix is symmetric).
    const Eigen::MatrixXd lam = system.solve(dc);
    out.d_target.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      out.d_target[i] = (1.0 / scale) * Point{lam(static_cast<Eigen::Index>(i), 0),
                                               lam(static_cast<Eigen::Index>(i), 1)};
    }
    // dL/dL_ab = -sum_col lam_a c_b; the system depends on s through the kernel
    // block and the [1 P] border.
    for (std::size_t i = 0; i < k; ++i) {
      const auto I = static_cast<Eigen::Index>(i);
      for (std::size_t j = 0; j < k; ++j) {
        if (i == j) continue;
        const auto J = static_cast<Eigen::Index>(j);
        const double gij = -(lam(I, 0) * c(J, 0) + lam(I, 1) * c(J, 1)) -
                           (lam(J, 0) * c(I, 0) + lam(J, 1) * c(I, 1));
        ds[i] = ds[i] + gij * tps_kernel_gradient(s[i] - s[j]);
      }
      for (int d = 0; d < 2; ++d) {
        const Eigen::Index B = K + 1 + d;
        const double g = -(lam(I, 0) * c(B, 0) + lam(I, 1) * c(B, 1)) -
                         (lam(B, 0) * c(I, 0) + lam(B, 1) * c(I, 1));
        if (d == 0) ds[i].x += g; else ds[i].y += g;
      }
    }
    out.d_source.resize(k);
    for (std::size_t i = 0; i < k; ++i) out.d_source[i] = (1.0 / scale) * ds[i];
    return out;
  }

 private:
  int width_;
  int height_;
  CoordLattice lattice_;
  Normalization norm_;
  std::vector<Point> nodes_;
};

/// Result of mutual_loss_with_gradient: loss plus dL/dM1 and dL/dM2.
struct MutualEvaluation {
  double loss = 0.0;
  double term12 = 0.0;
  double term21 = 0.0;
  std::vector<Point> d_m1;
  std::vector<Point> d_m2;
};

/// ||T12 - D2|| m2 + ||T21 - D1|| m1, each a masked mean absolute difference,
/// where T12 = D1 resampled through the spline M2 -> M1 and T21 symmetric.
/// Masks are the rasterized outer rings of M1/M2 and are treated as constants
/// in the gradient.
inline MutualEvaluation mutual_loss_with_gradient(const ImageBuf& D1, const ImageBuf& D2,
                                                  const MeshGrid& M1, const MeshGrid& M2,
                                                  bool want_grad, int stride = 1) {
  if (!D1.same_shape(D2)) throw ArgumentError("mutual_loss: images differ in size");
  if (D1.channels() != 1) throw ArgumentError("mutual_loss: expects grayscale images");
  if (!M1.same_dims(M2)) throw ArgumentError("mutual_loss: mesh dimensions differ");
  const int w = D1.width();
  const int h = D1.height();
  const ImageBuf m1 = mesh_region_mask(M1, w, h);
  const ImageBuf m2 = mesh_region_mask(M2, w, h);
  const MutualTerm term(w, h, stride);
  // T12(q) = D1(f(q)), f: M2 -> M1, compared with D2 on m2.
  auto a = term.evaluate(D1, D2, m2, M2, M1, want_grad);
  auto b = term.evaluate(D2, D1, m1, M1, M2, want_grad);
  MutualEvaluation out;
  out.term12 = a.loss;
  out.term21 = b.loss;
  out.loss = a.loss + b.loss;
  if (want_grad) {
    out.d_m1.resize(M1.size());
    out.d_m2.resize(M2.size());
    for (std::size_t i = 0; i < M1.size(); ++i) {
      out.d_m1[i] = a.d_target[i] + b.d_source[i];
      out.d_m2[i] = a.d_source[i] + b.d_target[i];
    }
  }
  return out;
}

inline double mutual_loss(const ImageBuf& D1, const ImageBuf& D2, const MeshGrid& M1, const MeshGrid& M2) {
  return mutual_loss_with_gradient(D1, D2, M1, M2, false).loss;
}

// ---------------------------------------------------------------------------
// Mesh fitting.

struct LossRecord {
  double rect = 0.0;
  double mutual = 0.0;
  double total = 0.0;
};

/// Mutual-loss setup of the coarse stage: two fixed perturbations of the input
/// and the splines that carry the input mesh into each perturbed frame.
struct MutualSetup {
  ImageBuf d1;
  ImageBuf d2;
  TpsCoefficients to_d1;  // regular(input) -> P1
  TpsCoefficients to_d2;  // regular(input) -> P2
  double lambda = 0.5;
  int stride = 8;
};

/// Builds D1, D2 from `input` with two seeded perturbations of strength sigma.
inline MutualSetup make_mutual_setup(const ImageBuf& input, int rows, int cols, double sigma,
                                     std::uint64_t seed, double lambda) {
  const int w = input.width();
  const int h = input.height();
  const MeshGrid regular = frame_grid(rows, cols, w, h);
  DeformationSpec spec;
  spec.rows = rows;
  spec.cols = cols;
  spec.sigma = sigma;
  spec.seed = seed;
  const MeshGrid p1 = random_mesh(spec, w, h);
  spec.seed = seed ^ 0x5851f42d4c957f2dULL;
  const MeshGrid p2 = random_mesh(spec, w, h);
  MutualSetup m;
  m.d1 = apply_deformation(input, p1);
  m.d2 = apply_deformation(input, p2);
  m.to_d1 = solve_tps(regular, p1);
  m.to_d2 = solve_tps(regular, p2);
  m.lambda = lambda;
  return m;
}

/// One level of the continuation schedule used inside a stage.
///
/// Levels run in order, each starting from the previous level's best mesh.
/// A level may blur the images, replace them by their text-energy envelope
/// (local detail magnitude, blurred and normalized to unit mean), score with
/// squared instead of absolute differences, and optimize a coarser control
/// grid whose spline is resampled onto the stage grid afterwards.
struct ScaleLevel {
  double sigma = 0.0;
  bool envelope = false;
  bool squared = false;
  int grid = 0;         // control points per side at this level; 0 keeps the stage grid
  double share = 1.0;   // relative share of the stage's iteration budget
};

/// Per-stage optimizer settings.
struct StageConfig {
  int iterations = 400;
  double step = 0.5;  // Adam learning rate, working pixels
  std::vector<ScaleLevel> levels{ScaleLevel{}};
  int stride = 4;     // coordinate lattice spacing
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int max_halvings = 8;
  double min_rel_improvement = 1e-4;
  double bending = 0.0;  // weight of the squared second differences of the displacement, per px^2
  const MutualSetup* mutual = nullptr;
};

struct StageResult {
  MeshGrid mesh;
  std::vector<LossRecord> trace;
  double best_loss = 0.0;
  bool converged = false;
  int rejected_steps = 0;  // updates dropped because every halving still folded the mesh
};

/// Blurred local detail magnitude |x - G_1 * x|, scaled to unit mean.
inline ImageBuf text_envelope(const ImageBuf& img, double sigma) {
  const ImageBuf smooth = gaussian_blur(img, 1.0);
  ImageBuf detail = img;
  auto d = detail.data();
  auto s = smooth.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::abs(d[i] - s[i]);
  ImageBuf env = gaussian_blur(detail, sigma);
  const double mean = mean_value(env);
  if (mean > 0.0) env = scaled(env, 1.0 / mean);
  return env;
}

inline ImageBuf level_image(const ImageBuf& img, const ScaleLevel& level) {
  return level.envelope ? text_envelope(img, level.sigma) : gaussian_blur(img, level.sigma);
}

/// Spline of `mesh` (over its regular frame grid) sampled at a rows x cols frame grid.
inline MeshGrid resample_mesh(const MeshGrid& mesh, int rows, int cols, int width, int height) {
  if (mesh.rows() == rows && mesh.cols() == cols) return mesh;
  const MeshGrid from = frame_grid(mesh.rows(), mesh.cols(), width, height);
  return apply_tps(solve_tps(from, mesh, TpsOptions{Normalization::frame(width, height)}),
                   frame_grid(rows, cols, width, height));
}

/// Mesh whose backward map best explains a block-matching flow from `target`
/// to `input`: least squares on s(p) = sum_j B_j(p) mesh_j = p + d(p) over
/// confident lattice blocks, Huber-reweighted, with a small pull towards the
/// regular grid for points the data leaves undetermined. A folded solution is
/// shrunk towards the regular grid until it is valid.
inline MeshGrid mesh_from_flow(const FlowField& flow, int rows, int cols, int w, int h, double min_score = 0.3,
                               double smoothness = 1e-2) {
  const MeshGrid regular = frame_grid(rows, cols, w, h);
  std::vector<Point> pts;
  std::vector<Point> goal;
  for (std::size_t b = 0; b < flow.centers.size(); ++b) {
    if (!flow.textured[b] || !(flow.score[b] >= min_score)) continue;
    pts.push_back(flow.centers[b]);
    goal.push_back(flow.centers[b] + flow.disp[b]);
  }
  const std::size_t k = regular.size();
  if (pts.size() < 3 * k) return regular;
  const TpsBasis basis(regular, pts, TpsOptions{Normalization::frame(w, h)});
  const auto n = static_cast<Eigen::Index>(pts.size());
  const auto K = static_cast<Eigen::Index>(k);
  Eigen::MatrixXd B(n, K);
  for (Eigen::Index p = 0; p < n; ++p) {
    for (Eigen::Index j = 0; j < K; ++j) B(p, j) = basis.weight(static_cast<std::size_t>(p), static_cast<std::size_t>(j));
  }
  Eigen::MatrixXd S(n, 2);
  for (Eigen::Index p = 0; p < n; ++p) S.row(p) << goal[static_cast<std::size_t>(p)].x, goal[static_cast<std::size_t>(p)].y;
  Eigen::MatrixXd R(K, 2);
  for (Eigen::Index j = 0; j < K; ++j) R.row(j) << regular[static_cast<std::size_t>(j)].x, regular[static_cast<std::size_t>(j)].y;

  // Second differences along rows and columns of the displacement field:
  // affine fields cost nothing, so sparsely observed points extrapolate linearly.
  Eigen::MatrixXd Lap = Eigen::MatrixXd::Zero(K, K);
  auto idx_of = [cols](int r, int c) { return static_cast<std::size_t>(r) * cols + c; };
  auto bend = [&](std::size_t a, std::size_t b, std::size_t c) {
    const Eigen::Index idx[3] = {static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b),
                                 static_cast<Eigen::Index>(c)};
    const double coef[3] = {1.0, -2.0, 1.0};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) Lap(idx[i], idx[j]) += coef[i] * coef[j];
  };
  for (int r = 0; r < rows; ++r)
    for (int c = 1; c + 1 < cols; ++c) bend(idx_of(r, c - 1), idx_of(r, c), idx_of(r, c + 1));
  for (int c = 0; c < cols; ++c)
    for (int r = 1; r + 1 < rows; ++r) bend(idx_of(r - 1, c), idx_of(r, c), idx_of(r + 1, c));

  constexpr double kHuber = 1.5;  // pixels
  Eigen::VectorXd wts = Eigen::VectorXd::Ones(n);
  Eigen::MatrixXd M = R;
  for (int round = 0; round < 6; ++round) {
    const Eigen::MatrixXd BtW = B.transpose() * wts.asDiagonal();
    Eigen::MatrixXd A = BtW * B;
    const double scale = A.trace() / static_cast<double>(K);
    const double ridge = 1e-6 * scale;
    A += smoothness * scale * Lap;
    A.diagonal().array() += ridge;
    M = R + A.ldlt().solve(BtW * (S - B * R));
    const Eigen::MatrixXd res = B * M - S;
    for (Eigen::Index p = 0; p < n; ++p) {
      const double r = res.row(p).norm();
      wts(p) = r <= kHuber ? 1.0 : kHuber / r;
    }
  }
  MeshGrid mesh = regular;
  for (std::size_t j = 0; j < k; ++j) mesh[j] = {M(static_cast<Eigen::Index>(j), 0), M(static_cast<Eigen::Index>(j), 1)};
  for (int shrink = 0; shrink < 20 && !validate_mesh(mesh); ++shrink) {
    for (std::size_t j = 0; j < k; ++j) mesh[j] = regular[j] + 0.5 * (mesh[j] - regular[j]);
  }
  return validate_mesh(mesh) ? mesh : regular;
}

inline MeshGrid correspondence_mesh(const ImageBuf& input, const ImageBuf& target, int rows, int cols,
                                    const FlowOptions& opt = {}, double min_score = 0.3) {
  FlowField fwd = block_match_flow(input, target, opt);
  const FlowField bwd = block_match_flow(target, input, opt);
  const auto ok = consistent_blocks(fwd, bwd, opt.block, target.width(), target.height());
  for (std::size_t k = 0; k < ok.size(); ++k) fwd.textured[k] = fwd.textured[k] && ok[k];
  return mesh_from_flow(fwd, rows, cols, target.width(), target.height(), min_score);
}

/// Mean squared second difference of (mesh - regular) along grid rows and
/// columns; zero for any affine displacement. Adds its gradient to `grad`.
inline double bending_energy(const MeshGrid& mesh, const MeshGrid& regular, std::vector<Point>* grad) {
  const int rows = mesh.rows();
  const int cols = mesh.cols();
  double energy = 0.0;
  std::size_t terms = 0;
  std::vector<Point> g(mesh.size());
  auto add = [&](std::size_t a, std::size_t b, std::size_t c) {
    const Point d = (mesh[a] - regular[a]) - 2.0 * (mesh[b] - regular[b]) + (mesh[c] - regular[c]);
    energy += d.x * d.x + d.y * d.y;
    ++terms;
    g[a] = g[a] + 2.0 * d;
    g[b] = g[b] - 4.0 * d;
    g[c] = g[c] + 2.0 * d;
  };
  auto at = [cols](int r, int c) { return static_cast<std::size_t>(r) * cols + c; };
  for (int r = 0; r < rows; ++r)
    for (int c = 1; c + 1 < cols; ++c) add(at(r, c - 1), at(r, c), at(r, c + 1));
  for (int c = 0; c < cols; ++c)
    for (int r = 1; r + 1 < rows; ++r) add(at(r - 1, c), at(r, c), at(r + 1, c));
  if (terms == 0) return 0.0;
  const double inv = 1.0 / static_cast<double>(terms);
  if (grad) {
    for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] = (*grad)[i] + inv * g[i];
  }
  return energy * inv;
}

namespace detail {

struct LevelObjective {
  RectObjective rect;
  std::optional<MutualTerm> term;
  ImageBuf d1;
  ImageBuf d2;
  const MutualSetup* mutual = nullptr;
  MeshGrid regular;
  double bending = 0.0;

  LossRecord evaluate(const MeshGrid& mesh, std::vector<Point>* grad) const {
    LossRecord rec = evaluate_data(mesh, grad);
    if (bending > 0.0) {
      std::vector<Point> g(mesh.size());
      rec.total += bending * bending_energy(mesh, regular, grad ? &g : nullptr);
      if (grad) {
        for (std::size_t i = 0; i < g.size(); ++i) (*grad)[i] = (*grad)[i] + bending * g[i];
      }
    }
    return rec;
  }

  LossRecord evaluate_data(const MeshGrid& mesh, std::vector<Point>* grad) const {
    LossRecord rec;
    rec.rect = rect.evaluate(mesh, grad);
    rec.total = rec.rect;
    if (!mutual) return rec;
    MeshGrid m1 = apply_tps(mutual->to_d1, mesh);
    MeshGrid m2 = apply_tps(mutual->to_d2, mesh);
    const ImageBuf mask1 = mesh_region_mask(m1, d1.width(), d1.height());
    const ImageBuf mask2 = mesh_region_mask(m2, d1.width(), d1.height());
    const bool g = grad != nullptr;
    auto a = term->evaluate(d1, d2, mask2, m2, m1, g);
    auto b = term->evaluate(d2, d1, mask1, m1, m2, g);
    rec.mutual = a.loss + b.loss;
    rec.total = coarse_loss(rec.rect, rec.mutual, mutual->lambda);
    if (g) {
      for (std::size_t i = 0; i < mesh.size(); ++i) {
        const Point g1 = a.d_target[i] + b.d_source[i];
        const Point g2 = a.d_source[i] + b.d_target[i];
        const auto j1 = tps_jacobian(mutual->to_d1, mesh[i]);
        const auto j2 = tps_jacobian(mutual->to_d2, mesh[i]);
        const Point chain{j1[0] * g1.x + j1[2] * g1.y + j2[0] * g2.x + j2[2] * g2.y,
                          j1[1] * g1.x + j1[3] * g1.y + j2[1] * g2.x + j2[3] * g2.y};
        (*grad)[i] = (*grad)[i] + mutual->lambda * chain;
      }
    }
    return rec;
  }
};

}  // namespace detail

/// First-order descent of the (rect [+ lambda * mutual]) loss over the mesh.
///
/// Adam updates; a step that folds the mesh is halved up to max_halvings
/// times and dropped if it still folds. Each continuation level starts from
/// the previous level's best mesh; the returned mesh is the best one of the
/// last level. A level ends early once its best loss improves by less than
/// min_rel_improvement over the last 10% of its budget, which is what
/// `converged` reports for the last level.
inline StageResult fit_mesh(const ImageBuf& input_hf, const ImageBuf& target_hf, const MeshGrid& init,
                            const StageConfig& cfg) {
  if (cfg.iterations < 1) throw ArgumentError("fit_mesh: iterations must be >= 1");
  if (cfg.levels.empty()) throw ArgumentError("fit_mesh: empty level schedule");
  if (!validate_mesh(init)) throw GeometryError("fit_mesh: initial mesh is folded");
  const int levels = static_cast<int>(cfg.levels.size());
  const int tw = target_hf.width();
  const int th = target_hf.height();
  double share_total = 0.0;
  for (const auto& l : cfg.levels) share_total += l.share;

  StageResult result;
  MeshGrid mesh = init;
  int used = 0;

  for (int level = 0; level < levels; ++level) {
    const ScaleLevel& lv = cfg.levels[level];
    const int rows = lv.grid > 0 ? lv.grid : init.rows();
    const int cols = lv.grid > 0 ? lv.grid : init.cols();
    mesh = resample_mesh(mesh, rows, cols, tw, th);
    if (!validate_mesh(mesh)) mesh = resample_mesh(init, rows, cols, tw, th);
    const std::size_t k = mesh.size();

    detail::LevelObjective obj{RectObjective(level_image(input_hf, lv), level_image(target_hf, lv), rows, cols,
                                             cfg.stride),
                               std::nullopt, ImageBuf(), ImageBuf(), cfg.mutual, frame_grid(rows, cols, tw, th),
                               cfg.bending};
    obj.rect.set_squared(lv.squared);
    if (cfg.mutual) {
      obj.term.emplace(cfg.mutual->d1.width(), cfg.mutual->d1.height(), cfg.mutual->stride);
      obj.d1 = level_image(cfg.mutual->d1, lv);
      obj.d2 = level_image(cfg.mutual->d2, lv);
    }
    int budget = level == levels - 1
                     ? cfg.iterations - used
                     : static_cast<int>(std::lround(cfg.iterations * lv.share / share_total));
    budget = std::max(1, budget);
    used += budget;
    const int window = std::max(10, budget / 10);

    std::vector<Point> m1(k), m2(k);
    int step_count = 0;
    MeshGrid best = mesh;
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<double> best_history;
    bool converged = false;
    std::vector<Point> grad;
    for (int it = 0; it < budget; ++it) {
      const LossRecord rec = obj.evaluate(mesh, &grad);
      if (!std::isfinite(rec.total)) throw NumericalError("fit_mesh: non-finite loss");
      result.trace.push_back(rec);
      if (rec.total < best_loss) {
        best_loss = rec.total;
        best = mesh;
      }
      best_history.push_back(best_loss);
      if (static_cast<int>(best_history.size()) > window) {
        const double before = best_history[best_history.size() - 1 - window];
        if (before - best_loss <= cfg.min_rel_improvement * std::abs(before)) {
          converged = true;
          break;
        }
      }
      if (it + 1 == budget) break;

      // Adam step.
      ++step_count;
      const double c1 = 1.0 - std::pow(cfg.beta1, step_count);
      const double c2 = 1.0 - std::pow(cfg.beta2, step_count);
      std::vector<Point> delta(k);
      for (std::size_t i = 0; i < k; ++i) {
        m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * grad[i];
        m2[i] = {cfg.beta2 * m2[i].x + (1.0 - cfg.beta2) * grad[i].x * grad[i].x,
                 cfg.beta2 * m2[i].y + (1.0 - cfg.beta2) * grad[i].y * grad[i].y};
        delta[i] = {-cfg.step * (m1[i].x / c1) / (std::sqrt(m2[i].x / c2) + cfg.epsilon),
                    -cfg.step * (m1[i].y / c1) / (std::sqrt(m2[i].y / c2) + cfg.epsilon)};
      }
      double scale = 1.0;
      bool accepted = false;
      for (int h = 0; h <= cfg.max_halvings && !accepted; ++h, scale *= 0.5) {
        MeshGrid trial = mesh;
        for (std::size_t i = 0; i < k; ++i) trial[i] = trial[i] + scale * delta[i];
        if (validate_mesh(trial)) {
          mesh = std::move(trial);
          accepted = true;
        }
      }
      if (!accepted) ++result.rejected_steps;
    }
    mesh = best;
    if (level == levels - 1) {
      result.best_loss = best_loss;
      result.converged = converged;
    }
  }
  result.mesh = resample_mesh(mesh, init.rows(), init.cols(), tw, th);
  return result;
}

// ---------------------------------------------------------------------------
// Coarse-to-fine pipeline.

struct FitConfig {
  int grid_rows = 9;
  int grid_cols = 9;
  double lambda = 0.5;
  double beta_train = FourierConfig::kTrainBeta;
  int iters_coarse = 400;
  int iters_refine = 200;
  double step = 0.5;         // coarse Adam learning rate, working pixels
  double refine_step = 0.1;  // refinement learning rate; the residual is small
  int working_size = 384;   // longest side of the coarse-stage frame
  int refine_size = 768;    // longest side of the refinement frame (native if smaller)
  std::uint64_t seed = 0;
  double mutual_sigma = 0.03;
  double bending = 1e-3;
  bool use_mutual = true;
  bool use_fourier = true;
  bool use_refine = true;
  bool correspondence_init = true;
  FlowOptions init_flow{.levels = 2, .block = 16, .step = 8, .search = 32, .refine = 2, .median = 5,
                        .min_variance = 1e-4};
  std::variant<double, std::string> blank = FourierConfig::kDefaultBlank;
  std::vector<ScaleLevel> coarse_levels{{1.0, false, false, 0, 1.0}, {0.0, false, false, 0, 2.0}};
  std::vector<ScaleLevel> refine_levels{{1.0, false, false, 0, 1.0}, {0.0, false, false, 0, 1.0}};
  int stride = 4;
  int mutual_stride = 8;

  void validate() const {
    if (grid_rows < 2 || grid_cols < 2) throw ArgumentError("grid must be at least 2x2");
    if (!(lambda >= 0.0)) throw ArgumentError("lambda must be >= 0");
    if (iters_coarse < 1 || iters_refine < 1) throw ArgumentError("iteration budgets must be >= 1");
    if (!(beta_train >= 0.0 && beta_train <= 0.5)) throw ArgumentError("beta must lie in the range [0, 0.5]");
    if (!(step > 0.0) || !(refine_step > 0.0)) throw ArgumentError("step must be > 0");
    if (working_size < 16 || refine_size < 16) throw ArgumentError("working sizes must be >= 16");
    if (!(mutual_sigma >= 0.0)) throw ArgumentError("mutual sigma must be >= 0");
    if (!(bending >= 0.0)) throw ArgumentError("bending weight must be >= 0");
    if (stride < 1 || mutual_stride < 1) throw ArgumentError("lattice strides must be >= 1");
  }
};

struct FitStageTrace {
  std::string stage;  // "coarse" or "refine"
  LossRecord loss;
};

struct FitResult {
  MeshGrid mesh_coarse;   // native input pixels, at the native regular grid of the target frame
  MeshGrid mesh_refined;  // coarse and refinement maps composed (equals mesh_coarse without refinement)
  ImageBuf dewarped;      // native resolution, target frame, input channels
  std::vector<FitStageTrace> loss_trace;
  bool converged = false;
  // Working-resolution internals.
  MeshGrid working_coarse;
  MeshGrid working_refine;
};

/// Working-frame size for an image whose larger side is clipped to `limit`.
inline std::pair<int, int> working_dims(int width, int height, int limit) {
  const int longest = std::max(width, height);
  if (longest <= limit) return {width, height};
  const double s = static_cast<double>(limit) / longest;
  return {std::max(2, static_cast<int>(std::lround(width * s))), std::max(2, static_cast<int>(std::lround(height * s)))};
}

/// Pixel-center-aligned coordinate change between a native and a working frame.
struct FrameScale {
  double sx = 1.0;  // native / working
  double sy = 1.0;
  Point to_native(Point p) const noexcept { return {(p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5}; }
  Point to_working(Point p) const noexcept { return {(p.x + 0.5) / sx - 0.5, (p.y + 0.5) / sy - 0.5}; }
};

/// High-frequency (or plain luma) copy used by the losses.
inline ImageBuf loss_image(const ImageBuf& gray, const FitConfig& cfg) {
  if (!cfg.use_fourier) return gray;
  FourierConfig fc;
  fc.beta = cfg.beta_train;
  fc.blank = cfg.blank;
  return fourier_convert(gray, fc);
}

namespace detail {

// Median of the outermost pixel ring.
inline double border_level(const ImageBuf& img) {
  std::vector<double> ring;
  const int w = img.width();
  const int h = img.height();
  for (int x = 0; x < w; ++x) {
    ring.push_back(img.at(x, 0));
    if (h > 1) ring.push_back(img.at(x, h - 1));
  }
  for (int y = 1; y + 1 < h; ++y) {
    ring.push_back(img.at(0, y));
    if (w > 1) ring.push_back(img.at(w - 1, y));
  }
  return median_of(ring);
}

// Loss images of an input/target pair at given frame sizes. Both are shifted
// by the target's border level so that zero padding outside the frame reads
// like whatever surrounds the document at the frame edge.
inline std::pair<ImageBuf, ImageBuf> loss_pair(const ImageBuf& gray_in, const ImageBuf& gray_tg, int wi, int hi,
                                               int wt, int ht, const FitConfig& cfg) {
  ImageBuf in = loss_image(resize(gray_in, wi, hi), cfg);
  ImageBuf tg = loss_image(resize(gray_tg, wt, ht), cfg);
  const double level = border_level(tg);
  for (double& v : in.data()) v -= level;
  for (double& v : tg.data()) v -= level;
  return {std::move(in), std::move(tg)};
}

// Correspondence start for the coarse mesh; the input is matched in the
// target frame and the result scaled back to input pixels.
inline MeshGrid coarse_start(const ImageBuf& in_hf, const ImageBuf& tg_hf, const FitConfig& cfg) {
  const int wt = tg_hf.width();
  const int ht = tg_hf.height();
  const bool same = in_hf.width() == wt && in_hf.height() == ht;
  MeshGrid m = correspondence_mesh(same ? in_hf : resize(in_hf, wt, ht), tg_hf, cfg.grid_rows, cfg.grid_cols,
                                   cfg.init_flow);
  const MeshGrid regular = frame_grid(cfg.grid_rows, cfg.grid_cols, in_hf.width(), in_hf.height());
  if (!same) {
    const FrameScale to_target{static_cast<double>(in_hf.width()) / wt, static_cast<double>(in_hf.height()) / ht};
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = to_target.to_native(m[i]);
    if (!validate_mesh(m)) return regular;
  }
  // Keep the estimate only when it beats the plain grid; an already aligned
  // pair then starts (and stays) at the identity.
  const RectObjective rect(in_hf, tg_hf, cfg.grid_rows, cfg.grid_cols, cfg.stride);
  return rect.evaluate(m, nullptr) < rect.evaluate(regular, nullptr) ? m : regular;
}

}  // namespace detail

/// Per-image counterpart of the coarse and refinement transformers.
///
/// The coarse stage fits a mesh against the flat reference at the working
/// size, starting from a block-matching estimate. The refinement stage fits a
/// fresh mesh on the coarse result at the (larger) refinement size. Both
/// coordinate maps are composed before a single native resample.
inline FitResult coarse_to_fine_dewarp(const ImageBuf& input, const ImageBuf& target, const FitConfig& cfg) {
  cfg.validate();
  const ImageBuf gray_in = to_grayscale(input);
  const ImageBuf gray_tg = to_grayscale(target);
  const auto [wi, hi] = working_dims(input.width(), input.height(), cfg.working_size);
  const auto [wt, ht] = working_dims(target.width(), target.height(), cfg.working_size);
  const FrameScale in_scale{static_cast<double>(input.width()) / wi, static_cast<double>(input.height()) / hi};
  const FrameScale tg_scale{static_cast<double>(target.width()) / wt, static_cast<double>(target.height()) / ht};
  const auto [in_hf, tg_hf] = detail::loss_pair(gray_in, gray_tg, wi, hi, wt, ht, cfg);

  FitResult result;
  const MeshGrid regular_t = frame_grid(cfg.grid_rows, cfg.grid_cols, wt, ht);
  const MeshGrid init = cfg.correspondence_init ? detail::coarse_start(in_hf, tg_hf, cfg)
                                                : frame_grid(cfg.grid_rows, cfg.grid_cols, wi, hi);

  // Coarse stage.
  StageConfig coarse;
  coarse.iterations = cfg.iters_coarse;
  coarse.step = cfg.step;
  coarse.levels = cfg.coarse_levels;
  coarse.stride = cfg.stride;
  coarse.bending = cfg.bending;
  std::optional<MutualSetup> mutual;
  if (cfg.use_mutual && cfg.lambda > 0.0) {
    mutual = make_mutual_setup(in_hf, cfg.grid_rows, cfg.grid_cols, cfg.mutual_sigma, cfg.seed, cfg.lambda);
    mutual->stride = cfg.mutual_stride;
    coarse.mutual = &*mutual;
  }
  StageResult cs = fit_mesh(in_hf, tg_hf, init, coarse);
  for (const auto& r : cs.trace) result.loss_trace.push_back({"coarse", r});
  result.working_coarse = cs.mesh;
  result.converged = cs.converged;
  const TpsCoefficients coarse_map = solve_tps(regular_t, cs.mesh, TpsOptions{Normalization::frame(wt, ht)});
  // Native target pixel -> native input pixel under the coarse map.
  auto coarse_native = [&](Point p) { return in_scale.to_native(apply_tps(coarse_map, tg_scale.to_working(p))); };

  // Refinement stage, on the coarse result.
  std::optional<TpsCoefficients> refine_map;
  FrameScale rt_scale;
  if (cfg.use_refine) {
    const auto [wri, hri] = working_dims(input.width(), input.height(), cfg.refine_size);
    const auto [wrt, hrt] = working_dims(target.width(), target.height(), cfg.refine_size);
    const FrameScale ri_scale{static_cast<double>(input.width()) / wri, static_cast<double>(input.height()) / hri};
    rt_scale = {static_cast<double>(target.width()) / wrt, static_cast<double>(target.height()) / hrt};
    const auto [rin_hf, rtg_hf] = detail::loss_pair(gray_in, gray_tg, wri, hri, wrt, hrt, cfg);
    const ImageBuf coarse_hf = warp_with(rin_hf, wrt, hrt, [&](Point p) {
      return ri_scale.to_working(coarse_native(rt_scale.to_native(p)));
    });
    const MeshGrid regular_r = frame_grid(cfg.grid_rows, cfg.grid_cols, wrt, hrt);
    StageConfig refine;
    refine.iterations = cfg.iters_refine;
    refine.step = cfg.refine_step;
    refine.levels = cfg.refine_levels;
    refine.stride = cfg.stride;
    refine.bending = cfg.bending;
    StageResult rs = fit_mesh(coarse_hf, rtg_hf, regular_r, refine);
    for (const auto& r : rs.trace) result.loss_trace.push_back({"refine", r});
    result.working_refine = rs.mesh;
    result.converged = result.converged && rs.converged;
    refine_map = solve_tps(regular_r, rs.mesh, TpsOptions{Normalization::frame(wrt, hrt)});
  } else {
    result.working_refine = regular_t;
  }

  auto compose = [&](Point p) {
    if (refine_map) p = rt_scale.to_native(apply_tps(*refine_map, rt_scale.to_working(p)));
    return coarse_native(p);
  };
  const MeshGrid native_regular = frame_grid(cfg.grid_rows, cfg.grid_cols, target.width(), target.height());
  result.mesh_coarse = native_regular;
  result.mesh_refined = native_regular;
  for (std::size_t i = 0; i < native_regular.size(); ++i) {
    result.mesh_coarse[i] = coarse_native(native_regular[i]);
    result.mesh_refined[i] = compose(native_regular[i]);
  }
  result.dewarped = warp_with(input, target.width(), target.height(), compose);
  return result;
}

}  // namespace fdr

#endif  // FDR_FITLOSS_HPP
