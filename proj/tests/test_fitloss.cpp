#include <gtest/gtest.h>

#include "fdr/fitloss.hpp"
#include "fdr/testpage.hpp"
#include "support.hpp"

namespace fdr {
namespace {

MeshGrid half_pixel_jitter(int rows, int cols, int w, int h, std::uint64_t seed) {
  // Samples land near cell centers, away from the bilinear kinks at integers.
  MeshGrid m = frame_grid(rows, cols, w, h);
  Xoshiro256 rng(seed);
  for (Point& p : m.points()) p = p + Point{0.5 + rng.uniform(-0.1, 0.1), 0.5 + rng.uniform(-0.1, 0.1)};
  return m;
}

ImageBuf two_level(ImageBuf img) {
  for (double& v : img.data()) v = v > 0.5 ? 0.96 : 0.1;
  return img;
}

double fd_component(const RectObjective& obj, const MeshGrid& m, std::size_t i, bool y, double h) {
  MeshGrid a = m;
  MeshGrid b = m;
  (y ? a[i].y : a[i].x) += h;
  (y ? b[i].y : b[i].x) -= h;
  return (obj.evaluate(a, nullptr) - obj.evaluate(b, nullptr)) / (2 * h);
}

TEST(RectificationLoss, MeanAbsoluteDifference) {
  const ImageBuf a(4, 4, 1, 0.2);
  const ImageBuf b(4, 4, 1, 0.5);
  EXPECT_DOUBLE_EQ(rectification_loss(a, b), 0.3);
  EXPECT_EQ(rectification_loss(a, a), 0.0);
  EXPECT_THROW(rectification_loss(a, ImageBuf(4, 5)), ArgumentError);
  EXPECT_THROW(rectification_loss(ImageBuf(4, 4, 3), ImageBuf(4, 4, 3)), ArgumentError);
  EXPECT_DOUBLE_EQ(coarse_loss(0.1, 0.2, 0.5), 0.2);
  EXPECT_THROW(coarse_loss(0.1, 0.2, -1.0), ArgumentError);
}

TEST(MeshGradient, ZeroOnUniformImagesAndAtTheOptimum) {
  const ImageBuf u(64, 64, 1, 0.4);
  // Shrunk grid: every sample stays inside the frame, away from the zero padding.
  const MeshGrid m = regular_grid(9, 9, 8.3, 8.3, 55.7, 55.7);
  for (const Point& g : mesh_gradient(u, ImageBuf(64, 64, 1, 0.7), m)) EXPECT_EQ(norm(g), 0.0);

  const ImageBuf page = gaussian_blur(text_page(96, 96, 2), 1.0);
  double total = 0.0;
  for (const Point& g : mesh_gradient(page, page, frame_grid(9, 9, 96, 96))) total += norm(g);
  EXPECT_LT(total, 1e-6);
}

TEST(MeshGradient, MatchesFiniteDifferencesOffKinks) {
  const int n = 96;
  const ImageBuf flat = two_level(text_page(n, n, 3));
  DeformationSpec spec;
  spec.seed = 4;
  spec.sigma = 0.03;
  const ImageBuf warped = two_level(apply_deformation(text_page(n, n, 3), random_mesh(spec, n, n)));
  const MeshGrid m = half_pixel_jitter(9, 9, n, n, 5);
  const auto g = mesh_gradient(warped, flat, m);
  const RectObjective obj(warped, flat, 9, 9, 1);
  int agree = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (bool y : {false, true}) {
      const double an = y ? g[i].y : g[i].x;
      const double fd = fd_component(obj, m, i, y, 0.05);
      agree += std::abs(an - fd) <= 1e-3 * std::max({std::abs(an), std::abs(fd), 1e-12});
    }
  }
  EXPECT_GE(agree, 154);  // 95% of 162
}

TEST(MeshGradient, SquaredVariantMatchesFiniteDifferencesOnSmoothImages) {
  const int n = 80;
  const ImageBuf flat = gaussian_blur(test::noise_image(n, n, 6), 3.0);
  DeformationSpec spec;
  spec.seed = 7;
  spec.sigma = 0.03;
  const ImageBuf warped = apply_deformation(flat, random_mesh(spec, n, n));
  RectObjective obj(warped, flat, 5, 5, 1);
  obj.set_squared(true);
  const MeshGrid m = half_pixel_jitter(5, 5, n, n, 8);
  std::vector<Point> g;
  obj.evaluate(m, &g);
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_NEAR(g[i].x, fd_component(obj, m, i, false, 0.05), 1e-6 * std::max(1e-6, std::abs(g[i].x)) + 1e-12);
    EXPECT_NEAR(g[i].y, fd_component(obj, m, i, true, 0.05), 1e-6 * std::max(1e-6, std::abs(g[i].y)) + 1e-12);
  }
}

TEST(MeshGradient, StridedLatticeAgreesWithItsOwnLoss) {
  const int n = 64;
  const ImageBuf a = two_level(text_page(n, n, 9));
  const ImageBuf b = two_level(text_page(n, n, 10));
  const RectObjective obj(a, b, 5, 5, 4);
  const MeshGrid m = half_pixel_jitter(5, 5, n, n, 11);
  std::vector<Point> g;
  const double base = obj.evaluate(m, &g);
  EXPECT_GT(base, 0.0);
  double dot = 0.0;
  for (const Point& v : g) dot += norm(v);
  EXPECT_GT(dot, 0.0);
  EXPECT_THROW(obj.evaluate(frame_grid(4, 4, n, n), nullptr), ArgumentError);
  MeshGrid folded = frame_grid(5, 5, n, n);
  std::swap(folded.at(2, 2), folded.at(2, 3));
  EXPECT_THROW(mesh_gradient(a, b, folded), GeometryError);
}

TEST(MutualLoss, ZeroForIdenticalPairsAndSymmetric) {
  const ImageBuf page = gaussian_blur(text_page(96, 96, 12), 1.0);
  const MeshGrid reg = frame_grid(9, 9, 96, 96);
  EXPECT_LT(mutual_loss(page, page, reg, reg), 1e-12);

  DeformationSpec spec;
  spec.sigma = 0.02;
  spec.seed = 13;
  const MeshGrid p1 = random_mesh(spec, 96, 96);
  spec.seed = 14;
  const MeshGrid p2 = random_mesh(spec, 96, 96);
  const ImageBuf d1 = apply_deformation(page, p1);
  const ImageBuf d2 = apply_deformation(page, p2);
  const double consistent = mutual_loss(d1, d2, p1, p2);
  EXPECT_NEAR(consistent, mutual_loss(d2, d1, p2, p1), 1e-12);
  // Consistent meshes explain the pair far better than swapped ones.
  EXPECT_LT(consistent, 0.5 * mutual_loss(d1, d2, p2, p1));
}

TEST(MutualLoss, GradientPointsDownhill) {
  const ImageBuf page = gaussian_blur(text_page(96, 96, 15), 1.5);
  DeformationSpec spec;
  spec.sigma = 0.02;
  spec.seed = 16;
  const MeshGrid p1 = random_mesh(spec, 96, 96);
  spec.seed = 17;
  const MeshGrid p2 = random_mesh(spec, 96, 96);
  const ImageBuf d1 = apply_deformation(page, p1);
  const ImageBuf d2 = apply_deformation(page, p2);
  MeshGrid m1 = p1;
  for (Point& p : m1.points()) p = p + Point{1.5, -1.0};
  const MutualEvaluation ev = mutual_loss_with_gradient(d1, d2, m1, p2, true);
  double gn = 0.0;
  for (const Point& g : ev.d_m1) gn += g.x * g.x + g.y * g.y;
  ASSERT_GT(gn, 0.0);
  MeshGrid stepped = m1;
  const double t = 0.2 / std::sqrt(gn);
  for (std::size_t i = 0; i < stepped.size(); ++i) stepped[i] = stepped[i] - t * ev.d_m1[i];
  EXPECT_LT(mutual_loss(d1, d2, stepped, p2), ev.loss);
}

TEST(BendingEnergy, ZeroForAffineAndGradientMatches) {
  const MeshGrid reg = frame_grid(5, 6, 100, 80);
  MeshGrid affine = reg;
  for (Point& p : affine.points()) p = {1.1 * p.x + 0.1 * p.y + 3.0, p.y - 0.05 * p.x};
  EXPECT_LT(bending_energy(affine, reg, nullptr), 1e-20);

  MeshGrid m = reg;
  Xoshiro256 rng(18);
  for (Point& p : m.points()) p = p + Point{rng.normal(), rng.normal()};
  std::vector<Point> g(m.size());
  bending_energy(m, reg, &g);
  const double h = 1e-5;
  for (std::size_t i = 0; i < m.size(); ++i) {
    MeshGrid a = m;
    MeshGrid b = m;
    a[i].x += h;
    b[i].x -= h;
    EXPECT_NEAR(g[i].x, (bending_energy(a, reg, nullptr) - bending_energy(b, reg, nullptr)) / (2 * h), 1e-7);
  }
}

TEST(MeshFromFlow, RecoversAnAffineMapFromExactFlow) {
  const int w = 200;
  const int h = 160;
  FlowField f;
  f.nx = 20;
  f.ny = 16;
  for (int j = 0; j < f.ny; ++j) {
    for (int i = 0; i < f.nx; ++i) {
      const Point c{5.0 + 10.0 * i, 5.0 + 10.0 * j};
      f.centers.push_back(c);
      f.disp.push_back({0.02 * c.x + 3.0, -0.01 * c.y + 0.03 * c.x - 2.0});
      f.score.push_back(0.9);
      f.textured.push_back(1);
    }
  }
  const MeshGrid m = mesh_from_flow(f, 9, 9, w, h);
  const MeshGrid reg = frame_grid(9, 9, w, h);
  for (std::size_t k = 0; k < m.size(); ++k) {
    const Point p = reg[k];
    const Point expect = p + Point{0.02 * p.x + 3.0, -0.01 * p.y + 0.03 * p.x - 2.0};
    EXPECT_LT(norm(m[k] - expect), 1e-3);
  }
  f.score.assign(f.score.size(), 0.0);  // nothing confident
  EXPECT_EQ(mesh_from_flow(f, 9, 9, w, h), reg);
}

TEST(FitMesh, IdentityPairIsAFixedPoint) {
  const ImageBuf page = gaussian_blur(text_page(96, 96, 19), 1.0);
  const MeshGrid reg = frame_grid(9, 9, 96, 96);
  StageConfig cfg;
  cfg.iterations = 20;
  cfg.bending = 1e-3;
  const StageResult r = fit_mesh(page, page, reg, cfg);
  EXPECT_EQ(r.mesh, reg);
  EXPECT_LT(r.trace.front().total, 1e-12);  // spline round-off only
  MeshGrid folded = reg;
  std::swap(folded.at(4, 4), folded.at(4, 5));
  EXPECT_THROW(fit_mesh(page, page, folded, cfg), GeometryError);
  cfg.iterations = 0;
  EXPECT_THROW(fit_mesh(page, page, reg, cfg), ArgumentError);
}

TEST(FitMesh, ReducesTheLossAndTheMeshError) {
  const int n = 128;
  const ImageBuf flat = gaussian_blur(inset_text_page(n, n, 20, 10), 1.0);
  DeformationSpec spec;
  spec.seed = 21;
  spec.sigma = 0.015;
  const MeshGrid gt = random_mesh(spec, n, n);
  const ImageBuf warped = apply_deformation(flat, gt);
  const MeshGrid reg = frame_grid(9, 9, n, n);
  StageConfig cfg;
  cfg.iterations = 150;
  cfg.levels = {{2.0, false, false, 0, 1.0}, {0.0, false, false, 0, 1.0}};
  cfg.bending = 1e-3;
  const StageResult r = fit_mesh(warped, flat, reg, cfg);
  EXPECT_LT(r.best_loss, r.trace.front().total);
  EXPECT_LT(mesh_rmse(r.mesh, gt), mesh_rmse(reg, gt));
  EXPECT_TRUE(validate_mesh(r.mesh));
}

TEST(CoarseToFine, IdentityPairGivesRegularMeshesAndUnchangedImage) {
  const ImageBuf page = inset_text_page(160, 160, 22, 12);
  FitConfig cfg;
  cfg.iters_coarse = 40;
  cfg.iters_refine = 20;
  const FitResult r = coarse_to_fine_dewarp(page, page, cfg);
  const MeshGrid reg = frame_grid(9, 9, 160, 160);
  EXPECT_LT(mesh_rmse(r.mesh_coarse, reg), 1e-6);
  EXPECT_LT(mesh_rmse(r.mesh_refined, reg), 1e-6);
  EXPECT_LT(test::max_abs_diff(r.dewarped, page), 1e-4);
  EXPECT_FALSE(r.loss_trace.empty());
}

TEST(CoarseToFine, KeepsChannelsAndTargetFrame) {
  const ImageBuf gray = inset_text_page(120, 100, 23, 8);
  const std::vector<ImageBuf> planes{gray, gray, gray};
  const ImageBuf rgb = merge_channels(planes);
  FitConfig cfg;
  cfg.iters_coarse = 10;
  cfg.iters_refine = 5;
  cfg.use_mutual = false;
  const FitResult r = coarse_to_fine_dewarp(rgb, resize(gray, 90, 80), cfg);
  EXPECT_EQ(r.dewarped.width(), 90);
  EXPECT_EQ(r.dewarped.height(), 80);
  EXPECT_EQ(r.dewarped.channels(), 3);
  EXPECT_EQ(r.mesh_refined.rows(), 9);
}

TEST(FitConfig, ValidationNamesTheProblem) {
  FitConfig cfg;
  cfg.validate();
  cfg.beta_train = 0.7;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = FitConfig{};
  cfg.grid_rows = 1;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = FitConfig{};
  cfg.lambda = -0.5;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = FitConfig{};
  cfg.iters_refine = 0;
  EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(FrameScale, RoundTripsAndAlignsPixelCenters) {
  const auto [w, h] = working_dims(1000, 500, 384);
  EXPECT_EQ(w, 384);
  EXPECT_EQ(h, 192);
  EXPECT_EQ(working_dims(300, 200, 384), (std::pair{300, 200}));
  const FrameScale s{1000.0 / 384, 500.0 / 192};
  const Point p{12.25, 99.5};
  EXPECT_LT(norm(s.to_working(s.to_native(p)) - p), 1e-12);
  EXPECT_LT(norm(s.to_native({-0.5, -0.5}) - Point{-0.5, -0.5}), 1e-12);
}

}  // namespace
}  // namespace fdr
