// Acceptance run: one PASS/FAIL line per criterion on stdout, details on stderr.
// Exits non-zero when any criterion fails.

#include <chrono>
#include <complex>
#include <cstdio>
#include <functional>
#include <numbers>

#include "fdr/fdr.hpp"
#include "support.hpp"

namespace fdr {
namespace {

using Clock = std::chrono::steady_clock;
using cd = std::complex<double>;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

template <class... Args>
void detail_line(const char* fmt, Args... args) {
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
  std::fflush(stderr);
}

struct Verdict {
  bool pass = false;
  std::string summary;
};

template <class... Args>
std::string format(const char* fmt, Args... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

MeshGrid jittered_unit_grid(double amount, Xoshiro256& rng) {
  MeshGrid m = regular_grid(9, 9, 0.0, 0.0, 1.0, 1.0);
  for (Point& p : m.points()) p = p + Point{rng.uniform(-amount, amount), rng.uniform(-amount, amount)};
  return m;
}

Verdict tps_exactness() {
  const auto t0 = Clock::now();
  Xoshiro256 rng(1);
  double worst_residual = 0.0;
  double worst_weight = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const MeshGrid src = jittered_unit_grid(0.03, rng);
    const MeshGrid dst = jittered_unit_grid(0.05, rng);
    const TpsCoefficients C = solve_tps(src, dst, TpsOptions{Normalization{}});
    for (std::size_t i = 0; i < src.size(); ++i) worst_residual = std::max(worst_residual, norm(apply_tps(C, src[i]) - dst[i]));

    const double a = rng.uniform(0.8, 1.2), b = rng.uniform(-0.2, 0.2), c = rng.uniform(-0.3, 0.3);
    const double d = rng.uniform(-0.2, 0.2), e = rng.uniform(0.8, 1.2), f = rng.uniform(-0.3, 0.3);
    MeshGrid aff = src;
    for (Point& p : aff.points()) p = {a * p.x + b * p.y + c, d * p.x + e * p.y + f};
    const TpsCoefficients A = solve_tps(src, aff, TpsOptions{Normalization{}});
    for (const Point& w : A.weights) worst_weight = std::max(worst_weight, norm(w));
  }
  const double sec = seconds_since(t0);
  return {worst_residual < 1e-8 && worst_weight < 1e-8 && sec < 5.0,
          format("max residual %.2e, max affine-case weight %.2e, %.2f s", worst_residual, worst_weight, sec)};
}

ImageBuf noise(int w, int h, std::uint64_t seed) { return test::noise_image(w, h, seed); }

Verdict fft_correctness() {
  double dft = 0.0, trip = 0.0, parseval = 0.0;
  for (auto [w, h] : {std::pair{7, 7}, std::pair{8, 8}, std::pair{16, 15}, std::pair{32, 32}}) {
    const ImageBuf img = noise(w, h, 100 + w * h);
    const Spectrum s = fft2(img);
    for (int v = 0; v < h; ++v) {
      for (int u = 0; u < w; ++u) {
        cd acc = 0.0;
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const double ang = -2.0 * std::numbers::pi * (static_cast<double>(u) * x / w + static_cast<double>(v) * y / h);
            acc += img.at(x, y) * cd(std::cos(ang), std::sin(ang));
          }
        }
        dft = std::max(dft, std::abs(s.at(detail::shifted_index(v, h), detail::shifted_index(u, w)) - acc));
      }
    }
    trip = std::max(trip, test::max_abs_diff(ifft2(s), img));
    double energy = 0.0, spectral = 0.0;
    for (double x : img.data()) energy += x * x;
    for (std::size_t i = 0; i < s.re.size(); ++i) spectral += s.re[i] * s.re[i] + s.im[i] * s.im[i];
    parseval = std::max(parseval, std::abs(energy - spectral / (static_cast<double>(w) * h)) / energy);
  }
  return {dft < 1e-10 && trip < 1e-10 && parseval < 1e-8,
          format("DFT error %.2e, round trip %.2e, Parseval %.2e", dft, trip, parseval)};
}

Verdict fourier_converter() {
  const ImageBuf img = noise(64, 48, 7);
  const ImageBuf blank = noise(64, 48, 8);
  const double identity = test::max_abs_diff(fourier_swap(img, img, 0.0), img);
  const ImageBuf once = fourier_swap(img, blank, 0.06);
  const double idem = test::max_abs_diff(fourier_swap(once, blank, 0.06), once);
  double residue = 0.0;
  for (auto [w, h] : {std::pair{64, 64}, std::pair{45, 31}, std::pair{50, 77}}) {
    double r = 0.0;
    fourier_swap(noise(w, h, 9), noise(w, h, 10), 0.06, &r);
    residue = std::max(residue, r);
  }
  const ImageBuf dc = fourier_swap(ImageBuf(24, 18, 1, 0.3), ImageBuf(24, 18, 1, 0.96), 0.0);
  double dc_err = 0.0;
  for (double v : dc.data()) dc_err = std::max(dc_err, std::abs(v - 0.96));
  return {identity < 1e-8 && idem < 1e-8 && residue < 1e-8 && dc_err < 1e-8,
          format("identity %.2e, idempotence %.2e, imaginary residue %.2e, DC swap %.2e", identity, idem, residue,
                 dc_err)};
}

// Analytic gradients of one seeded case, evaluated at a jittered grid.
struct GradientCase {
  int ok = 0;
  std::vector<double> analytic;
};

GradientCase gradient_case(int s) {
  constexpr int n = 128;
  ImageBuf flat = gaussian_blur(text_page(n, n, 100 + s), 1.5);
  ImageBuf warped = apply_deformation(flat, random_mesh({.seed = static_cast<std::uint64_t>(s), .sigma = 0.03}, n, n));
  // Two-level images keep the loss away from L1 sign changes under a small probe.
  for (ImageBuf* img : {&flat, &warped}) {
    for (double& v : img->data()) v = v > 0.5 ? 0.96 : 0.1;
  }
  MeshGrid m = frame_grid(9, 9, n, n);
  Xoshiro256 jr(500 + s);
  // Probe points near half-pixel offsets, off the bilinear cell boundaries.
  for (Point& p : m.points()) p = p + Point{0.5 + jr.uniform(-0.1, 0.1), 0.5 + jr.uniform(-0.1, 0.1)};
  const RectObjective obj(warped, flat, 9, 9, 1);
  std::vector<Point> g;
  obj.evaluate(m, &g);
  GradientCase out;
  constexpr double h = 0.05;
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (int axis = 0; axis < 2; ++axis) {
      MeshGrid p = m, q = m;
      (axis ? p[i].y : p[i].x) += h;
      (axis ? q[i].y : q[i].x) -= h;
      const double fd = (obj.evaluate(p, nullptr) - obj.evaluate(q, nullptr)) / (2 * h);
      const double an = axis ? g[i].y : g[i].x;
      out.ok += std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-12}) < 1e-3;
      out.analytic.push_back(an);
    }
  }
  return out;
}

Verdict gradient_check(std::vector<GradientCase>& cases) {
  const auto t0 = Clock::now();
  int passing = 0, worst = 162;
  for (int s = 0; s < 20; ++s) {
    cases.push_back(gradient_case(s));
    passing += cases.back().ok >= 154;  // 95% of 162
    worst = std::min(worst, cases.back().ok);
  }
  const double sec = seconds_since(t0);
  return {passing == 20 && sec < 120.0,
          format("%d/20 cases with >= 95%% agreeing components (worst %d/162), %.1f s", passing, worst, sec)};
}

// One synthetic dewarping case at 512 px.
struct Trial {
  double rmse = 0.0;
  double ms_before = 0.0;
  double ms_after = 0.0;
  double seconds = 0.0;
  MeshGrid mesh;
  ImageBuf dewarped;
};

constexpr int kSide = 512;
constexpr int kInset = 40;

struct Scenario {
  std::string name;
  FitConfig cfg;
  double shadow = 0.0;  // peak darkening of the smooth shadow, 0 for none
};

Trial run_trial(const Scenario& sc, int s) {
  const ImageBuf flat = inset_text_page(kSide, kSide, 1000 + s, kInset);
  const MeshGrid gt = random_mesh({.seed = static_cast<std::uint64_t>(s), .sigma = 0.05}, kSide, kSide);
  ImageBuf warped = apply_deformation(flat, gt);
  if (sc.shadow > 0.0) {
    Xoshiro256 g(7000 + s);
    const double cx = kSide * g.uniform(), cy = kSide * g.uniform(), rad = 0.35 * kSide;
    for (int y = 0; y < kSide; ++y) {
      for (int x = 0; x < kSide; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        warped.at(x, y) *= 1.0 - sc.shadow * std::exp(-r2 / (2 * rad * rad));
      }
    }
  }
  FitConfig cfg = sc.cfg;
  cfg.seed = static_cast<std::uint64_t>(s);
  const auto t0 = Clock::now();
  FitResult r = coarse_to_fine_dewarp(warped, flat, cfg);
  Trial t;
  t.seconds = seconds_since(t0);
  t.rmse = mesh_rmse(r.mesh_refined, gt);
  t.ms_before = ms_ssim(warped, flat);
  t.ms_after = ms_ssim(r.dewarped, flat);
  t.mesh = std::move(r.mesh_refined);
  t.dewarped = std::move(r.dewarped);
  detail_line("  %-12s seed %2d  rmse %.3f  ms-ssim %.4f -> %.4f  %.1f s", sc.name.c_str(), s, t.rmse, t.ms_before,
              t.ms_after, t.seconds);
  return t;
}

std::vector<Trial> run_suite(const Scenario& sc, int seeds) {
  std::vector<Trial> out;
  for (int s = 0; s < seeds; ++s) out.push_back(run_trial(sc, s));
  return out;
}

double mean_of(const std::vector<Trial>& v, double Trial::*field) {
  double acc = 0.0;
  for (const Trial& t : v) acc += t.*field;
  return acc / static_cast<double>(v.size());
}

Scenario full_config() { return {"full", FitConfig{}, 0.0}; }

Scenario no_refine_config() {
  Scenario sc{"no-refine", FitConfig{}, 0.0};
  sc.cfg.use_refine = false;
  return sc;
}

Scenario minimal_config() {
  Scenario sc{"minimal", FitConfig{}, 0.0};
  sc.cfg.use_refine = false;
  sc.cfg.use_mutual = false;
  return sc;
}

Scenario shadow_config(bool fourier) {
  Scenario sc = minimal_config();
  sc.name = fourier ? "shadow+fc" : "shadow-raw";
  sc.shadow = 0.6;
  sc.cfg.use_fourier = fourier;
  return sc;
}

Verdict dewarp_recovery(const std::vector<Trial>& full) {
  int good = 0;
  double slowest = 0.0;
  for (const Trial& t : full) {
    good += t.rmse < 1.5 && t.ms_after > 0.9 && t.ms_after - t.ms_before >= 0.1;
    slowest = std::max(slowest, t.seconds);
  }
  return {good >= 18 && slowest < 60.0,
          format("%d/20 seeds recovered (need 18), mean RMSE %.3f px, mean MS-SSIM %.4f, slowest %.1f s", good,
                 mean_of(full, &Trial::rmse), mean_of(full, &Trial::ms_after), slowest)};
}

Verdict ablation(const std::vector<Trial>& full, const std::vector<Trial>& no_refine,
                 const std::vector<Trial>& minimal) {
  const double f = mean_of(full, &Trial::ms_after);
  const double n = mean_of(no_refine, &Trial::ms_after);
  const double m = mean_of(minimal, &Trial::ms_after);
  return {f >= n && n >= m && f - m >= 0.03,
          format("mean MS-SSIM full %.4f, no-refine %.4f, minimal %.4f, full - minimal %.4f (need >= 0.03)", f, n, m,
                 f - m)};
}

Verdict fourier_benefit(const std::vector<Trial>& with, const std::vector<Trial>& without) {
  int wins = 0;
  for (std::size_t i = 0; i < with.size(); ++i) wins += with[i].rmse < without[i].rmse;
  return {wins >= 16, format("Fourier fit has lower mesh RMSE on %d/20 seeds (need 16), mean %.3f vs %.3f px", wins,
                             mean_of(with, &Trial::rmse), mean_of(without, &Trial::rmse))};
}

Verdict metric_oracles() {
  Xoshiro256 rng(3);
  const std::u32string alphabet = U"abcd efg";
  int cer_exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::string ref = "x", hyp;
    const int nr = static_cast<int>(rng.uniform(0, 30)), nh = static_cast<int>(rng.uniform(0, 30));
    for (int i = 0; i < nr; ++i) ref.push_back(static_cast<char>(alphabet[static_cast<std::size_t>(rng.uniform(0, 8))]));
    for (int i = 0; i < nh; ++i) hyp.push_back(static_cast<char>(alphabet[static_cast<std::size_t>(rng.uniform(0, 8))]));
    const std::u32string a = normalize_whitespace(decode_utf8(hyp)), b = normalize_whitespace(decode_utf8(ref));
    std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
      for (std::size_t j = 1; j <= b.size(); ++j) {
        d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
      }
    }
    cer_exact += cer(hyp, ref) == static_cast<double>(d[a.size()][b.size()]) / static_cast<double>(b.size());
  }

  const ImageBuf page = text_page(256, 256, 1);
  const double self = std::abs(ms_ssim(page, page) - 1.0);
  const double u = 0.5, v = 0.6, c1 = 1e-4;
  const double closed = std::pow((2 * u * v + c1) / (u * u + v * v + c1), kMsSsimWeights.back());
  const double uniform = std::abs(ms_ssim(ImageBuf(200, 190, 1, u), ImageBuf(200, 190, 1, v)) - closed);

  const ImageBuf tex = gaussian_blur(noise(256, 256, 4), 1.0);
  double ld_err = 0.0;
  for (int shift : {1, 2, 4, 8}) {
    ImageBuf moved(256, 256);
    for (int y = 0; y < 256; ++y) {
      for (int x = 0; x < 256; ++x) moved.at(x, y) = tex.at((x - shift + 256) % 256, y);
    }
    ld_err = std::max(ld_err, std::abs(local_distortion(moved, tex) - shift) / shift);
  }
  return {cer_exact == 100 && self < 1e-9 && uniform < 1e-9 && ld_err < 0.2,
          format("CER exact on %d/100, MS-SSIM self %.1e, closed form %.1e, LD relative error %.3f", cer_exact, self,
                 uniform, ld_err)};
}

bool same_trials(const std::vector<Trial>& a, const std::vector<Trial>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].mesh == b[i].mesh) || !std::ranges::equal(a[i].dewarped.data(), b[i].dewarped.data()) ||
        a[i].ms_after != b[i].ms_after) {
      return false;
    }
  }
  return true;
}

// Report JSON of a corpus of dewarped outputs against their flat pages.
std::string corpus_report(const std::vector<Trial>& trials) {
  test::TempDir dir;
  std::vector<EvalPair> pairs;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto out = dir.path() / ("d" + std::to_string(i) + ".png");
    const auto ref = dir.path() / ("r" + std::to_string(i) + ".png");
    save_image(trials[i].dewarped, out);
    save_image(inset_text_page(kSide, kSide, 1000 + static_cast<int>(i), kInset), ref);
    pairs.push_back({"case" + std::to_string(i), out, ref, std::nullopt, std::nullopt});
  }
  return report_to_json(evaluate_corpus(pairs, 1)).dump();
}

Verdict determinism(const std::vector<GradientCase>& grads, const std::vector<std::vector<Trial>>& first,
                    const std::vector<Scenario>& scenarios) {
  constexpr int kRepeatSeeds = 2;
  bool ok = true;
  for (int s = 0; s < 20; ++s) ok = ok && gradient_case(s).analytic == grads[static_cast<std::size_t>(s)].analytic;
  for (std::size_t k = 0; k < scenarios.size(); ++k) {
    const std::vector<Trial> again = run_suite(scenarios[k], kRepeatSeeds);
    const std::vector<Trial> head(first[k].begin(), first[k].begin() + kRepeatSeeds);
    ok = ok && same_trials(again, head) && corpus_report(again) == corpus_report(head);
  }
  return {ok, format("gradients of 20 cases, meshes, images and reports of %d seeds x %zu configurations %s",
                     kRepeatSeeds, scenarios.size(), ok ? "bit-identical" : "differ")};
}

}  // namespace
}  // namespace fdr

int main() {
  using namespace fdr;
  int failures = 0;
  auto report = [&](int id, const char* title, const Verdict& v) {
    std::printf("%s %d %s: %s\n", v.pass ? "PASS" : "FAIL", id, title, v.summary.c_str());
    std::fflush(stdout);
    failures += !v.pass;
  };

  report(1, "TPS exactness", tps_exactness());
  report(2, "FFT correctness", fft_correctness());
  report(3, "Fourier converter", fourier_converter());
  std::vector<GradientCase> grads;
  report(4, "gradient check", gradient_check(grads));

  const std::vector<Scenario> scenarios{full_config(), no_refine_config(), minimal_config(), shadow_config(true),
                                        shadow_config(false)};
  std::vector<std::vector<Trial>> suites;
  for (const Scenario& sc : scenarios) suites.push_back(run_suite(sc, 20));
  report(5, "synthetic dewarping recovery", dewarp_recovery(suites[0]));
  report(6, "ablation direction", ablation(suites[0], suites[1], suites[2]));
  report(7, "Fourier loss benefit", fourier_benefit(suites[3], suites[4]));
  report(8, "metric oracles", metric_oracles());
  report(9, "determinism", determinism(grads, suites, scenarios));
  return failures == 0 ? 0 : 1;
}
