#ifndef FDR_CLI_HPP
#define FDR_CLI_HPP

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fdr/deform.hpp"
#include "fdr/error.hpp"
#include "fdr/fitloss.hpp"
#include "fdr/fourier.hpp"
#include "fdr/image.hpp"
#include "fdr/image_io.hpp"
#include "fdr/mesh.hpp"
#include "fdr/metrics.hpp"
#include "fdr/testpage.hpp"

namespace fdr::cli {

namespace fs = std::filesystem;

/// Process exit codes: stable contract of every subcommand.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitFailure = 2 };

// ---------------------------------------------------------------------------
// Logging (standard error only).

enum class LogLevel { error = 0, warn = 1, info = 2, debug = 3 };

inline std::atomic<LogLevel>& log_level() {
  static std::atomic<LogLevel> level{LogLevel::info};
  return level;
}

inline void log(LogLevel level, const std::string& msg) {
  if (level > log_level().load()) return;
  static constexpr const char* kNames[] = {"error", "warn", "info", "debug"};
  std::ostringstream line;
  line << "fdr: " << kNames[static_cast<int>(level)] << ": " << msg << '\n';
  std::cerr << line.str() << std::flush;
}

/// Default worker count: FDR_THREADS when set to a positive integer, else 1.
inline int default_threads() {
  const char* env = std::getenv("FDR_THREADS");
  if (!env) return 1;
  int n = 0;
  const std::string_view s(env);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), n);
  if (ec != std::errc() || ptr != s.data() + s.size() || n < 1) {
    log(LogLevel::warn, "ignoring FDR_THREADS='" + std::string(env) + "'");
    return 1;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Atomic output: write to a sibling temporary, then rename over the target.

inline void atomic_write(const fs::path& path, const std::function<void(const fs::path&)>& writer) {
  static std::atomic<unsigned> counter{0};
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::ostringstream name;
  name << '.' << path.stem().string() << ".tmp" << std::this_thread::get_id() << '_' << counter++
       << path.extension().string();
  const fs::path tmp = dir / name.str();
  try {
    writer(tmp);
    fs::rename(tmp, path);
  } catch (const fs::filesystem_error& e) {
    std::error_code ignored;
    fs::remove(tmp, ignored);
    throw IoError("cannot write '" + path.string() + "': " + e.code().message());
  } catch (...) {
    std::error_code ignored;
    fs::remove(tmp, ignored);
    throw;
  }
}

inline void write_image(const ImageBuf& img, const fs::path& path) {
  atomic_write(path, [&](const fs::path& tmp) { save_image(img, tmp); });
}

inline void write_text(const std::string& text, const fs::path& path) {
  atomic_write(path, [&](const fs::path& tmp) {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out << text;
    out.close();
    if (!out) throw IoError("write failed for '" + tmp.string() + "'");
  });
}

inline void write_json(const nlohmann::json& j, const fs::path& path) { write_text(j.dump(2) + "\n", path); }

inline void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

// ---------------------------------------------------------------------------
// Option parsing helpers.

/// Blank-paper source: a number in [0,1] is a uniform intensity, anything else an image path.
inline std::variant<double, std::string> parse_blank(const std::string& text) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec == std::errc() && ptr == text.data() + text.size()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("blank intensity must lie in [0, 1]");
    return v;
  }
  if (!fs::is_regular_file(text)) throw IoError("blank image '" + text + "' does not exist");
  return text;
}

/// "9", "9x9" or "9,9" to (rows, cols).
inline std::pair<int, int> parse_grid(const std::string& text) {
  const auto sep = text.find_first_of("x,");
  auto to_int = [&](std::string_view s) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || v < 2) {
      throw ArgumentError("grid must be N or RxC with every side >= 2, got '" + text + "'");
    }
    return v;
  };
  const std::string_view all(text);
  if (sep == std::string::npos) {
    const int n = to_int(all);
    return {n, n};
  }
  return {to_int(all.substr(0, sep)), to_int(all.substr(sep + 1))};
}

/// Shortest round-trip decimal form, used in file names and tables.
inline std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e) || dynamic_cast<const GeometryError*>(&e) ||
      dynamic_cast<const GenerationError*>(&e) || dynamic_cast<const MetricUndefinedError*>(&e)) {
    return kExitFailure;
  }
  if (dynamic_cast<const Error*>(&e)) return kExitUsage;
  return kExitFailure;
}

/// Runs a command body, mapping library errors to exit codes with a diagnostic.
inline int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    log(LogLevel::error, e.what());
    return exit_code_for(e);
  }
}

// ---------------------------------------------------------------------------
// Commands.

struct RestoreOptions {
  fs::path input;
  fs::path output;
  double beta = FourierConfig::kRestoreBeta;
  std::string blank = "0.96";
};

inline int cmd_restore(const RestoreOptions& o) {
  return guarded([&] {
    FourierConfig cfg;
    cfg.beta = o.beta;
    cfg.blank = parse_blank(o.blank);
    cfg.validate();
    const ImageBuf img = load_image(o.input);
    log(LogLevel::info, "restoring " + o.input.string() + " at beta " + format_number(o.beta));
    write_image(fourier_convert_channels(img, cfg), o.output);
    return int{kExitOk};
  });
}

struct FitOptions {
  fs::path input;
  fs::path target;
  fs::path out_dir;
  std::string grid = "9x9";
  double lambda = 0.5;
  double beta = FourierConfig::kTrainBeta;
  double restore_beta = FourierConfig::kRestoreBeta;
  int iters_coarse = 400;
  int iters_refine = 200;
  double step = 0.5;
  double refine_step = 0.1;
  int working_size = 384;
  int refine_size = 768;
  std::uint64_t seed = 0;
  double mutual_sigma = 0.03;
  double bending = 1e-3;
  std::string blank = "0.96";
  bool no_mutual = false;
  bool no_fourier = false;
  bool no_refine = false;
  bool no_init = false;

  FitConfig config() const {
    FitConfig cfg;
    std::tie(cfg.grid_rows, cfg.grid_cols) = parse_grid(grid);
    cfg.lambda = lambda;
    cfg.beta_train = beta;
    cfg.iters_coarse = iters_coarse;
    cfg.iters_refine = iters_refine;
    cfg.step = step;
    cfg.refine_step = refine_step;
    cfg.working_size = working_size;
    cfg.refine_size = refine_size;
    cfg.seed = seed;
    cfg.mutual_sigma = mutual_sigma;
    cfg.bending = bending;
    cfg.blank = parse_blank(blank);
    cfg.use_mutual = !no_mutual;
    cfg.use_fourier = !no_fourier;
    cfg.use_refine = !no_refine;
    cfg.correspondence_init = !no_init;
    cfg.validate();
    return cfg;
  }
};

/// One row per fitter iteration, numbered across both stages.
inline std::string loss_csv(const FitResult& r) {
  std::ostringstream out;
  out << "iteration,loss_rect,loss_mutual,loss_total\n" << std::setprecision(17);
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i) {
    const LossRecord& l = r.loss_trace[i].loss;
    out << i << ',' << l.rect << ',' << l.mutual << ',' << l.total << '\n';
  }
  return out.str();
}

inline int cmd_fit(const FitOptions& o) {
  return guarded([&] {
    const FitConfig cfg = o.config();
    FourierConfig restore;
    restore.beta = o.restore_beta;
    restore.blank = cfg.blank;
    restore.validate();
    const ImageBuf input = load_image(o.input);
    const ImageBuf target = load_image(o.target);
    ensure_directory(o.out_dir);
    log(LogLevel::info, "fitting " + o.input.string() + " against " + o.target.string());
    const FitResult r = coarse_to_fine_dewarp(input, target, cfg);
    log(LogLevel::info, std::string("fit ") + (r.converged ? "converged" : "stopped at the iteration budget") +
                            " after " + std::to_string(r.loss_trace.size()) + " evaluations");
    write_image(r.dewarped, o.out_dir / "dewarped.png");
    write_image(fourier_convert_channels(r.dewarped, restore), o.out_dir / "restored.png");
    write_json(mesh_to_json(r.mesh_coarse), o.out_dir / "mesh_coarse.json");
    write_json(mesh_to_json(r.mesh_refined), o.out_dir / "mesh_refined.json");
    write_text(loss_csv(r), o.out_dir / "loss.csv");
    return int{kExitOk};
  });
}

struct SynthOptions {
  fs::path input;
  fs::path out_dir;
  double sigma = 0.05;
  std::uint64_t seed = 0;
  std::string grid = "9x9";
  double clamp = 3.0;
  double correlation = DeformationSpec{}.correlation;
};

inline int cmd_synth(const SynthOptions& o) {
  return guarded([&] {
    DeformationSpec spec;
    spec.seed = o.seed;
    spec.sigma = o.sigma;
    std::tie(spec.rows, spec.cols) = parse_grid(o.grid);
    spec.clamp = o.clamp;
    spec.correlation = o.correlation;
    spec.validate();
    const ImageBuf flat = load_image(o.input);
    ensure_directory(o.out_dir);
    const MeshGrid mesh = random_mesh(spec, flat.width(), flat.height());
    log(LogLevel::info, "deforming " + o.input.string() + " with seed " + std::to_string(o.seed));
    write_image(apply_deformation(flat, mesh), o.out_dir / "warped.png");
    write_json(mesh_to_json(mesh), o.out_dir / "mesh.json");
    return int{kExitOk};
  });
}

/// Manifest: a JSON array (or {"pairs": [...]}) of
/// {"name"?, "dewarped", "reference", "ocr_text"?, "reference_text"?};
/// relative paths resolve against the manifest's directory.
inline std::vector<EvalPair> read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + path.string() + "': " + e.what());
  }
  if (j.is_object() && j.contains("pairs")) j = j.at("pairs");
  if (!j.is_array()) throw FormatError("manifest: expected an array of pairs");
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  auto text_field = [&](const nlohmann::json& e, const char* key) -> std::optional<std::string> {
    if (!e.contains(key) || e.at(key).is_null()) return std::nullopt;
    if (!e.at(key).is_string()) throw FormatError(std::string("manifest: '") + key + "' must be a string");
    return e.at(key).get<std::string>();
  };
  std::vector<EvalPair> pairs;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    if (!e.is_object()) throw FormatError("manifest: entry " + std::to_string(i) + " is not an object");
    const auto dewarped = text_field(e, "dewarped");
    const auto reference = text_field(e, "reference");
    if (!dewarped || !reference) {
      throw FormatError("manifest: entry " + std::to_string(i) + " needs 'dewarped' and 'reference'");
    }
    EvalPair p;
    p.name = text_field(e, "name").value_or(fs::path(*dewarped).filename().string());
    p.dewarped = resolve(*dewarped);
    p.reference = resolve(*reference);
    if (const auto t = text_field(e, "ocr_text")) p.ocr_text = resolve(*t);
    if (const auto t = text_field(e, "reference_text")) p.reference_text = resolve(*t);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

struct EvalOptions {
  fs::path manifest;
  fs::path report;
  int threads = 1;
};

inline int cmd_eval(const EvalOptions& o) {
  return guarded([&] {
    const auto pairs = read_manifest(o.manifest);
    log(LogLevel::info, "evaluating " + std::to_string(pairs.size()) + " pairs on " + std::to_string(o.threads) +
                            " worker(s)");
    const EvalReport report = evaluate_corpus(pairs, o.threads);
    for (const auto& m : report.images) {
      if (m.error) log(LogLevel::warn, m.name + ": " + *m.error);
    }
    write_json(report_to_json(report), o.report);
    return int{kExitOk};
  });
}

inline const std::vector<double>& default_sweep_betas() {
  static const std::vector<double> betas{0.003, 0.005, 0.008, 0.01, 0.02};
  return betas;
}

struct SweepOptions {
  FitOptions fit;  // input, target, out_dir and fitter flags
  std::vector<double> betas = default_sweep_betas();
  fs::path report;
  bool skip_fit = false;  // input is already dewarped
  std::optional<fs::path> ocr_dir;
  std::optional<fs::path> reference_text;
  int threads = 1;
};

/// Restores the dewarped input at every beta. The summary is a CSV table
/// (beta, output, cer); cer is filled when the OCR output of a restored image
/// is found as <ocr_dir>/<image stem>.txt and a reference text is given.
inline int cmd_sweep_beta(const SweepOptions& o) {
  return guarded([&] {
    if (o.betas.empty()) throw ArgumentError("at least one beta is required");
    for (double b : o.betas) {
      if (!(b >= 0.0 && b <= 0.5)) throw ArgumentError("beta must lie in the range [0, 0.5]");
    }
    const auto blank = parse_blank(o.fit.blank);
    const ImageBuf input = load_image(o.fit.input);
    ImageBuf dewarped = input;
    if (!o.skip_fit) {
      const FitConfig cfg = o.fit.config();
      const ImageBuf target = load_image(o.fit.target);
      log(LogLevel::info, "fitting " + o.fit.input.string() + " before the sweep");
      dewarped = coarse_to_fine_dewarp(input, target, cfg).dewarped;
    }
    ensure_directory(o.fit.out_dir);
    std::optional<std::string> reference;
    if (o.reference_text) reference = read_text_file(*o.reference_text);

    const std::size_t n = o.betas.size();
    std::vector<std::string> outputs(n);
    std::vector<std::optional<double>> cers(n);
    auto run_one = [&](std::size_t i) {
      FourierConfig fc;
      fc.beta = o.betas[i];
      fc.blank = blank;
      const std::string stem = "restored_beta_" + format_number(o.betas[i]);
      outputs[i] = stem + ".png";
      write_image(fourier_convert_channels(dewarped, fc), o.fit.out_dir / outputs[i]);
      if (o.ocr_dir && reference) {
        const fs::path txt = *o.ocr_dir / (stem + ".txt");
        if (fs::is_regular_file(txt)) cers[i] = cer(read_text_file(txt), *reference);
      }
    };
    const std::size_t workers = static_cast<std::size_t>(std::max(1, o.threads));
    for (std::size_t start = 0; start < n; start += workers) {
      std::vector<std::future<void>> jobs;
      for (std::size_t i = start; i < std::min(n, start + workers); ++i) {
        jobs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, run_one, i));
      }
      for (auto& j : jobs) j.get();
    }
    std::ostringstream table;
    table << "beta,output,cer\n" << std::setprecision(17);
    for (std::size_t i = 0; i < n; ++i) {
      table << format_number(o.betas[i]) << ',' << outputs[i] << ',';
      if (cers[i]) table << *cers[i];
      table << '\n';
    }
    write_text(table.str(), o.report);
    return int{kExitOk};
  });
}

struct TestpageOptions {
  fs::path output;
  int width = 512;
  int height = 512;
  std::uint64_t seed = 0;
  int inset = 0;
};

inline int cmd_testpage(const TestpageOptions& o) {
  return guarded([&] {
    if (o.width < 16 || o.height < 16) throw ArgumentError("page dimensions must be >= 16");
    write_image(inset_text_page(o.width, o.height, o.seed, o.inset), o.output);
    return int{kExitOk};
  });
}

// ---------------------------------------------------------------------------
// Command line.

inline void add_fit_flags(CLI::App* cmd, FitOptions& o) {
  cmd->add_option("--grid", o.grid, "Control grid, N or RxC")->capture_default_str();
  cmd->add_option("--lambda", o.lambda, "Mutual-loss weight")->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--beta", o.beta, "Fourier Converter beta of the losses")
      ->check(CLI::Range(0.0, 0.5))
      ->capture_default_str();
  cmd->add_option("--iters-coarse", o.iters_coarse, "Coarse-stage iteration budget")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--iters-refine", o.iters_refine, "Refinement iteration budget")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  cmd->add_option("--step", o.step, "Coarse learning rate, working pixels")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--refine-step", o.refine_step, "Refinement learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  cmd->add_option("--working-size", o.working_size, "Longest side of the coarse loss frame")
      ->check(CLI::Range(16, 1 << 16))
      ->capture_default_str();
  cmd->add_option("--refine-size", o.refine_size, "Longest side of the refinement loss frame")
      ->check(CLI::Range(16, 1 << 16))
      ->capture_default_str();
  cmd->add_option("--seed", o.seed, "Seed of the mutual-loss perturbations")->capture_default_str();
  cmd->add_option("--mutual-sigma", o.mutual_sigma, "Mutual perturbation scale")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  cmd->add_option("--bending", o.bending, "Mesh bending penalty weight")->check(CLI::NonNegativeNumber)->capture_default_str();
  cmd->add_option("--blank", o.blank, "Blank paper: intensity in [0,1] or image path")->capture_default_str();
  cmd->add_flag("--no-mutual", o.no_mutual, "Drop the mutual loss");
  cmd->add_flag("--no-fourier", o.no_fourier, "Fit on raw grayscale");
  cmd->add_flag("--no-refine", o.no_refine, "Skip the refinement stage");
  cmd->add_flag("--no-init", o.no_init, "Start the coarse stage from the regular grid");
}

/// Parses argv and dispatches; returns the process exit code.
inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Flat-reference document dewarping and photometric restoration"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");
  std::string level = "info";
  app.add_option("--log-level", level, "error, warn, info or debug")
      ->check(CLI::IsMember({"error", "warn", "info", "debug"}))
      ->capture_default_str();
  const int threads_default = default_threads();

  RestoreOptions restore;
  auto* c_restore = app.add_subcommand("restore", "Fourier-convert an image per channel");
  c_restore->add_option("input", restore.input, "Input image")->required()->check(CLI::ExistingFile);
  c_restore->add_option("output", restore.output, "Output image (.png/.pgm/.ppm)")->required();
  c_restore->add_option("--beta", restore.beta, "Low-frequency block ratio")
      ->check(CLI::Range(0.0, 0.5))
      ->capture_default_str();
  c_restore->add_option("--blank", restore.blank, "Blank paper: intensity in [0,1] or image path")
      ->capture_default_str();

  FitOptions fit;
  auto* c_fit = app.add_subcommand("fit", "Dewarp an image against its flat reference");
  c_fit->add_option("input", fit.input, "Warped input image")->required()->check(CLI::ExistingFile);
  c_fit->add_option("--target", fit.target, "Flat reference image")->required()->check(CLI::ExistingFile);
  c_fit->add_option("--out", fit.out_dir, "Output directory")->required();
  c_fit->add_option("--restore-beta", fit.restore_beta, "Beta of the restored output")
      ->check(CLI::Range(0.0, 0.5))
      ->capture_default_str();
  add_fit_flags(c_fit, fit);

  SynthOptions synth;
  auto* c_synth = app.add_subcommand("synth", "Randomly deform a flat image");
  c_synth->add_option("input", synth.input, "Flat image")->required()->check(CLI::ExistingFile);
  c_synth->add_option("--out", synth.out_dir, "Output directory")->required();
  c_synth->add_option("--sigma", synth.sigma, "Offset std as a fraction of min(H, W)")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  c_synth->add_option("--grid", synth.grid, "Control grid, N or RxC")->capture_default_str();
  c_synth->add_option("--clamp", synth.clamp, "Offset clamp in units of sigma")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  c_synth->add_option("--correlation", synth.correlation, "Offset correlation length, grid cells")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();

  EvalOptions eval;
  eval.threads = threads_default;
  auto* c_eval = app.add_subcommand("eval", "MS-SSIM, local distortion and CER over a manifest");
  c_eval->add_option("manifest", eval.manifest, "Manifest JSON")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--report", eval.report, "Report JSON")->required();
  c_eval->add_option("--threads", eval.threads, "Worker count (default: FDR_THREADS or 1)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  SweepOptions sweep;
  sweep.threads = threads_default;
  std::string ocr_dir, reference_text;
  auto* c_sweep = app.add_subcommand("sweep-beta", "Restore at several betas and tabulate");
  c_sweep->add_option("input", sweep.fit.input, "Warped (or, with --skip-fit, dewarped) input")
      ->required()
      ->check(CLI::ExistingFile);
  auto* target_opt = c_sweep->add_option("--target", sweep.fit.target, "Flat reference image")->check(CLI::ExistingFile);
  c_sweep->add_option("--out", sweep.fit.out_dir, "Directory of the restored images")->required();
  c_sweep->add_option("--report", sweep.report, "Summary CSV")->required();
  c_sweep->add_option("--betas", sweep.betas, "Beta values")
      ->check(CLI::Range(0.0, 0.5))
      ->delimiter(',')
      ->capture_default_str();
  c_sweep->add_flag("--skip-fit", sweep.skip_fit, "Input is already dewarped");
  c_sweep->add_option("--ocr-dir", ocr_dir, "Directory with <output stem>.txt OCR results")->check(CLI::ExistingDirectory);
  c_sweep->add_option("--reference-text", reference_text, "Ground-truth transcription")->check(CLI::ExistingFile);
  c_sweep->add_option("--threads", sweep.threads, "Worker count (default: FDR_THREADS or 1)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  add_fit_flags(c_sweep, sweep.fit);

  TestpageOptions page;
  auto* c_page = app.add_subcommand("testpage", "Render the synthetic text page");
  c_page->add_option("output", page.output, "Output image")->required();
  c_page->add_option("--width", page.width, "Width in pixels")->capture_default_str();
  c_page->add_option("--height", page.height, "Height in pixels")->capture_default_str();
  c_page->add_option("--seed", page.seed, "Layout seed")->capture_default_str();
  c_page->add_option("--inset", page.inset, "Background border in pixels")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? int{kExitOk} : int{kExitUsage};
  }
  static const std::pair<const char*, LogLevel> kLevels[] = {
      {"error", LogLevel::error}, {"warn", LogLevel::warn}, {"info", LogLevel::info}, {"debug", LogLevel::debug}};
  for (const auto& [name, value] : kLevels) {
    if (level == name) log_level() = value;
  }

  if (c_restore->parsed()) return cmd_restore(restore);
  if (c_fit->parsed()) return cmd_fit(fit);
  if (c_synth->parsed()) return cmd_synth(synth);
  if (c_eval->parsed()) return cmd_eval(eval);
  if (c_sweep->parsed()) {
    if (!sweep.skip_fit && target_opt->count() == 0) {
      log(LogLevel::error, "sweep-beta: --target is required unless --skip-fit is given");
      return kExitUsage;
    }
    if (!ocr_dir.empty()) sweep.ocr_dir = fs::path(ocr_dir);
    if (!reference_text.empty()) sweep.reference_text = fs::path(reference_text);
    return cmd_sweep_beta(sweep);
  }
  if (c_page->parsed()) return cmd_testpage(page);
  return kExitUsage;
}

}  // namespace fdr::cli

#endif  // FDR_CLI_HPP
