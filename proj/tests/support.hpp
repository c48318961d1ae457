#ifndef FDR_TESTS_SUPPORT_HPP
#define FDR_TESTS_SUPPORT_HPP

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "fdr/image.hpp"
#include "fdr/rng.hpp"

namespace fdr::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fdr_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline ImageBuf noise_image(int w, int h, std::uint64_t seed, int channels = 1) {
  ImageBuf img(w, h, channels);
  Xoshiro256 rng(seed);
  for (double& v : img.data()) v = rng.uniform();
  return img;
}

inline double max_abs_diff(const ImageBuf& a, const ImageBuf& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace fdr::test

#endif  // FDR_TESTS_SUPPORT_HPP
