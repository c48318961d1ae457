#include <fstream>

#include <gtest/gtest.h>

#include "fdr/deform.hpp"
#include "fdr/metrics.hpp"
#include "fdr/testpage.hpp"
#include "support.hpp"

namespace fdr {
namespace {

// Full-table Levenshtein oracle.
std::size_t oracle_distance(const std::u32string& a, const std::u32string& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
    }
  }
  return d[a.size()][b.size()];
}

ImageBuf circular_shift(const ImageBuf& img, int dx) {
  ImageBuf out(img.width(), img.height());
  const int w = img.width();
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < w; ++x) out.at(x, y) = img.at((x - dx + w) % w, y);
  }
  return out;
}

TEST(MsSsim, SelfSimilarityIsOne) {
  const ImageBuf page = text_page(256, 256, 1);
  EXPECT_NEAR(ms_ssim(page, page), 1.0, 1e-9);
}

TEST(MsSsim, UniformImagesMatchClosedForm) {
  // Zero variance: every contrast-structure term is exactly 1, so only the
  // coarsest luminance term (weight 0.1333) remains.
  const double u = 0.5;
  const double v = 0.6;
  const double c1 = 1e-4;
  const double expect = std::pow((2 * u * v + c1) / (u * u + v * v + c1), 0.1333);
  EXPECT_NEAR(ms_ssim(ImageBuf(200, 190, 1, u), ImageBuf(200, 190, 1, v)), expect, 1e-9);
}

TEST(MsSsim, DegradesWithDistortionAndValidatesInputs) {
  const ImageBuf page = text_page(256, 256, 2);
  DeformationSpec spec;
  spec.seed = 3;
  const double warped = ms_ssim(apply_deformation(page, random_mesh(spec, 256, 256)), page);
  EXPECT_LT(warped, 0.5);
  EXPECT_GE(warped, 0.0);
  EXPECT_THROW(ms_ssim(ImageBuf(100, 300), ImageBuf(100, 300)), ArgumentError);
  EXPECT_THROW(ms_ssim(ImageBuf(200, 200), ImageBuf(201, 200)), ArgumentError);
}

TEST(LocalDistortion, RecoversKnownShifts) {
  const ImageBuf tex = gaussian_blur(test::noise_image(256, 256, 4), 1.0);
  EXPECT_LT(local_distortion(tex, tex), 0.05);
  for (int shift : {1, 2, 4, 8}) {
    const double ld = local_distortion(circular_shift(tex, shift), tex);
    EXPECT_NEAR(ld, shift, 0.2 * shift) << "shift " << shift;
  }
}

TEST(LocalDistortion, TexturelessInputIsUndefined) {
  const ImageBuf flat(128, 128, 1, 0.9);
  EXPECT_THROW(local_distortion(flat, flat), MetricUndefinedError);
}

TEST(Cer, MatchesOracleOnRandomPairs) {
  Xoshiro256 rng(5);
  const std::u32string alphabet = U"abcde fgé漢";
  for (int trial = 0; trial < 100; ++trial) {
    std::u32string ref;
    std::u32string hyp;
    const int nr = 1 + static_cast<int>(rng.uniform(0, 30));
    const int nh = static_cast<int>(rng.uniform(0, 30));
    for (int i = 0; i < nr; ++i) ref.push_back(alphabet[static_cast<std::size_t>(rng.uniform(0, 8))]);
    for (int i = 0; i < nh; ++i) hyp.push_back(alphabet[static_cast<std::size_t>(rng.uniform(0, 10))]);
    ref.push_back(U'x');  // never empty after normalization
    const auto nref = normalize_whitespace(ref);
    const auto nhyp = normalize_whitespace(hyp);
    EXPECT_EQ(edit_distance(nhyp, nref), oracle_distance(nhyp, nref));
    // Round trip through UTF-8 so cer() sees bytes.
    auto encode = [](const std::u32string& s) {
      std::string out;
      for (char32_t c : s) {
        if (c < 0x80) {
          out.push_back(static_cast<char>(c));
        } else if (c < 0x800) {
          out.push_back(static_cast<char>(0xC0 | (c >> 6)));
          out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        } else {
          out.push_back(static_cast<char>(0xE0 | (c >> 12)));
          out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
          out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
        }
      }
      return out;
    };
    EXPECT_EQ(cer(encode(hyp), encode(ref)),
              static_cast<double>(oracle_distance(nhyp, nref)) / static_cast<double>(nref.size()));
  }
}

TEST(Cer, ExamplesAndErrors) {
  EXPECT_DOUBLE_EQ(cer("helo", "hello"), 0.2);
  EXPECT_DOUBLE_EQ(cer("", "ab"), 1.0);
  EXPECT_DOUBLE_EQ(cer("  a \n\t b ", "a b"), 0.0);
  EXPECT_THROW(cer("abc", " \n "), ArgumentError);
}

TEST(Utf8, MalformedBytesBecomeReplacementCharacters) {
  EXPECT_EQ(decode_utf8("a\xC3\xA9"), U"aé");
  EXPECT_EQ(decode_utf8("\xFF" "b"), U"�b");
  EXPECT_EQ(decode_utf8("\xE6\xBC"), U"��");
  EXPECT_EQ(normalize_whitespace(U"　x  y "), U"x y");
}

TEST(EvalCorpus, RecordsPerImageErrorsAndAveragesTheRest) {
  test::TempDir dir;
  const ImageBuf page = text_page(256, 256, 6);
  save_image(page, dir / "ref.png");
  std::ofstream(dir / "ocr.txt") << "hallo world";
  std::ofstream(dir / "gt.txt") << "hello world";
  std::vector<EvalPair> pairs(2);
  pairs[0] = {"same", dir / "ref.png", dir / "ref.png", dir / "ocr.txt", dir / "gt.txt"};
  pairs[1] = {"missing", dir / "nope.png", dir / "ref.png", std::nullopt, std::nullopt};
  for (int threads : {1, 2}) {
    const EvalReport r = evaluate_corpus(pairs, threads);
    ASSERT_EQ(r.images.size(), 2u);
    EXPECT_EQ(r.images[0].name, "same");
    EXPECT_NEAR(*r.images[0].ms_ssim, 1.0, 1e-9);
    EXPECT_NEAR(*r.images[0].cer, 1.0 / 11.0, 1e-12);
    EXPECT_FALSE(r.images[0].error.has_value());
    EXPECT_TRUE(r.images[1].error.has_value());
    EXPECT_FALSE(r.images[1].ms_ssim.has_value());
    EXPECT_NEAR(*r.ms_ssim, 1.0, 1e-9);
  }
}

TEST(ReportJson, RoundTripsAndRejectsMalformedInput) {
  EvalReport r;
  r.ms_ssim = 0.75;
  r.images.push_back({"a", 0.75, 1.5, std::nullopt, std::nullopt});
  r.images.push_back({"b", std::nullopt, std::nullopt, std::nullopt, std::string("boom")});
  const EvalReport back = report_from_json(report_to_json(r));
  EXPECT_EQ(*back.ms_ssim, 0.75);
  EXPECT_FALSE(back.ld.has_value());
  ASSERT_EQ(back.images.size(), 2u);
  EXPECT_EQ(*back.images[0].ld, 1.5);
  EXPECT_EQ(*back.images[1].error, "boom");
  EXPECT_THROW(report_from_json(nlohmann::json::array()), FormatError);
  nlohmann::json j = report_to_json(r);
  j["aggregate"]["ms_ssim"] = "high";
  EXPECT_THROW(report_from_json(j), FormatError);
}

}  // namespace
}  // namespace fdr
