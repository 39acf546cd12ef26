#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "ccm/error.hpp"
#include "ccm/image.hpp"

namespace ccm {
namespace {

ImageGrid from_rows(std::vector<std::vector<double>> rows, double pitch = 1.0) {
  std::vector<double> data;
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  return ImageGrid(rows.size(), rows.front().size(), pitch, std::move(data));
}

ImageGrid random_image(std::size_t h, std::size_t w, std::uint64_t seed, double pitch = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageGrid img(h, w, pitch);
  for (double& v : img.data()) v = u(rng);
  return img;
}

double integrated(const ImageGrid& img) { return img.sum() * img.pitch_um() * img.pitch_um(); }

TEST(ImageGrid, RejectsNegativeAndNonFiniteValues) {
  EXPECT_THROW(ImageGrid(1, 2, 1.0, {0.0, -1e-9}), Error);
  EXPECT_THROW(ImageGrid(1, 1, 1.0, {std::nan("")}), Error);
  EXPECT_THROW(ImageGrid(1, 1, 1.0, {INFINITY}), Error);
  EXPECT_THROW(ImageGrid(0, 3, 1.0), Error);
  EXPECT_THROW(ImageGrid(2, 2, 0.0), Error);
  EXPECT_THROW(ImageGrid(2, 2, 1.0, {1.0, 2.0, 3.0}), Error);
}

TEST(ApplyAperture, DiskCoveringImageLeavesItUnchanged) {
  const ImageGrid ones = from_rows({{1, 1, 1, 1}, {1, 1, 1, 1}, {1, 1, 1, 1}, {1, 1, 1, 1}});
  EXPECT_EQ(apply_aperture(ones, ApertureMask::centered(ones, 10.0)), ones);
}

TEST(ApplyAperture, FieldOfViewMatchesPixelCenterOracle) {
  const double pitch = 200.0 / 128.0;
  ImageGrid ones(128, 128, pitch);
  for (double& v : ones.data()) v = 1.0;
  const ImageGrid masked = apply_aperture(ones, ApertureMask::centered(ones, 200.0));

  std::size_t expected = 0;
  for (std::size_t r = 0; r < 128; ++r)
    for (std::size_t c = 0; c < 128; ++c) {
      const double dy = (static_cast<double>(r) - 63.5) * pitch;
      const double dx = (static_cast<double>(c) - 63.5) * pitch;
      if (std::hypot(dx, dy) <= 100.0) ++expected;
    }
  std::size_t lit = 0;
  for (double v : masked.data()) lit += v != 0.0;
  EXPECT_EQ(lit, expected);
  EXPECT_EQ(masked.at(0, 0), 0.0);
  EXPECT_EQ(masked.at(127, 127), 0.0);
  EXPECT_EQ(masked.at(64, 64), 1.0);
  EXPECT_EQ(masked.pitch_um(), pitch);
}

TEST(ApplyAperture, SinglePixelInsideSmallDisk) {
  const ImageGrid one = from_rows({{0.7}});
  EXPECT_EQ(apply_aperture(one, ApertureMask{0.5, 0.0, 0.0}), one);
}

TEST(ApplyAperture, DiskOutsideImageIsEmptyAperture) {
  const ImageGrid img = random_image(4, 4, 1);
  try {
    apply_aperture(img, ApertureMask{1.0, 50.0, 50.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("empty aperture"), std::string::npos);
  }
}

TEST(ApplyAperture, Idempotent) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const ImageGrid img = random_image(9 + seed % 5, 11, seed);
    const ApertureMask mask{3.0 + static_cast<double>(seed % 7), 4.0, 5.5};
    const ImageGrid once = apply_aperture(img, mask);
    EXPECT_EQ(apply_aperture(once, mask), once);
  }
}

TEST(Resample, EqualValuesAverage) {
  const ImageGrid out = resample(from_rows({{1, 1}, {1, 1}}), 1, 1);
  EXPECT_EQ(out.height(), 1u);
  EXPECT_DOUBLE_EQ(out.at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(out.pitch_um(), 2.0);
}

TEST(Resample, CheckerboardHalves) {
  ImageGrid board(4, 4, 1.0);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) board.at(r, c) = static_cast<double>((r + c) % 2);
  const ImageGrid out = resample(board, 2, 2);
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Resample, RampMatchesRectangleOverlapOracle) {
  const ImageGrid ramp = from_rows({{0, 1, 2}, {3, 4, 5}, {6, 7, 8}});
  const ImageGrid out = resample(ramp, 2, 2);
  // Output pixel (i, j) covers source rows [1.5 i, 1.5 (i + 1)) and columns likewise.
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) {
          const double oy = std::max(0.0, std::min(1.5 * (i + 1), r + 1.0) - std::max(1.5 * i, double(r)));
          const double ox = std::max(0.0, std::min(1.5 * (j + 1), c + 1.0) - std::max(1.5 * j, double(c)));
          acc += oy * ox * ramp.at(r, c);
        }
      EXPECT_NEAR(out.at(i, j), acc / 2.25, 1e-12) << i << "," << j;
    }
}

TEST(Resample, ConservesIntegratedIntensity) {
  for (std::uint64_t seed = 1; seed <= 25; ++seed) {
    const ImageGrid img = random_image(6 + seed % 9, 5 + seed % 7, seed, 0.5 + 0.1 * static_cast<double>(seed));
    const ImageGrid down = resample(img, 3 + seed % 4, 2 + seed % 5);
    EXPECT_NEAR(integrated(down), integrated(img), 1e-6 * integrated(img));
  }
}

TEST(Resample, HalfThenFullRoundTripConserves) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const ImageGrid img = random_image(16, 12, seed, 1.3);
    const ImageGrid back = resample(resample(img, 8, 6), 16, 12);
    EXPECT_NEAR(integrated(back), integrated(img), 1e-6 * integrated(img));
    EXPECT_DOUBLE_EQ(back.pitch_um(), img.pitch_um());
  }
}

TEST(NormalizeUnit, Examples) {
  EXPECT_EQ(normalize_unit(from_rows({{0, 2}, {4, 0}})), from_rows({{0, 0.5}, {1, 0}}));
  const ImageGrid zero(3, 3, 1.0);
  EXPECT_EQ(normalize_unit(zero), zero);
  EXPECT_EQ(normalize_unit(from_rows({{1}})), from_rows({{1}}));
}

TEST(NormalizeUnit, IdempotentAndScaleInvariant) {
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    const ImageGrid img = random_image(7, 5, seed);
    const ImageGrid n = normalize_unit(img);
    EXPECT_EQ(normalize_unit(n), n);
    for (double v : n.data()) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }

    ImageGrid pow2 = img, other = img;
    for (double& v : pow2.data()) v *= 8.0;
    const double alpha = 0.37 + static_cast<double>(seed);
    for (double& v : other.data()) v *= alpha;
    EXPECT_EQ(normalize_unit(pow2), n);
    const ImageGrid m = normalize_unit(other);
    for (std::size_t i = 0; i < n.size(); ++i) EXPECT_NEAR(m.data()[i], n.data()[i], 1e-12);
  }
}

TEST(Imgf, RoundTripsAtSinglePrecision) {
  const ImageGrid img = random_image(5, 7, 3, 1.75);
  std::stringstream ss;
  write_imgf(ss, img);
  const ImageGrid back = read_imgf(ss);
  ASSERT_EQ(back.height(), 5u);
  ASSERT_EQ(back.width(), 7u);
  EXPECT_EQ(back.pitch_um(), 1.75);
  for (std::size_t i = 0; i < img.size(); ++i)
    EXPECT_EQ(back.data()[i], static_cast<double>(static_cast<float>(img.data()[i])));
}

TEST(Imgf, BadMagicAndTruncationAreDistinctFormatErrors) {
  const ImageGrid img = random_image(3, 3, 4);
  std::stringstream good;
  write_imgf(good, img);
  const std::string bytes = good.str();

  std::string wrong = bytes;
  wrong[0] = 'X';
  std::stringstream a(wrong);
  try {
    read_imgf(a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }

  std::stringstream b(bytes.substr(0, bytes.size() - 5));
  try {
    read_imgf(b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::format);
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(Imgf, MissingFileIsIoError) {
  try {
    read_imgf(std::filesystem::path("/nonexistent/x.imgf"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

}  // namespace
}  // namespace ccm
