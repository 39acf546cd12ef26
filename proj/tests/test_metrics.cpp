#include <gtest/gtest.h>

#include <cmath>

#include "ccm/error.hpp"
#include "ccm/metrics.hpp"
#include "ccm/phantom.hpp"
#include "metric_axioms.hpp"

namespace ccm {
namespace {

Profile profile_of(std::vector<double> values, double spacing = 1.0) {
  Profile p;
  p.values = std::move(values);
  p.spacing_um = spacing;
  for (std::size_t i = 0; i < p.values.size(); ++i) p.positions_um.push_back(static_cast<double>(i) * spacing);
  return p;
}

ImageGrid constant(std::size_t h, std::size_t w, double v) {
  ImageGrid img(h, w, 1.0);
  for (double& x : img.data()) x = v;
  return img;
}

TEST(Mae, IdentityAndExtremes) {
  const ImageGrid a = constant(5, 5, 0.25);
  EXPECT_EQ(mae(a, a), 0.0);
  EXPECT_EQ(mae(constant(4, 6, 0.0), constant(4, 6, 1.0)), 1.0);
  EXPECT_THROW(mae(constant(4, 4, 0.0), constant(4, 5, 0.0)), Error);
}

TEST(Ssim, IdenticalAndConstantImages) {
  std::mt19937_64 rng(2);
  const ImageGrid a = testing::axiom_image(20, 17, 0, rng);
  EXPECT_EQ(ssim(a, a), 1.0);
  EXPECT_DOUBLE_EQ(ssim(constant(12, 12, 0.3), constant(12, 12, 0.3)), 1.0);
}

TEST(Ssim, ComplementedCheckerboardScoresLow) {
  ImageGrid a(11, 11, 1.0), b(11, 11, 1.0);
  for (std::size_t r = 0; r < 11; ++r)
    for (std::size_t c = 0; c < 11; ++c) {
      a.at(r, c) = static_cast<double>((r + c) % 2);
      b.at(r, c) = 1.0 - a.at(r, c);
    }
  // One valid window: means 60/121 and 61/121, equal variances, covariance equal to minus the variance.
  const double ma = 60.0 / 121.0, mb = 61.0 / 121.0;
  SsimConfig uniform;
  uniform.window_kind = SsimWindow::uniform;
  const double var = ma * (1 - ma);
  const double c1 = 1e-4, c2 = 9e-4;
  const double oracle = (2 * ma * mb + c1) * (-2 * var + c2) / ((ma * ma + mb * mb + c1) * (2 * var + c2));
  EXPECT_NEAR(ssim(a, b, uniform), oracle, 1e-12);
  EXPECT_LT(ssim(a, b), 0.5);
  EXPECT_LT(ssim(a, b, uniform), 0.5);
}

TEST(Ssim, RejectsSmallImagesAndBadConfigs) {
  EXPECT_THROW(ssim(constant(10, 10, 0.1), constant(10, 10, 0.1)), Error);
  SsimConfig even;
  even.window = 4;
  EXPECT_THROW(ssim(constant(12, 12, 0.1), constant(12, 12, 0.1), even), Error);
  SsimConfig zero_k;
  zero_k.k1 = 0.0;
  EXPECT_THROW(zero_k.validate(), Error);
}

TEST(MetricAxioms, HoldOnRandomTriples) {
  const auto violations = testing::metric_axiom_violations(50, 11);
  for (const auto& v : violations) ADD_FAILURE() << v;
}

TEST(LineProfile, ConstantImageGivesConstantProfile) {
  const ImageGrid img = constant(9, 9, 0.4);
  const Profile p = line_profile(img, ProfileLine{4, 0, 4, 8, 1.0});
  ASSERT_EQ(p.values.size(), 9u);
  for (double v : p.values) EXPECT_DOUBLE_EQ(v, 0.4);
}

TEST(LineProfile, SampleCountFollowsLengthOverSpacing) {
  const ImageGrid img = constant(20, 20, 1.0);
  EXPECT_EQ(line_profile(img, ProfileLine{0, 0, 0, 10, 3.0}).values.size(), 4u);
  EXPECT_EQ(line_profile(img, ProfileLine{0, 0, 12, 16, 0.5}).values.size(), 41u);
  EXPECT_THROW(line_profile(img, ProfileLine{0, 0, 0, 25, 1.0}), Error);
  EXPECT_THROW(line_profile(img, ProfileLine{3, 3, 3, 3, 1.0}), Error);
}

TEST(LineProfile, BeadProfileIsCenteredOnTheBead) {
  const ImageGrid bead = render_beads(32, 32, 0.5, {{16.0, 12.0}}, 3.0);
  const Profile p = line_profile(bead, ProfileLine{16, 0, 16, 31, 0.25});
  double mass = 0.0, moment = 0.0;
  for (std::size_t k = 0; k < p.values.size(); ++k) {
    mass += p.values[k];
    moment += p.values[k] * static_cast<double>(k) * 0.25;
  }
  EXPECT_NEAR(moment / mass, 12.0, 0.05);
  EXPECT_DOUBLE_EQ(p.spacing_um, 0.125);
}

TEST(Fwhm, RectangleTriangleAndGaussian) {
  std::vector<double> rect(200, 0.0);
  for (std::size_t i = 60; i < 140; ++i) rect[i] = 1.0;
  EXPECT_NEAR(fwhm(profile_of(rect, 0.1)), 8.0, 0.1);

  EXPECT_DOUBLE_EQ(fwhm(profile_of({0, 1, 2, 1, 0}, 0.7)), 1.4);

  const double sigma = 3.0;
  std::vector<double> g;
  for (int i = -40; i <= 40; ++i) g.push_back(std::exp(-0.5 * std::pow(i * 0.25 / sigma, 2)));
  EXPECT_NEAR(fwhm(profile_of(g, 0.25)), 2.3548 * sigma, 0.02 * 2.3548 * sigma);
}

TEST(Fwhm, InvariantUnderScaleAndBaseline) {
  std::vector<double> base;
  for (int i = -20; i <= 20; ++i) base.push_back(std::exp(-0.5 * i * i / 16.0) + 0.3 * std::exp(-0.5 * (i - 9) * (i - 9) / 4.0));
  const double w = fwhm(profile_of(base));
  for (double alpha : {0.5, 3.0, 17.0})
    for (double shift : {0.0, 0.2, 5.0}) {
      std::vector<double> v = base;
      for (double& x : v) x = alpha * x + shift;
      EXPECT_NEAR(fwhm(profile_of(v)), w, 1e-9 * w);
    }
}

TEST(Fwhm, TruncatedPeakIsAnError) {
  try {
    fwhm(profile_of({0.0, 0.2, 0.6, 1.0, 0.9}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("peak truncated"), std::string::npos);
  }
}

TEST(TwoPoint, ZeroValleyResolves) {
  const TwoPointResult r = two_point_separation(profile_of({0, 1, 0, 0, 1, 0}));
  EXPECT_TRUE(r.resolved);
  EXPECT_DOUBLE_EQ(r.dip_ratio, 0.0);
  ASSERT_TRUE(r.peak_distance_um.has_value());
  EXPECT_DOUBLE_EQ(*r.peak_distance_um, 3.0);
}

TEST(TwoPoint, SinglePeakIsUnresolved) {
  const TwoPointResult r = two_point_separation(profile_of({0, 0.5, 1, 0.5, 0}));
  EXPECT_FALSE(r.resolved);
  EXPECT_FALSE(r.peak_distance_um.has_value());
}

TEST(TwoPoint, RectPulsesSevenMicronsApart) {
  const double spacing = 0.2;
  std::vector<double> v(150, 0.0);
  for (std::size_t i = 40; i < 50; ++i) v[i] = 1.0;
  for (std::size_t i = 75; i < 85; ++i) v[i] = 1.0;
  const TwoPointResult r = two_point_separation(profile_of(v, spacing));
  ASSERT_TRUE(r.peak_distance_um.has_value());
  EXPECT_NEAR(*r.peak_distance_um, 7.0, spacing);
  EXPECT_TRUE(r.resolved);
}

TEST(TwoPoint, ShallowDipIsUnresolved) {
  const TwoPointResult r = two_point_separation(profile_of({0, 1.0, 0.9, 0.95, 0}));
  ASSERT_TRUE(r.peak_distance_um.has_value());
  EXPECT_NEAR(r.dip_ratio, 0.9 / 0.95, 1e-12);
  EXPECT_FALSE(r.resolved);
}

TEST(Pearson, KnownValues) {
  EXPECT_NEAR(pearson({1, 2, 3}, {2, 4, 6}), 1.0, 1e-15);
  EXPECT_NEAR(pearson({1, 2, 3}, {3, 2, 1}), -1.0, 1e-15);
  EXPECT_EQ(pearson({1, 1, 1}, {1, 2, 3}), 0.0);
}

}  // namespace
}  // namespace ccm
