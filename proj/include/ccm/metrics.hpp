#pragma once

#include <optional>
#include <vector>

#include "ccm/image.hpp"

namespace ccm {

enum class SsimWindow { gaussian, uniform };

struct SsimConfig {
  std::size_t window = 11;
  SsimWindow window_kind = SsimWindow::gaussian;
  double sigma = 1.5;  // gaussian only
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  void validate() const;
};

/// Mean absolute difference. Both images are expected on [0, 1].
double mae(const ImageGrid& a, const ImageGrid& b);

/// Mean SSIM over every fully-contained window position.
double ssim(const ImageGrid& a, const ImageGrid& b, const SsimConfig& cfg = {});

/// Straight sampling line in pixel-index coordinates (row, col).
struct ProfileLine {
  double row0 = 0, col0 = 0;
  double row1 = 0, col1 = 0;
  double spacing_px = 1.0;
};

struct Profile {
  std::vector<double> values;
  std::vector<double> positions_um;  // distance from the line start
  double spacing_um = 1.0;
};

/// Bilinear samples every `spacing_px` from the first endpoint; floor(length / spacing) + 1 samples.
Profile line_profile(const ImageGrid& img, const ProfileLine& line);

/// Full width at half maximum after subtracting the profile minimum, in the profile's units.
double fwhm(const Profile& profile);

struct TwoPointResult {
  bool resolved = false;
  std::optional<double> peak_distance_um;  // empty when fewer than two qualifying peaks
  double dip_ratio = 1.0;
};

/// Distance between the two highest qualifying peaks and the valley/lower-peak ratio.
/// Peaks qualify when they rise above baseline + 10% of the profile range.
TwoPointResult two_point_separation(const Profile& profile, double dip_threshold = 0.735);

/// Pearson correlation of two equally sized samples (0 when either is constant).
double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace ccm
