#include "ccm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ccm/error.hpp"

namespace ccm {

namespace {

void check_same_shape(const ImageGrid& a, const ImageGrid& b, const char* what) {
  if (a.height() != b.height() || a.width() != b.width()) {
    std::ostringstream msg;
    msg << what << ": shape mismatch " << a.height() << "x" << a.width() << " vs " << b.height() << "x" << b.width();
    throw Error(ErrorKind::shape, msg.str());
  }
}

std::vector<double> window_weights(const SsimConfig& cfg) {
  const std::size_t n = cfg.window;
  std::vector<double> w(n * n, 1.0);
  if (cfg.window_kind == SsimWindow::gaussian) {
    const double c = (static_cast<double>(n) - 1.0) / 2.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double di = static_cast<double>(i) - c;
        const double dj = static_cast<double>(j) - c;
        w[i * n + j] = std::exp(-(di * di + dj * dj) / (2.0 * cfg.sigma * cfg.sigma));
      }
  }
  double total = 0.0;
  for (double v : w) total += v;
  for (double& v : w) v /= total;
  return w;
}

double bilinear(const ImageGrid& img, double r, double c) {
  const double rmax = static_cast<double>(img.height() - 1);
  const double cmax = static_cast<double>(img.width() - 1);
  r = std::clamp(r, 0.0, rmax);
  c = std::clamp(c, 0.0, cmax);
  const auto r0 = static_cast<std::size_t>(std::floor(r));
  const auto c0 = static_cast<std::size_t>(std::floor(c));
  const std::size_t r1 = std::min(r0 + 1, img.height() - 1);
  const std::size_t c1 = std::min(c0 + 1, img.width() - 1);
  const double fr = r - static_cast<double>(r0);
  const double fc = c - static_cast<double>(c0);
  const double top = img.at(r0, c0) * (1.0 - fc) + img.at(r0, c1) * fc;
  const double bottom = img.at(r1, c0) * (1.0 - fc) + img.at(r1, c1) * fc;
  return top * (1.0 - fr) + bottom * fr;
}

struct Peak {
  double index;  // plateau center
  double value;
};

std::vector<Peak> interior_peaks(const std::vector<double>& v) {
  std::vector<Peak> peaks;
  const std::size_t n = v.size();
  std::size_t s = 0;
  while (s < n) {
    std::size_t e = s;
    while (e + 1 < n && v[e + 1] == v[s]) ++e;
    if (s > 0 && e + 1 < n && v[s - 1] < v[s] && v[e + 1] < v[e])
      peaks.push_back({(static_cast<double>(s) + static_cast<double>(e)) / 2.0, v[s]});
    s = e + 1;
  }
  return peaks;
}

}  // namespace

void SsimConfig::validate() const {
  if (window < 3 || window % 2 == 0) throw Error(ErrorKind::invalid_argument, "SSIM window must be odd and >= 3");
  if (!(k1 > 0.0) || !(k2 > 0.0) || !(dynamic_range > 0.0))
    throw Error(ErrorKind::invalid_argument, "SSIM constants must be positive");
  if (window_kind == SsimWindow::gaussian && !(sigma > 0.0))
    throw Error(ErrorKind::invalid_argument, "SSIM gaussian sigma must be positive");
}

double mae(const ImageGrid& a, const ImageGrid& b) {
  check_same_shape(a, b, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
  return s / static_cast<double>(a.size());
}

double ssim(const ImageGrid& a, const ImageGrid& b, const SsimConfig& cfg) {
  cfg.validate();
  check_same_shape(a, b, "ssim");
  if (a.height() < cfg.window || a.width() < cfg.window) {
    std::ostringstream msg;
    msg << "ssim: image " << a.height() << "x" << a.width() << " is smaller than the " << cfg.window << "x"
        << cfg.window << " window";
    throw Error(ErrorKind::invalid_argument, msg.str());
  }
  const auto w = window_weights(cfg);
  const double c1 = (cfg.k1 * cfg.dynamic_range) * (cfg.k1 * cfg.dynamic_range);
  const double c2 = (cfg.k2 * cfg.dynamic_range) * (cfg.k2 * cfg.dynamic_range);
  const std::size_t n = cfg.window;
  const std::size_t rows = a.height() - n + 1;
  const std::size_t cols = a.width() - n + 1;

  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      double mu_a = 0, mu_b = 0, e_aa = 0, e_bb = 0, e_ab = 0;
      for (std::size_t u = 0; u < n; ++u)
        for (std::size_t v = 0; v < n; ++v) {
          const double wt = w[u * n + v];
          const double x = a.at(i + u, j + v);
          const double y = b.at(i + u, j + v);
          mu_a += wt * x;
          mu_b += wt * y;
          e_aa += wt * (x * x);
          e_bb += wt * (y * y);
          e_ab += wt * (x * y);
        }
      const double var_a = e_aa - mu_a * mu_a;
      const double var_b = e_bb - mu_b * mu_b;
      const double cov = e_ab - mu_a * mu_b;
      const double num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2);
      const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
      total += num / den;
    }
  }
  return total / static_cast<double>(rows * cols);
}

Profile line_profile(const ImageGrid& img, const ProfileLine& line) {
  if (!(line.spacing_px > 0.0)) throw Error(ErrorKind::invalid_argument, "profile spacing must be positive");
  const double dr = line.row1 - line.row0;
  const double dc = line.col1 - line.col0;
  const double length = std::hypot(dr, dc);
  if (!(length > 0.0)) throw Error(ErrorKind::invalid_argument, "profile endpoints must be distinct");
  constexpr double eps = 1e-9;
  const double rmax = static_cast<double>(img.height() - 1) + eps;
  const double cmax = static_cast<double>(img.width() - 1) + eps;
  for (auto [r, c] : {std::pair{line.row0, line.col0}, std::pair{line.row1, line.col1}})
    if (r < -eps || c < -eps || r > rmax || c > cmax)
      throw Error(ErrorKind::invalid_argument, "profile line exits the image bounds");

  const auto count = static_cast<std::size_t>(std::floor(length / line.spacing_px + 1e-12)) + 1;
  Profile p;
  p.spacing_um = line.spacing_px * img.pitch_um();
  p.values.reserve(count);
  p.positions_um.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    const double t = static_cast<double>(k) * line.spacing_px / length;
    p.values.push_back(bilinear(img, line.row0 + t * dr, line.col0 + t * dc));
    p.positions_um.push_back(static_cast<double>(k) * p.spacing_um);
  }
  return p;
}

double fwhm(const Profile& profile) {
  const auto& v = profile.values;
  if (v.size() < 3) throw Error(ErrorKind::invalid_argument, "fwhm: profile needs at least 3 samples");
  const auto peak_it = std::max_element(v.begin(), v.end());
  const auto peak = static_cast<std::size_t>(peak_it - v.begin());
  const double lo = *std::min_element(v.begin(), v.end());
  const double hi = *peak_it;
  if (!(hi > lo)) throw Error(ErrorKind::invalid_argument, "fwhm: profile is flat");
  if (peak == 0 || peak + 1 == v.size()) throw Error(ErrorKind::numeric, "peak truncated");
  const double level = lo + (hi - lo) / 2.0;

  double left = -1.0;
  for (std::size_t j = peak; j-- > 0;) {
    if (v[j] < level) {
      left = static_cast<double>(j) + (level - v[j]) / (v[j + 1] - v[j]);
      break;
    }
  }
  double right = -1.0;
  for (std::size_t j = peak + 1; j < v.size(); ++j) {
    if (v[j] < level) {
      right = static_cast<double>(j - 1) + (v[j - 1] - level) / (v[j - 1] - v[j]);
      break;
    }
  }
  if (left < 0.0 || right < 0.0) throw Error(ErrorKind::numeric, "peak truncated");
  return (right - left) * profile.spacing_um;
}

TwoPointResult two_point_separation(const Profile& profile, double dip_threshold) {
  const auto& v = profile.values;
  TwoPointResult result;
  if (v.size() < 3) return result;
  const double lo = *std::min_element(v.begin(), v.end());
  const double hi = *std::max_element(v.begin(), v.end());
  const double floor_level = lo + 0.1 * (hi - lo);

  std::vector<Peak> peaks;
  for (const auto& p : interior_peaks(v))
    if (p.value >= floor_level && hi > lo) peaks.push_back(p);
  if (peaks.size() < 2) return result;

  std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& x, const Peak& y) { return x.value > y.value; });
  Peak first = peaks[0];
  Peak second = peaks[1];
  if (second.index < first.index) std::swap(first, second);

  const auto from = static_cast<std::size_t>(std::ceil(first.index));
  const auto to = static_cast<std::size_t>(std::floor(second.index));
  double valley = std::numeric_limits<double>::infinity();
  for (std::size_t j = from; j <= to; ++j) valley = std::min(valley, v[j]);
  const double lower = std::min(first.value, second.value);

  result.peak_distance_um = (second.index - first.index) * profile.spacing_um;
  result.dip_ratio = lower > 0.0 ? valley / lower : 1.0;
  result.resolved = result.dip_ratio < dip_threshold;
  return result;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw Error(ErrorKind::shape, "pearson: samples must have equal nonzero size");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace ccm
