#include "ccm/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ccm/binary_io.hpp"
#include "ccm/error.hpp"

namespace ccm {

namespace {

constexpr std::string_view kImgfMagic = "CCMI";
constexpr std::uint32_t kImgfVersion = 1;

void check_geometry(std::size_t height, std::size_t width, double pitch_um) {
  if (height == 0 || width == 0)
    throw Error(ErrorKind::invalid_argument, "image dimensions must be at least 1x1");
  if (!(pitch_um > 0.0) || !std::isfinite(pitch_um))
    throw Error(ErrorKind::invalid_argument, "pixel pitch must be positive and finite");
}

// Row (or column) overlap weights for area resampling: w(i, j) is the fraction of
// output cell i covered by input cell j, so each row of weights sums to 1.
std::vector<std::vector<std::pair<std::size_t, double>>> overlap_weights(std::size_t n_in, std::size_t n_out) {
  std::vector<std::vector<std::pair<std::size_t, double>>> w(n_out);
  const double scale = static_cast<double>(n_in) / static_cast<double>(n_out);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double lo = static_cast<double>(i) * scale;
    const double hi = static_cast<double>(i + 1) * scale;
    const auto j0 = static_cast<std::size_t>(std::floor(lo));
    const auto j1 = std::min(n_in, static_cast<std::size_t>(std::ceil(hi)));
    for (std::size_t j = j0; j < j1; ++j) {
      const double overlap = std::min(hi, static_cast<double>(j + 1)) - std::max(lo, static_cast<double>(j));
      if (overlap > 0.0) w[i].emplace_back(j, overlap / scale);
    }
  }
  return w;
}

}  // namespace

ImageGrid::ImageGrid(std::size_t height, std::size_t width, double pitch_um)
    : height_(height), width_(width), pitch_um_(pitch_um) {
  check_geometry(height, width, pitch_um);
  data_.assign(height * width, 0.0);
}

ImageGrid::ImageGrid(std::size_t height, std::size_t width, double pitch_um, std::vector<double> data)
    : height_(height), width_(width), pitch_um_(pitch_um), data_(std::move(data)) {
  check_geometry(height, width, pitch_um);
  if (data_.size() != height * width) {
    std::ostringstream msg;
    msg << "image data has " << data_.size() << " values, expected " << height * width;
    throw Error(ErrorKind::shape, msg.str());
  }
  validate();
}

double ImageGrid::sum() const noexcept {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double ImageGrid::max() const noexcept {
  return data_.empty() ? 0.0 : *std::max_element(data_.begin(), data_.end());
}

void ImageGrid::validate() const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i]) || data_[i] < 0.0) {
      std::ostringstream msg;
      msg << "image intensity at index " << i << " is " << data_[i] << " (must be finite and >= 0)";
      throw Error(ErrorKind::numeric, msg.str());
    }
  }
}

ApertureMask ApertureMask::centered(const ImageGrid& img, double diameter_um) {
  return {diameter_um, (static_cast<double>(img.height()) - 1.0) / 2.0,
          (static_cast<double>(img.width()) - 1.0) / 2.0};
}

bool ApertureMask::contains(const ImageGrid& img, std::size_t row, std::size_t col) const noexcept {
  const double dr = (static_cast<double>(row) - center_row) * img.pitch_um();
  const double dc = (static_cast<double>(col) - center_col) * img.pitch_um();
  const double r = diameter_um / 2.0;
  return dr * dr + dc * dc <= r * r;
}

ImageGrid apply_aperture(const ImageGrid& img, const ApertureMask& mask) {
  if (!(mask.diameter_um > 0.0)) throw Error(ErrorKind::invalid_argument, "aperture diameter must be positive");
  ImageGrid out = img;
  std::size_t inside = 0;
  for (std::size_t r = 0; r < img.height(); ++r) {
    for (std::size_t c = 0; c < img.width(); ++c) {
      if (mask.contains(img, r, c))
        ++inside;
      else
        out.at(r, c) = 0.0;
    }
  }
  if (inside == 0) throw Error(ErrorKind::invalid_argument, "empty aperture");
  return out;
}

ImageGrid resample(const ImageGrid& img, std::size_t new_h, std::size_t new_w) {
  if (new_h == 0 || new_w == 0) throw Error(ErrorKind::invalid_argument, "resample target must be at least 1x1");
  const auto wr = overlap_weights(img.height(), new_h);
  const auto wc = overlap_weights(img.width(), new_w);

  // Columns first, then rows.
  std::vector<double> tmp(img.height() * new_w, 0.0);
  for (std::size_t r = 0; r < img.height(); ++r)
    for (std::size_t c = 0; c < new_w; ++c) {
      double acc = 0.0;
      for (auto [j, w] : wc[c]) acc += w * img.at(r, j);
      tmp[r * new_w + c] = acc;
    }
  std::vector<double> out(new_h * new_w, 0.0);
  for (std::size_t r = 0; r < new_h; ++r)
    for (std::size_t c = 0; c < new_w; ++c) {
      double acc = 0.0;
      for (auto [i, w] : wr[r]) acc += w * tmp[i * new_w + c];
      out[r * new_w + c] = acc;
    }

  // Pixel area scales by (h*w)/(H*W); a single pitch carries the geometric mean.
  const double area_ratio = static_cast<double>(img.height() * img.width()) / static_cast<double>(new_h * new_w);
  return ImageGrid(new_h, new_w, img.pitch_um() * std::sqrt(area_ratio), std::move(out));
}

ImageGrid normalize_unit(const ImageGrid& img) {
  const double m = img.max();
  if (!(m > 0.0)) return img;
  ImageGrid out = img;
  for (double& v : out.data()) v /= m;
  return out;
}

void write_imgf(std::ostream& os, const ImageGrid& img) {
  binary::write_magic(os, kImgfMagic);
  binary::write_u32(os, kImgfVersion);
  binary::write_u32(os, static_cast<std::uint32_t>(img.height()));
  binary::write_u32(os, static_cast<std::uint32_t>(img.width()));
  binary::write_f64(os, img.pitch_um());
  std::vector<float> values(img.data().begin(), img.data().end());
  binary::write_f32_array(os, values.data(), values.size());
}

void write_imgf(const std::filesystem::path& path, const ImageGrid& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  write_imgf(os, img);
  if (!os) throw Error(ErrorKind::io, "write failed: " + path.string());
}

ImageGrid read_imgf(std::istream& is, const std::string& context) {
  binary::Reader in(is, context);
  in.expect_magic(kImgfMagic);
  const auto version = in.u32();
  if (version != kImgfVersion)
    throw Error(ErrorKind::format, context + ": unsupported version " + std::to_string(version));
  const std::size_t h = in.u32();
  const std::size_t w = in.u32();
  const double pitch = in.f64();
  if (h == 0 || w == 0 || !(pitch > 0.0)) throw Error(ErrorKind::format, context + ": invalid geometry");
  std::vector<float> values(h * w);
  in.f32_array(values.data(), values.size());
  try {
    return ImageGrid(h, w, pitch, std::vector<double>(values.begin(), values.end()));
  } catch (const Error& e) {
    throw Error(ErrorKind::format, context + ": " + e.what());
  }
}

ImageGrid read_imgf(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::io, "cannot open " + path.string());
  return read_imgf(is, path.string());
}

std::vector<ImageGrid> read_imgf_directory(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw Error(ErrorKind::io, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".imgf") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<ImageGrid> images;
  images.reserve(files.size());
  for (const auto& f : files) images.push_back(read_imgf(f));
  return images;
}

void write_pgm(const std::filesystem::path& path, const ImageGrid& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  os << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  for (double v : img.data()) {
    const double clamped = std::clamp(v, 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0))));
  }
  if (!os) throw Error(ErrorKind::io, "write failed: " + path.string());
}

}  // namespace ccm
