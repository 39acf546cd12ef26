#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace ccm {

/// Nonnegative intensity field on a square-pixel grid, row-major with top-left origin.
class ImageGrid {
 public:
  ImageGrid() = default;
  /// Zero-filled image.
  ImageGrid(std::size_t height, std::size_t width, double pitch_um);
  /// Takes ownership of `data` and validates every invariant.
  ImageGrid(std::size_t height, std::size_t width, double pitch_um, std::vector<double> data);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  double pitch_um() const noexcept { return pitch_um_; }
  bool empty() const noexcept { return data_.empty(); }

  double& at(std::size_t row, std::size_t col) { return data_[row * width_ + col]; }
  double at(std::size_t row, std::size_t col) const { return data_[row * width_ + col]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }

  double sum() const noexcept;
  double max() const noexcept;

  /// Throws ErrorKind::numeric if any intensity is negative or non-finite.
  void validate() const;

  bool operator==(const ImageGrid&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  double pitch_um_ = 1.0;
  std::vector<double> data_;
};

/// Circular field stop. Center is in pixel-index coordinates: pixel (r, c) has its center at (r, c).
struct ApertureMask {
  double diameter_um = 0.0;
  double center_row = 0.0;
  double center_col = 0.0;

  /// Disk centered on the image.
  static ApertureMask centered(const ImageGrid& img, double diameter_um);

  bool contains(const ImageGrid& img, std::size_t row, std::size_t col) const noexcept;
};

/// Zeroes every pixel whose center lies outside the disk. Throws "empty aperture"
/// when no pixel center falls inside.
ImageGrid apply_aperture(const ImageGrid& img, const ApertureMask& mask);

/// Area-weighted resampling. Integrated intensity (sum times pixel area) is conserved.
ImageGrid resample(const ImageGrid& img, std::size_t new_h, std::size_t new_w);

/// Divides by the maximum when it is positive; returns the input otherwise.
ImageGrid normalize_unit(const ImageGrid& img);

// IMGF: "CCMI", u32 version=1, u32 height, u32 width, f64 pitch_um, height*width f32 (LE, row-major).
void write_imgf(std::ostream& os, const ImageGrid& img);
void write_imgf(const std::filesystem::path& path, const ImageGrid& img);
ImageGrid read_imgf(std::istream& is, const std::string& context = "IMGF");
ImageGrid read_imgf(const std::filesystem::path& path);

/// Every *.imgf file in `dir`, sorted by filename.
std::vector<ImageGrid> read_imgf_directory(const std::filesystem::path& dir);

/// 8-bit binary PGM scaled so that 1.0 maps to 255 (values clamped to [0, 1]).
void write_pgm(const std::filesystem::path& path, const ImageGrid& img);

}  // namespace ccm
