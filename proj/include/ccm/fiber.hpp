#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>

#include <Eigen/Dense>

#include "ccm/image.hpp"
#include "ccm/random.hpp"

namespace ccm {

enum class ColumnNorm : std::uint8_t { none = 0, unit_sum = 1 };

/// Dense nonnegative intensity map from object pixels to sensor pixels (one column per object pixel).
struct TransferOperator {
  Eigen::MatrixXd matrix;  // n_sen x n_obj
  std::size_t obj_h = 0, obj_w = 0;
  std::size_t sen_h = 0, sen_w = 0;
  std::uint64_t seed = 0;
  std::uint32_t mode_count = 1;
  ColumnNorm column_norm = ColumnNorm::unit_sum;
  /// Spectral condition number; only computed for small operators.
  std::optional<double> condition_estimate;

  std::size_t n_obj() const noexcept { return obj_h * obj_w; }
  std::size_t n_sen() const noexcept { return sen_h * sen_w; }

  /// Checks shape, nonnegativity, finiteness, and column sums under unit_sum.
  void validate() const;
};

/// Noise added to a sensor image. Gaussian std is gaussian_sigma times the clean sensor max;
/// poisson_scale is the expected photon count at unit intensity (0 disables shot noise).
struct NoiseSpec {
  double gaussian_sigma = 0.0;
  double poisson_scale = 0.0;
  std::uint64_t seed = 0;

  bool is_zero() const noexcept { return gaussian_sigma == 0.0 && poisson_scale == 0.0; }
  void validate() const;
};

/// Complex mode fields over the sensor (n_sen x K) and per-object-pixel couplings (K x n_obj).
struct ModeDecomposition {
  Eigen::MatrixXcd modes;
  Eigen::MatrixXcd couplings;
};

/// Complex white noise low-pass filtered by a Gaussian of std `correlation_px`, scaled to unit RMS.
Eigen::VectorXcd smooth_complex_field(std::size_t height, std::size_t width, double correlation_px, Rng& rng);

/// Column i = |sum_k couplings(k, i) * modes(:, k)|^2, then normalized per `norm`.
TransferOperator operator_from_modes(const ModeDecomposition& fields, std::size_t obj_h, std::size_t obj_w,
                                     std::size_t sen_h, std::size_t sen_w, ColumnNorm norm);

struct OperatorConfig {
  std::size_t obj_h = 32, obj_w = 32;
  std::size_t sen_h = 32, sen_w = 32;
  std::uint32_t mode_count = 32;
  double correlation_px = 2.0;
  std::uint64_t seed = 0;
  ColumnNorm column_norm = ColumnNorm::unit_sum;
  /// Condition number is computed when n_obj does not exceed this.
  std::size_t condition_limit = 1024;
};

/// Speckle-sum operator emulating multimode scrambling. Deterministic in the config.
TransferOperator synthesize_operator(const OperatorConfig& cfg);

/// Sensor image M * vec(x), then optional shot noise, then Gaussian read noise, clamped at 0.
ImageGrid forward(const TransferOperator& op, const ImageGrid& obj, const NoiseSpec& noise);

/// Noiseless product as a raw vector (no clamping, no reshaping).
Eigen::VectorXd apply_operator(const TransferOperator& op, const Eigen::VectorXd& x);

/// Condition number from the eigenvalues of M^T M; infinity when rank deficient.
double condition_number(const Eigen::MatrixXd& m);

// CCMM: "CCMM", u32 version=1, u32 n_sen, u32 n_obj, u64 seed, u32 mode_count, u8 column_norm,
// then n_sen*n_obj f32 column-major (LE). Grid sides are recovered as squares when possible.
void write_ccmm(std::ostream& os, const TransferOperator& op);
void write_ccmm(const std::filesystem::path& path, const TransferOperator& op);
TransferOperator read_ccmm(std::istream& is, const std::string& context = "CCMM");
TransferOperator read_ccmm(const std::filesystem::path& path);

struct CcmmHeader {
  std::uint32_t n_sen = 0, n_obj = 0;
  std::uint64_t seed = 0;
  std::uint32_t mode_count = 0;
  ColumnNorm column_norm = ColumnNorm::none;
};
void write_ccmm_header(std::ostream& os, const CcmmHeader& header);
CcmmHeader read_ccmm_header(std::istream& is, const std::string& context);
/// Reads the matrix in single precision, avoiding a double-precision copy for large operators.
Eigen::MatrixXf read_ccmm_matrix_f32(const std::filesystem::path& path, CcmmHeader* header = nullptr);

/// Splits n into rows x cols, square when n is a perfect square, else 1 x n.
std::pair<std::size_t, std::size_t> infer_grid(std::size_t n);

}  // namespace ccm
