#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "ccm/dataset.hpp"
#include "ccm/fiber.hpp"
#include "ccm/image.hpp"

namespace ccm {

struct CalibrationRecord {
  TransferOperator probed;
  std::size_t probe_count = 0;
  /// Relative L2 error of each probed column against the ground truth it was measured from.
  std::vector<double> column_residuals;
};

/// Measures column i by imaging the single-pixel object e_i through forward(). Probe i uses noise
/// seed derive_seed(noise.seed, calibration_noise, i).
CalibrationRecord calibrate(const TransferOperator& truth, const NoiseSpec& noise);

/// Streaming form: `sink(i, column)` receives each probed column in order.
void calibrate_columns(const TransferOperator& truth, const NoiseSpec& noise,
                       const std::function<void(std::size_t, const Eigen::VectorXd&)>& sink);

struct Tikhonov {
  double lambda = 0.0;
};
struct TruncatedSvd {
  std::size_t rank = 1;
};
using RegularizerSpec = std::variant<Tikhonov, TruncatedSvd>;

std::string describe(const RegularizerSpec& reg);

struct LinearSolution {
  ImageGrid image;        // clamped at zero
  Eigen::VectorXd raw;    // unclamped estimate
};

/// Factorization of the probed operator for one regularizer, reused across sensor images.
/// Tikhonov caches the Cholesky factor of M^T M + lambda I; truncated SVD caches the leading triplets.
template <typename Scalar>
class LinearSolverT {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  LinearSolverT(Matrix m, const RegularizerSpec& reg);

  Vector solve(const Vector& y) const;

  Eigen::Index n_obj() const noexcept { return n_obj_; }
  Eigen::Index n_sen() const noexcept { return n_sen_; }
  const RegularizerSpec& regularizer() const noexcept { return reg_; }

 private:
  RegularizerSpec reg_;
  Eigen::Index n_sen_ = 0, n_obj_ = 0;
  Matrix m_;                      // operator copy for the Tikhonov right-hand side
  Matrix chol_;                   // lower Cholesky factor of M^T M + lambda I
  Matrix v_scaled_;               // V_k diag(1/sigma_k)
  Matrix ut_;                     // U_k^T
};

using LinearSolver = LinearSolverT<double>;

/// Solves for one sensor image with the given operator geometry; output image uses the operator's object grid.
LinearSolution solve(const LinearSolver& solver, const TransferOperator& probed, const ImageGrid& y);

/// Convenience: factorize and solve once.
LinearSolution solve(const TransferOperator& probed, const ImageGrid& y, const RegularizerSpec& reg);

struct SweepRow {
  double lambda = 0.0;
  double mean_mae = 0.0;
  double mean_ssim = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  double best_lambda = 0.0;  // argmin of mean MAE
};

/// Tikhonov over each lambda on the test split. Uses one SVD of the probed operator and the
/// filter factors sigma / (sigma^2 + lambda), which equal the normal-equation solution.
SweepResult sweep_lambda(const TransferOperator& probed, const PairedDataset& dataset, const std::vector<double>& lambdas);

/// Tikhonov estimate for every lambda from a precomputed SVD (raw, unclamped).
std::vector<Eigen::VectorXd> tikhonov_path(const Eigen::BDCSVD<Eigen::MatrixXd>& svd, const Eigen::VectorXd& y,
                                           const std::vector<double>& lambdas);

/// Reconstruction metrics use unit-max normalized images.
ImageGrid to_image(const Eigen::VectorXd& raw, std::size_t h, std::size_t w, double pitch_um);

}  // namespace ccm
