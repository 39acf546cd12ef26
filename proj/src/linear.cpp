#include "ccm/linear.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "ccm/error.hpp"
#include "ccm/metrics.hpp"

namespace ccm {

namespace {

constexpr const char* kRankDeficient = "rank deficient; increase lambda or use truncated_svd";

}  // namespace

void calibrate_columns(const TransferOperator& truth, const NoiseSpec& noise,
                       const std::function<void(std::size_t, const Eigen::VectorXd&)>& sink) {
  noise.validate();
  ImageGrid probe(truth.obj_h, truth.obj_w, 1.0);
  for (std::size_t i = 0; i < truth.n_obj(); ++i) {
    probe.data()[i] = 1.0;
    NoiseSpec probe_noise = noise;
    probe_noise.seed = derive_seed(noise.seed, Stream::calibration_noise, i);
    const ImageGrid response = forward(truth, probe, probe_noise);
    probe.data()[i] = 0.0;
    sink(i, Eigen::Map<const Eigen::VectorXd>(response.data().data(), static_cast<Eigen::Index>(response.size())));
  }
}

CalibrationRecord calibrate(const TransferOperator& truth, const NoiseSpec& noise) {
  CalibrationRecord rec;
  rec.probed = truth;
  rec.probed.condition_estimate.reset();
  rec.column_residuals.resize(truth.n_obj());
  calibrate_columns(truth, noise, [&](std::size_t i, const Eigen::VectorXd& col) {
    const auto j = static_cast<Eigen::Index>(i);
    rec.probed.matrix.col(j) = col;
    const double ref = truth.matrix.col(j).norm();
    const double diff = (col - truth.matrix.col(j)).norm();
    rec.column_residuals[i] = ref > 0.0 ? diff / ref : diff;
    ++rec.probe_count;
  });
  // Noisy probes no longer sum to one; the flag only describes exact columns.
  if (!noise.is_zero()) rec.probed.column_norm = ColumnNorm::none;
  return rec;
}

std::string describe(const RegularizerSpec& reg) {
  std::ostringstream s;
  if (const auto* t = std::get_if<Tikhonov>(&reg))
    s << "tikhonov(lambda=" << t->lambda << ")";
  else
    s << "truncated_svd(rank=" << std::get<TruncatedSvd>(reg).rank << ")";
  return s.str();
}

template <typename Scalar>
LinearSolverT<Scalar>::LinearSolverT(Matrix m, const RegularizerSpec& reg)
    : reg_(reg), n_sen_(m.rows()), n_obj_(m.cols()) {
  if (m.size() == 0) throw Error(ErrorKind::invalid_argument, "empty operator");
  if (const auto* t = std::get_if<Tikhonov>(&reg)) {
    if (!(t->lambda >= 0.0) || !std::isfinite(t->lambda))
      throw Error(ErrorKind::invalid_argument, "lambda must be finite and >= 0");
    m_ = std::move(m);
    chol_ = Matrix::Zero(n_obj_, n_obj_);
    chol_.template selfadjointView<Eigen::Lower>().rankUpdate(m_.transpose());
    chol_.diagonal().array() += static_cast<Scalar>(t->lambda);
    Eigen::LLT<Eigen::Ref<Matrix>> llt(chol_);  // factorizes in place
    if (llt.info() != Eigen::Success) throw Error(ErrorKind::numeric, kRankDeficient);
    if (t->lambda == 0.0) {
      const auto d = chol_.diagonal().cwiseAbs();
      const Scalar lo = d.minCoeff();
      const Scalar hi = d.maxCoeff();
      const Scalar tol = std::sqrt(static_cast<Scalar>(n_obj_) * std::numeric_limits<Scalar>::epsilon());
      if (!(lo > tol * hi)) throw Error(ErrorKind::numeric, kRankDeficient);
    }
  } else {
    const std::size_t rank = std::get<TruncatedSvd>(reg).rank;
    const auto max_rank = static_cast<std::size_t>(std::min(n_sen_, n_obj_));
    if (rank < 1 || rank > max_rank) {
      std::ostringstream msg;
      msg << "truncated_svd rank must be in [1, " << max_rank << "], got " << rank;
      throw Error(ErrorKind::invalid_argument, msg.str());
    }
    Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto k = static_cast<Eigen::Index>(rank);
    const auto sigma = svd.singularValues().head(k);
    if (!(sigma[k - 1] > Scalar(0))) throw Error(ErrorKind::numeric, "truncated_svd rank exceeds the numerical rank");
    v_scaled_ = svd.matrixV().leftCols(k) * sigma.cwiseInverse().asDiagonal();
    ut_ = svd.matrixU().leftCols(k).transpose();
  }
}

template <typename Scalar>
typename LinearSolverT<Scalar>::Vector LinearSolverT<Scalar>::solve(const Vector& y) const {
  if (y.size() != n_sen_) {
    std::ostringstream msg;
    msg << "solve: operator expects " << n_sen_ << " sensor pixels, got " << y.size();
    throw Error(ErrorKind::shape, msg.str());
  }
  if (std::holds_alternative<Tikhonov>(reg_)) {
    Vector x = m_.transpose() * y;
    chol_.template triangularView<Eigen::Lower>().solveInPlace(x);
    chol_.template triangularView<Eigen::Lower>().transpose().solveInPlace(x);
    return x;
  }
  Vector coeffs = ut_ * y;
  return v_scaled_ * coeffs;
}

template class LinearSolverT<double>;
template class LinearSolverT<float>;

ImageGrid to_image(const Eigen::VectorXd& raw, std::size_t h, std::size_t w, double pitch_um) {
  std::vector<double> v(raw.data(), raw.data() + raw.size());
  for (double& x : v)
    if (!(x > 0.0)) x = 0.0;
  return ImageGrid(h, w, pitch_um, std::move(v));
}

LinearSolution solve(const LinearSolver& solver, const TransferOperator& probed, const ImageGrid& y) {
  if (y.size() != probed.n_sen()) {
    std::ostringstream msg;
    msg << "solve: operator expects a " << probed.sen_h << "x" << probed.sen_w << " sensor image, got " << y.height()
        << "x" << y.width();
    throw Error(ErrorKind::shape, msg.str());
  }
  const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data().data(), static_cast<Eigen::Index>(y.size()));
  LinearSolution out;
  out.raw = solver.solve(yv);
  if (!out.raw.allFinite()) throw Error(ErrorKind::numeric, "solve produced non-finite values");
  const double pitch = y.pitch_um() * static_cast<double>(probed.sen_w) / static_cast<double>(probed.obj_w);
  out.image = to_image(out.raw, probed.obj_h, probed.obj_w, pitch);
  return out;
}

LinearSolution solve(const TransferOperator& probed, const ImageGrid& y, const RegularizerSpec& reg) {
  const LinearSolver solver(probed.matrix, reg);
  return solve(solver, probed, y);
}

std::vector<Eigen::VectorXd> tikhonov_path(const Eigen::BDCSVD<Eigen::MatrixXd>& svd, const Eigen::VectorXd& y,
                                           const std::vector<double>& lambdas) {
  const Eigen::VectorXd& s = svd.singularValues();
  const Eigen::VectorXd c = svd.matrixU().transpose() * y;
  std::vector<Eigen::VectorXd> out;
  out.reserve(lambdas.size());
  for (double lambda : lambdas) {
    const Eigen::VectorXd filt = s.array() / (s.array().square() + lambda);
    Eigen::VectorXd coeff = filt.cwiseProduct(c);
    // Zero singular values with lambda = 0 carry no information.
    for (Eigen::Index i = 0; i < coeff.size(); ++i)
      if (!std::isfinite(coeff[i])) coeff[i] = 0.0;
    out.push_back(svd.matrixV() * coeff);
  }
  return out;
}

SweepResult sweep_lambda(const TransferOperator& probed, const PairedDataset& dataset,
                         const std::vector<double>& lambdas) {
  if (lambdas.empty()) throw Error(ErrorKind::invalid_argument, "lambda list is empty");
  for (double l : lambdas)
    if (!(l >= 0.0) || !std::isfinite(l)) throw Error(ErrorKind::invalid_argument, "lambda must be finite and >= 0");
  const auto& test = dataset.manifest.test_indices;
  if (test.empty()) throw Error(ErrorKind::invalid_argument, "dataset has no test entries");

  const Eigen::BDCSVD<Eigen::MatrixXd> svd(probed.matrix, Eigen::ComputeThinU | Eigen::ComputeThinV);
  SweepResult result;
  result.rows.resize(lambdas.size());
  for (std::size_t k = 0; k < lambdas.size(); ++k) result.rows[k].lambda = lambdas[k];

  for (std::size_t idx : test) {
    const auto& entry = dataset.entries.at(idx);
    if (entry.sensor.size() != probed.n_sen())
      throw Error(ErrorKind::shape, "sweep: sensor image does not match the operator");
    const Eigen::VectorXd y =
        Eigen::Map<const Eigen::VectorXd>(entry.sensor.data().data(), static_cast<Eigen::Index>(entry.sensor.size()));
    const auto path = tikhonov_path(svd, y, lambdas);
    const ImageGrid ref = normalize_unit(entry.object);
    for (std::size_t k = 0; k < lambdas.size(); ++k) {
      const ImageGrid rec = normalize_unit(to_image(path[k], probed.obj_h, probed.obj_w, entry.object.pitch_um()));
      result.rows[k].mean_mae += mae(rec, ref);
      result.rows[k].mean_ssim += ssim(rec, ref);
    }
  }
  double best = std::numeric_limits<double>::infinity();
  for (auto& row : result.rows) {
    row.mean_mae /= static_cast<double>(test.size());
    row.mean_ssim /= static_cast<double>(test.size());
    if (row.mean_mae < best) {
      best = row.mean_mae;
      result.best_lambda = row.lambda;
    }
  }
  return result;
}

}  // namespace ccm
