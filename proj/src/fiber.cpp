#include "ccm/fiber.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ccm/binary_io.hpp"
#include "ccm/error.hpp"

namespace ccm {

namespace {

constexpr std::string_view kCcmmMagic = "CCMM";
constexpr std::uint32_t kCcmmVersion = 1;
constexpr double kUnitSumTolerance = 1e-9;

std::vector<double> gaussian_kernel(double sigma, std::size_t radius) {
  std::vector<double> k(2 * radius + 1);
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double d = static_cast<double>(i) - static_cast<double>(radius);
    k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  return k;
}

void normalize_columns(Eigen::MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double s = m.col(j).sum();
    if (!(s > 0.0) || !std::isfinite(s))
      throw Error(ErrorKind::numeric, "column " + std::to_string(j) + " has no energy; cannot normalize");
    m.col(j) /= s;
  }
}

}  // namespace

void TransferOperator::validate() const {
  if (obj_h == 0 || obj_w == 0 || sen_h == 0 || sen_w == 0)
    throw Error(ErrorKind::invalid_argument, "transfer operator grids must be non-empty");
  if (static_cast<std::size_t>(matrix.rows()) != n_sen() || static_cast<std::size_t>(matrix.cols()) != n_obj()) {
    std::ostringstream msg;
    msg << "transfer matrix is " << matrix.rows() << "x" << matrix.cols() << ", expected " << n_sen() << "x"
        << n_obj();
    throw Error(ErrorKind::shape, msg.str());
  }
  if (!matrix.allFinite()) throw Error(ErrorKind::numeric, "transfer matrix has non-finite entries");
  if (matrix.size() > 0 && matrix.minCoeff() < 0.0)
    throw Error(ErrorKind::numeric, "transfer matrix has negative entries");
  if (column_norm == ColumnNorm::unit_sum) {
    for (Eigen::Index j = 0; j < matrix.cols(); ++j)
      if (std::abs(matrix.col(j).sum() - 1.0) > kUnitSumTolerance)
        throw Error(ErrorKind::numeric, "column " + std::to_string(j) + " does not sum to 1");
  }
}

void NoiseSpec::validate() const {
  if (!(gaussian_sigma >= 0.0) || !std::isfinite(gaussian_sigma))
    throw Error(ErrorKind::invalid_argument, "gaussian_sigma must be finite and >= 0");
  if (!(poisson_scale >= 0.0) || !std::isfinite(poisson_scale))
    throw Error(ErrorKind::invalid_argument, "poisson_scale must be finite and >= 0");
}

Eigen::VectorXcd smooth_complex_field(std::size_t height, std::size_t width, double correlation_px, Rng& rng) {
  if (height == 0 || width == 0) throw Error(ErrorKind::invalid_argument, "field grid must be non-empty");
  if (!(correlation_px >= 1.0)) throw Error(ErrorKind::invalid_argument, "correlation_px must be >= 1");

  const std::size_t reach = 2 * std::max(height, width);
  const std::size_t radius = std::min(reach, static_cast<std::size_t>(std::ceil(3.0 * correlation_px)));
  const auto kernel = gaussian_kernel(correlation_px, radius);
  const std::size_t ph = height + 2 * radius;
  const std::size_t pw = width + 2 * radius;

  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::complex<double>> noise(ph * pw);
  for (auto& z : noise) {
    const double re = normal(rng);
    const double im = normal(rng);
    z = {re, im};
  }

  // Separable valid-mode convolution: rows of the padded grid, then columns.
  std::vector<std::complex<double>> rows(ph * width);
  for (std::size_t r = 0; r < ph; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      std::complex<double> acc = 0.0;
      for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * noise[r * pw + c + k];
      rows[r * width + c] = acc;
    }
  Eigen::VectorXcd field(static_cast<Eigen::Index>(height * width));
  for (std::size_t r = 0; r < height; ++r)
    for (std::size_t c = 0; c < width; ++c) {
      std::complex<double> acc = 0.0;
      for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * rows[(r + k) * width + c];
      field[static_cast<Eigen::Index>(r * width + c)] = acc;
    }

  const double rms = std::sqrt(field.squaredNorm() / static_cast<double>(field.size()));
  if (rms > 0.0) field /= rms;
  return field;
}

TransferOperator operator_from_modes(const ModeDecomposition& fields, std::size_t obj_h, std::size_t obj_w,
                                     std::size_t sen_h, std::size_t sen_w, ColumnNorm norm) {
  const auto n_obj = static_cast<Eigen::Index>(obj_h * obj_w);
  const auto n_sen = static_cast<Eigen::Index>(sen_h * sen_w);
  if (n_obj == 0 || n_sen == 0) throw Error(ErrorKind::invalid_argument, "operator grids must be non-empty");
  if (fields.modes.rows() != n_sen || fields.couplings.cols() != n_obj ||
      fields.modes.cols() != fields.couplings.rows() || fields.modes.cols() == 0)
    throw Error(ErrorKind::shape, "mode fields and couplings do not match the operator grids");

  TransferOperator op;
  op.obj_h = obj_h;
  op.obj_w = obj_w;
  op.sen_h = sen_h;
  op.sen_w = sen_w;
  op.mode_count = static_cast<std::uint32_t>(fields.modes.cols());
  op.column_norm = norm;
  op.matrix.resize(n_sen, n_obj);

  // Column blocks bound the complex temporary.
  constexpr Eigen::Index kBlock = 256;
  for (Eigen::Index j0 = 0; j0 < n_obj; j0 += kBlock) {
    const Eigen::Index nb = std::min(kBlock, n_obj - j0);
    const Eigen::MatrixXcd e = fields.modes * fields.couplings.middleCols(j0, nb);
    op.matrix.middleCols(j0, nb) = e.cwiseAbs2();
  }
  if (norm == ColumnNorm::unit_sum) normalize_columns(op.matrix);
  return op;
}

TransferOperator synthesize_operator(const OperatorConfig& cfg) {
  if (cfg.obj_h == 0 || cfg.obj_w == 0 || cfg.sen_h == 0 || cfg.sen_w == 0)
    throw Error(ErrorKind::invalid_argument, "operator grids must be non-empty");
  if (cfg.mode_count < 1) throw Error(ErrorKind::invalid_argument, "mode_count must be >= 1");
  if (!(cfg.correlation_px >= 1.0)) throw Error(ErrorKind::invalid_argument, "correlation_px must be >= 1");

  const auto k = static_cast<Eigen::Index>(cfg.mode_count);
  ModeDecomposition fields;
  fields.modes.resize(static_cast<Eigen::Index>(cfg.sen_h * cfg.sen_w), k);
  fields.couplings.resize(k, static_cast<Eigen::Index>(cfg.obj_h * cfg.obj_w));
  for (Eigen::Index m = 0; m < k; ++m) {
    auto mode_rng = make_rng(cfg.seed, Stream::mode_field, static_cast<std::uint64_t>(m));
    fields.modes.col(m) = smooth_complex_field(cfg.sen_h, cfg.sen_w, cfg.correlation_px, mode_rng);
    auto coupling_rng = make_rng(cfg.seed, Stream::coupling_field, static_cast<std::uint64_t>(m));
    fields.couplings.row(m) = smooth_complex_field(cfg.obj_h, cfg.obj_w, cfg.correlation_px, coupling_rng);
  }

  TransferOperator op = operator_from_modes(fields, cfg.obj_h, cfg.obj_w, cfg.sen_h, cfg.sen_w, cfg.column_norm);
  op.seed = cfg.seed;
  if (op.n_obj() <= cfg.condition_limit) op.condition_estimate = condition_number(op.matrix);
  return op;
}

Eigen::VectorXd apply_operator(const TransferOperator& op, const Eigen::VectorXd& x) {
  if (static_cast<std::size_t>(x.size()) != op.n_obj()) {
    std::ostringstream msg;
    msg << "operator expects " << op.n_obj() << " object pixels, got " << x.size();
    throw Error(ErrorKind::shape, msg.str());
  }
  Eigen::VectorXd y = Eigen::VectorXd::Zero(op.matrix.rows());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (x[i] != 0.0) y.noalias() += x[i] * op.matrix.col(i);
  return y;
}

ImageGrid forward(const TransferOperator& op, const ImageGrid& obj, const NoiseSpec& noise) {
  noise.validate();
  if (obj.size() != op.n_obj()) {
    std::ostringstream msg;
    msg << "forward: operator expects a " << op.obj_h << "x" << op.obj_w << " object (" << op.n_obj()
        << " pixels), got " << obj.height() << "x" << obj.width() << " (" << obj.size() << " pixels)";
    throw Error(ErrorKind::shape, msg.str());
  }
  const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(obj.data().data(), static_cast<Eigen::Index>(obj.size()));
  Eigen::VectorXd y = apply_operator(op, x);

  if (!noise.is_zero()) {
    auto rng = make_rng(noise.seed, Stream::forward_noise);
    const double clean_max = y.size() ? y.maxCoeff() : 0.0;
    if (noise.poisson_scale > 0.0) {
      for (auto& v : y) {
        const double mean = v * noise.poisson_scale;
        if (mean > 0.0) {
          std::poisson_distribution<long long> shot(mean);
          v = static_cast<double>(shot(rng)) / noise.poisson_scale;
        } else {
          v = 0.0;
        }
      }
    }
    if (noise.gaussian_sigma > 0.0 && clean_max > 0.0) {
      std::normal_distribution<double> read(0.0, noise.gaussian_sigma * clean_max);
      for (auto& v : y) v += read(rng);
    }
    y = y.cwiseMax(0.0);
  }

  const double pitch = obj.pitch_um() * static_cast<double>(op.obj_w) / static_cast<double>(op.sen_w);
  return ImageGrid(op.sen_h, op.sen_w, pitch, std::vector<double>(y.data(), y.data() + y.size()));
}

double condition_number(const Eigen::MatrixXd& m) {
  const Eigen::MatrixXd gram = m.transpose() * m;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  const double hi = ev.maxCoeff();
  const double lo = ev.minCoeff();
  if (!(lo > 0.0)) return std::numeric_limits<double>::infinity();
  return std::sqrt(hi / lo);
}

std::pair<std::size_t, std::size_t> infer_grid(std::size_t n) {
  auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side == n) return {side, side};
  return {1, n};
}

void write_ccmm_header(std::ostream& os, const CcmmHeader& h) {
  binary::write_magic(os, kCcmmMagic);
  binary::write_u32(os, kCcmmVersion);
  binary::write_u32(os, h.n_sen);
  binary::write_u32(os, h.n_obj);
  binary::write_u64(os, h.seed);
  binary::write_u32(os, h.mode_count);
  binary::write_u8(os, static_cast<std::uint8_t>(h.column_norm));
}

CcmmHeader read_ccmm_header(std::istream& is, const std::string& context) {
  binary::Reader in(is, context);
  in.expect_magic(kCcmmMagic);
  const auto version = in.u32();
  if (version != kCcmmVersion)
    throw Error(ErrorKind::format, context + ": unsupported version " + std::to_string(version));
  CcmmHeader h;
  h.n_sen = in.u32();
  h.n_obj = in.u32();
  h.seed = in.u64();
  h.mode_count = in.u32();
  const auto norm = in.u8();
  if (norm > 1) throw Error(ErrorKind::format, context + ": unknown column_norm " + std::to_string(norm));
  h.column_norm = static_cast<ColumnNorm>(norm);
  if (h.n_sen == 0 || h.n_obj == 0) throw Error(ErrorKind::format, context + ": empty operator");
  return h;
}

void write_ccmm(std::ostream& os, const TransferOperator& op) {
  write_ccmm_header(os, {static_cast<std::uint32_t>(op.n_sen()), static_cast<std::uint32_t>(op.n_obj()), op.seed,
                         op.mode_count, op.column_norm});
  std::vector<float> col(op.n_sen());
  for (Eigen::Index j = 0; j < op.matrix.cols(); ++j) {
    for (Eigen::Index i = 0; i < op.matrix.rows(); ++i) col[static_cast<std::size_t>(i)] = static_cast<float>(op.matrix(i, j));
    binary::write_f32_array(os, col.data(), col.size());
  }
}

void write_ccmm(const std::filesystem::path& path, const TransferOperator& op) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorKind::io, "cannot open " + path.string() + " for writing");
  write_ccmm(os, op);
  if (!os) throw Error(ErrorKind::io, "write failed: " + path.string());
}

TransferOperator read_ccmm(std::istream& is, const std::string& context) {
  const CcmmHeader h = read_ccmm_header(is, context);
  binary::Reader in(is, context);
  TransferOperator op;
  std::tie(op.sen_h, op.sen_w) = infer_grid(h.n_sen);
  std::tie(op.obj_h, op.obj_w) = infer_grid(h.n_obj);
  op.seed = h.seed;
  op.mode_count = h.mode_count;
  op.column_norm = h.column_norm;
  op.matrix.resize(h.n_sen, h.n_obj);
  std::vector<float> col(h.n_sen);
  for (std::uint32_t j = 0; j < h.n_obj; ++j) {
    in.f32_array(col.data(), col.size());
    for (std::uint32_t i = 0; i < h.n_sen; ++i) {
      if (!std::isfinite(col[i]) || col[i] < 0.0f)
        throw Error(ErrorKind::format, context + ": invalid matrix entry in column " + std::to_string(j));
      op.matrix(i, j) = col[i];
    }
  }
  // Single-precision storage perturbs column sums; restore the flagged invariant.
  if (op.column_norm == ColumnNorm::unit_sum) {
    try {
      normalize_columns(op.matrix);
    } catch (const Error& e) {
      throw Error(ErrorKind::format, context + ": " + e.what());
    }
  }
  return op;
}

TransferOperator read_ccmm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::io, "cannot open " + path.string());
  return read_ccmm(is, path.string());
}

Eigen::MatrixXf read_ccmm_matrix_f32(const std::filesystem::path& path, CcmmHeader* header) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::io, "cannot open " + path.string());
  const CcmmHeader h = read_ccmm_header(is, path.string());
  binary::Reader in(is, path.string());
  Eigen::MatrixXf m(h.n_sen, h.n_obj);
  in.f32_array(m.data(), static_cast<std::size_t>(m.size()));
  if (header) *header = h;
  return m;
}

}  // namespace ccm
