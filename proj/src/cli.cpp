#include "ccm/cli.hpp"

#include <sys/utsname.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "ccm/binary_io.hpp"
#include "ccm/dataset.hpp"
#include "ccm/error.hpp"
#include "ccm/fiber.hpp"
#include "ccm/linear.hpp"
#include "ccm/metrics.hpp"
#include "ccm/phantom.hpp"
#include "ccm/train.hpp"

namespace ccm::cli {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

constexpr const char* kMetricNote = "# mae and ssim are computed on images scaled to unit maximum";

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out;
};

std::string indexed(const char* prefix, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%06zu.%s", prefix, i, ext);
  return buf;
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
}

fs::path require_out(const Globals& g, const char* what) {
  if (g.out.empty()) throw Error(ErrorKind::invalid_argument, std::string(what) + " needs --out");
  return g.out;
}

std::ofstream open_csv(const fs::path& path) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorKind::io, "cannot write " + path.string());
  os << std::setprecision(10);
  return os;
}

std::vector<std::size_t> pick_split(const DatasetManifest& m, const std::string& which) {
  if (which == "train") return m.train_indices;
  if (which == "test") return m.test_indices;
  std::vector<std::size_t> all = m.train_indices;
  all.insert(all.end(), m.test_indices.begin(), m.test_indices.end());
  std::sort(all.begin(), all.end());
  return all;
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::string machine_descriptor() {
  std::string arch = "unknown";
  utsname u{};
  if (uname(&u) == 0) arch = u.machine;
  std::string simd = Eigen::SimdInstructionSetsInUse();
  std::replace(simd.begin(), simd.end(), ',', '+');
  simd.erase(std::remove(simd.begin(), simd.end(), ' '), simd.end());
  std::ostringstream s;
  s << arch << ' ' << simd << " hw_threads=" << std::thread::hardware_concurrency();
  return s.str();
}

ImageGrid unit_on(const ImageGrid& img, std::size_t h, std::size_t w) {
  if (img.height() == h && img.width() == w) return normalize_unit(img);
  return normalize_unit(resample(img, h, w));
}

ImageGrid triptych(const ImageGrid& sensor, const ImageGrid& reference, const ImageGrid& recon) {
  const std::size_t h = recon.height(), w = recon.width(), gap = 2;
  const ImageGrid parts[3] = {unit_on(sensor, h, w), unit_on(reference, h, w), normalize_unit(recon)};
  ImageGrid out(h, 3 * w + 2 * gap, recon.pitch_um());
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t p = 0; p < 3; ++p)
      for (std::size_t c = 0; c < w; ++c) out.at(r, p * (w + gap) + c) = parts[p].at(r, c);
    for (std::size_t k = 0; k < gap; ++k) {
      out.at(r, w + k) = 1.0;
      out.at(r, 2 * w + gap + k) = 1.0;
    }
  }
  return out;
}

// ---- gen -------------------------------------------------------------------

struct GenOpts {
  std::string kind = "beads";
  std::size_t side = 32;
  std::size_t sensor_side = 0;
  std::size_t count = 2000;
  double pitch = 1.0;
  BeadParams beads;
  GlyphParams glyphs;
  std::uint32_t modes = 32;
  double corr = 2.0;
  std::string operator_path;
  std::string import_dir;
  double sigma = 0.01;
  double poisson = 0.0;
  double train_fraction = 0.9;
};

PhantomSpec phantom_from(const GenOpts& o, std::uint64_t seed) {
  PhantomSpec spec;
  spec.img_h = spec.img_w = o.side;
  spec.pitch_um = o.pitch;
  spec.seed = seed;
  switch (phantom_kind_from_string(o.kind)) {
    case PhantomKind::beads: spec.params = o.beads; break;
    case PhantomKind::neurons: spec.params = NeuronParams{}; break;
    case PhantomKind::glyphs: spec.params = o.glyphs; break;
  }
  return spec;
}

TransferOperator load_or_synthesize(const std::string& path, std::size_t obj_side, std::size_t sen_side,
                                    std::uint32_t modes, double corr, std::uint64_t seed) {
  if (!path.empty()) {
    TransferOperator op = read_ccmm(fs::path(path));
    if (op.n_obj() != obj_side * obj_side) {
      std::ostringstream msg;
      msg << path << " maps " << op.n_obj() << " object pixels, expected " << obj_side << "x" << obj_side;
      throw Error(ErrorKind::shape, msg.str());
    }
    return op;
  }
  OperatorConfig cfg;
  cfg.obj_h = cfg.obj_w = obj_side;
  cfg.sen_h = cfg.sen_w = sen_side;
  cfg.mode_count = modes;
  cfg.correlation_px = corr;
  cfg.seed = seed;
  return synthesize_operator(cfg);
}

int cmd_gen(const Globals& g, const GenOpts& o, std::ostream& out) {
  const fs::path dir = require_out(g, "gen");
  if (o.count < 1) throw Error(ErrorKind::invalid_argument, "--count must be >= 1");
  const std::size_t sen_side = o.sensor_side ? o.sensor_side : o.side;
  const TransferOperator op = load_or_synthesize(o.operator_path, o.side, sen_side, o.modes, o.corr, g.seed);
  const NoiseSpec noise{o.sigma, o.poisson, g.seed};

  PairedDataset ds;
  if (!o.import_dir.empty()) {
    std::vector<ImageGrid> objects = read_imgf_directory(o.import_dir);
    if (objects.empty()) throw Error(ErrorKind::io, "no .imgf files in " + o.import_dir);
    for (auto& obj : objects)
      if (obj.height() != o.side || obj.width() != o.side) obj = resample(obj, o.side, o.side);
    ds = build_dataset_from_objects(std::move(objects), op, noise, o.train_fraction, g.seed);
    ds.manifest.source = "imported";
  } else {
    ds = build_dataset(phantom_from(o, g.seed), op, noise, o.count, o.train_fraction, g.seed);
  }

  make_dirs(dir);
  if (o.operator_path.empty()) {
    write_ccmm(dir / "operator.ccmm", op);
    ds.manifest.operator_ref = "operator.ccmm";
  } else {
    ds.manifest.operator_ref = fs::absolute(o.operator_path).string();
  }
  save_dataset(dir, ds);
  out << (dir / "manifest.json").string() << '\n';
  return 0;
}

// ---- calibrate ---------------------------------------------------------------

struct CalibrateOpts {
  std::string operator_path;
  std::string dataset;
  double sigma = 0.0;
  double poisson = 0.0;
};

fs::path operator_of(const std::string& operator_path, const std::string& dataset) {
  if (!operator_path.empty()) return operator_path;
  if (dataset.empty()) throw Error(ErrorKind::invalid_argument, "give --operator or --dataset");
  return fs::path(dataset) / "operator.ccmm";
}

int cmd_calibrate(const Globals& g, const CalibrateOpts& o, std::ostream& out) {
  const fs::path dest = require_out(g, "calibrate");
  const TransferOperator truth = read_ccmm(operator_of(o.operator_path, o.dataset));
  const CalibrationRecord rec = calibrate(truth, NoiseSpec{o.sigma, o.poisson, g.seed});
  if (dest.has_parent_path()) make_dirs(dest.parent_path());
  write_ccmm(dest, rec.probed);
  double mean = 0.0, worst = 0.0;
  for (double r : rec.column_residuals) {
    mean += r;
    worst = std::max(worst, r);
  }
  mean /= static_cast<double>(rec.column_residuals.size());
  out << "calibrate: " << rec.probe_count << " probes, mean column residual " << mean << ", max " << worst << " -> "
      << dest.string() << '\n';
  return 0;
}

// ---- solve / sweep -----------------------------------------------------------

struct SolveOpts {
  std::string operator_path;
  std::string dataset;
  std::string split = "test";
  std::optional<double> lambda;
  std::optional<std::size_t> rank;
  std::vector<double> sweep;
};

std::vector<double> default_lambdas() {
  std::vector<double> v;
  for (int e = -8; e <= 0; ++e) v.push_back(std::pow(10.0, e));
  return v;
}

void write_sweep(const fs::path& path, const SweepResult& sw) {
  auto os = open_csv(path);
  os << kMetricNote << "\nlambda,mean_mae,mean_ssim\n";
  for (const auto& r : sw.rows) os << r.lambda << ',' << r.mean_mae << ',' << r.mean_ssim << '\n';
}

int cmd_solve(const Globals& g, const SolveOpts& o, std::ostream& out) {
  const fs::path dir = require_out(g, "solve");
  if (o.lambda && o.rank) throw Error(ErrorKind::invalid_argument, "--lambda and --rank are mutually exclusive");
  const PairedDataset ds = load_dataset(o.dataset);
  const TransferOperator op = read_ccmm(operator_of(o.operator_path, o.dataset));
  make_dirs(dir);

  RegularizerSpec reg = Tikhonov{o.lambda.value_or(1e-3)};
  if (o.rank) reg = TruncatedSvd{*o.rank};
  if (!o.sweep.empty()) {
    if (o.rank) throw Error(ErrorKind::invalid_argument, "--sweep applies to tikhonov only");
    const SweepResult sw = sweep_lambda(op, ds, o.sweep);
    write_sweep(dir / "sweep.csv", sw);
    reg = Tikhonov{sw.best_lambda};
    out << "sweep: best lambda " << sw.best_lambda << " -> " << (dir / "sweep.csv").string() << '\n';
  }

  const LinearSolver solver(op.matrix, reg);
  const std::string method = std::holds_alternative<Tikhonov>(reg) ? "tikhonov" : "truncated_svd";
  const double param = std::holds_alternative<Tikhonov>(reg) ? std::get<Tikhonov>(reg).lambda
                                                             : static_cast<double>(std::get<TruncatedSvd>(reg).rank);
  auto csv = open_csv(dir / "report.csv");
  csv << kMetricNote << "\nindex,method,lambda_or_rank,mae,ssim,solve_ms\n";
  const auto indices = pick_split(ds.manifest, o.split);
  double sum_mae = 0.0, sum_ssim = 0.0;
  for (std::size_t i : indices) {
    const auto& e = ds.entries.at(i);
    const auto t0 = Clock::now();
    const LinearSolution sol = solve(solver, op, e.sensor);
    const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    write_imgf(dir / indexed("recon", i, "imgf"), sol.image);
    const ImageGrid rec = normalize_unit(sol.image);
    const ImageGrid ref = unit_on(e.object, rec.height(), rec.width());
    const double a = mae(rec, ref), s = ssim(rec, ref);
    sum_mae += a;
    sum_ssim += s;
    csv << i << ',' << method << ',' << param << ',' << a << ',' << s << ',' << ms << '\n';
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, indices.size()));
  out << "solve: " << indices.size() << " images, " << describe(reg) << ", mean SSIM " << sum_ssim / n
      << ", mean MAE " << sum_mae / n << '\n';
  return 0;
}

int cmd_sweep(const Globals& g, const SolveOpts& o, std::ostream& out) {
  const fs::path dir = require_out(g, "sweep");
  const PairedDataset ds = load_dataset(o.dataset);
  const TransferOperator op = read_ccmm(operator_of(o.operator_path, o.dataset));
  const SweepResult sw = sweep_lambda(op, ds, o.sweep.empty() ? default_lambdas() : o.sweep);
  make_dirs(dir);
  write_sweep(dir / "sweep.csv", sw);
  for (const auto& r : sw.rows)
    out << "lambda " << r.lambda << ": mean SSIM " << r.mean_ssim << ", mean MAE " << r.mean_mae << '\n';
  out << "sweep: best lambda " << sw.best_lambda << '\n';
  return 0;
}

// ---- train / infer -----------------------------------------------------------

struct TrainOpts {
  std::string dataset;
  std::string resume;
  std::size_t epochs = 40;
  std::size_t batch = 16;
  double lr = 1e-3;
  std::string loss = "ce";
  std::string block = "dense";
  nn::NetworkSpec spec;
  bool no_projection = false;
  std::size_t input_size = 0;
};

int cmd_train(const Globals& g, const TrainOpts& o, std::ostream& out) {
  const fs::path dir = require_out(g, "train");
  const PairedDataset ds = load_dataset(o.dataset);

  nn::TrainConfig cfg;
  cfg.epochs = o.epochs;
  cfg.batch_size = o.batch;
  cfg.adam.learning_rate = o.lr;
  cfg.loss = o.loss == "mse" ? nn::LossKind::mean_squared_error : nn::LossKind::pixelwise_cross_entropy;
  cfg.shuffle_seed = g.seed;
  cfg.threads = g.threads;
  cfg.checkpoint_dir = dir;
  make_dirs(dir);

  const auto report = [&](const nn::EpochRecord& r) {
    out << "epoch " << r.epoch << ": loss " << r.train_loss << ", test SSIM " << r.test_ssim << ", test MAE "
        << r.test_mae << std::endl;
  };
  nn::TrainResult result;
  if (!o.resume.empty()) {
    nn::Checkpoint ck = nn::read_checkpoint(fs::path(o.resume));
    auto opt = ck.optimizer ? std::move(*ck.optimizer)
                            : nn::OptimizerState<float>::fresh(ck.params.values.size(), cfg.adam);
    result = nn::train_from(ds, std::move(ck.params), std::move(opt), cfg, report);
  } else {
    nn::NetworkSpec spec = o.spec;
    spec.block = o.block == "residual" ? nn::BlockKind::residual : nn::BlockKind::dense;
    spec.input_projection = !o.no_projection;
    spec.input_size = o.input_size ? o.input_size : ds.entries.at(0).object.height();
    spec.seed = g.seed;
    spec.validate();
    result = nn::train(ds, spec, cfg, report);
  }

  nn::write_checkpoint(dir / "model.ccmw", result.params, &result.optimizer);
  nn::write_loss_curve(dir / "loss_curve.csv", result.curve);
  out << "train: " << result.curve.size() << " epochs, " << result.optimizer_steps << " steps, final loss "
      << result.curve.back().train_loss << ", mean SSIM " << result.test.mean_ssim << ", mean MAE "
      << result.test.mean_mae << '\n';
  return 0;
}

struct InferOpts {
  std::string model;
  std::string dataset;
  std::string input;
  std::string split = "test";
};

int cmd_infer(const Globals& g, const InferOpts& o, std::ostream& out) {
  const fs::path dest = require_out(g, "infer");
  const nn::Checkpoint ck = nn::read_checkpoint(fs::path(o.model));
  const nn::Network<float> net(ck.params.spec);
  nn::Workspace<float> ws;
  const std::size_t side = ck.params.spec.input_size;

  if (!o.input.empty()) {
    const ImageGrid sensor = read_imgf(fs::path(o.input));
    const auto res = nn::infer(net, ck.params, nn::prepare_input(sensor, side), ws);
    if (dest.has_parent_path()) make_dirs(dest.parent_path());
    write_imgf(dest, res.image);
    out << "infer: 1 image in " << res.elapsed_ms << " ms -> " << dest.string() << '\n';
    return 0;
  }
  if (o.dataset.empty()) throw Error(ErrorKind::invalid_argument, "infer needs --dataset or --input");
  const PairedDataset ds = load_dataset(o.dataset);
  make_dirs(dest);
  auto csv = open_csv(dest / "report.csv");
  csv << kMetricNote << "\nindex,method,mae,ssim,infer_ms\n";
  const auto indices = pick_split(ds.manifest, o.split);
  double sum_mae = 0.0, sum_ssim = 0.0;
  for (std::size_t i : indices) {
    const auto& e = ds.entries.at(i);
    const auto res = nn::infer(net, ck.params, nn::prepare_input(e.sensor, side), ws);
    write_imgf(dest / indexed("recon", i, "imgf"), res.image);
    const ImageGrid rec = normalize_unit(res.image);
    const ImageGrid ref = nn::prepare_target(e.object, side);
    const double a = mae(rec, ref), s = ssim(rec, ref);
    sum_mae += a;
    sum_ssim += s;
    csv << i << ",ann," << a << ',' << s << ',' << res.elapsed_ms << '\n';
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, indices.size()));
  out << "infer: " << indices.size() << " images, mean SSIM " << sum_ssim / n << ", mean MAE " << sum_mae / n << '\n';
  return 0;
}

// ---- eval --------------------------------------------------------------------

struct EvalOpts {
  std::string dataset;
  std::string recon;
  std::string reference;
  std::string split = "test";
  std::size_t triptychs = 0;
  std::vector<double> profile;
};

struct ProfileStats {
  std::string fwhm_um, peak_distance_um, dip_ratio, resolved;
};

ProfileStats profile_stats(const ImageGrid& img, const std::vector<double>& line) {
  ProfileStats s;
  const Profile p = line_profile(img, ProfileLine{line[0], line[1], line[2], line[3], 1.0});
  try {
    s.fwhm_um = std::to_string(fwhm(p));
  } catch (const Error&) {
  }
  const TwoPointResult tp = two_point_separation(p);
  if (tp.peak_distance_um) s.peak_distance_um = std::to_string(*tp.peak_distance_um);
  s.dip_ratio = std::to_string(tp.dip_ratio);
  s.resolved = tp.resolved ? "1" : "0";
  return s;
}

int cmd_eval(const Globals& g, const EvalOpts& o, std::ostream& out) {
  if (!o.profile.empty() && o.profile.size() != 4)
    throw Error(ErrorKind::invalid_argument, "--profile takes row0,col0,row1,col1");

  if (!o.reference.empty()) {
    const ImageGrid rec = normalize_unit(read_imgf(fs::path(o.recon)));
    const ImageGrid ref = normalize_unit(read_imgf(fs::path(o.reference)));
    if (rec.height() != ref.height() || rec.width() != ref.width())
      throw Error(ErrorKind::shape, "reconstruction and reference sizes differ");
    out << "eval: 1 image, mean SSIM " << ssim(rec, ref) << ", mean MAE " << mae(rec, ref) << '\n';
    return 0;
  }

  const fs::path dir = require_out(g, "eval");
  const PairedDataset ds = load_dataset(o.dataset);
  make_dirs(dir);
  auto csv = open_csv(dir / "report.csv");
  csv << kMetricNote << "\nindex,mae,ssim";
  if (!o.profile.empty()) csv << ",fwhm_um,peak_distance_um,dip_ratio,resolved";
  csv << '\n';

  const auto indices = pick_split(ds.manifest, o.split);
  double sum_mae = 0.0, sum_ssim = 0.0;
  std::size_t drawn = 0;
  for (std::size_t i : indices) {
    const auto& e = ds.entries.at(i);
    const ImageGrid raw = read_imgf(fs::path(o.recon) / indexed("recon", i, "imgf"));
    const ImageGrid rec = normalize_unit(raw);
    const ImageGrid ref = unit_on(e.object, rec.height(), rec.width());
    const double a = mae(rec, ref), s = ssim(rec, ref);
    sum_mae += a;
    sum_ssim += s;
    csv << i << ',' << a << ',' << s;
    if (!o.profile.empty()) {
      const auto p = profile_stats(rec, o.profile);
      csv << ',' << p.fwhm_um << ',' << p.peak_distance_um << ',' << p.dip_ratio << ',' << p.resolved;
    }
    csv << '\n';
    if (drawn < o.triptychs) {
      write_pgm(dir / indexed("triptych", i, "pgm"), triptych(e.sensor, e.object, raw));
      ++drawn;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, indices.size()));
  out << "eval: " << indices.size() << " images, mean SSIM " << sum_ssim / n << ", mean MAE " << sum_mae / n << '\n';
  return 0;
}

// ---- bench -------------------------------------------------------------------

struct BenchOpts {
  std::string artifacts;
  std::vector<std::size_t> sides{16, 32, 64, 128};
  std::size_t reps = 100;
  std::size_t factorize_reps = 1;
  double lambda = 1e-3;
  bool prepare = false;
  std::uint32_t modes = 32;
  double corr = 2.0;
};

struct BenchRecord {
  std::string method;
  std::size_t side = 0;
  std::size_t reps = 0;
  double median_ms = 0, p10_ms = 0, p90_ms = 0;
};

BenchRecord summarize(std::string method, std::size_t side, const std::vector<double>& ms) {
  return {std::move(method), side, ms.size(), quantile(ms, 0.5), quantile(ms, 0.1), quantile(ms, 0.9)};
}

fs::path side_dir(const BenchOpts& o, std::size_t side) { return fs::path(o.artifacts) / ("side_" + std::to_string(side)); }

void prepare_side(const BenchOpts& o, std::size_t side, std::uint64_t seed, std::ostream& out) {
  const fs::path dir = side_dir(o, side);
  make_dirs(dir);
  if (!fs::exists(dir / "probed.ccmm")) {
    OperatorConfig cfg;
    cfg.obj_h = cfg.obj_w = cfg.sen_h = cfg.sen_w = side;
    cfg.mode_count = o.modes;
    cfg.correlation_px = o.corr;
    cfg.seed = seed;
    cfg.condition_limit = 0;
    const TransferOperator truth = synthesize_operator(cfg);
    std::ofstream os(dir / "probed.ccmm", std::ios::binary);
    if (!os) throw Error(ErrorKind::io, "cannot write " + (dir / "probed.ccmm").string());
    write_ccmm_header(os, {static_cast<std::uint32_t>(truth.n_sen()), static_cast<std::uint32_t>(truth.n_obj()),
                           truth.seed, truth.mode_count, truth.column_norm});
    std::vector<float> col(truth.n_sen());
    calibrate_columns(truth, NoiseSpec{}, [&](std::size_t, const Eigen::VectorXd& c) {
      for (Eigen::Index i = 0; i < c.size(); ++i) col[static_cast<std::size_t>(i)] = static_cast<float>(c[i]);
      binary::write_f32_array(os, col.data(), col.size());
    });
    if (!os) throw Error(ErrorKind::io, "failed writing " + (dir / "probed.ccmm").string());
    out << "prepared " << (dir / "probed.ccmm").string() << '\n';
  }
  if (!fs::exists(dir / "model.ccmw")) {
    nn::NetworkSpec spec;
    spec.input_size = side;
    spec.seed = seed;
    nn::write_checkpoint(dir / "model.ccmw", nn::init_network<float>(spec), nullptr);
    out << "prepared " << (dir / "model.ccmw").string() << '\n';
  }
}

std::vector<BenchRecord> bench_side(const BenchOpts& o, std::size_t side, std::uint64_t seed) {
  const fs::path dir = side_dir(o, side);
  for (const char* name : {"probed.ccmm", "model.ccmw"})
    if (!fs::exists(dir / name))
      throw Error(ErrorKind::io, "missing artifact for side " + std::to_string(side) + ": " + (dir / name).string());

  PhantomSpec spec;
  spec.img_h = spec.img_w = side;
  spec.seed = seed;
  const ImageGrid object = generate_phantom(spec, 0);
  std::vector<BenchRecord> records;
  std::vector<double> ms;
  ImageGrid sensor;

  {
    CcmmHeader header;
    Eigen::MatrixXf m = read_ccmm_matrix_f32(dir / "probed.ccmm", &header);
    if (header.n_obj != side * side || header.n_sen != side * side)
      throw Error(ErrorKind::shape, (dir / "probed.ccmm").string() + " is not a " + std::to_string(side) + "x" +
                                        std::to_string(side) + " operator");
    Eigen::VectorXf x(m.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = static_cast<float>(object.data()[static_cast<std::size_t>(i)]);
    const Eigen::VectorXf y = m * x;
    std::vector<double> yv(y.data(), y.data() + y.size());
    for (double& v : yv) v = std::max(v, 0.0);
    sensor = ImageGrid(side, side, object.pitch_um(), std::move(yv));

    std::optional<LinearSolverT<float>> solver;
    for (std::size_t r = 0; r < o.factorize_reps; ++r) {
      const bool last = r + 1 == o.factorize_reps;
      Eigen::MatrixXf input = last ? std::move(m) : m;
      solver.reset();
      const auto t0 = Clock::now();
      solver.emplace(std::move(input), Tikhonov{o.lambda});
      ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
    }
    records.push_back(summarize("linear_factorize", side, ms));

    ms.clear();
    float sink = solver->solve(y)[0];
    for (std::size_t r = 0; r < o.reps; ++r) {
      const auto t0 = Clock::now();
      const Eigen::VectorXf xhat = solver->solve(y);
      ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
      sink += xhat[0];
    }
    if (!std::isfinite(sink)) throw Error(ErrorKind::numeric, "linear solve produced non-finite values");
    records.push_back(summarize("linear_solve", side, ms));
  }

  {
    const nn::Checkpoint ck = nn::read_checkpoint(dir / "model.ccmw");
    if (ck.params.spec.input_size != side)
      throw Error(ErrorKind::shape, (dir / "model.ccmw").string() + " expects input size " +
                                        std::to_string(ck.params.spec.input_size));
    const nn::Network<float> net(ck.params.spec);
    nn::Workspace<float> ws;
    const nn::NetInput input = nn::prepare_input(sensor, side);
    nn::infer(net, ck.params, input, ws);
    ms.clear();
    for (std::size_t r = 0; r < o.reps; ++r) ms.push_back(nn::infer(net, ck.params, input, ws).elapsed_ms);
    records.push_back(summarize("ann_infer", side, ms));
  }
  return records;
}

int cmd_bench(const Globals& g, BenchOpts o, std::ostream& out) {
  if (o.reps < 100) throw Error(ErrorKind::invalid_argument, "bench needs --reps >= 100");
  if (o.factorize_reps < 1) throw Error(ErrorKind::invalid_argument, "--factorize-reps must be >= 1");
  if (o.sides.empty()) throw Error(ErrorKind::invalid_argument, "--sides is empty");
  if (o.artifacts.empty()) throw Error(ErrorKind::invalid_argument, "bench needs --artifacts");
  const fs::path dest = require_out(g, "bench");
  std::sort(o.sides.begin(), o.sides.end());
  o.sides.erase(std::unique(o.sides.begin(), o.sides.end()), o.sides.end());

  if (o.prepare)
    for (std::size_t side : o.sides) prepare_side(o, side, g.seed, out);

  const std::string machine = machine_descriptor();
  std::vector<BenchRecord> all;
  for (std::size_t side : o.sides) {
    for (auto& r : bench_side(o, side, g.seed)) {
      out << r.method << " side " << r.side << ": median " << r.median_ms << " ms (p10 " << r.p10_ms << ", p90 "
          << r.p90_ms << ", reps " << r.reps << ")" << std::endl;
      all.push_back(std::move(r));
    }
  }

  if (dest.has_parent_path()) make_dirs(dest.parent_path());
  auto csv = open_csv(dest);
  csv << "method,image_side,reps,median_ms,p10_ms,p90_ms,machine\n";
  for (const auto& r : all)
    csv << r.method << ',' << r.side << ',' << r.reps << ',' << r.median_ms << ',' << r.p10_ms << ',' << r.p90_ms
        << ',' << machine << '\n';

  std::map<std::pair<std::string, std::size_t>, double> median;
  for (const auto& r : all) median[{r.method, r.side}] = r.median_ms;
  out << "ratio table (median time, larger side / smaller side)\n";
  for (std::size_t k = 1; k < o.sides.size(); ++k) {
    const std::size_t a = o.sides[k - 1], b = o.sides[k];
    out << "  " << b << "/" << a << ": linear_solve " << median[{"linear_solve", b}] / median[{"linear_solve", a}]
        << ", ann_infer " << median[{"ann_infer", b}] / median[{"ann_infer", a}] << '\n';
  }
  out << "bench: " << all.size() << " records -> " << dest.string() << '\n';
  return 0;
}

// ---- tile --------------------------------------------------------------------

struct TileOpts {
  std::vector<std::string> inputs;
  double fov_um = 200.0;
  double step_um = 80.0;
  std::size_t resize = 0;
  std::string operator_path;
  std::string split = "random";
  double sigma = 0.01;
  double poisson = 0.0;
  double train_fraction = 0.9;
};

int cmd_tile(const Globals& g, const TileOpts& o, std::ostream& out) {
  const fs::path dir = require_out(g, "tile");
  std::vector<ImageGrid> tiles;
  std::vector<std::size_t> groups;
  for (std::size_t s = 0; s < o.inputs.size(); ++s) {
    const ImageGrid large = read_imgf(fs::path(o.inputs[s]));
    for (auto& t : raster_tile(large, ApertureMask::centered(large, o.fov_um), o.step_um)) {
      tiles.push_back(o.resize && t.height() != o.resize ? resample(t, o.resize, o.resize) : std::move(t));
      groups.push_back(s);
    }
  }
  make_dirs(dir);
  if (o.operator_path.empty()) {
    for (std::size_t i = 0; i < tiles.size(); ++i) write_imgf(dir / indexed("tile", i, "imgf"), tiles[i]);
    out << "tile: " << tiles.size() << " crops -> " << dir.string() << '\n';
    return 0;
  }

  const TransferOperator op = read_ccmm(fs::path(o.operator_path));
  const SplitMode mode = o.split == "disjoint" ? SplitMode::structure_disjoint : SplitMode::random;
  const std::size_t count = tiles.size();
  PairedDataset ds = build_dataset_from_objects(std::move(tiles), op, NoiseSpec{o.sigma, o.poisson, g.seed},
                                                o.train_fraction, g.seed, mode, groups);
  ds.manifest.source = "tiles";
  ds.manifest.operator_ref = fs::absolute(o.operator_path).string();
  ds.manifest.tile_overlapping = mode == SplitMode::random && o.step_um < o.fov_um;
  ds.manifest.aperture_before_resample = true;
  save_dataset(dir, ds);
  out << "tile: " << count << " crops, split " << o.split << (ds.manifest.tile_overlapping ? " (tile-overlapping)" : "")
      << " -> " << (dir / "manifest.json").string() << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Computational cannula microscopy simulator and reconstruction toolkit", "ccm"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stream");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output file or directory");

  const auto split_opt = [](CLI::App* sub, std::string& target) {
    sub->add_option("--split", target, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));
  };

  GenOpts gen;
  auto* sub_gen = app.add_subcommand("gen", "Generate a paired phantom dataset");
  sub_gen->add_option("--kind", gen.kind)->check(CLI::IsMember({"beads", "neurons", "glyphs"}));
  sub_gen->add_option("--side", gen.side)->check(CLI::PositiveNumber);
  sub_gen->add_option("--sensor-side", gen.sensor_side, "Sensor grid side (defaults to --side)");
  sub_gen->add_option("--count", gen.count);
  sub_gen->add_option("--pitch", gen.pitch, "Pixel pitch in um");
  sub_gen->add_option("--diameter", gen.beads.diameter_um, "Bead diameter in um");
  sub_gen->add_option("--min-beads", gen.beads.min_count);
  sub_gen->add_option("--max-beads", gen.beads.max_count);
  sub_gen->add_option("--min-sep", gen.beads.min_separation_um, "Minimum bead center distance in um");
  sub_gen->add_option("--grid", gen.glyphs.grid, "Glyph block grid size");
  sub_gen->add_option("--fill", gen.glyphs.fill, "Glyph block fill probability");
  sub_gen->add_option("--modes", gen.modes, "Mode count of a synthesized operator");
  sub_gen->add_option("--corr", gen.corr, "Speckle correlation length in pixels");
  sub_gen->add_option("--operator", gen.operator_path, "Use an existing CCMM operator");
  sub_gen->add_option("--import", gen.import_dir, "Directory of IMGF objects to pair instead of phantoms");
  sub_gen->add_option("--sigma", gen.sigma, "Gaussian read noise relative to the sensor max");
  sub_gen->add_option("--poisson", gen.poisson, "Photons at unit intensity (0 disables shot noise)");
  sub_gen->add_option("--train-fraction", gen.train_fraction);

  CalibrateOpts cal;
  auto* sub_cal = app.add_subcommand("calibrate", "Probe an operator one object pixel at a time");
  sub_cal->add_option("--operator", cal.operator_path, "Ground-truth CCMM operator");
  sub_cal->add_option("--dataset", cal.dataset, "Dataset directory holding operator.ccmm");
  sub_cal->add_option("--sigma", cal.sigma);
  sub_cal->add_option("--poisson", cal.poisson);

  SolveOpts sol;
  auto* sub_solve = app.add_subcommand("solve", "Regularized linear reconstruction of a dataset split");
  sub_solve->add_option("--operator", sol.operator_path, "Probed CCMM operator");
  sub_solve->add_option("--dataset", sol.dataset)->required();
  sub_solve->add_option("--lambda", sol.lambda, "Tikhonov strength");
  sub_solve->add_option("--rank", sol.rank, "Truncated SVD rank");
  sub_solve->add_option("--sweep", sol.sweep, "Comma-separated lambdas; the best one is used")->delimiter(',');
  split_opt(sub_solve, sol.split);

  SolveOpts swp;
  auto* sub_sweep = app.add_subcommand("sweep", "Tikhonov lambda sweep on the test split");
  sub_sweep->add_option("--operator", swp.operator_path, "Probed CCMM operator");
  sub_sweep->add_option("--dataset", swp.dataset)->required();
  sub_sweep->add_option("--lambdas", swp.sweep, "Comma-separated lambdas")->delimiter(',');

  TrainOpts tr;
  auto* sub_train = app.add_subcommand("train", "Train the reconstruction network");
  sub_train->add_option("--dataset", tr.dataset)->required();
  sub_train->add_option("--resume", tr.resume, "Continue from a checkpoint");
  sub_train->add_option("--epochs", tr.epochs);
  sub_train->add_option("--batch", tr.batch);
  sub_train->add_option("--lr", tr.lr);
  sub_train->add_option("--loss", tr.loss)->check(CLI::IsMember({"ce", "mse"}));
  sub_train->add_option("--block", tr.block)->check(CLI::IsMember({"dense", "residual"}));
  sub_train->add_option("--depth", tr.spec.depth);
  sub_train->add_option("--base", tr.spec.base_channels);
  sub_train->add_option("--growth", tr.spec.growth);
  sub_train->add_option("--layers", tr.spec.dense_layers_per_block);
  sub_train->add_option("--kernel", tr.spec.kernel_size);
  sub_train->add_flag("--no-projection", tr.no_projection, "Drop the dense input projection");
  sub_train->add_option("--input-size", tr.input_size, "Network side (defaults to the object side)");

  InferOpts inf;
  auto* sub_infer = app.add_subcommand("infer", "Reconstruct with a trained network");
  sub_infer->add_option("--model", inf.model)->required();
  sub_infer->add_option("--dataset", inf.dataset);
  sub_infer->add_option("--input", inf.input, "Single sensor IMGF");
  split_opt(sub_infer, inf.split);

  EvalOpts ev;
  auto* sub_eval = app.add_subcommand("eval", "Score reconstructions and render triptychs");
  sub_eval->add_option("--dataset", ev.dataset);
  sub_eval->add_option("--recon", ev.recon, "Reconstruction directory, or one IMGF with --reference")->required();
  sub_eval->add_option("--reference", ev.reference, "Reference IMGF for a single comparison");
  sub_eval->add_option("--triptychs", ev.triptychs, "Number of sensor|reference|reconstruction PGMs");
  sub_eval->add_option("--profile", ev.profile, "Line row0,col0,row1,col1 for FWHM and two-point columns")
      ->delimiter(',');
  split_opt(sub_eval, ev.split);

  BenchOpts be;
  auto* sub_bench = app.add_subcommand("bench", "Time linear solves against network inference");
  sub_bench->add_option("--artifacts", be.artifacts, "Directory with side_<N>/probed.ccmm and side_<N>/model.ccmw");
  sub_bench->add_option("--sides", be.sides)->delimiter(',');
  sub_bench->add_option("--reps", be.reps);
  sub_bench->add_option("--factorize-reps", be.factorize_reps);
  sub_bench->add_option("--lambda", be.lambda);
  sub_bench->add_option("--modes", be.modes);
  sub_bench->add_option("--corr", be.corr);
  sub_bench->add_flag("--prepare", be.prepare, "Create missing operators and untrained checkpoints");

  TileOpts ti;
  auto* sub_tile = app.add_subcommand("tile", "Raster-tile large objects into FOV crops");
  sub_tile->add_option("--input", ti.inputs, "Large IMGF objects")->required()->delimiter(',');
  sub_tile->add_option("--fov-um", ti.fov_um);
  sub_tile->add_option("--step-um", ti.step_um);
  sub_tile->add_option("--resize", ti.resize, "Resample crops to this side");
  sub_tile->add_option("--operator", ti.operator_path, "Pair the crops through this operator");
  sub_tile->add_option("--split", ti.split)->check(CLI::IsMember({"random", "disjoint"}));
  sub_tile->add_option("--sigma", ti.sigma);
  sub_tile->add_option("--poisson", ti.poisson);
  sub_tile->add_option("--train-fraction", ti.train_fraction);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*sub_gen) return cmd_gen(g, gen, out);
    if (*sub_cal) return cmd_calibrate(g, cal, out);
    if (*sub_solve) return cmd_solve(g, sol, out);
    if (*sub_sweep) return cmd_sweep(g, swp, out);
    if (*sub_train) return cmd_train(g, tr, out);
    if (*sub_infer) return cmd_infer(g, inf, out);
    if (*sub_eval) return cmd_eval(g, ev, out);
    if (*sub_bench) return cmd_bench(g, be, out);
    if (*sub_tile) return cmd_tile(g, ti, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::bad_alloc&) {
    err << "error: out of memory\n";
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace ccm::cli
