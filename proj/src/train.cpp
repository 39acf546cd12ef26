#include "ccm/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include "ccm/error.hpp"
#include "ccm/metrics.hpp"
#include "ccm/random.hpp"

namespace ccm::nn {

namespace {

AlignedVector<float> to_float(const ImageGrid& img) {
  AlignedVector<float> v(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) v[i] = static_cast<float>(img.data()[i]);
  return v;
}

ImageGrid resized(const ImageGrid& img, std::size_t side) {
  if (img.height() == side && img.width() == side) return img;
  return resample(img, side, side);
}

template <typename Fn>
void parallel_items(std::size_t count, std::size_t threads, Fn&& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(0, i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(w, i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

void TrainConfig::validate() const {
  const auto bad = [](const char* m) { throw Error(ErrorKind::invalid_argument, m); };
  if (epochs < 1) bad("epochs must be >= 1");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (!(adam.learning_rate > 0.0) || !std::isfinite(adam.learning_rate)) bad("learning rate must be > 0");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0)) bad("beta1 must be in [0, 1)");
  if (!(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) bad("beta2 must be in [0, 1)");
  if (!(adam.epsilon > 0.0)) bad("epsilon must be > 0");
}

NetInput prepare_input(const ImageGrid& sensor, std::size_t side) {
  const ImageGrid img = resized(sensor, side);
  NetInput in;
  in.side = side;
  in.pitch_um = img.pitch_um();
  in.values.resize(img.size());
  double mean = 0.0;
  for (double v : img.data()) mean += v;
  mean /= static_cast<double>(img.size());
  double var = 0.0;
  for (double v : img.data()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(img.size());
  // Variance at rounding level relative to the mean counts as a constant image.
  const double scale = var > 1e-20 * mean * mean && var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) in.values[i] = static_cast<float>((img.data()[i] - mean) * scale);
  return in;
}

ImageGrid prepare_target(const ImageGrid& object, std::size_t side) { return normalize_unit(resized(object, side)); }

TrainResult train(const PairedDataset& dataset, const NetworkSpec& spec, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  auto params = init_network<float>(spec);
  auto opt = OptimizerState<float>::fresh(params.values.size(), config.adam);
  return train_from(dataset, std::move(params), std::move(opt), config, on_epoch);
}

TrainResult train_from(const PairedDataset& dataset, NetworkParams<float> params, OptimizerState<float> optimizer,
                       const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  const auto& train_idx = dataset.manifest.train_indices;
  if (dataset.entries.empty() || train_idx.empty())
    throw Error(ErrorKind::invalid_argument, "training needs a non-empty training split");
  if (optimizer.m.size() != params.values.size())
    throw Error(ErrorKind::shape, "optimizer state does not match the network");
  optimizer.config = config.adam;

  const std::size_t side = params.spec.input_size;
  std::vector<AlignedVector<float>> inputs(dataset.entries.size());
  std::vector<AlignedVector<float>> targets(dataset.entries.size());
  for (std::size_t i : train_idx) {
    const auto& e = dataset.entries.at(i);
    inputs[i] = prepare_input(e.sensor, side).values;
    targets[i] = to_float(prepare_target(e.object, side));
  }

  const Network<float> net(params.spec);
  AlignedVector<float> grads(params.values.size());
  TrainResult result;

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    Rng rng = make_rng(config.shuffle_seed, Stream::shuffle, epoch);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<std::span<const float>> bx, bt;
      for (std::size_t j = start; j < end; ++j) {
        bx.emplace_back(inputs[order[j]]);
        bt.emplace_back(targets[order[j]]);
      }
      const double loss = batch_gradient<float>(net, params, bx, bt, config.loss, grads, config.threads);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " batch " << batch_no + 1;
        throw Error(ErrorKind::numeric, msg.str());
      }
      adam_step<float>(params.values, grads, optimizer);
      ++result.optimizer_steps;
      loss_sum += loss * static_cast<double>(end - start);
      seen += end - start;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    if (!dataset.manifest.test_indices.empty()) {
      const auto ev = evaluate(params, dataset, dataset.manifest.test_indices, config.threads);
      rec.test_mae = ev.mean_mae;
      rec.test_ssim = ev.mean_ssim;
      if (epoch == config.epochs) result.test = ev;
    }
    result.curve.push_back(rec);
    if (config.checkpoint_dir) {
      std::ostringstream name;
      name << "epoch_" << std::setw(4) << std::setfill('0') << epoch << ".ccmw";
      write_checkpoint(*config.checkpoint_dir / name.str(), params, &optimizer);
    }
    if (on_epoch) on_epoch(rec);
  }
  result.params = std::move(params);
  result.optimizer = std::move(optimizer);
  return result;
}

Inference infer(const Network<float>& net, const NetworkParams<float>& params, const NetInput& input,
                Workspace<float>& ws) {
  const std::size_t side = params.spec.input_size;
  if (input.side != side || input.values.size() != side * side) {
    std::ostringstream msg;
    msg << "input layer expects " << side << "x" << side << ", got " << input.side << "x" << input.side;
    throw Error(ErrorKind::shape, msg.str());
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto z = net.forward(params, input.values, ws);
  const auto t1 = std::chrono::steady_clock::now();
  std::vector<double> v(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) v[i] = logistic_open(static_cast<double>(z[i]));
  Inference out;
  out.image = ImageGrid(side, side, input.pitch_um, std::move(v));
  out.elapsed_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
  return out;
}

Inference infer(const NetworkParams<float>& params, const ImageGrid& sensor) {
  const Network<float> net(params.spec);
  Workspace<float> ws;
  return infer(net, params, prepare_input(sensor, params.spec.input_size), ws);
}

EvalSummary evaluate(const NetworkParams<float>& params, const PairedDataset& dataset,
                     const std::vector<std::size_t>& indices, std::size_t threads) {
  EvalSummary out;
  if (indices.empty()) return out;
  const Network<float> net(params.spec);
  const std::size_t side = params.spec.input_size;
  out.mae.assign(indices.size(), 0.0);
  out.ssim.assign(indices.size(), 0.0);
  std::vector<Workspace<float>> ws(std::max<std::size_t>(1, std::min(threads, indices.size())));
  parallel_items(indices.size(), threads, [&](std::size_t w, std::size_t k) {
    const auto& e = dataset.entries.at(indices[k]);
    const auto rec = infer(net, params, prepare_input(e.sensor, side), ws[w]);
    const ImageGrid ref = prepare_target(e.object, side);
    const ImageGrid img = normalize_unit(rec.image);
    out.mae[k] = mae(img, ref);
    out.ssim[k] = ssim(img, ref);
  });
  // Summed in index order so the means do not depend on the worker count.
  for (std::size_t k = 0; k < indices.size(); ++k) {
    out.mean_mae += out.mae[k];
    out.mean_ssim += out.ssim[k];
  }
  out.mean_mae /= static_cast<double>(indices.size());
  out.mean_ssim /= static_cast<double>(indices.size());
  return out;
}

void write_loss_curve(const std::filesystem::path& path, const std::vector<EpochRecord>& curve) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  out << "epoch,train_loss,test_mae,test_ssim\n";
  out << std::setprecision(10);
  for (const auto& r : curve) out << r.epoch << ',' << r.train_loss << ',' << r.test_mae << ',' << r.test_ssim << '\n';
  if (!out) throw Error(ErrorKind::io, "failed writing " + path.string());
}

}  // namespace ccm::nn
