#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include "ccm/dataset.hpp"
#include "ccm/image.hpp"
#include "ccm/nn.hpp"

namespace ccm::nn {

struct TrainConfig {
  std::size_t epochs = 40;
  std::size_t batch_size = 16;
  AdamConfig adam;
  LossKind loss = LossKind::pixelwise_cross_entropy;
  std::uint64_t shuffle_seed = 0;
  std::size_t threads = 1;
  std::optional<std::filesystem::path> checkpoint_dir;  // epoch_NNNN.ccmw per epoch when set

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double test_mae = 0.0;
  double test_ssim = 0.0;
};

struct EvalSummary {
  double mean_mae = 0.0;
  double mean_ssim = 0.0;
  std::vector<double> mae;
  std::vector<double> ssim;
};

struct TrainResult {
  NetworkParams<float> params;
  OptimizerState<float> optimizer;
  std::vector<EpochRecord> curve;
  EvalSummary test;
  std::size_t optimizer_steps = 0;
};

/// Network input: the sensor image resampled to side x side, then shifted and scaled to zero mean
/// and unit variance (a constant image maps to zeros).
struct NetInput {
  std::size_t side = 0;
  double pitch_um = 1.0;
  AlignedVector<float> values;
};

NetInput prepare_input(const ImageGrid& sensor, std::size_t side);
/// Training target: the object resampled to side x side, then scaled to unit max.
ImageGrid prepare_target(const ImageGrid& object, std::size_t side);

TrainResult train(const PairedDataset& dataset, const NetworkSpec& spec, const TrainConfig& config,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Continues from existing parameters and optimizer state.
TrainResult train_from(const PairedDataset& dataset, NetworkParams<float> params, OptimizerState<float> optimizer,
                       const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch = {});

struct Inference {
  ImageGrid image;  // values in (0, 1), object grid at input_size
  double elapsed_ms = 0.0;
};

/// One forward pass on a prepared input. The clock covers the pass only.
Inference infer(const Network<float>& net, const NetworkParams<float>& params, const NetInput& input,
                Workspace<float>& ws);
Inference infer(const NetworkParams<float>& params, const ImageGrid& sensor);

/// Reconstructs `indices` of the dataset and scores them against unit-max references.
EvalSummary evaluate(const NetworkParams<float>& params, const PairedDataset& dataset,
                     const std::vector<std::size_t>& indices, std::size_t threads = 1);

void write_loss_curve(const std::filesystem::path& path, const std::vector<EpochRecord>& curve);

struct Checkpoint {
  NetworkParams<float> params;
  std::optional<OptimizerState<float>> optimizer;
};

void write_checkpoint(std::ostream& out, const NetworkParams<float>& params, const OptimizerState<float>* optimizer);
void write_checkpoint(const std::filesystem::path& path, const NetworkParams<float>& params,
                      const OptimizerState<float>* optimizer);
Checkpoint read_checkpoint(std::istream& in, const std::string& context);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace ccm::nn
