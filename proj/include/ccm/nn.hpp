#pragma once

// Encoder-decoder reconstruction network with hand-written backpropagation.
//
// Layout for depth D, base channels C, growth g, L layers per block (t_l = C * 2^l):
//   [proj]   dense n -> n map from the sensor image onto the object grid (optional)
//   stem     k x k conv 1 -> C, ReLU
//   enc l    block on (l == 0 ? C : t_{l-1}) channels, 1x1 transition -> t_l (skip), 2x2 average pool
//   bott     block on t_{D-1}, 1x1 transition -> t_D
//   dec l    nearest x2 upsample, concat skip l, block on t_{l+1} + t_l, 1x1 transition -> t_l
//   head     1x1 conv t_0 -> 1, logistic
// A dense block's layer j maps (c + j*g) -> g channels and appends its output; a residual block's
// layer maps c -> c and adds. All convolutions are zero padded; activations are ReLU.

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ccm/image.hpp"

namespace ccm::nn {

enum class BlockKind : std::uint8_t { dense = 0, residual = 1 };
enum class LossKind : std::uint8_t { pixelwise_cross_entropy = 0, mean_squared_error = 1 };

struct NetworkSpec {
  std::size_t input_size = 32;
  std::size_t depth = 3;
  std::size_t base_channels = 16;
  std::size_t growth = 16;
  std::size_t dense_layers_per_block = 2;
  std::size_t kernel_size = 3;
  BlockKind block = BlockKind::dense;
  bool input_projection = true;
  std::uint64_t seed = 0;

  std::size_t pixels() const noexcept { return input_size * input_size; }
  void validate() const;
  bool operator==(const NetworkSpec&) const = default;
};

struct ParamInfo {
  std::string name;
  std::vector<std::size_t> dims;
  std::size_t offset = 0;  // into the flat parameter vector, 64-byte aligned
  std::size_t size = 0;
  std::size_t fan_in = 0;
  bool bias = false;
};

std::vector<ParamInfo> parameter_layout(const NetworkSpec& spec);
/// Number of trainable scalars (alignment padding excluded).
std::size_t parameter_count(const NetworkSpec& spec);
/// Multiply-accumulate count of one forward pass.
std::size_t forward_macs(const NetworkSpec& spec);

template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct NetworkParams {
  NetworkSpec spec;
  std::vector<ParamInfo> layout;
  AlignedVector<T> values;  // flat storage; padding slots stay zero

  std::size_t count() const;
  std::span<T> tensor(std::size_t i) { return {values.data() + layout[i].offset, layout[i].size}; }
  std::span<const T> tensor(std::size_t i) const { return {values.data() + layout[i].offset, layout[i].size}; }
  /// Throws ErrorKind::numeric when any value is non-finite.
  void validate() const;
};

/// He-normal kernels (variance 2 / fan_in) from per-tensor seeded streams; zero biases.
template <typename T>
NetworkParams<T> init_network(const NetworkSpec& spec);

template <typename T>
NetworkParams<T> zero_network(const NetworkSpec& spec);

namespace detail {
struct Arch;
}

/// Per-item activations kept for the backward pass. Pixel p of a side x side map is row
/// p = y * side + x; channels are columns.
template <typename T>
struct Workspace {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  struct Conv {
    Mat cols;  // im2col patches (k > 1 only)
    Mat out;   // post-activation output
  };
  struct Block {
    Mat buffer;               // dense: block input followed by every layer output
    std::vector<Mat> states;  // residual: h_0 .. h_L
    std::vector<Conv> layers;
    Conv transition;
  };

  Mat input;
  Mat stem_in;
  Conv stem;
  std::vector<Block> enc;
  std::vector<Mat> pooled;
  Block bott;
  std::vector<Block> dec;
  Conv head;
};

template <typename T>
class Network {
 public:
  explicit Network(const NetworkSpec& spec);

  const NetworkSpec& spec() const noexcept { return spec_; }

  /// Logits (pixels()) for one flattened input image.
  std::span<const T> forward(const NetworkParams<T>& params, std::span<const T> input, Workspace<T>& ws) const;
  /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits) for the last forward() on `ws`.
  void backward(const NetworkParams<T>& params, Workspace<T>& ws, std::span<const T> dlogits, std::span<T> grads) const;

  /// Channel count after each block layer, per block in execution order.
  std::vector<std::vector<std::size_t>> block_channel_trace() const;

 private:
  NetworkSpec spec_;
  std::shared_ptr<const detail::Arch> arch_;
};

// Loss on flattened images: `logits` are pre-squash head outputs.
template <typename T>
double loss_value(LossKind kind, std::span<const T> logits, std::span<const T> targets);
/// d(loss)/d(logits) scaled by 1 / (pixels * batch_size) for a batch mean.
template <typename T>
void loss_gradient(LossKind kind, std::span<const T> logits, std::span<const T> targets, std::size_t batch_size,
                   std::span<T> dlogits);

double logistic(double z) noexcept;
/// Logistic output clamped to the open interval (0, 1).
double logistic_open(double z) noexcept;

/// Batch-mean loss; `grads` is overwritten with its gradient. Items are processed on `threads` workers and their gradients summed in index order,
/// so the result does not depend on the worker count.
template <typename T>
double batch_gradient(const Network<T>& net, const NetworkParams<T>& params,
                      const std::vector<std::span<const T>>& inputs, const std::vector<std::span<const T>>& targets,
                      LossKind kind, std::span<T> grads, std::size_t threads = 1);

/// Batch of sensor images (input_size square) to reconstructions strictly inside (0, 1).
template <typename T>
std::vector<ImageGrid> forward_net(const NetworkParams<T>& params, const std::vector<ImageGrid>& sensors);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  AdamConfig config;
  AlignedVector<T> m;
  AlignedVector<T> v;

  static OptimizerState fresh(std::size_t n, const AdamConfig& cfg);
};

/// m <- b1 m + (1 - b1) g; v <- b2 v + (1 - b2) g^2; theta <- theta - a * mhat / (sqrt(vhat) + eps).
template <typename T>
void adam_step(std::span<T> params, std::span<const T> grads, OptimizerState<T>& state);

}  // namespace ccm::nn
