#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "convshard/layers.hpp"
#include "convshard/tensor.hpp"

namespace convshard {

struct ConvLayer {
  std::size_t numK = 0;
  std::size_t kH = 5;
  std::size_t kW = 5;
  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct NormLayer {
  LrnParams params;
  friend bool operator==(const NormLayer& a, const NormLayer& b) {
    return a.params.depth == b.params.depth && a.params.alpha == b.params.alpha &&
           a.params.beta == b.params.beta && a.params.bias == b.params.bias;
  }
};

struct PoolLayer {
  std::size_t window = 2;
  std::size_t stride = 2;
  friend bool operator==(const PoolLayer&, const PoolLayer&) = default;
};

struct FullyConnectedLayer {
  std::size_t outUnits = 0;
  friend bool operator==(const FullyConnectedLayer&, const FullyConnectedLayer&) = default;
};

struct SoftmaxLossLayer {
  std::size_t classes = 0;
  friend bool operator==(const SoftmaxLossLayer&, const SoftmaxLossLayer&) = default;
};

using LayerSpec = std::variant<ConvLayer, NormLayer, PoolLayer, FullyConnectedLayer, SoftmaxLossLayer>;

/// Ordered layer list applied to (channels, height, width) samples. The
/// network must end in FullyConnected followed by SoftmaxLoss.
struct NetworkSpec {
  std::size_t inChannels = 3;
  std::size_t inHeight = 32;
  std::size_t inWidth = 32;
  std::vector<LayerSpec> layers;

  /// Input shape of every layer followed by the logits shape
  /// (batch, classes, 1, 1). Throws DimensionError or ConfigError on a broken chain.
  std::vector<Shape4> shapes(std::size_t batch = 1) const;
  void validate() const { (void)shapes(1); }

  /// Layer indices of the convolutional layers, in order.
  std::vector<std::size_t> conv_layers() const;

  /// Compact text form, e.g. "in:3:32:32;conv:50:5:5;norm:5:0.0001:0.75:2;...".
  std::string to_string() const;
  static NetworkSpec parse(std::string_view text);

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Conv(c1) Norm Pool Conv(c2) Norm Pool FC(10) SoftmaxLoss(10) on 3x32x32.
NetworkSpec reference_network(std::size_t conv1Kernels, std::size_t conv2Kernels);

/// "50:500", "150:800", "300:1000" or "500:1500".
NetworkSpec preset_network(std::string_view name);
const std::vector<std::string>& preset_names();

struct DenseParams {
  Matrix<double> weights;
  Vector<double> bias;
  friend bool operator==(const DenseParams& a, const DenseParams& b) {
    return a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols() &&
           a.weights == b.weights && a.bias.size() == b.bias.size() && a.bias == b.bias;
  }
};

using LayerParams = std::variant<std::monostate, KernelBank, DenseParams>;

/// Trainable state, one slot per layer (monostate for parameter-free layers).
struct Parameters {
  std::vector<LayerParams> layers;

  KernelBank& kernels(std::size_t layer) { return std::get<KernelBank>(layers.at(layer)); }
  const KernelBank& kernels(std::size_t layer) const {
    return std::get<KernelBank>(layers.at(layer));
  }
  DenseParams& dense(std::size_t layer) { return std::get<DenseParams>(layers.at(layer)); }
  const DenseParams& dense(std::size_t layer) const {
    return std::get<DenseParams>(layers.at(layer));
  }

  friend bool operator==(const Parameters&, const Parameters&) = default;
};

/// Zero-mean Gaussian weights with the given deviation; biases zero.
Parameters init_parameters(const NetworkSpec& spec, std::uint64_t seed, double sigma = 0.01);

/// Parameter gradients (same layout as Parameters) plus the gradient with
/// respect to the network input when it was requested.
struct GradientBundle {
  Parameters params;
  Tensor4 input;
};

/// Where convolutions run. The local executor calls the tensor kernels
/// directly; the cluster executor scatters them to workers.
class ConvExecutor {
 public:
  virtual ~ConvExecutor() = default;

  virtual Tensor4 forward(std::size_t layer, const Tensor4& input, const KernelBank& kernels) = 0;
  virtual KernelBank backward_kernels(std::size_t layer, const Tensor4& input,
                                      const KernelBank& kernels, const Tensor4& gradOut) = 0;
  virtual Tensor4 backward_data(std::size_t layer, const KernelBank& kernels,
                                const Tensor4& gradOut) = 0;

  /// Seconds spent convolving on this process and waiting on the network
  /// since the last reset.
  double conv_seconds() const { return convSeconds_; }
  double comm_seconds() const { return commSeconds_; }
  void reset_timing() { convSeconds_ = commSeconds_ = 0.0; }

 protected:
  double convSeconds_ = 0.0;
  double commSeconds_ = 0.0;
};

class LocalConvExecutor final : public ConvExecutor {
 public:
  Tensor4 forward(std::size_t layer, const Tensor4& input, const KernelBank& kernels) override;
  KernelBank backward_kernels(std::size_t layer, const Tensor4& input, const KernelBank& kernels,
                              const Tensor4& gradOut) override;
  Tensor4 backward_data(std::size_t layer, const KernelBank& kernels,
                        const Tensor4& gradOut) override;
};

/// Everything the backward pass needs from a forward pass.
struct ForwardPass {
  std::vector<Tensor4> inputs;           // input of each layer up to the FC layer
  std::vector<PoolIndices> poolIndices;  // indexed by layer, empty for non-pool layers
  Matrix<double> logits;
  double compSeconds = 0.0;  // time outside the executor
};

ForwardPass forward_pass(const NetworkSpec& spec, const Parameters& params, const Tensor4& images,
                         ConvExecutor& exec);

struct LossAndGradients {
  double loss = 0.0;
  GradientBundle grads;
  double compSeconds = 0.0;  // time outside the executor
};

LossAndGradients backward_pass(const NetworkSpec& spec, const Parameters& params,
                               const ForwardPass& fwd, std::span<const int> labels,
                               ConvExecutor& exec, bool wantInputGradient = false);

/// p <- p - lr * g for every layer.
void apply_sgd(Parameters& params, const Parameters& grads, double lr);

std::size_t count_correct(const Matrix<double>& logits, std::span<const int> labels);

/// Wall time of one step split by where it went. compS is measured
/// directly around the non-convolution work, not derived as a remainder.
struct StepTiming {
  double commS = 0.0;
  double convS = 0.0;
  double compS = 0.0;
  double totalS = 0.0;

  /// |comm + conv + comp - total| / total
  double partition_error() const {
    return totalS > 0.0 ? std::abs(commS + convS + compS - totalS) / totalS : 0.0;
  }
};

struct StepResult {
  double loss = 0.0;
  std::size_t correct = 0;
  StepTiming timing;
};

/// One forward/backward/update over a batch. Resets the executor's timers.
StepResult train_step(const NetworkSpec& spec, Parameters& params, const Tensor4& images,
                      std::span<const int> labels, double lr, ConvExecutor& exec);

}  // namespace convshard
