#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "convshard/balance.hpp"
#include "convshard/network.hpp"
#include "convshard/protocol.hpp"

namespace convshard {

/// Runs each convolution across the master (device 0) and its workers
/// (workers[i] is device i + 1). Forward and kernel-gradient work is split by
/// kernel, input-gradient work by input channel, so every output element is
/// computed by exactly one device with the single-node arithmetic.
class DistributedConvExecutor final : public ConvExecutor {
 public:
  DistributedConvExecutor(std::vector<MessageChannel*> workers, WorkloadPlan plan,
                          bool distributeBackward = true);

  Tensor4 forward(std::size_t layer, const Tensor4& input, const KernelBank& kernels) override;
  KernelBank backward_kernels(std::size_t layer, const Tensor4& input, const KernelBank& kernels,
                              const Tensor4& gradOut) override;
  Tensor4 backward_data(std::size_t layer, const KernelBank& kernels,
                        const Tensor4& gradOut) override;

  const WorkloadPlan& plan() const { return plan_; }
  bool distributes_backward() const { return distributeBackward_; }

 private:
  const LayerPlan& layer_plan(std::size_t layer, std::size_t numK, std::size_t inCh) const;

  std::vector<MessageChannel*> workers_;
  WorkloadPlan plan_;
  bool distributeBackward_;
};

/// One device's slice of a distributed result.
struct DeviceResult {
  std::size_t deviceId = 0;
  Tensor4 output;
};

/// Concatenates per-device channel slices in global channel order, whatever
/// order `results` arrive in. Devices with an empty share may be absent.
Tensor4 gather_and_reorder(std::span<const DeviceResult> results, std::span<const Share> shares);

using BenchFunction = std::function<double(const BenchSpec&)>;

struct HandshakeResult {
  WorkloadPlan plan;
  std::vector<DeviceBenchmark> benchmarks;  // device order, master first
  std::vector<std::string> deviceNames;
};

/// Hello exchange with every worker, then BenchRequest/BenchReport with
/// each in turn, then the master's own benchmark, then the plan. Workers
/// are benchmarked one at a time so they do not compete for the machine
/// when they share it.
HandshakeResult handshake_and_balance(const std::vector<MessageChannel*>& workers,
                                      const NetworkSpec& spec, const BenchSpec& probe,
                                      const BenchFunction& localBench = {},
                                      const std::string& masterName = "master");

enum class WorkerExit {
  TrainOver,       // clean shutdown
  ConnectionLost,  // master went away
  Timeout,         // nothing from the master within the channel timeout
  Malformed,       // undecodable or inconsistent message; nothing was sent back
  VersionMismatch,
};

const char* to_string(WorkerExit e);
/// 0 for TrainOver, 2 (network) otherwise.
int exit_code(WorkerExit e);

struct WorkerOptions {
  std::string name = "worker";
  BenchFunction bench;               // defaults to run_benchmark
  std::size_t blockSamples = 8;      // samples per streamed result block
  std::function<void(const std::string&)> log;
};

/// The worker loop: answer Hello and BenchRequest, and for each ConvTask
/// compute the requested direction, stream the ConvResult back and wait for
/// AllOk. Holds no model state between tasks.
WorkerExit worker_serve(MessageChannel& channel, const WorkerOptions& options = {});

/// Training data held entirely by the master.
struct Dataset {
  Tensor4 images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  /// Samples [first, first + count) as a batch.
  Tensor4 batch_images(std::size_t first, std::size_t count) const;
  std::span<const int> batch_labels(std::size_t first, std::size_t count) const;
};

struct TrainState {
  NetworkSpec spec;
  Parameters params;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;      // epoch of the next batch to run
  std::size_t batchIdx = 0;   // next batch within that epoch
};

struct BatchMetrics {
  std::size_t epoch = 0;
  std::size_t batchIdx = 0;
  StepTiming timing;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainOptions {
  std::size_t batch = 64;
  std::size_t epochs = 1;
  double lr = 0.01;
  std::size_t maxBatchesPerEpoch = 0;  // 0 = every full batch
  std::function<void(const BatchMetrics&)> onBatch;
  std::function<void(const TrainState&)> onEpochEnd;
};

/// Sequential batches from the front of the data; a trailing partial batch
/// is dropped. Resumes from state.epoch / state.batchIdx.
std::vector<BatchMetrics> train(TrainState& state, const Dataset& data, const TrainOptions& options,
                                ConvExecutor& exec);

struct MasterOptions {
  TrainOptions train;
  bool distributeBackward = true;
  std::size_t benchBatch = 0;  // 0 = min(batch, 32)
  BenchFunction localBench;
  /// Called with the last completed state when training fails.
  std::function<void(const TrainState&)> onFailure;
};

struct MasterResult {
  WorkloadPlan plan;
  std::vector<BatchMetrics> metrics;
};

/// Handshake, balance, train, then TrainOver to every worker. On error the
/// checkpoint hook runs with the last completed batch and the error
/// propagates.
MasterResult master_train(const std::vector<MessageChannel*>& workers, TrainState& state,
                          const Dataset& data, const MasterOptions& options);

}  // namespace convshard
