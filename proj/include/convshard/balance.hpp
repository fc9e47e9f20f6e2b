#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "convshard/network.hpp"
#include "convshard/tensor.hpp"

namespace convshard {

/// Shapes and repetition counts of the convolution probe.
struct BenchSpec {
  Shape4 input;
  Shape4 kernels;
  std::uint32_t repetitions = 3;
  std::uint32_t warmups = 1;

  void validate() const;
  friend bool operator==(const BenchSpec&, const BenchSpec&) = default;
};

/// Probe mirroring the first convolutional layer of `spec` at `batch`.
BenchSpec bench_spec_for(const NetworkSpec& spec, std::size_t batch);

struct DeviceBenchmark {
  std::size_t deviceId = 0;
  double elapsed = 0.0;  // seconds, t_i
};

struct BenchTiming {
  double seconds = 0.0;        // median seconds per conv2d_forward call
  std::size_t callsPerSample = 1;  // raised when one call is below timer resolution
};

/// Median wall-clock seconds of one conv2d_forward on seeded random data,
/// after `warmups` discarded runs. Samples shorter than 1 ms are re-timed
/// over more calls.
BenchTiming run_benchmark_detailed(const BenchSpec& spec, std::uint64_t seed = 0);
double run_benchmark(const BenchSpec& spec, std::uint64_t seed = 0);

/// w_i = (max t / t_i) / sum_j (max t / t_j)
std::vector<double> compute_weights(std::span<const double> times);

/// Largest-remainder apportionment of numK units; leftover units go to the
/// largest fractional remainders, ties to the lower index.
std::vector<std::size_t> apportion_kernels(std::size_t numK, std::span<const double> weights);

/// Parallel time if every device gets exactly its fractional share:
/// max over i of w_i * t_i.
double predicted_parallel_time(std::span<const double> times, std::span<const double> weights);

/// One device's contiguous slice [begin, end) of a partitioned dimension.
struct Share {
  std::size_t deviceId = 0;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t count() const { return end - begin; }
  friend bool operator==(const Share&, const Share&) = default;
};

/// Partition of one convolutional layer. Kernels split the forward and
/// kernel-gradient work; input channels split the input-gradient work.
struct LayerPlan {
  std::size_t layer = 0;  // index into NetworkSpec::layers
  std::size_t numK = 0;
  std::size_t inChannels = 0;
  std::vector<Share> kernels;   // one entry per device, in device order
  std::vector<Share> channels;  // one entry per device, in device order
  friend bool operator==(const LayerPlan&, const LayerPlan&) = default;
};

struct WorkloadPlan {
  std::vector<double> weights;
  std::vector<LayerPlan> layers;

  std::size_t device_count() const { return weights.size(); }
  const LayerPlan& for_layer(std::size_t layer) const;
  std::string describe() const;
  friend bool operator==(const WorkloadPlan&, const WorkloadPlan&) = default;
};

/// Contiguous shares of `total` units in device order.
std::vector<Share> contiguous_shares(std::size_t total, std::span<const double> weights);

/// Device 0 is the master. Benchmarks may arrive in any order but must
/// cover device ids 0..n-1 exactly once.
WorkloadPlan build_plan(const NetworkSpec& spec, std::span<const DeviceBenchmark> benchmarks);

/// Plan for `devices` equally fast devices.
WorkloadPlan equal_plan(const NetworkSpec& spec, std::size_t devices);

}  // namespace convshard
