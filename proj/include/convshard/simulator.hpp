#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "convshard/balance.hpp"
#include "convshard/network.hpp"

namespace convshard {

enum class DeviceClass { CpuLowMid, CpuHigh, GpuLowMid, GpuHigh, MobileGpu };

/// Performance range of a device class, in units of the weakest desktop CPU.
struct ClassPreset {
  DeviceClass cls;
  std::string_view name;
  double worst = 1.0;
  double best = 1.0;
  double masterPerf = 1.0;  // device 0, which also sets the baseline

  double mean() const { return 0.5 * (worst + best); }
};

const ClassPreset& class_preset(DeviceClass c);
DeviceClass parse_device_class(std::string_view name);
const std::vector<ClassPreset>& class_presets();

struct SimDevice {
  double perf = 1.0;  // relative throughput, higher is faster
};

struct SimConfig {
  NetworkSpec net;
  std::size_t batch = 1024;
  std::vector<SimDevice> devices{SimDevice{}};  // device 0 is the master
  double bandwidthBps = 5'000'000.0;
  double bytesPerElement = 8.0;
  double baselineConvSeconds = 0.87;  // all conv work of one batch on device 0
  double baselineCompSeconds = 0.13;  // everything else, always at the master
  double latencySeconds = 0.0;        // per ConvTask and per ConvResult
  std::uint64_t seed = 0;

  double serial_fraction() const {
    return baselineCompSeconds / (baselineConvSeconds + baselineCompSeconds);
  }
  void validate() const;
};

struct SimResult {
  std::size_t nodes = 1;
  double bandwidthBps = 0.0;
  double commSeconds = 0.0;
  double convSeconds = 0.0;
  double compSeconds = 0.0;
  double totalSeconds = 0.0;
  double speedup = 1.0;
};

/// 64-bit elements exchanged by one distributed forward pass: per conv layer
/// the input goes to every worker holding kernels, each worker's kernels go
/// out once and its feature maps come back once.
std::uint64_t upload_elements(const NetworkSpec& net, std::size_t batch, const WorkloadPlan& plan);
/// Same, for `deviceCount` equally fast devices.
std::uint64_t upload_elements(const NetworkSpec& net, std::size_t batch, std::size_t deviceCount);

/// Plan the cluster in `config` would use: weights from perf values.
WorkloadPlan sim_plan(const SimConfig& config);

SimResult simulate_batch(const SimConfig& config);

/// 1 / serialFraction, for 0 < serialFraction < 1.
double amdahl_bound(double serialFraction);

/// perf values for devices 1..count drawn from N(mean, (best - worst)/4),
/// clamped below at 0.1 * mean. Deterministic under `seed`.
std::vector<double> draw_perf_values(DeviceClass cls, std::size_t count, std::uint64_t seed);

/// Devices of a preset cluster: the class master plus `nodes - 1` drawn
/// workers. Growing `nodes` only appends devices.
std::vector<SimDevice> preset_devices(DeviceClass cls, std::size_t nodes, std::uint64_t seed);

/// simulate_batch for 1..maxNodes devices of `cls`, drawn once from `seed`.
std::vector<SimResult> sweep_nodes(const SimConfig& base, DeviceClass cls, std::size_t maxNodes,
                                   std::uint64_t seed);

/// Grid over bandwidths (outer) and node counts (inner).
std::vector<SimResult> bandwidth_sweep(const SimConfig& base, DeviceClass cls,
                                       std::span<const double> bandwidthsBps,
                                       std::span<const std::size_t> nodeCounts, std::uint64_t seed);

/// Scales the baseline of `config` (keeping its serial fraction) so that
/// simulate_batch reports `targetSpeedup`. Throws ConfigError when no
/// baseline can reach it.
SimConfig calibrate_to_speedup(const SimConfig& config, double targetSpeedup);

/// nodes,bandwidthBps,commS,convS,compS,totalS,speedup
void write_sim_csv(std::ostream& out, std::span<const SimResult> rows, bool header = true);

inline constexpr double kInfiniteBandwidth = std::numeric_limits<double>::infinity();

}  // namespace convshard
