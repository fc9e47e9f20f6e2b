#include "convshard/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "convshard/errors.hpp"
#include "convshard/rng.hpp"

namespace convshard {

namespace {

const std::vector<ClassPreset> kPresets{
    {DeviceClass::CpuLowMid, "cpu-low-mid", 1.0, 2.0, 1.0},
    {DeviceClass::CpuHigh, "cpu-high", 2.0, 4.0, 2.0},
    {DeviceClass::GpuLowMid, "gpu-low-mid", 8.0, 11.84, 8.0},
    {DeviceClass::GpuHigh, "gpu-high", 16.0, 23.68, 16.0},
    // Phones are about ten times slower than desktop GPUs; the master stays
    // a desktop GPU.
    {DeviceClass::MobileGpu, "mobile-gpu", 0.8, 1.184, 8.0},
};

}  // namespace

const std::vector<ClassPreset>& class_presets() { return kPresets; }

const ClassPreset& class_preset(DeviceClass c) {
  for (const auto& p : kPresets)
    if (p.cls == c) return p;
  throw ConfigError("unknown device class");
}

DeviceClass parse_device_class(std::string_view name) {
  for (const auto& p : kPresets)
    if (p.name == name) return p.cls;
  std::string known;
  for (const auto& p : kPresets) known += (known.empty() ? "" : ", ") + std::string(p.name);
  throw ConfigError("unknown device class '" + std::string(name) + "' (known: " + known + ")");
}

void SimConfig::validate() const {
  net.validate();
  if (net.conv_layers().empty()) throw ConfigError("simulated network has no conv layer");
  if (batch == 0) throw ConfigError("batch must be positive");
  if (devices.empty()) throw ConfigError("simulation needs at least the master device");
  for (const auto& d : devices)
    if (!(d.perf > 0.0) || !std::isfinite(d.perf)) throw ConfigError("device perf values must be > 0");
  if (!(bandwidthBps > 0.0)) throw ConfigError("bandwidth must be > 0");
  if (!(baselineConvSeconds > 0.0) || !(baselineCompSeconds > 0.0))
    throw ConfigError("baseline conv and comp times must be > 0");
  if (!(latencySeconds >= 0.0)) throw ConfigError("latency must be >= 0");
  if (!(bytesPerElement > 0.0)) throw ConfigError("bytes per element must be > 0");
}

std::uint64_t upload_elements(const NetworkSpec& net, std::size_t batch, const WorkloadPlan& plan) {
  const auto shapes = net.shapes(batch);
  std::uint64_t total = 0;
  for (std::size_t idx : net.conv_layers()) {
    const auto& conv = std::get<ConvLayer>(net.layers[idx]);
    const Shape4 in = shapes[idx], out = shapes[idx + 1];
    const LayerPlan& lp = plan.for_layer(idx);
    std::uint64_t workers = 0, remote = 0;
    for (std::size_t d = 1; d < lp.kernels.size(); ++d) {
      workers += lp.kernels[d].count() > 0;
      remote += lp.kernels[d].count();
    }
    total += in.d2 * in.d3 * in.d1 * batch * workers;
    total += conv.kH * conv.kW * in.d1 * remote;
    total += out.d2 * out.d3 * batch * remote;
  }
  return total;
}

std::uint64_t upload_elements(const NetworkSpec& net, std::size_t batch, std::size_t deviceCount) {
  return upload_elements(net, batch, equal_plan(net, deviceCount));
}

WorkloadPlan sim_plan(const SimConfig& config) {
  std::vector<DeviceBenchmark> b(config.devices.size());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = {i, 1.0 / config.devices[i].perf};
  return build_plan(config.net, b);
}

SimResult simulate_batch(const SimConfig& config) {
  config.validate();
  SimResult r;
  r.nodes = config.devices.size();
  r.bandwidthBps = config.bandwidthBps;
  double perfSum = 0.0;
  for (const auto& d : config.devices) perfSum += d.perf;
  r.convSeconds = config.baselineConvSeconds * config.devices[0].perf / perfSum;
  r.compSeconds = config.baselineCompSeconds;
  if (r.nodes > 1) {
    const WorkloadPlan plan = sim_plan(config);
    const double bits =
        static_cast<double>(upload_elements(config.net, config.batch, plan)) * config.bytesPerElement * 8.0;
    r.commSeconds = std::isinf(config.bandwidthBps) ? 0.0 : bits / config.bandwidthBps;
    if (config.latencySeconds > 0.0) {
      std::size_t messages = 0;
      for (const auto& lp : plan.layers)
        for (std::size_t d = 1; d < lp.kernels.size(); ++d) messages += 2 * (lp.kernels[d].count() > 0);
      r.commSeconds += config.latencySeconds * static_cast<double>(messages);
    }
  }
  r.totalSeconds = r.commSeconds + r.convSeconds + r.compSeconds;
  r.speedup = (config.baselineConvSeconds + config.baselineCompSeconds) / r.totalSeconds;
  return r;
}

double amdahl_bound(double serialFraction) {
  if (!(serialFraction > 0.0 && serialFraction < 1.0))
    throw ConfigError("serial fraction must lie strictly between 0 and 1, got " +
                      std::to_string(serialFraction));
  return 1.0 / serialFraction;
}

std::vector<double> draw_perf_values(DeviceClass cls, std::size_t count, std::uint64_t seed) {
  const ClassPreset& p = class_preset(cls);
  Rng rng(seed);
  std::vector<double> out(count);
  for (auto& v : out) v = std::max(rng.normal(p.mean(), (p.best - p.worst) / 4.0), 0.1 * p.mean());
  return out;
}

std::vector<SimDevice> preset_devices(DeviceClass cls, std::size_t nodes, std::uint64_t seed) {
  if (nodes == 0) throw ConfigError("need at least one node");
  std::vector<SimDevice> devices{SimDevice{class_preset(cls).masterPerf}};
  for (double v : draw_perf_values(cls, nodes - 1, seed)) devices.push_back({v});
  return devices;
}

std::vector<SimResult> sweep_nodes(const SimConfig& base, DeviceClass cls, std::size_t maxNodes,
                                   std::uint64_t seed) {
  if (maxNodes == 0) throw ConfigError("maxNodes must be >= 1");
  const auto all = preset_devices(cls, maxNodes, seed);
  std::vector<SimResult> out;
  SimConfig c = base;
  for (std::size_t n = 1; n <= maxNodes; ++n) {
    c.devices.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    out.push_back(simulate_batch(c));
  }
  return out;
}

std::vector<SimResult> bandwidth_sweep(const SimConfig& base, DeviceClass cls,
                                       std::span<const double> bandwidthsBps,
                                       std::span<const std::size_t> nodeCounts, std::uint64_t seed) {
  for (double b : bandwidthsBps)
    if (!(b > 0.0)) throw ConfigError("bandwidths must be > 0");
  std::size_t maxNodes = 1;
  for (std::size_t n : nodeCounts) maxNodes = std::max(maxNodes, n);
  const auto all = preset_devices(cls, maxNodes, seed);
  std::vector<SimResult> out;
  SimConfig c = base;
  for (double b : bandwidthsBps) {
    c.bandwidthBps = b;
    for (std::size_t n : nodeCounts) {
      if (n == 0) throw ConfigError("node counts must be >= 1");
      c.devices.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
      out.push_back(simulate_batch(c));
    }
  }
  return out;
}

SimConfig calibrate_to_speedup(const SimConfig& config, double targetSpeedup) {
  // With T the single-device batch time and s the serial fraction,
  //   1/speedup = (1 - s) p0 / sum(p) + s + comm / T,
  // and comm does not depend on T.
  SimConfig probe = config;
  const SimResult r = simulate_batch(probe);
  const double s = config.serial_fraction();
  double perfSum = 0.0;
  for (const auto& d : config.devices) perfSum += d.perf;
  const double computeOnly = (1.0 - s) * config.devices[0].perf / perfSum + s;
  const double slack = 1.0 / targetSpeedup - computeOnly;
  if (!(slack > 0.0) || r.commSeconds <= 0.0)
    throw ConfigError("speedup " + std::to_string(targetSpeedup) + " is unreachable: compute alone caps it at " +
                      std::to_string(1.0 / computeOnly));
  const double T = r.commSeconds / slack;
  SimConfig out = config;
  out.baselineConvSeconds = (1.0 - s) * T;
  out.baselineCompSeconds = s * T;
  return out;
}

void write_sim_csv(std::ostream& out, std::span<const SimResult> rows, bool header) {
  if (header) out << "nodes,bandwidthBps,commS,convS,compS,totalS,speedup\n";
  const auto old = out.precision(std::numeric_limits<double>::max_digits10);
  for (const auto& r : rows)
    out << r.nodes << ',' << r.bandwidthBps << ',' << r.commSeconds << ',' << r.convSeconds << ','
        << r.compSeconds << ',' << r.totalSeconds << ',' << r.speedup << '\n';
  out.precision(old);
}

}  // namespace convshard
