#include "convshard/balance.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

#include "convshard/conv.hpp"
#include "convshard/rng.hpp"
#include "convshard/timer.hpp"

namespace convshard {

void BenchSpec::validate() const {
  if (!input.all_positive() || !kernels.all_positive())
    throw ConfigError("benchmark shapes must be non-empty, got input " + input.to_string() +
                      " kernels " + kernels.to_string());
  if (input.d1 != kernels.d1 || input.d2 < kernels.d2 || input.d3 < kernels.d3)
    throw DimensionError("benchmark kernels " + kernels.to_string() + " do not fit input " +
                         input.to_string());
  if (repetitions < 1) throw ConfigError("benchmark needs at least one repetition");
}

BenchSpec bench_spec_for(const NetworkSpec& spec, std::size_t batch) {
  const auto convs = spec.conv_layers();
  if (convs.empty()) throw ConfigError("network has no convolutional layer to benchmark");
  const auto shapes = spec.shapes(batch);
  const auto& conv = std::get<ConvLayer>(spec.layers[convs.front()]);
  const Shape4 in = shapes[convs.front()];
  return {in, {conv.numK, in.d1, conv.kH, conv.kW}, 3, 1};
}

BenchTiming run_benchmark_detailed(const BenchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  Tensor4 input(spec.input);
  KernelBank kernels(spec.kernels);
  for (auto& v : input.values()) v = rng.uniform(-1.0, 1.0);
  for (auto& v : kernels.values()) v = rng.uniform(-1.0, 1.0);

  constexpr double kResolution = 1e-3;
  std::size_t calls = 1;
  const auto sample = [&] {
    Stopwatch sw;
    for (std::size_t i = 0; i < calls; ++i) {
      volatile double sink = conv2d_forward(input, kernels).data()[0];
      (void)sink;
    }
    return sw.seconds();
  };

  for (std::uint32_t i = 0; i < spec.warmups; ++i) sample();
  double probe = sample();
  if (probe < kResolution) {
    std::clog << "warning: benchmark call took " << probe * 1e3
              << " ms, below timer resolution; timing more calls per sample\n";
    while (probe < kResolution && calls < (1u << 20)) {
      calls *= 2;
      probe = sample();
    }
  }
  std::vector<double> samples(spec.repetitions);
  for (auto& s : samples) s = sample() / static_cast<double>(calls);
  std::nth_element(samples.begin(), samples.begin() + samples.size() / 2, samples.end());
  double median = samples[samples.size() / 2];
  if (samples.size() % 2 == 0) {
    const double lower = *std::max_element(samples.begin(), samples.begin() + samples.size() / 2);
    median = 0.5 * (median + lower);
  }
  return {median, calls};
}

double run_benchmark(const BenchSpec& spec, std::uint64_t seed) {
  return run_benchmark_detailed(spec, seed).seconds;
}

std::vector<double> compute_weights(std::span<const double> times) {
  if (times.empty()) throw ConfigError("no device times to weigh");
  for (std::size_t i = 0; i < times.size(); ++i)
    if (!(times[i] > 0.0) || !std::isfinite(times[i]))
      throw DataError("device " + std::to_string(i) + " has nonpositive time " +
                      std::to_string(times[i]));
  const double tmax = *std::max_element(times.begin(), times.end());
  std::vector<double> perf(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) perf[i] = tmax / times[i];
  const double total = std::accumulate(perf.begin(), perf.end(), 0.0);
  for (auto& p : perf) p /= total;
  return perf;
}

std::vector<std::size_t> apportion_kernels(std::size_t numK, std::span<const double> weights) {
  if (numK == 0) throw ConfigError("cannot apportion zero kernels");
  if (weights.empty()) throw ConfigError("no weights to apportion by");
  for (double w : weights)
    if (!(w >= 0.0) || !std::isfinite(w)) throw DataError("weights must be finite and >= 0");

  const std::size_t n = weights.size();
  std::vector<std::size_t> counts(n);
  std::vector<double> remainder(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double quota = weights[i] * static_cast<double>(numK);
    counts[i] = static_cast<std::size_t>(std::floor(quota));
    remainder[i] = quota - std::floor(quota);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  // Rounding in w * numK can leave the floors one unit off either way.
  for (std::size_t k = 0; assigned < numK; k = (k + 1) % n, ++assigned) ++counts[order[k]];
  for (std::size_t k = n; assigned > numK;) {
    k = (k + n - 1) % n;
    if (counts[order[k]] > 0) --counts[order[k]], --assigned;
  }
  return counts;
}

double predicted_parallel_time(std::span<const double> times, std::span<const double> weights) {
  if (times.size() != weights.size()) throw DimensionError("times and weights differ in length");
  double t = 0.0;
  for (std::size_t i = 0; i < times.size(); ++i) t = std::max(t, times[i] * weights[i]);
  return t;
}

const LayerPlan& WorkloadPlan::for_layer(std::size_t layer) const {
  for (const auto& l : layers)
    if (l.layer == layer) return l;
  throw ConfigError("plan has no entry for layer " + std::to_string(layer));
}

std::string WorkloadPlan::describe() const {
  std::ostringstream os;
  os << "weights:";
  for (double w : weights) os << ' ' << w;
  for (const auto& l : layers) {
    os << "\nlayer " << l.layer << " kernels:";
    for (const auto& s : l.kernels) os << " d" << s.deviceId << "[" << s.begin << "," << s.end << ")";
    os << " channels:";
    for (const auto& s : l.channels) os << " d" << s.deviceId << "[" << s.begin << "," << s.end << ")";
  }
  return os.str();
}

std::vector<Share> contiguous_shares(std::size_t total, std::span<const double> weights) {
  const auto counts = apportion_kernels(total, weights);
  std::vector<Share> shares(counts.size());
  std::size_t at = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    shares[i] = {i, at, at + counts[i]};
    at += counts[i];
  }
  return shares;
}

WorkloadPlan build_plan(const NetworkSpec& spec, std::span<const DeviceBenchmark> benchmarks) {
  if (benchmarks.empty()) throw ConfigError("cannot build a plan without device benchmarks");
  std::vector<double> times(benchmarks.size(), -1.0);
  for (const auto& b : benchmarks) {
    if (b.deviceId >= times.size() || times[b.deviceId] >= 0.0)
      throw ConfigError("benchmark device ids must be 0.." + std::to_string(times.size() - 1) +
                        " without repeats");
    times[b.deviceId] = b.elapsed;
  }
  WorkloadPlan plan;
  plan.weights = compute_weights(times);
  const auto shapes = spec.shapes(1);
  for (std::size_t idx : spec.conv_layers()) {
    const auto& conv = std::get<ConvLayer>(spec.layers[idx]);
    LayerPlan lp;
    lp.layer = idx;
    lp.numK = conv.numK;
    lp.inChannels = shapes[idx].d1;
    lp.kernels = contiguous_shares(lp.numK, plan.weights);
    lp.channels = contiguous_shares(lp.inChannels, plan.weights);
    plan.layers.push_back(std::move(lp));
  }
  return plan;
}

WorkloadPlan equal_plan(const NetworkSpec& spec, std::size_t devices) {
  if (devices == 0) throw ConfigError("need at least one device");
  std::vector<DeviceBenchmark> b(devices);
  for (std::size_t i = 0; i < devices; ++i) b[i] = {i, 1.0};
  return build_plan(spec, b);
}

}  // namespace convshard
