#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "convshard/simulator.hpp"

using namespace convshard;

namespace {

SimConfig base(const std::string& preset, std::size_t batch = 1024) {
  SimConfig c;
  c.net = preset_network(preset);
  c.batch = batch;
  return c;
}

// Direct evaluation of the per-layer terms for equal devices.
std::uint64_t upload_by_hand(std::size_t in, std::size_t inCh, std::size_t k, std::size_t batch,
                             std::size_t workers, std::size_t remoteKernels) {
  const std::size_t out = in - k + 1;
  return in * in * inCh * batch * workers + k * k * inCh * remoteKernels +
         out * out * batch * remoteKernels;
}

}  // namespace

TEST(Upload, SingleDeviceIsZero) {
  for (const auto& p : preset_names()) EXPECT_EQ(upload_elements(preset_network(p), 64, 1), 0u);
}

TEST(Upload, TwoDeviceFirstLayerTerms) {
  // 50 kernels split 25/25: the worker gets the input once, 25 kernels and
  // returns 25 maps.
  const auto net = reference_network(50, 500);
  const auto plan = equal_plan(net, 2);
  EXPECT_EQ(plan.layers[0].kernels[1].count(), 25u);
  EXPECT_EQ(plan.layers[1].kernels[1].count(), 250u);
  const std::uint64_t l1 = 3'145'728 + 25 * 3 * 25 + 28 * 28 * 1024 * 25;
  const std::uint64_t l2 = upload_by_hand(14, 50, 5, 1024, 1, 250);
  EXPECT_EQ(upload_elements(net, 1024, 2), l1 + l2);
}

TEST(Upload, LinearInBatchAndNoCrossTerms) {
  for (const auto& p : preset_names()) {
    const auto net = preset_network(p);
    for (std::size_t n : {2u, 3u, 5u}) {
      const auto u1 = upload_elements(net, 64, n);
      const auto u2 = upload_elements(net, 128, n);
      const auto u3 = upload_elements(net, 192, n);
      // Second difference in batch vanishes; the intercept is the kernel term.
      EXPECT_EQ(u3 - u2, u2 - u1);
      std::uint64_t kernelTerm = 0;
      const auto plan = equal_plan(net, n);
      for (const auto& lp : plan.layers) {
        std::size_t remote = 0;
        for (std::size_t d = 1; d < n; ++d) remote += lp.kernels[d].count();
        kernelTerm += 25 * lp.inChannels * remote;
      }
      EXPECT_EQ(2 * u1 - u2, kernelTerm) << p;
    }
  }
}

TEST(Upload, InputTermDoesNotDependOnKernelCount) {
  // Adding kernels to layer 2 changes only its kernel and output terms.
  const auto a = reference_network(50, 500), b = reference_network(50, 501);
  const auto pa = equal_plan(a, 3), pb = equal_plan(b, 3);
  const auto remote = [](const LayerPlan& lp) { return lp.numK - lp.kernels[0].count(); };
  const std::int64_t diff = static_cast<std::int64_t>(upload_elements(b, 64, pb)) -
                            static_cast<std::int64_t>(upload_elements(a, 64, pa));
  const std::int64_t dr = static_cast<std::int64_t>(remote(pb.layers[1]) - remote(pa.layers[1]));
  EXPECT_EQ(diff, dr * (25 * 50 + 100 * 64));
}

TEST(Simulate, OneDeviceIsUnitSpeedup) {
  const auto r = simulate_batch(base("50:500"));
  EXPECT_EQ(r.speedup, 1.0);
  EXPECT_EQ(r.commSeconds, 0.0);
  EXPECT_DOUBLE_EQ(r.totalSeconds, r.commSeconds + r.convSeconds + r.compSeconds);
}

TEST(Simulate, AsymptoteNearPaperFigure) {
  auto c = base("500:1500");
  c.bandwidthBps = kInfiniteBandwidth;
  c.devices.assign(20000, SimDevice{});
  const double s = simulate_batch(c).speedup;
  EXPECT_LT(s, amdahl_bound(0.13));
  EXPECT_LT(std::abs(s - 7.76) / 7.76, 0.02);
}

TEST(Simulate, InfiniteBandwidthSweepIsMonotone) {
  auto c = base("50:500");
  c.bandwidthBps = kInfiniteBandwidth;
  for (const auto& preset : class_presets()) {
    const auto curve = sweep_nodes(c, preset.cls, 40, 7);
    for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_GE(curve[i].speedup, curve[i - 1].speedup);
  }
}

TEST(Simulate, NeverAboveAmdahl) {
  for (const auto& p : preset_names())
    for (const auto& cls : class_presets())
      for (double bw : {1e6, 5e6, 1e9, kInfiniteBandwidth}) {
        auto c = base(p, 256);
        c.bandwidthBps = bw;
        for (const auto& r : sweep_nodes(c, cls.cls, 33, 3))
          EXPECT_LE(r.speedup, amdahl_bound(c.serial_fraction()) * (1 + 1e-12));
      }
}

TEST(Simulate, DeterministicUnderSeed) {
  const auto c = base("150:800");
  const auto a = sweep_nodes(c, DeviceClass::CpuLowMid, 16, 99);
  const auto b = sweep_nodes(c, DeviceClass::CpuLowMid, 16, 99);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].totalSeconds, b[i].totalSeconds);
  EXPECT_NE(sweep_nodes(c, DeviceClass::CpuLowMid, 16, 100)[5].totalSeconds, a[5].totalSeconds);
}

TEST(Simulate, DrawsAreClampedAndSpread) {
  const auto v = draw_perf_values(DeviceClass::CpuLowMid, 5000, 1);
  double mean = 0;
  for (double x : v) {
    EXPECT_GE(x, 0.15 - 1e-15);
    mean += x;
  }
  EXPECT_NEAR(mean / v.size(), 1.5, 0.02);
}

TEST(Simulate, BandwidthMonotoneAndLowBandwidthCanLose) {
  auto c = base("500:1500");
  c.baselineConvSeconds = 0.87 * 60.0 / 8.0;  // a GPU master
  c.baselineCompSeconds = 0.13 * 60.0 / 8.0;
  const std::vector<double> bws{1e5, 1e6, 5e6, 1e8, 1e10, kInfiniteBandwidth};
  const std::vector<std::size_t> nodes{2, 4, 8};
  const auto grid = bandwidth_sweep(c, DeviceClass::GpuLowMid, bws, nodes, 5);
  ASSERT_EQ(grid.size(), bws.size() * nodes.size());
  for (std::size_t n = 0; n < nodes.size(); ++n)
    for (std::size_t b = 1; b < bws.size(); ++b)
      EXPECT_GE(grid[b * nodes.size() + n].speedup, grid[(b - 1) * nodes.size() + n].speedup);
  EXPECT_LT(grid[0].speedup, 1.0);
}

TEST(Simulate, HighAndLowEndShareThePlateau) {
  auto c = base("500:1500");
  c.bandwidthBps = kInfiniteBandwidth;
  const double lo = sweep_nodes(c, DeviceClass::CpuLowMid, 400, 2).back().speedup;
  const double hi = sweep_nodes(c, DeviceClass::CpuHigh, 400, 2).back().speedup;
  EXPECT_LT(std::abs(lo - hi) / hi, 0.05);
}

TEST(Simulate, MobileNeedsMoreThan32Nodes) {
  // Links slow enough that comm matters: the extra input copies are what hold
  // mobile clusters back. With free comm ~22 phones match three desktop GPUs.
  std::size_t compared = 0;
  for (double T : {7.5, 60.0})
    for (double bw : {1e9, 3e9, 1e10}) {
      auto c = base("500:1500");
      c.baselineConvSeconds = 0.87 * T;
      c.baselineCompSeconds = 0.13 * T;
      c.bandwidthBps = bw;
      const double desktop3 = sweep_nodes(c, DeviceClass::GpuLowMid, 3, 4).back().speedup;
      if (desktop3 <= 1.0) continue;
      ++compared;
      const auto mobile = sweep_nodes(c, DeviceClass::MobileGpu, 32, 4);
      for (const auto& r : mobile) EXPECT_LT(r.speedup, desktop3) << T << " s, " << bw << " bps, " << r.nodes;
    }
  EXPECT_GE(compared, 2u);
}

TEST(Simulate, CalibrationHitsTarget) {
  auto c = base("500:1500");
  c.devices = preset_devices(DeviceClass::CpuLowMid, 4, 1);
  const auto cal = calibrate_to_speedup(c, 3.28);
  EXPECT_NEAR(simulate_batch(cal).speedup, 3.28, 1e-9);
  EXPECT_NEAR(cal.serial_fraction(), 0.13, 1e-12);
  c.devices.assign(4, SimDevice{});
  EXPECT_THROW(calibrate_to_speedup(c, 3.28), ConfigError);  // 4 equal devices cap at 2.88
}

TEST(Amdahl, Values) {
  EXPECT_DOUBLE_EQ(amdahl_bound(0.4), 2.5);
  EXPECT_DOUBLE_EQ(amdahl_bound(0.1), 10.0);
  EXPECT_DOUBLE_EQ(amdahl_bound(0.5), 2.0);
  EXPECT_LT(std::abs(amdahl_bound(0.13) - 7.76) / 7.76, 0.02);
  EXPECT_THROW(amdahl_bound(0.0), ConfigError);
  EXPECT_THROW(amdahl_bound(1.0), ConfigError);
}

TEST(Csv, Columns) {
  std::ostringstream os;
  const auto rows = sweep_nodes(base("50:500", 64), DeviceClass::CpuLowMid, 2, 0);
  write_sim_csv(os, rows);
  std::istringstream in(os.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "nodes,bandwidthBps,commS,convS,compS,totalS,speedup");
  std::getline(in, line);
  EXPECT_EQ(line.substr(0, 2), "1,");
  EXPECT_EQ(std::count(line.begin(), line.end(), ','), 6);
}

TEST(Presets, ParseNames) {
  EXPECT_EQ(parse_device_class("mobile-gpu"), DeviceClass::MobileGpu);
  EXPECT_THROW(parse_device_class("tpu"), ConfigError);
  EXPECT_NEAR(class_preset(DeviceClass::MobileGpu).best * 10, class_preset(DeviceClass::GpuLowMid).best, 1e-12);
}
