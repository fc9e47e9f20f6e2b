#include "convshard/cluster.hpp"

#include <algorithm>
#include <iostream>

#include "convshard/conv.hpp"
#include "convshard/errors.hpp"
#include "convshard/timer.hpp"

namespace convshard {

namespace {

// Re-raises the active exception with the failing device named, keeping
// its category.
template <typename F>
auto for_device(std::size_t deviceId, MessageChannel& ch, F&& f) -> decltype(f()) {
  const auto who = [&] { return "device " + std::to_string(deviceId) + " (" + ch.peer() + "): "; };
  try {
    return f();
  } catch (const TimeoutError& e) {
    throw TimeoutError(who() + e.what());
  } catch (const ConnectionError& e) {
    throw ConnectionError(who() + e.what());
  } catch (const CorruptionError& e) {
    throw CorruptionError(who() + e.what());
  } catch (const ProtocolError& e) {
    throw ProtocolError(who() + e.what());
  } catch (const SizeError& e) {
    throw SizeError(who() + e.what());
  }
}

void gather_one(std::size_t deviceId, MessageChannel& ch, std::uint32_t layer, ConvDirection dir,
                const Shape4& expected, detail::Dense4<double>& target, std::size_t axis,
                std::size_t begin) {
  for_device(deviceId, ch, [&] {
    ch.recv_conv_result_into(layer, dir, expected, target, axis, begin);
    ch.send(msg::AllOk{});
  });
}

}  // namespace

DistributedConvExecutor::DistributedConvExecutor(std::vector<MessageChannel*> workers,
                                                 WorkloadPlan plan, bool distributeBackward)
    : workers_(std::move(workers)), plan_(std::move(plan)), distributeBackward_(distributeBackward) {
  if (plan_.device_count() != workers_.size() + 1)
    throw ConfigError("plan covers " + std::to_string(plan_.device_count()) + " devices but " +
                      std::to_string(workers_.size()) + " workers plus the master are connected");
}

const LayerPlan& DistributedConvExecutor::layer_plan(std::size_t layer, std::size_t numK,
                                                     std::size_t inCh) const {
  const auto& lp = plan_.for_layer(layer);
  if (lp.numK != numK || lp.inChannels != inCh)
    throw ConfigError("plan for layer " + std::to_string(layer) + " expects " +
                      std::to_string(lp.numK) + "x" + std::to_string(lp.inChannels) +
                      " kernels, got " + std::to_string(numK) + "x" + std::to_string(inCh));
  return lp;
}

Tensor4 DistributedConvExecutor::forward(std::size_t layer, const Tensor4& input,
                                         const KernelBank& kernels) {
  detail::check_conv_shapes(input, kernels);
  const auto& lp = layer_plan(layer, kernels.out_maps(), kernels.in_channels());
  Stopwatch total;
  Tensor4 out(conv_output_shape(input.shape(), kernels.shape()));
  const auto ord = static_cast<std::uint32_t>(layer);

  for (std::size_t d = 1; d < lp.kernels.size(); ++d) {
    const Share& s = lp.kernels[d];
    if (s.count() == 0) continue;
    const KernelBank sub = slice_kernels(kernels, s.begin, s.end);
    for_device(d, *workers_[d - 1], [&] {
      workers_[d - 1]->send_conv_task({ord, ConvDirection::Forward, &input, &sub, nullptr});
    });
  }
  Stopwatch local;
  conv2d_forward_range(input, kernels, lp.kernels[0].begin, lp.kernels[0].end, out);
  const double localS = local.seconds();
  for (std::size_t d = 1; d < lp.kernels.size(); ++d) {
    const Share& s = lp.kernels[d];
    if (s.count() == 0) continue;
    gather_one(d, *workers_[d - 1], ord, ConvDirection::Forward,
               {out.n(), s.count(), out.h(), out.w()}, out, 1, s.begin);
  }
  convSeconds_ += localS;
  commSeconds_ += total.seconds() - localS;
  return out;
}

KernelBank DistributedConvExecutor::backward_kernels(std::size_t layer, const Tensor4& input,
                                                     const KernelBank& kernels,
                                                     const Tensor4& gradOut) {
  if (!distributeBackward_ || workers_.empty()) {
    Stopwatch sw;
    auto g = conv2d_backward_kernels(input, kernels, gradOut);
    convSeconds_ += sw.seconds();
    return g;
  }
  detail::check_conv_shapes(input, kernels);
  if (gradOut.shape() != conv_output_shape(input.shape(), kernels.shape()))
    throw DimensionError("gradOut " + gradOut.shape().to_string() + " does not match conv output");
  const auto& lp = layer_plan(layer, kernels.out_maps(), kernels.in_channels());
  Stopwatch total;
  KernelBank grad(kernels.shape());
  const auto ord = static_cast<std::uint32_t>(layer);

  for (std::size_t d = 1; d < lp.kernels.size(); ++d) {
    const Share& s = lp.kernels[d];
    if (s.count() == 0) continue;
    const KernelBank sub = slice_kernels(kernels, s.begin, s.end);
    const Tensor4 g = slice_channels(gradOut, s.begin, s.end);
    for_device(d, *workers_[d - 1], [&] {
      workers_[d - 1]->send_conv_task({ord, ConvDirection::BackwardKernel, &input, &sub, &g});
    });
  }
  Stopwatch local;
  conv2d_backward_kernels_range(input, kernels, gradOut, lp.kernels[0].begin, lp.kernels[0].end,
                                grad);
  const double localS = local.seconds();
  for (std::size_t d = 1; d < lp.kernels.size(); ++d) {
    const Share& s = lp.kernels[d];
    if (s.count() == 0) continue;
    gather_one(d, *workers_[d - 1], ord, ConvDirection::BackwardKernel,
               {s.count(), grad.in_channels(), grad.kernel_h(), grad.kernel_w()}, grad, 0, s.begin);
  }
  convSeconds_ += localS;
  commSeconds_ += total.seconds() - localS;
  return grad;
}

Tensor4 DistributedConvExecutor::backward_data(std::size_t layer, const KernelBank& kernels,
                                               const Tensor4& gradOut) {
  if (!distributeBackward_ || workers_.empty()) {
    Stopwatch sw;
    auto g = conv2d_backward_data(kernels, gradOut);
    convSeconds_ += sw.seconds();
    return g;
  }
  detail::check_backward_data_shapes(kernels, gradOut);
  const auto& lp = layer_plan(layer, kernels.out_maps(), kernels.in_channels());
  Stopwatch total;
  Tensor4 grad(gradOut.n(), kernels.in_channels(), gradOut.h() + kernels.kernel_h() - 1,
               gradOut.w() + kernels.kernel_w() - 1);
  const auto ord = static_cast<std::uint32_t>(layer);

  for (std::size_t d = 1; d < lp.channels.size(); ++d) {
    const Share& s = lp.channels[d];
    if (s.count() == 0) continue;
    const KernelBank sub = slice_kernel_channels(kernels, s.begin, s.end);
    for_device(d, *workers_[d - 1], [&] {
      workers_[d - 1]->send_conv_task({ord, ConvDirection::BackwardData, nullptr, &sub, &gradOut});
    });
  }
  Stopwatch local;
  conv2d_backward_data_range(kernels, gradOut, lp.channels[0].begin, lp.channels[0].end, grad);
  const double localS = local.seconds();
  for (std::size_t d = 1; d < lp.channels.size(); ++d) {
    const Share& s = lp.channels[d];
    if (s.count() == 0) continue;
    gather_one(d, *workers_[d - 1], ord, ConvDirection::BackwardData,
               {grad.n(), s.count(), grad.h(), grad.w()}, grad, 1, s.begin);
  }
  convSeconds_ += localS;
  commSeconds_ += total.seconds() - localS;
  return grad;
}

Tensor4 gather_and_reorder(std::span<const DeviceResult> results, std::span<const Share> shares) {
  std::size_t channels = 0;
  for (const auto& s : shares) {
    if (s.begin != channels)
      throw ConsistencyError("shares are not contiguous at device " + std::to_string(s.deviceId));
    channels = s.end;
  }
  std::vector<const DeviceResult*> byDevice(shares.size(), nullptr);
  for (const auto& r : results) {
    if (r.deviceId >= shares.size())
      throw ConsistencyError("result from unknown device " + std::to_string(r.deviceId));
    if (byDevice[r.deviceId])
      throw ConsistencyError("two results from device " + std::to_string(r.deviceId));
    byDevice[r.deviceId] = &r;
  }
  const DeviceResult* first = nullptr;
  for (std::size_t d = 0; d < shares.size(); ++d) {
    if (shares[d].count() == 0) continue;
    if (!byDevice[d])
      throw IncompletenessError("no result from device " + std::to_string(d) + " for channels [" +
                                std::to_string(shares[d].begin) + "," +
                                std::to_string(shares[d].end) + ")");
    if (!first) first = byDevice[d];
  }
  if (!first) throw IncompletenessError("no device holds any channel");
  const Shape4 ref = first->output.shape();
  Tensor4 out(ref.d0, channels, ref.d2, ref.d3);
  const std::size_t plane = ref.d2 * ref.d3;
  for (std::size_t d = 0; d < shares.size(); ++d) {
    const Share& s = shares[d];
    if (s.count() == 0) continue;
    const Tensor4& part = byDevice[d]->output;
    if (part.shape() != Shape4{ref.d0, s.count(), ref.d2, ref.d3})
      throw CorruptionError("device " + std::to_string(d) + " returned " + part.shape().to_string() +
                            " for " + std::to_string(s.count()) + " channels");
    for (std::size_t n = 0; n < ref.d0; ++n)
      std::copy_n(part.plane(n, 0), s.count() * plane, out.plane(n, s.begin));
  }
  return out;
}

HandshakeResult handshake_and_balance(const std::vector<MessageChannel*>& workers,
                                      const NetworkSpec& spec, const BenchSpec& probe,
                                      const BenchFunction& localBench,
                                      const std::string& masterName) {
  probe.validate();
  HandshakeResult r;
  r.deviceNames.push_back(masterName);
  for (std::size_t i = 0; i < workers.size(); ++i) {
    auto& ch = *workers[i];
    const Message reply = for_device(i + 1, ch, [&] {
      ch.send(msg::Hello{kProtocolVersion, masterName});
      return ch.recv();
    });
    const auto* hello = std::get_if<msg::Hello>(&reply);
    if (!hello)
      throw ProtocolError("device " + std::to_string(i + 1) + " (" + ch.peer() + ") answered Hello with " +
                          to_string(type_of(reply)));
    if (hello->protocolVersion != kProtocolVersion)
      throw ProtocolError("device " + std::to_string(i + 1) + " (" + ch.peer() + ") speaks protocol " +
                          std::to_string(hello->protocolVersion) + ", master speaks " +
                          std::to_string(kProtocolVersion));
    r.deviceNames.push_back(hello->deviceName);
  }
  std::vector<DeviceBenchmark> benches;
  for (std::size_t i = 0; i < workers.size(); ++i) {
    auto& ch = *workers[i];
    const Message reply = for_device(i + 1, ch, [&] {
      ch.send(msg::BenchRequest{probe});
      return ch.recv();
    });
    const auto* report = std::get_if<msg::BenchReport>(&reply);
    if (!report)
      throw ProtocolError("device " + std::to_string(i + 1) + " (" + ch.peer() +
                          ") sent no BenchReport, got " + to_string(type_of(reply)));
    benches.push_back({i + 1, report->elapsedSeconds});
  }
  const double own = localBench ? localBench(probe) : run_benchmark(probe);
  r.benchmarks.push_back({0, own});
  r.benchmarks.insert(r.benchmarks.end(), benches.begin(), benches.end());
  r.plan = build_plan(spec, r.benchmarks);
  return r;
}

const char* to_string(WorkerExit e) {
  switch (e) {
    case WorkerExit::TrainOver: return "train over";
    case WorkerExit::ConnectionLost: return "connection lost";
    case WorkerExit::Timeout: return "timed out";
    case WorkerExit::Malformed: return "malformed message";
    case WorkerExit::VersionMismatch: return "protocol version mismatch";
  }
  return "unknown";
}

int exit_code(WorkerExit e) { return e == WorkerExit::TrainOver ? 0 : 2; }

namespace {

void serve_conv_task(MessageChannel& ch, const msg::ConvTask& t, std::size_t blockSamples) {
  const std::size_t block = std::max<std::size_t>(blockSamples, 1);
  switch (t.direction) {
    case ConvDirection::Forward: {
      detail::check_conv_shapes(t.input, t.kernels);
      if (!t.extra.empty()) throw CorruptionError("forward task carries an extra tensor");
      const Shape4 dims = conv_output_shape(t.input.shape(), t.kernels.shape());
      const std::size_t per = dims.d1 * dims.d2 * dims.d3;
      std::vector<double> col;
      ch.send_conv_result_stream(
          t.layerOrdinal, t.direction, dims,
          [&](std::size_t first, std::size_t count, std::vector<double>& out) {
            out.assign(count * per, 0.0);
            for (std::size_t n = first; n < first + count; ++n)
              detail::forward_sample(t.input, t.kernels, 0, dims.d1, n, out.data() + (n - first) * per,
                                     col);
          },
          block);
      return;
    }
    case ConvDirection::BackwardKernel: {
      const KernelBank g = conv2d_backward_kernels(t.input, t.kernels, t.extra);
      ch.send(msg::ConvResult{t.layerOrdinal, t.direction, Tensor4(g.shape(), g.data())});
      return;
    }
    case ConvDirection::BackwardData: {
      if (!t.input.empty()) throw CorruptionError("input-gradient task carries an input tensor");
      detail::check_backward_data_shapes(t.kernels, t.extra);
      const std::size_t C = t.kernels.in_channels(), kh = t.kernels.kernel_h(),
                        kw = t.kernels.kernel_w();
      const Shape4 dims{t.extra.n(), C, t.extra.h() + kh - 1, t.extra.w() + kw - 1};
      const std::size_t per = dims.d1 * dims.d2 * dims.d3;
      const auto kt = detail::transpose_kernels(t.kernels, 0, C);
      std::vector<double> gcol;
      ch.send_conv_result_stream(
          t.layerOrdinal, t.direction, dims,
          [&](std::size_t first, std::size_t count, std::vector<double>& out) {
            out.assign(count * per, 0.0);
            for (std::size_t n = first; n < first + count; ++n)
              detail::backward_data_sample(kt, C, kh, kw, t.extra, n, out.data() + (n - first) * per,
                                           gcol);
          },
          block);
      return;
    }
  }
}

}  // namespace

WorkerExit worker_serve(MessageChannel& ch, const WorkerOptions& options) {
  const auto log = [&](const std::string& line) {
    if (options.log) options.log(line);
  };
  try {
    for (;;) {
      Message m = ch.recv();
      if (auto* hello = std::get_if<msg::Hello>(&m)) {
        ch.send(msg::Hello{kProtocolVersion, options.name});
        if (hello->protocolVersion != kProtocolVersion) {
          log("master speaks protocol " + std::to_string(hello->protocolVersion));
          ch.close();
          return WorkerExit::VersionMismatch;
        }
        log("connected to " + hello->deviceName);
      } else if (auto* req = std::get_if<msg::BenchRequest>(&m)) {
        req->spec.validate();
        const double t = options.bench ? options.bench(req->spec) : run_benchmark(req->spec);
        log("benchmark " + std::to_string(t) + " s");
        ch.send(msg::BenchReport{t});
      } else if (auto* task = std::get_if<msg::ConvTask>(&m)) {
        serve_conv_task(ch, *task, options.blockSamples);
        const Message ack = ch.recv();
        if (!std::holds_alternative<msg::AllOk>(ack)) {
          log(std::string("expected AllOk, got ") + to_string(type_of(ack)));
          ch.close();
          return WorkerExit::Malformed;
        }
      } else if (std::holds_alternative<msg::TrainOver>(m)) {
        log("training over");
        ch.close();
        return WorkerExit::TrainOver;
      } else {
        log(std::string("unexpected ") + to_string(type_of(m)));
        ch.close();
        return WorkerExit::Malformed;
      }
    }
  } catch (const TimeoutError& e) {
    log(e.what());
    ch.close();
    return WorkerExit::Timeout;
  } catch (const ConnectionError& e) {
    log(e.what());
    ch.close();
    return WorkerExit::ConnectionLost;
  } catch (const Error& e) {
    // Protocol, size, shape or config faults in what the master sent.
    log(e.what());
    ch.close();
    return WorkerExit::Malformed;
  }
}

Tensor4 Dataset::batch_images(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > size())
    throw DataError("batch [" + std::to_string(first) + "," + std::to_string(first + count) +
                    ") outside a dataset of " + std::to_string(size()));
  const std::size_t per = images.c() * images.h() * images.w();
  Tensor4 out(count, images.c(), images.h(), images.w());
  std::copy_n(images.data().data() + first * per, count * per, out.data().data());
  return out;
}

std::span<const int> Dataset::batch_labels(std::size_t first, std::size_t count) const {
  return std::span<const int>(labels).subspan(first, count);
}

std::vector<BatchMetrics> train(TrainState& state, const Dataset& data, const TrainOptions& options,
                                ConvExecutor& exec) {
  if (options.batch == 0) throw ConfigError("batch size must be positive");
  if (data.images.n() != data.size())
    throw DataError("dataset has " + std::to_string(data.images.n()) + " images but " +
                    std::to_string(data.size()) + " labels");
  std::size_t perEpoch = data.size() / options.batch;
  if (options.maxBatchesPerEpoch) perEpoch = std::min(perEpoch, options.maxBatchesPerEpoch);
  if (perEpoch == 0)
    throw ConfigError("dataset of " + std::to_string(data.size()) + " cannot fill one batch of " +
                      std::to_string(options.batch));
  std::vector<BatchMetrics> metrics;
  for (; state.epoch < options.epochs; ++state.epoch, state.batchIdx = 0) {
    for (; state.batchIdx < perEpoch; ++state.batchIdx) {
      Stopwatch total;
      const std::size_t first = state.batchIdx * options.batch;
      const Tensor4 images = data.batch_images(first, options.batch);
      const auto labels = data.batch_labels(first, options.batch);
      const double prepS = total.seconds();
      Stopwatch stepWall;
      const StepResult step = train_step(state.spec, state.params, images, labels, options.lr, exec);
      // Freeing the step's activations happens after its own clock stops.
      const double releaseS = stepWall.seconds() - step.timing.totalS;
      BatchMetrics m;
      m.epoch = state.epoch;
      m.batchIdx = state.batchIdx;
      m.timing = step.timing;
      m.timing.compS += prepS + releaseS;
      m.timing.totalS = total.seconds();
      m.loss = step.loss;
      m.accuracy = static_cast<double>(step.correct) / static_cast<double>(options.batch);
      metrics.push_back(m);
      if (options.onBatch) options.onBatch(m);
    }
    if (options.onEpochEnd) {
      TrainState snapshot = state;
      ++snapshot.epoch;
      snapshot.batchIdx = 0;
      options.onEpochEnd(snapshot);
    }
  }
  return metrics;
}

MasterResult master_train(const std::vector<MessageChannel*>& workers, TrainState& state,
                          const Dataset& data, const MasterOptions& options) {
  state.spec.validate();
  MasterResult result;
  if (workers.empty()) {
    result.plan = equal_plan(state.spec, 1);
  } else {
    const std::size_t benchBatch =
        options.benchBatch ? options.benchBatch : std::min<std::size_t>(options.train.batch, 32);
    result.plan = handshake_and_balance(workers, state.spec, bench_spec_for(state.spec, benchBatch),
                                        options.localBench)
                      .plan;
  }
  DistributedConvExecutor exec(workers, result.plan, options.distributeBackward);
  try {
    result.metrics = train(state, data, options.train, exec);
  } catch (...) {
    if (options.onFailure) options.onFailure(state);
    for (auto* w : workers) w->close();
    throw;
  }
  for (std::size_t i = 0; i < workers.size(); ++i)
    for_device(i + 1, *workers[i], [&] { workers[i]->send(msg::TrainOver{}); });
  return result;
}

}  // namespace convshard
