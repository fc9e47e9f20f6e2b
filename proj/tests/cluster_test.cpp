#include <gtest/gtest.h>

#include <thread>

#include "convshard/cluster.hpp"
#include "convshard/conv.hpp"
#include "convshard/loopback.hpp"
#include "convshard/rng.hpp"
#include "oracles.hpp"

using namespace convshard;

namespace {

BenchFunction fixed_time(double t) {
  return [t](const BenchSpec&) { return t; };
}

WorkloadPlan plan_with_shares(const NetworkSpec& spec, std::size_t layer,
                              std::vector<std::size_t> counts) {
  WorkloadPlan plan = equal_plan(spec, counts.size());
  std::size_t at = 0;
  auto& lp = plan.layers[0];
  EXPECT_EQ(lp.layer, layer);
  for (std::size_t d = 0; d < counts.size(); ++d) {
    lp.kernels[d] = {d, at, at + counts[d]};
    at += counts[d];
  }
  return plan;
}

Dataset synthetic(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d{oracle::random_tensor(rng, n, 3, 32, 32, 0.0, 1.0), std::vector<int>(n)};
  for (auto& l : d.labels) l = static_cast<int>(rng.next() % 10);
  return d;
}

// Small network so full training runs stay fast.
NetworkSpec small_net() { return reference_network(6, 10); }

}  // namespace

TEST(Distribute, SingleDeviceIsLocal) {
  Rng rng(1);
  const auto spec = reference_network(5, 4);
  const auto in = oracle::random_tensor(rng, 2, 3, 32, 32);
  const auto k = oracle::random_kernels(rng, 5, 3, 5, 5);
  DistributedConvExecutor exec({}, equal_plan(spec, 1));
  EXPECT_EQ(exec.forward(0, in, k), conv2d_forward(in, k));
}

TEST(Distribute, ThreeWorkersUnevenSplit) {
  Rng rng(2);
  const auto spec = reference_network(50, 8);
  const auto in = oracle::random_tensor(rng, 2, 3, 32, 32);
  const auto k = oracle::random_kernels(rng, 50, 3, 5, 5);
  LoopbackCluster cluster(3);
  DistributedConvExecutor exec(cluster.channels(), plan_with_shares(spec, 0, {20, 15, 10, 5}));
  EXPECT_EQ(exec.forward(0, in, k), conv2d_forward(in, k));
  for (auto* ch : cluster.channels()) EXPECT_EQ(ch->stats().sent_of(MsgType::AllOk).frames, 1u);
}

TEST(Distribute, BackwardDirectionsMatchLocal) {
  Rng rng(3);
  const auto spec = reference_network(7, 9);
  const auto shapes = spec.shapes(3);
  const auto in = oracle::random_tensor(rng, 3, 7, 14, 14);
  const auto k = oracle::random_kernels(rng, 9, 7, 5, 5);
  const auto go = oracle::random_tensor(rng, 3, 9, 10, 10);
  LoopbackCluster cluster(2);
  const std::vector<DeviceBenchmark> b{{0, 1.0}, {1, 2.0}, {2, 3.0}};
  DistributedConvExecutor exec(cluster.channels(), build_plan(spec, b));
  EXPECT_EQ(exec.backward_kernels(3, in, k, go), conv2d_backward_kernels(in, k, go));
  EXPECT_EQ(exec.backward_data(3, k, go), conv2d_backward_data(k, go));
  EXPECT_EQ(exec.forward(3, in, k), conv2d_forward(in, k));
  EXPECT_GT(exec.comm_seconds(), 0.0);
}

TEST(Distribute, ZeroShareWorkerGetsNoTask) {
  Rng rng(4);
  const auto spec = reference_network(4, 8);
  const auto in = oracle::random_tensor(rng, 1, 3, 32, 32);
  const auto k = oracle::random_kernels(rng, 4, 3, 5, 5);
  LoopbackCluster cluster(2);
  DistributedConvExecutor exec(cluster.channels(), plan_with_shares(spec, 0, {2, 0, 2}));
  EXPECT_EQ(exec.forward(0, in, k), conv2d_forward(in, k));
  EXPECT_EQ(cluster.channels()[0]->stats().sent_of(MsgType::ConvTask).frames, 0u);
  EXPECT_EQ(cluster.channels()[1]->stats().sent_of(MsgType::ConvTask).frames, 1u);
}

TEST(Distribute, WrongResultDimsNameTheWorker) {
  Rng rng(5);
  const auto spec = reference_network(4, 8);
  const auto in = oracle::random_tensor(rng, 1, 3, 32, 32);
  const auto k = oracle::random_kernels(rng, 4, 3, 5, 5);
  auto [a, b] = make_loopback_pair();
  MessageChannel master(std::move(a)), fake(std::move(b));
  std::thread liar([&] {
    fake.recv();
    fake.send(msg::ConvResult{0, ConvDirection::Forward, Tensor4(1, 3, 28, 28)});
  });
  DistributedConvExecutor exec({&master}, plan_with_shares(spec, 0, {2, 2}));
  try {
    exec.forward(0, in, k);
    ADD_FAILURE() << "no error";
  } catch (const CorruptionError& e) {
    EXPECT_NE(std::string(e.what()).find("device 1"), std::string::npos) << e.what();
  }
  liar.join();
}

TEST(Distribute, DeadWorkerIsConnectionError) {
  const auto spec = reference_network(4, 8);
  Rng rng(6);
  const auto in = oracle::random_tensor(rng, 1, 3, 32, 32);
  const auto k = oracle::random_kernels(rng, 4, 3, 5, 5);
  auto [a, b] = make_loopback_pair();
  MessageChannel master(std::move(a));
  b->close();
  DistributedConvExecutor exec({&master}, plan_with_shares(spec, 0, {2, 2}));
  EXPECT_THROW(exec.forward(0, in, k), ConnectionError);
}

TEST(Gather, ConstantMapsInOrder) {
  const std::vector<Share> shares{{0, 0, 2}, {1, 2, 5}};
  std::vector<DeviceResult> results;
  for (const auto& s : shares) {
    Tensor4 t(1, s.count(), 2, 2);
    for (std::size_t c = 0; c < s.count(); ++c)
      for (std::size_t i = 0; i < 4; ++i) t.plane(0, c)[i] = static_cast<double>(s.begin + c);
    results.push_back({s.deviceId, t});
  }
  const auto out = gather_and_reorder(results, shares);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(out(0, c, 1, 1), static_cast<double>(c));
  std::reverse(results.begin(), results.end());
  EXPECT_EQ(gather_and_reorder(results, shares), out);
}

TEST(Gather, ZeroShareMayBeAbsentMissingMayNot) {
  const std::vector<Share> shares{{0, 0, 2}, {1, 2, 2}, {2, 2, 3}};
  std::vector<DeviceResult> results{{0, Tensor4(1, 2, 1, 1)}, {2, Tensor4(1, 1, 1, 1)}};
  EXPECT_EQ(gather_and_reorder(results, shares).shape(), (Shape4{1, 3, 1, 1}));
  results.pop_back();
  EXPECT_THROW(gather_and_reorder(results, shares), IncompletenessError);
}

TEST(Handshake, WeightsFromAllThreeTimes) {
  auto [a1, b1] = make_loopback_pair();
  auto [a2, b2] = make_loopback_pair();
  MessageChannel m1(std::move(a1)), m2(std::move(a2)), w1(std::move(b1)), w2(std::move(b2));
  std::thread t1([&] { worker_serve(w1, {"w1", fixed_time(10.0)}); });
  std::thread t2([&] { worker_serve(w2, {"w2", fixed_time(20.0)}); });
  const auto spec = preset_network("50:500");
  const auto r = handshake_and_balance({&m1, &m2}, spec, bench_spec_for(spec, 2), fixed_time(10.0));
  const auto want = compute_weights(std::vector<double>{10, 10, 20});
  EXPECT_EQ(r.plan.weights, want);
  EXPECT_NEAR(r.plan.weights[0], 0.4, 1e-15);
  EXPECT_EQ(r.deviceNames, (std::vector<std::string>{"master", "w1", "w2"}));
  m1.send(msg::TrainOver{});
  m2.send(msg::TrainOver{});
  t1.join();
  t2.join();
}

TEST(Handshake, SlowWorkerShareIsSmall) {
  WorkerOptions o;
  o.bench = fixed_time(100.0);
  LoopbackCluster cluster(1, o);
  const auto spec = preset_network("500:1500");
  const auto r = handshake_and_balance(cluster.channels(), spec, bench_spec_for(spec, 1), fixed_time(1.0));
  EXPECT_LT(r.plan.layers[1].kernels[1].count(), 30u);
  cluster.channels()[0]->send(msg::TrainOver{});
  EXPECT_EQ(cluster.join(), std::vector<WorkerExit>{WorkerExit::TrainOver});
}

TEST(Worker, ForwardTaskMatchesLocal) {
  Rng rng(7);
  auto [a, b] = make_loopback_pair();
  MessageChannel master(std::move(a)), worker(std::move(b));
  WorkerExit exit{};
  std::thread t([&] { exit = worker_serve(worker, {"w", {}, 3}); });
  msg::ConvTask task{2, ConvDirection::Forward, oracle::random_tensor(rng, 7, 4, 9, 9),
                     oracle::random_kernels(rng, 5, 4, 5, 5), 5, {}};
  master.send(task);
  const auto r = std::get<msg::ConvResult>(master.recv());
  EXPECT_EQ(r.output, conv2d_forward(task.input, task.kernels));
  EXPECT_EQ(r.layerOrdinal, 2u);
  master.send(msg::AllOk{});
  master.send(msg::TrainOver{});
  t.join();
  EXPECT_EQ(exit, WorkerExit::TrainOver);
}

TEST(Worker, TrainOverFirstIsCleanExit) {
  auto [a, b] = make_loopback_pair();
  MessageChannel master(std::move(a)), worker(std::move(b));
  master.send(msg::TrainOver{});
  EXPECT_EQ(worker_serve(worker), WorkerExit::TrainOver);
  EXPECT_EQ(exit_code(WorkerExit::TrainOver), 0);
}

TEST(Worker, MissingAllOkTimesOut) {
  Rng rng(8);
  auto [a, b] = make_loopback_pair();
  MessageChannel master(std::move(a)), worker(std::move(b), Millis(100));
  master.send(msg::ConvTask{0, ConvDirection::Forward, oracle::random_tensor(rng, 1, 1, 3, 3),
                            KernelBank(1, 1, 2, 2), 1, {}});
  EXPECT_EQ(worker_serve(worker), WorkerExit::Timeout);
  EXPECT_NE(exit_code(WorkerExit::Timeout), 0);
  EXPECT_TRUE(std::holds_alternative<msg::ConvResult>(master.recv()));
}

TEST(Worker, MalformedTaskGetsNoReply) {
  auto [a, b] = make_loopback_pair();
  MessageChannel master(std::move(a), Millis(200)), worker(std::move(b));
  // Kernel channels do not match the input.
  master.send(msg::ConvTask{0, ConvDirection::Forward, Tensor4(1, 2, 3, 3), KernelBank(1, 1, 2, 2), 1, {}});
  EXPECT_EQ(worker_serve(worker), WorkerExit::Malformed);
  EXPECT_THROW(master.recv(), ConnectionError);
}

TEST(Worker, GarbageBytesAreMalformed) {
  auto [a, b] = make_loopback_pair();
  MessageChannel worker(std::move(b));
  const std::vector<std::byte> junk(20, std::byte{0x42});
  a->write_all(junk);
  EXPECT_EQ(worker_serve(worker), WorkerExit::Malformed);
}

TEST(Worker, ConnectionLoss) {
  auto [a, b] = make_loopback_pair();
  MessageChannel worker(std::move(b));
  a->close();
  EXPECT_EQ(worker_serve(worker), WorkerExit::ConnectionLost);
}

TEST(Worker, VersionMismatchAborts) {
  auto [a, b] = make_loopback_pair();
  MessageChannel master(std::move(a)), worker(std::move(b));
  master.send(msg::Hello{99, "future"});
  EXPECT_EQ(worker_serve(worker), WorkerExit::VersionMismatch);
  EXPECT_EQ(std::get<msg::Hello>(master.recv()).protocolVersion, kProtocolVersion);
}

TEST(Train, OneWorkerEqualsLocalBitwise) {
  const auto data = synthetic(24, 9);
  TrainOptions opt;
  opt.batch = 8;
  opt.epochs = 2;
  TrainState local{small_net(), init_parameters(small_net(), 42), 42};
  LocalConvExecutor lexec;
  const auto lm = train(local, data, opt, lexec);
  ASSERT_EQ(lm.size(), 6u);

  for (std::size_t workers : {1u, 2u}) {
    LoopbackCluster cluster(workers, {"w", fixed_time(1.0)});
    TrainState dist{small_net(), init_parameters(small_net(), 42), 42};
    MasterOptions mo;
    mo.train = opt;
    mo.localBench = fixed_time(1.0);
    const auto r = master_train(cluster.channels(), dist, data, mo);
    EXPECT_EQ(dist.params, local.params) << workers << " workers";
    ASSERT_EQ(r.metrics.size(), lm.size());
    for (std::size_t i = 0; i < lm.size(); ++i) EXPECT_EQ(r.metrics[i].loss, lm[i].loss);
    for (auto* ch : cluster.channels()) EXPECT_EQ(ch->stats().sent_of(MsgType::TrainOver).frames, 1u);
    // Two conv layers, three distributed calls each except the skipped first input gradient.
    for (auto* ch : cluster.channels())
      EXPECT_EQ(ch->stats().sent_of(MsgType::AllOk).frames, 6u * 5u);
    EXPECT_EQ(cluster.join(), std::vector<WorkerExit>(workers, WorkerExit::TrainOver));
  }
}

TEST(Train, ForwardOnlyDistributionStillExact) {
  const auto data = synthetic(16, 10);
  TrainOptions opt;
  opt.batch = 8;
  TrainState local{small_net(), init_parameters(small_net(), 1), 1};
  LocalConvExecutor lexec;
  train(local, data, opt, lexec);
  LoopbackCluster cluster(2, {"w", fixed_time(1.0)});
  TrainState dist{small_net(), init_parameters(small_net(), 1), 1};
  MasterOptions mo;
  mo.train = opt;
  mo.distributeBackward = false;
  mo.localBench = fixed_time(1.0);
  master_train(cluster.channels(), dist, data, mo);
  EXPECT_EQ(dist.params, local.params);
  for (auto* ch : cluster.channels()) EXPECT_EQ(ch->stats().sent_of(MsgType::AllOk).frames, 2u * 2u);
}

TEST(Train, MetricPartitionAndProgress) {
  const auto data = synthetic(64, 11);
  TrainOptions opt;
  opt.batch = 16;
  opt.epochs = 3;
  opt.lr = 0.05;
  LoopbackCluster cluster(2, {"w", fixed_time(1.0)});
  TrainState st{small_net(), init_parameters(small_net(), 3), 3};
  MasterOptions mo;
  mo.train = opt;
  mo.localBench = fixed_time(1.0);
  const auto r = master_train(cluster.channels(), st, data, mo);
  ASSERT_EQ(r.metrics.size(), 12u);
  for (const auto& m : r.metrics) {
    EXPECT_LT(m.timing.partition_error(), 0.01);
    EXPECT_GT(m.timing.commS, 0.0);
    EXPECT_GT(m.timing.convS, 0.0);
    EXPECT_GT(m.timing.compS, 0.0);
  }
  EXPECT_LT(r.metrics.back().loss, r.metrics.front().loss);
}

TEST(Train, FailureCheckpointsLastCompletedBatch) {
  const auto data = synthetic(32, 12);
  TrainOptions opt;
  opt.batch = 8;
  auto [a, b] = make_loopback_pair();
  MessageChannel master(std::move(a)), worker(std::move(b));
  // Completes the handshake, then vanishes on the first task.
  std::thread t([&] {
    worker.recv();
    worker.send(msg::Hello{});
    worker.recv();
    worker.send(msg::BenchReport{1.0});
    EXPECT_TRUE(std::holds_alternative<msg::ConvTask>(worker.recv()));
    worker.close();
  });
  TrainState st{small_net(), init_parameters(small_net(), 5), 5};
  const Parameters initial = st.params;
  MasterOptions mo;
  mo.train = opt;
  mo.localBench = fixed_time(1.0);
  std::optional<TrainState> saved;
  mo.onFailure = [&](const TrainState& s) { saved = s; };
  EXPECT_THROW(master_train({&master}, st, data, mo), ConnectionError);
  t.join();
  ASSERT_TRUE(saved);
  EXPECT_EQ(saved->batchIdx, 0u);
  EXPECT_EQ(saved->params, initial);
}

TEST(Train, ResumeContinuesFromCounters) {
  const auto data = synthetic(32, 13);
  TrainOptions opt;
  opt.batch = 8;
  opt.epochs = 2;
  LocalConvExecutor exec;
  TrainState full{small_net(), init_parameters(small_net(), 6), 6};
  train(full, data, opt, exec);

  TrainState part{small_net(), init_parameters(small_net(), 6), 6};
  TrainOptions first = opt;
  first.epochs = 1;
  std::optional<TrainState> snap;
  first.onEpochEnd = [&](const TrainState& s) { snap = s; };
  train(part, data, first, exec);
  ASSERT_TRUE(snap);
  EXPECT_EQ(snap->epoch, 1u);
  TrainState resumed = *snap;
  train(resumed, data, opt, exec);
  EXPECT_EQ(resumed.params, full.params);
}
