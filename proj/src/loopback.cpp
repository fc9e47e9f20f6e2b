#include "convshard/loopback.hpp"

namespace convshard {

LoopbackCluster::LoopbackCluster(std::size_t workers, WorkerOptions options,
                                 std::size_t pipeCapacity, Millis timeout)
    : exits_(workers, WorkerExit::ConnectionLost) {
  for (std::size_t i = 0; i < workers; ++i) {
    auto [a, b] = make_loopback_pair(pipeCapacity);
    master_.push_back(std::make_unique<MessageChannel>(std::move(a), timeout));
    workerEnds_.push_back(std::make_unique<MessageChannel>(std::move(b), timeout));
  }
  for (std::size_t i = 0; i < workers; ++i) {
    WorkerOptions o = options;
    o.name = options.name + "-" + std::to_string(i + 1);
    threads_.emplace_back([this, i, o] { exits_[i] = worker_serve(*workerEnds_[i], o); });
  }
}

LoopbackCluster::~LoopbackCluster() { join(); }

std::vector<MessageChannel*> LoopbackCluster::channels() {
  std::vector<MessageChannel*> out;
  for (auto& c : master_) out.push_back(c.get());
  return out;
}

std::vector<WorkerExit> LoopbackCluster::join() {
  // Frames already queued stay readable after close, so a pending TrainOver
  // still arrives; a worker blocked on recv sees the end of the stream.
  for (auto& c : master_) c->close();
  for (auto& t : threads_)
    if (t.joinable()) t.join();
  return exits_;
}

}  // namespace convshard
