#pragma once

#include <memory>
#include <thread>
#include <vector>

#include "convshard/cluster.hpp"

namespace convshard {

/// Workers served on threads of this process over in-memory connections.
/// The destructor closes the master ends and joins every worker.
class LoopbackCluster {
 public:
  explicit LoopbackCluster(std::size_t workers, WorkerOptions options = {},
                           std::size_t pipeCapacity = std::size_t{4} << 20,
                           Millis timeout = std::chrono::seconds(300));
  ~LoopbackCluster();
  LoopbackCluster(const LoopbackCluster&) = delete;
  LoopbackCluster& operator=(const LoopbackCluster&) = delete;

  /// Master ends, device order.
  std::vector<MessageChannel*> channels();
  /// Closes the master ends, joins the workers and returns how each exited.
  std::vector<WorkerExit> join();

 private:
  std::vector<std::unique_ptr<MessageChannel>> master_;
  std::vector<std::unique_ptr<MessageChannel>> workerEnds_;
  std::vector<std::thread> threads_;
  std::vector<WorkerExit> exits_;
};

}  // namespace convshard
