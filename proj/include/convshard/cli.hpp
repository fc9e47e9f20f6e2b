#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "convshard/cluster.hpp"
#include "convshard/network.hpp"
#include "convshard/simulator.hpp"

namespace convshard {

// ---- data ----

using Cifar10Batch = Dataset;

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;

/// One CIFAR-10 binary file: records of a label byte followed by the R, G
/// and B planes. Pixels are scaled to [0, 1].
Cifar10Batch load_cifar10(const std::filesystem::path& path);
Cifar10Batch parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& origin = "buffer");

/// Files concatenated in order, keeping at most `limit` records (0 = all).
Cifar10Batch load_cifar10_files(const std::vector<std::filesystem::path>& paths, std::size_t limit = 0);

struct CifarSplit {
  Cifar10Batch train;
  std::optional<Cifar10Batch> test;  // when test_batch.bin exists
};

/// A directory with data_batch_*.bin (and optionally test_batch.bin), or a
/// single file used as training data.
CifarSplit load_cifar10_path(const std::filesystem::path& path, std::size_t trainLimit,
                             std::size_t testLimit);

/// Seeded CIFAR-shaped data: every class has a fixed random template and
/// each image is its template plus noise, so the task is learnable.
Dataset synthetic_dataset(std::size_t count, std::uint64_t seed, std::size_t classes = 10);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Mean loss and accuracy over every sample, in batches of `batch`.
Evaluation evaluate(const NetworkSpec& spec, const Parameters& params, const Dataset& data,
                    std::size_t batch = 100);

// ---- configuration ----

struct RunConfig {
  std::string preset = "50:500";
  std::size_t batch = 64;
  std::size_t epochs = 1;
  double lr = 0.01;
  std::uint64_t seed = 1;
  std::uint16_t port = kDefaultPort;
  std::vector<std::string> workers;  // device order
  std::string master;                // worker side: the only accepted peer
  std::string data;
  bool synthetic = false;
  std::size_t samples = 0;       // training samples to use (0 = all, 1024 synthetic)
  std::size_t testSamples = 1000;
  std::size_t maxBatches = 0;    // per epoch, 0 = all
  bool distributeBackward = true;
  std::string out;               // metrics CSV
  std::string checkpoint;        // empty = derived from `out`
  bool checkpointing = true;
  std::string resume;
  std::string runId;
  double timeoutSeconds = 300.0;
  double connectTimeoutSeconds = 10.0;
  // simulate
  std::string deviceClass = "cpu-low-mid";
  std::size_t nodes = 32;
  std::vector<double> bandwidths{5e6};
  double baselineConv = 0.87;
  double baselineComp = 0.13;
  double latency = 0.0;
  bool measureBaseline = false;
  bool equalDevices = false;

  /// Sets one key from its text form. Throws ConfigError for unknown keys
  /// or unparsable values.
  void set(std::string_view key, std::string_view value);
  void validate() const;
  std::string checkpoint_path() const;
  NetworkSpec network() const;

  static const std::vector<std::string>& keys();
};

/// `key = value` lines; blank lines and lines starting with '#' are ignored.
RunConfig parse_run_config(std::string_view text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

// ---- persistence ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainState state;
  std::string rngState;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.state.spec == b.state.spec && a.state.params == b.state.params &&
           a.state.seed == b.state.seed && a.state.epoch == b.state.epoch &&
           a.state.batchIdx == b.state.batchIdx && a.rngState == b.rngState;
  }
};

std::vector<std::byte> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::byte> bytes);
/// Written to a sibling temporary and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct MetricsRow {
  std::string runId;
  std::string preset;
  std::size_t batch = 0;
  std::size_t devices = 1;
  BatchMetrics m;
};

inline constexpr std::string_view kMetricsHeader =
    "run_id,preset,batch,devices,epoch,batchIdx,commS,convS,compS,totalS,loss,accuracy";

void write_metrics_row(std::ostream& out, const MetricsRow& row);
void write_metrics(std::ostream& out, std::span<const MetricsRow> rows, bool header = true);
std::vector<MetricsRow> read_metrics(std::istream& in);

/// Appends rows to a CSV file, writing the header first when the file is new.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const MetricsRow& row);

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

// ---- commands ----

using LogFn = std::function<void(const std::string&)>;

struct CommandContext {
  std::ostream* out = nullptr;  // command results (CSV for simulate, report for bench)
  LogFn log;
};

int cmd_bench(const RunConfig& cfg, const CommandContext& ctx);
int cmd_train_local(const RunConfig& cfg, const CommandContext& ctx);
int cmd_master(const RunConfig& cfg, const CommandContext& ctx);
int cmd_worker(const RunConfig& cfg, const CommandContext& ctx);
int cmd_simulate(const RunConfig& cfg, const CommandContext& ctx);

/// 1 config, 2 network, 3 data, 4 anything else.
int exit_code_for(const std::exception& e);

/// Runs `fn`, turning exceptions into a logged message and an exit code.
int run_guarded(const std::function<int()>& fn, const LogFn& log);

struct BaselineMeasurement {
  double convSeconds = 0.0;
  double compSeconds = 0.0;
  std::size_t measuredBatch = 0;
};

/// One single-process training step at `sampleBatch`, scaled linearly to
/// `batch`. The first `warmups` steps are discarded.
BaselineMeasurement measure_baseline(const NetworkSpec& spec, std::size_t batch,
                                     std::size_t sampleBatch, std::uint64_t seed,
                                     std::size_t warmups = 1);

}  // namespace convshard
