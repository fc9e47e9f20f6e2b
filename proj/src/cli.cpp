#include "convshard/cli.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "convshard/errors.hpp"
#include "convshard/rng.hpp"
#include "convshard/timer.hpp"
#include "convshard/transport.hpp"

namespace convshard {

namespace fs = std::filesystem;

namespace {

void log_to(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IngestionError("read error on " + path.string());
  return bytes;
}

Dataset concat(std::vector<Dataset>& parts, std::size_t limit) {
  std::size_t total = 0;
  for (const auto& p : parts) total += p.size();
  if (limit) total = std::min(total, limit);
  Dataset out;
  if (total == 0) return out;
  out.images = Tensor4(total, 3, 32, 32);
  out.labels.reserve(total);
  const std::size_t per = kCifarRecordBytes - 1;
  std::size_t at = 0;
  for (const auto& p : parts) {
    const std::size_t take = std::min(p.size(), total - at);
    std::copy_n(p.images.data().data(), take * per, out.images.data().data() + at * per);
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.begin() + static_cast<std::ptrdiff_t>(take));
    at += take;
    if (at == total) break;
  }
  return out;
}

Dataset take(const Dataset& d, std::size_t first, std::size_t count) {
  Dataset out;
  out.images = d.batch_images(first, count);
  const auto l = d.batch_labels(first, count);
  out.labels.assign(l.begin(), l.end());
  return out;
}

// ---- config value parsing ----

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_unsigned(std::string_view key, std::string_view v) {
  T value{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), value);
  if (v.empty() || ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(std::string(key) + ": '" + std::string(v) + "' is not a non-negative integer");
  return value;
}

double parse_double(std::string_view key, std::string_view v) {
  const std::string s(v);
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size())
    throw ConfigError(std::string(key) + ": '" + s + "' is not a number");
  return value;
}

bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(std::string(key) + ": '" + std::string(v) + "' is not a boolean");
}

std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= v.size()) {
    const auto comma = v.find(',', start);
    const auto piece = trim(v.substr(start, comma == std::string_view::npos ? v.npos : comma - start));
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

// ---- checkpoint encoding ----

enum class EntryKind : std::uint8_t { F64Array = 1, Text = 2, U64 = 3 };

class CkWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::byte*>(p);
    out.insert(out.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::endian::native == std::endian::little);
    raw(&v, sizeof v);
  }
  void head(const std::string& name, EntryKind kind) {
    le<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    raw(name.data(), name.size());
    le<std::uint8_t>(static_cast<std::uint8_t>(kind));
    ++entries;
  }
  void text(const std::string& name, const std::string& s) {
    head(name, EntryKind::Text);
    le<std::uint64_t>(s.size());
    raw(s.data(), s.size());
  }
  void u64(const std::string& name, std::uint64_t v) {
    head(name, EntryKind::U64);
    le(v);
  }
  void array(const std::string& name, const std::vector<std::uint64_t>& dims, std::span<const double> values) {
    head(name, EntryKind::F64Array);
    le<std::uint32_t>(static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) le(d);
    for (double v : values) le(v);
  }

  std::vector<std::byte> out;
  std::uint32_t entries = 0;
};

struct CkEntry {
  EntryKind kind{};
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
  std::string text;
  std::uint64_t number = 0;
};

class CkReader {
 public:
  explicit CkReader(std::span<const std::byte> b) : bytes_(b) {}

  template <typename T>
  T le() {
    T v;
    std::memcpy(&v, need(sizeof v), sizeof v);
    return v;
  }
  std::string str(std::uint64_t n) {
    const auto* p = need(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  const std::byte* need(std::uint64_t n) {
    if (n > bytes_.size() - pos_)
      throw IngestionError("checkpoint truncated at byte " + std::to_string(pos_) + " (needed " +
                           std::to_string(n) + " more)");
    const std::byte* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

std::vector<double> matrix_row_major(const Matrix<double>& m) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
  return v;
}

const CkEntry& require(const std::map<std::string, CkEntry>& entries, const std::string& name, EntryKind kind) {
  const auto it = entries.find(name);
  if (it == entries.end()) throw IngestionError("checkpoint lacks entry '" + name + "'");
  if (it->second.kind != kind) throw IngestionError("checkpoint entry '" + name + "' has the wrong kind");
  return it->second;
}

const CkEntry& require_array(const std::map<std::string, CkEntry>& entries, const std::string& name,
                             const std::vector<std::uint64_t>& dims) {
  const CkEntry& e = require(entries, name, EntryKind::F64Array);
  if (e.dims != dims) throw IngestionError("checkpoint entry '" + name + "' has unexpected dims");
  return e;
}

// ---- commands ----

constexpr std::array<std::size_t, 5> kBatchSizes{64, 128, 256, 512, 1024};

struct LoadedData {
  Dataset train;
  std::optional<Dataset> test;
};

LoadedData load_data(const RunConfig& cfg, const LogFn& log) {
  LoadedData d;
  if (cfg.synthetic) {
    const std::size_t n = cfg.samples ? cfg.samples : 1024;
    Dataset all = synthetic_dataset(n + cfg.testSamples, cfg.seed);
    d.train = take(all, 0, n);
    if (cfg.testSamples) d.test = take(all, n, cfg.testSamples);
    log_to(log, "synthetic data: " + std::to_string(n) + " training samples");
  } else if (!cfg.data.empty()) {
    auto split = load_cifar10_path(cfg.data, cfg.samples, cfg.testSamples);
    d.train = std::move(split.train);
    d.test = std::move(split.test);
    log_to(log, "loaded " + std::to_string(d.train.size()) + " training images from " + cfg.data);
  } else {
    throw ConfigError("no training data: pass --data PATH or --synthetic");
  }
  return d;
}

TrainState initial_state(const RunConfig& cfg, const LogFn& log) {
  const NetworkSpec spec = cfg.network();
  if (!cfg.resume.empty()) {
    Checkpoint ck = load_checkpoint(cfg.resume);
    if (!(ck.state.spec == spec))
      throw ConfigError("checkpoint " + cfg.resume + " holds network '" + ck.state.spec.to_string() +
                        "', not preset " + cfg.preset);
    log_to(log, "resuming at epoch " + std::to_string(ck.state.epoch) + ", batch " +
                    std::to_string(ck.state.batchIdx));
    return std::move(ck.state);
  }
  TrainState s;
  s.spec = spec;
  s.params = init_parameters(spec, cfg.seed);
  s.seed = cfg.seed;
  return s;
}

Checkpoint to_checkpoint(const TrainState& s) {
  return Checkpoint{s, Rng(s.seed).state()};
}

std::string run_id_for(const RunConfig& cfg, const char* cmd) {
  if (!cfg.runId.empty()) return cfg.runId;
  return std::string(cmd) + "-" + cfg.preset + "-b" + std::to_string(cfg.batch) + "-s" + std::to_string(cfg.seed);
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

/// Shared by train-local and master: metrics CSV, per-epoch checkpoints and
/// periodic progress lines.
TrainOptions train_options(const RunConfig& cfg, const std::string& runId, std::size_t devices,
                           std::optional<MetricsWriter>& writer, const LogFn& log) {
  TrainOptions o;
  o.batch = cfg.batch;
  o.epochs = cfg.epochs;
  o.lr = cfg.lr;
  o.maxBatchesPerEpoch = cfg.maxBatches;
  if (!cfg.out.empty()) writer.emplace(cfg.out);
  o.onBatch = [&writer, &cfg, runId, devices, log](const BatchMetrics& m) {
    if (writer) writer->write(MetricsRow{runId, cfg.preset, cfg.batch, devices, m});
    log_to(log, "epoch " + std::to_string(m.epoch) + " batch " + std::to_string(m.batchIdx) + " loss " +
                    fixed(m.loss) + " acc " + fixed(m.accuracy, 3) + " total " + fixed(m.timing.totalS, 3) +
                    "s (comm " + fixed(m.timing.commS, 3) + " conv " + fixed(m.timing.convS, 3) + " comp " +
                    fixed(m.timing.compS, 3) + ")");
  };
  if (cfg.checkpointing) {
    const std::string path = cfg.checkpoint_path();
    o.onEpochEnd = [path, log](const TrainState& s) {
      save_checkpoint(path, to_checkpoint(s));
      log_to(log, "checkpoint " + path + " (epoch " + std::to_string(s.epoch) + ")");
    };
  }
  return o;
}

void report_final(const TrainState& state, const LoadedData& data, const CommandContext& ctx) {
  if (!data.test || data.test->size() == 0) return;
  const Evaluation e = evaluate(state.spec, state.params, *data.test);
  log_to(ctx.log, "test loss " + fixed(e.loss) + " accuracy " + fixed(e.accuracy, 4) + " on " +
                      std::to_string(data.test->size()) + " samples");
  if (ctx.out) *ctx.out << "test_loss=" << e.loss << " test_accuracy=" << e.accuracy << "\n";
}

std::vector<std::string> resolve_host(const std::string& host) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), nullptr, &hints, &res))
    throw ConfigError("cannot resolve master '" + host + "': " + ::gai_strerror(rc));
  std::vector<std::string> ips;
  for (addrinfo* a = res; a; a = a->ai_next) {
    char ip[INET_ADDRSTRLEN] = {};
    ::inet_ntop(AF_INET, &reinterpret_cast<sockaddr_in*>(a->ai_addr)->sin_addr, ip, sizeof ip);
    ips.emplace_back(ip);
  }
  ::freeaddrinfo(res);
  return ips;
}

Millis to_millis(double seconds) {
  return Millis(static_cast<Millis::rep>(std::llround(seconds * 1000.0)));
}

std::unique_ptr<Connection> connect_with_retry(const std::string& address, std::uint16_t defaultPort,
                                               std::size_t device, double timeoutSeconds) {
  const auto [host, port] = split_address(address, defaultPort);
  const auto deadline = std::chrono::steady_clock::now() + to_millis(timeoutSeconds);
  std::string last;
  for (;;) {
    const auto left = std::chrono::duration_cast<Millis>(deadline - std::chrono::steady_clock::now());
    try {
      return tcp_connect(host, port, std::max(left, Millis(100)));
    } catch (const ConnectionError& e) {
      last = e.what();
    }
    if (std::chrono::steady_clock::now() >= deadline) break;
    std::this_thread::sleep_for(Millis(200));
  }
  throw ConnectionError("cannot reach worker " + std::to_string(device) + " at " + host + ":" +
                        std::to_string(port) + " (" + last + ")");
}

std::string host_name() {
  char buf[256] = {};
  if (::gethostname(buf, sizeof buf - 1) != 0) return "host";
  return buf;
}

}  // namespace

// ---- data ----

Cifar10Batch parse_cifar10(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.empty()) throw IngestionError(origin + ": empty CIFAR-10 file");
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t whole = bytes.size() / kCifarRecordBytes;
    throw IngestionError(origin + ": truncated record " + std::to_string(whole) + " at byte offset " +
                         std::to_string(whole * kCifarRecordBytes) + " (" +
                         std::to_string(bytes.size() - whole * kCifarRecordBytes) + " of " +
                         std::to_string(kCifarRecordBytes) + " bytes)");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  Cifar10Batch out;
  out.images = Tensor4(n, 3, 32, 32);
  out.labels.resize(n);
  double* dst = out.images.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9)
      throw DataError(origin + ": label " + std::to_string(rec[0]) + " > 9 in record " + std::to_string(i) +
                      " at byte offset " + std::to_string(i * kCifarRecordBytes));
    out.labels[i] = rec[0];
    for (std::size_t k = 0; k < kCifarRecordBytes - 1; ++k) *dst++ = rec[1 + k] / 255.0;
  }
  return out;
}

Cifar10Batch load_cifar10(const fs::path& path) {
  const auto bytes = read_file(path);
  return parse_cifar10(bytes, path.string());
}

Cifar10Batch load_cifar10_files(const std::vector<fs::path>& paths, std::size_t limit) {
  std::vector<Dataset> parts;
  std::size_t have = 0;
  for (const auto& p : paths) {
    if (limit && have >= limit) break;
    parts.push_back(load_cifar10(p));
    have += parts.back().size();
  }
  return concat(parts, limit);
}

CifarSplit load_cifar10_path(const fs::path& path, std::size_t trainLimit, std::size_t testLimit) {
  CifarSplit out;
  if (!fs::is_directory(path)) {
    if (!fs::exists(path)) throw IngestionError("no such file or directory: " + path.string());
    out.train = load_cifar10_files({path}, trainLimit);
    return out;
  }
  std::vector<fs::path> train;
  for (const auto& e : fs::directory_iterator(path)) {
    const auto name = e.path().filename().string();
    if (name.starts_with("data_batch_") && name.ends_with(".bin")) train.push_back(e.path());
  }
  std::sort(train.begin(), train.end());
  if (train.empty()) throw IngestionError(path.string() + " holds no data_batch_*.bin files");
  out.train = load_cifar10_files(train, trainLimit);
  const fs::path test = path / "test_batch.bin";
  if (fs::exists(test) && testLimit) out.test = load_cifar10_files({test}, testLimit);
  return out;
}

Dataset synthetic_dataset(std::size_t count, std::uint64_t seed, std::size_t classes) {
  if (count == 0 || classes == 0) throw ConfigError("synthetic data needs samples and classes");
  Rng rng(seed ^ 0x5eedda7aULL);
  const std::size_t per = 3 * 32 * 32;
  std::vector<double> templates(classes * per);
  for (auto& v : templates) v = rng.uniform();
  Dataset d;
  d.images = Tensor4(count, 3, 32, 32);
  d.labels.resize(count);
  double* dst = d.images.data().data();
  for (std::size_t i = 0; i < count; ++i) {
    const auto label = static_cast<std::size_t>(rng.next() % classes);
    d.labels[i] = static_cast<int>(label);
    const double* t = templates.data() + label * per;
    for (std::size_t k = 0; k < per; ++k) *dst++ = 0.5 * t[k] + 0.5 * rng.uniform();
  }
  return d;
}

Evaluation evaluate(const NetworkSpec& spec, const Parameters& params, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) throw DataError("cannot evaluate on an empty dataset");
  LocalConvExecutor exec;
  double lossSum = 0.0;
  std::size_t correct = 0;
  for (std::size_t first = 0; first < data.size(); first += batch) {
    const std::size_t n = std::min(batch, data.size() - first);
    const auto labels = data.batch_labels(first, n);
    const ForwardPass f = forward_pass(spec, params, data.batch_images(first, n), exec);
    lossSum += softmax_loss(f.logits, labels).loss * static_cast<double>(n);
    correct += count_correct(f.logits, labels);
  }
  const auto total = static_cast<double>(data.size());
  return {lossSum / total, static_cast<double>(correct) / total};
}

// ---- configuration ----

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k{
      "preset", "batch", "epochs", "lr", "seed", "port", "workers", "master", "data", "synthetic",
      "samples", "test_samples", "max_batches", "distribute_backward", "out", "checkpoint",
      "checkpointing", "resume", "run_id", "timeout", "connect_timeout", "device_class", "nodes",
      "bandwidth", "baseline_conv", "baseline_comp", "latency", "measure_baseline", "equal_devices"};
  return k;
}

void RunConfig::set(std::string_view key, std::string_view raw) {
  const std::string v = trim(raw);
  if (key == "preset") preset = v;
  else if (key == "batch") batch = parse_unsigned<std::size_t>(key, v);
  else if (key == "epochs") epochs = parse_unsigned<std::size_t>(key, v);
  else if (key == "lr") lr = parse_double(key, v);
  else if (key == "seed") seed = parse_unsigned<std::uint64_t>(key, v);
  else if (key == "port") {
    const auto p = parse_unsigned<unsigned>(key, v);
    if (p == 0 || p > 65535) throw ConfigError("port must lie in 1..65535, got " + v);
    port = static_cast<std::uint16_t>(p);
  } else if (key == "workers") workers = split_list(v);
  else if (key == "master") master = v;
  else if (key == "data") data = v;
  else if (key == "synthetic") synthetic = parse_bool(key, v);
  else if (key == "samples") samples = parse_unsigned<std::size_t>(key, v);
  else if (key == "test_samples") testSamples = parse_unsigned<std::size_t>(key, v);
  else if (key == "max_batches") maxBatches = parse_unsigned<std::size_t>(key, v);
  else if (key == "distribute_backward") distributeBackward = parse_bool(key, v);
  else if (key == "out") out = v;
  else if (key == "checkpoint") checkpoint = v;
  else if (key == "checkpointing") checkpointing = parse_bool(key, v);
  else if (key == "resume") resume = v;
  else if (key == "run_id") runId = v;
  else if (key == "timeout") timeoutSeconds = parse_double(key, v);
  else if (key == "connect_timeout") connectTimeoutSeconds = parse_double(key, v);
  else if (key == "device_class") deviceClass = v;
  else if (key == "nodes") nodes = parse_unsigned<std::size_t>(key, v);
  else if (key == "bandwidth") {
    bandwidths.clear();
    for (const auto& b : split_list(v)) bandwidths.push_back(b == "inf" ? kInfiniteBandwidth : parse_double(key, b));
  } else if (key == "baseline_conv") baselineConv = parse_double(key, v);
  else if (key == "baseline_comp") baselineComp = parse_double(key, v);
  else if (key == "latency") latency = parse_double(key, v);
  else if (key == "measure_baseline") measureBaseline = parse_bool(key, v);
  else if (key == "equal_devices") equalDevices = parse_bool(key, v);
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void RunConfig::validate() const {
  (void)network();
  if (std::find(kBatchSizes.begin(), kBatchSizes.end(), batch) == kBatchSizes.end())
    throw ConfigError("batch must be one of 64, 128, 256, 512, 1024; got " + std::to_string(batch));
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be a positive number");
  if (!(timeoutSeconds > 0.0) || !(connectTimeoutSeconds > 0.0)) throw ConfigError("timeouts must be > 0");
  for (const auto& w : workers) (void)split_address(w, port);
  if (!master.empty()) (void)split_address(master, port);
  (void)parse_device_class(deviceClass);
  if (nodes == 0) throw ConfigError("nodes must be >= 1");
  if (bandwidths.empty()) throw ConfigError("at least one bandwidth is needed");
  for (double b : bandwidths)
    if (!(b > 0.0)) throw ConfigError("bandwidths must be > 0");
  if (!(baselineConv > 0.0) || !(baselineComp > 0.0)) throw ConfigError("baseline times must be > 0");
  if (!(latency >= 0.0)) throw ConfigError("latency must be >= 0");
}

std::string RunConfig::checkpoint_path() const {
  if (!checkpoint.empty()) return checkpoint;
  if (!out.empty()) return out + ".ckpt";
  return "convshard.ckpt";
}

NetworkSpec RunConfig::network() const {
  NetworkSpec spec = preset_network(preset);
  // Spatial side entering each layer, then the FC input.
  const auto shapes = spec.shapes(1);
  const std::array<std::size_t, 7> expected{32, 28, 28, 14, 10, 10, 5};
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (shapes.at(i).d2 != expected[i] || shapes.at(i).d3 != expected[i])
      throw ConfigError("preset " + preset + " does not follow the 32-28-14-10-5 shape chain");
  return spec;
}

RunConfig parse_run_config(std::string_view text, RunConfig base) {
  std::size_t lineNo = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const std::string line = trim(text.substr(start, end - start));
    start = end + 1;
    ++lineNo;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineNo) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    try {
      base.set(key, std::string_view(line).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineNo) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_run_config(const fs::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_run_config(ss.str(), std::move(base));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---- persistence ----

std::vector<std::byte> encode_checkpoint(const Checkpoint& ck) {
  const TrainState& s = ck.state;
  CkWriter body;
  body.text("spec", s.spec.to_string());
  body.u64("seed", s.seed);
  body.u64("epoch", s.epoch);
  body.u64("batchIdx", s.batchIdx);
  body.text("rng", ck.rngState);
  for (std::size_t i = 0; i < s.params.layers.size(); ++i) {
    const auto prefix = "layer." + std::to_string(i) + ".";
    if (const auto* k = std::get_if<KernelBank>(&s.params.layers[i])) {
      const Shape4 sh = k->shape();
      body.array(prefix + "kernels", {sh.d0, sh.d1, sh.d2, sh.d3}, k->values());
    } else if (const auto* d = std::get_if<DenseParams>(&s.params.layers[i])) {
      const auto w = matrix_row_major(d->weights);
      body.array(prefix + "weights",
                 {static_cast<std::uint64_t>(d->weights.rows()), static_cast<std::uint64_t>(d->weights.cols())}, w);
      body.array(prefix + "bias", {static_cast<std::uint64_t>(d->bias.size())},
                 std::span<const double>(d->bias.data(), static_cast<std::size_t>(d->bias.size())));
    }
  }
  CkWriter head;
  head.raw("CSCK", 4);
  head.le<std::uint32_t>(kCheckpointVersion);
  head.le<std::uint32_t>(body.entries);
  head.out.insert(head.out.end(), body.out.begin(), body.out.end());
  return std::move(head.out);
}

Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
  CkReader r(bytes);
  if (r.str(4) != "CSCK") throw IngestionError("not a checkpoint (bad magic)");
  const auto version = r.le<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IngestionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                         std::to_string(kCheckpointVersion) + ")");
  const auto count = r.le<std::uint32_t>();
  std::map<std::string, CkEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.pos();
    const std::string name = r.str(r.le<std::uint32_t>());
    CkEntry e;
    e.kind = static_cast<EntryKind>(r.le<std::uint8_t>());
    switch (e.kind) {
      case EntryKind::Text:
        e.text = r.str(r.le<std::uint64_t>());
        break;
      case EntryKind::U64:
        e.number = r.le<std::uint64_t>();
        break;
      case EntryKind::F64Array: {
        const auto rank = r.le<std::uint32_t>();
        if (rank > 4) throw IngestionError("checkpoint entry '" + name + "' has rank " + std::to_string(rank));
        std::uint64_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
          e.dims.push_back(r.le<std::uint64_t>());
          if (e.dims.back() > (std::uint64_t{1} << 40) / n)
            throw IngestionError("checkpoint entry '" + name + "' is implausibly large");
          n *= e.dims.back();
        }
        const std::byte* p = r.need(n * 8);
        e.values.resize(n);
        std::memcpy(e.values.data(), p, n * 8);
        break;
      }
      default:
        throw IngestionError("checkpoint entry '" + name + "' at byte " + std::to_string(at) + " has unknown kind");
    }
    if (!entries.emplace(name, std::move(e)).second)
      throw IngestionError("checkpoint entry '" + name + "' appears twice");
  }
  if (!r.done()) throw IngestionError("checkpoint has trailing bytes at " + std::to_string(r.pos()));

  Checkpoint ck;
  TrainState& s = ck.state;
  try {
    s.spec = NetworkSpec::parse(require(entries, "spec", EntryKind::Text).text);
  } catch (const ConfigError& e) {
    throw IngestionError(std::string("checkpoint network: ") + e.what());
  }
  s.seed = require(entries, "seed", EntryKind::U64).number;
  s.epoch = require(entries, "epoch", EntryKind::U64).number;
  s.batchIdx = require(entries, "batchIdx", EntryKind::U64).number;
  ck.rngState = require(entries, "rng", EntryKind::Text).text;
  std::size_t used = 5;
  const auto shapes = s.spec.shapes(1);
  s.params.layers.resize(s.spec.layers.size());
  for (std::size_t i = 0; i < s.spec.layers.size(); ++i) {
    const auto prefix = "layer." + std::to_string(i) + ".";
    if (const auto* conv = std::get_if<ConvLayer>(&s.spec.layers[i])) {
      const CkEntry& e = require_array(entries, prefix + "kernels", {conv->numK, shapes[i].d1, conv->kH, conv->kW});
      KernelBank k(conv->numK, shapes[i].d1, conv->kH, conv->kW);
      std::copy(e.values.begin(), e.values.end(), k.values().begin());
      s.params.layers[i] = std::move(k);
      used += 1;
    } else if (const auto* fc = std::get_if<FullyConnectedLayer>(&s.spec.layers[i])) {
      const std::uint64_t in = shapes[i].d1 * shapes[i].d2 * shapes[i].d3;
      const CkEntry& w = require_array(entries, prefix + "weights", {fc->outUnits, in});
      const CkEntry& b = require_array(entries, prefix + "bias", {fc->outUnits});
      DenseParams d{Matrix<double>(static_cast<Eigen::Index>(fc->outUnits), static_cast<Eigen::Index>(in)),
                    Vector<double>(static_cast<Eigen::Index>(fc->outUnits))};
      std::size_t at = 0;
      for (Eigen::Index row = 0; row < d.weights.rows(); ++row)
        for (Eigen::Index col = 0; col < d.weights.cols(); ++col) d.weights(row, col) = w.values[at++];
      for (Eigen::Index j = 0; j < d.bias.size(); ++j) d.bias[j] = b.values[static_cast<std::size_t>(j)];
      s.params.layers[i] = std::move(d);
      used += 2;
    }
  }
  if (used != entries.size()) throw IngestionError("checkpoint has entries that do not belong to its network");
  return ck;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  const auto bytes = encode_checkpoint(ck);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IngestionError("write failed for checkpoint " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IngestionError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const fs::path& path) {
  const auto raw = read_file(path);
  try {
    return decode_checkpoint(std::as_bytes(std::span(raw)));
  } catch (const IngestionError& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
}

void write_metrics_row(std::ostream& out, const MetricsRow& row) {
  const auto old = out.precision(std::numeric_limits<double>::max_digits10);
  const auto& m = row.m;
  out << row.runId << ',' << row.preset << ',' << row.batch << ',' << row.devices << ',' << m.epoch << ','
      << m.batchIdx << ',' << m.timing.commS << ',' << m.timing.convS << ',' << m.timing.compS << ','
      << m.timing.totalS << ',' << m.loss << ',' << m.accuracy << '\n';
  out.precision(old);
}

void write_metrics(std::ostream& out, std::span<const MetricsRow> rows, bool header) {
  if (header) out << kMetricsHeader << '\n';
  for (const auto& r : rows) write_metrics_row(out, r);
}

std::vector<MetricsRow> read_metrics(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw DataError("metrics CSV lacks the expected header");
  std::vector<MetricsRow> rows;
  std::size_t lineNo = 1;
  while (std::getline(in, line)) {
    ++lineNo;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 12) throw DataError("metrics line " + std::to_string(lineNo) + " has " + std::to_string(f.size()) + " fields");
    try {
      MetricsRow r;
      r.runId = f[0];
      r.preset = f[1];
      r.batch = std::stoull(f[2]);
      r.devices = std::stoull(f[3]);
      r.m.epoch = std::stoull(f[4]);
      r.m.batchIdx = std::stoull(f[5]);
      r.m.timing = {std::stod(f[6]), std::stod(f[7]), std::stod(f[8]), std::stod(f[9])};
      r.m.loss = std::stod(f[10]);
      r.m.accuracy = std::stod(f[11]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw DataError("metrics line " + std::to_string(lineNo) + " has a malformed number");
    }
  }
  return rows;
}

MetricsWriter::MetricsWriter(const fs::path& path) : path_(path) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  out_.open(path, std::ios::app);
  if (!out_) throw IngestionError("cannot open metrics file " + path.string());
  if (fresh) out_ << kMetricsHeader << '\n' << std::flush;
}

void MetricsWriter::write(const MetricsRow& row) {
  write_metrics_row(out_, row);
  out_.flush();
  if (!out_) throw IngestionError("write failed for metrics file " + path_.string());
}

// ---- commands ----

int cmd_bench(const RunConfig& cfg, const CommandContext& ctx) {
  cfg.validate();
  const NetworkSpec spec = cfg.network();
  const std::size_t benchBatch = std::min<std::size_t>(cfg.batch, 32);
  const BenchSpec probe = bench_spec_for(spec, benchBatch);
  log_to(ctx.log, "benchmarking input " + probe.input.to_string() + " against kernels " + probe.kernels.to_string());
  const double seconds = run_benchmark(probe, cfg.seed);
  if (ctx.out)
    *ctx.out << "device,preset,benchBatch,seconds\n"
             << host_name() << ',' << cfg.preset << ',' << benchBatch << ',' << std::setprecision(9) << seconds
             << '\n';
  return 0;
}

int cmd_train_local(const RunConfig& cfg, const CommandContext& ctx) {
  cfg.validate();
  const LoadedData data = load_data(cfg, ctx.log);
  TrainState state = initial_state(cfg, ctx.log);
  std::optional<MetricsWriter> writer;
  const TrainOptions opts = train_options(cfg, run_id_for(cfg, "local"), 1, writer, ctx.log);
  LocalConvExecutor exec;
  try {
    train(state, data.train, opts, exec);
  } catch (...) {
    if (cfg.checkpointing) save_checkpoint(cfg.checkpoint_path(), to_checkpoint(state));
    throw;
  }
  report_final(state, data, ctx);
  return 0;
}

int cmd_master(const RunConfig& cfg, const CommandContext& ctx) {
  cfg.validate();
  const LoadedData data = load_data(cfg, ctx.log);
  TrainState state = initial_state(cfg, ctx.log);
  std::vector<std::unique_ptr<MessageChannel>> channels;
  std::vector<MessageChannel*> workers;
  for (std::size_t i = 0; i < cfg.workers.size(); ++i) {
    auto conn = connect_with_retry(cfg.workers[i], cfg.port, i + 1, cfg.connectTimeoutSeconds);
    log_to(ctx.log, "device " + std::to_string(i + 1) + " connected: " + conn->peer());
    channels.push_back(std::make_unique<MessageChannel>(std::move(conn), to_millis(cfg.timeoutSeconds)));
    workers.push_back(channels.back().get());
  }
  std::optional<MetricsWriter> writer;
  MasterOptions mo;
  mo.train = train_options(cfg, run_id_for(cfg, "master"), workers.size() + 1, writer, ctx.log);
  mo.distributeBackward = cfg.distributeBackward;
  if (cfg.checkpointing) {
    const std::string path = cfg.checkpoint_path();
    mo.onFailure = [path, log = ctx.log](const TrainState& s) {
      save_checkpoint(path, to_checkpoint(s));
      log_to(log, "failure checkpoint " + path);
    };
  }
  const MasterResult r = master_train(workers, state, data.train, mo);
  std::ostringstream plan;
  plan << "plan weights:";
  for (double w : r.plan.weights) plan << ' ' << fixed(w, 4);
  log_to(ctx.log, plan.str());
  report_final(state, data, ctx);
  return 0;
}

int cmd_worker(const RunConfig& cfg, const CommandContext& ctx) {
  cfg.validate();
  std::vector<std::string> allowed;
  if (!cfg.master.empty()) allowed = resolve_host(split_address(cfg.master, cfg.port).first);
  TcpListener listener(cfg.port);
  log_to(ctx.log, "worker listening on port " + std::to_string(listener.port()));
  const Millis timeout = to_millis(cfg.timeoutSeconds);
  for (;;) {
    auto conn = listener.accept(timeout);
    const std::string peer = conn->peer();
    const std::string peerHost = peer.substr(0, peer.rfind(':'));
    if (!allowed.empty() && std::find(allowed.begin(), allowed.end(), peerHost) == allowed.end()) {
      log_to(ctx.log, "refusing " + peer + ": not the configured master " + cfg.master);
      conn->close();
      continue;
    }
    log_to(ctx.log, "master connected from " + peer);
    MessageChannel channel(std::move(conn), timeout);
    WorkerOptions wo;
    wo.name = host_name() + ":" + std::to_string(listener.port());
    wo.log = ctx.log;
    const WorkerExit exit = worker_serve(channel, wo);
    log_to(ctx.log, std::string("worker stopped: ") + to_string(exit));
    return convshard::exit_code(exit);
  }
}

int cmd_simulate(const RunConfig& cfg, const CommandContext& ctx) {
  cfg.validate();
  SimConfig base;
  base.net = cfg.network();
  base.batch = cfg.batch;
  base.baselineConvSeconds = cfg.baselineConv;
  base.baselineCompSeconds = cfg.baselineComp;
  base.latencySeconds = cfg.latency;
  base.seed = cfg.seed;
  if (cfg.measureBaseline) {
    const auto m = measure_baseline(base.net, cfg.batch, std::min<std::size_t>(cfg.batch, 32), cfg.seed);
    base.baselineConvSeconds = m.convSeconds;
    base.baselineCompSeconds = m.compSeconds;
    log_to(ctx.log, "measured baseline at batch " + std::to_string(cfg.batch) + ": conv " +
                        fixed(m.convSeconds, 3) + " s, comp " + fixed(m.compSeconds, 3) + " s");
  }
  std::vector<SimResult> rows;
  if (cfg.equalDevices) {
    for (double bw : cfg.bandwidths) {
      base.bandwidthBps = bw;
      for (std::size_t n = 1; n <= cfg.nodes; ++n) {
        base.devices.assign(n, SimDevice{});
        rows.push_back(simulate_batch(base));
      }
    }
  } else {
    std::vector<std::size_t> counts(cfg.nodes);
    for (std::size_t n = 0; n < cfg.nodes; ++n) counts[n] = n + 1;
    rows = bandwidth_sweep(base, parse_device_class(cfg.deviceClass), cfg.bandwidths, counts, cfg.seed);
  }
  std::ofstream file;
  std::ostream* out = ctx.out;
  if (!cfg.out.empty()) {
    file.open(cfg.out, std::ios::trunc);
    if (!file) throw IngestionError("cannot write " + cfg.out);
    out = &file;
  }
  if (out) write_sim_csv(*out, rows);
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const ConnectionError*>(&e) || dynamic_cast<const ProtocolError*>(&e) ||
      dynamic_cast<const IncompleteFrameError*>(&e) || dynamic_cast<const IncompletenessError*>(&e))
    return 2;
  if (dynamic_cast<const IngestionError*>(&e) || dynamic_cast<const DataError*>(&e)) return 3;
  return 4;
}

int run_guarded(const std::function<int()>& fn, const LogFn& log) {
  try {
    return fn();
  } catch (const std::exception& e) {
    log_to(log, std::string("error: ") + e.what());
    return exit_code_for(e);
  } catch (...) {
    log_to(log, "error: unknown exception");
    return 4;
  }
}

BaselineMeasurement measure_baseline(const NetworkSpec& spec, std::size_t batch, std::size_t sampleBatch,
                                     std::uint64_t seed, std::size_t warmups) {
  if (batch == 0 || sampleBatch == 0) throw ConfigError("baseline batches must be positive");
  const Dataset d = synthetic_dataset(sampleBatch, seed);
  Parameters params = init_parameters(spec, seed);
  LocalConvExecutor exec;
  StepResult step;
  for (std::size_t i = 0; i <= warmups; ++i)
    step = train_step(spec, params, d.images, d.labels, 0.0, exec);
  const double scale = static_cast<double>(batch) / static_cast<double>(sampleBatch);
  return {(step.timing.convS + step.timing.commS) * scale, step.timing.compS * scale, sampleBatch};
}

}  // namespace convshard
