#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "convshard/balance.hpp"
#include "convshard/tensor.hpp"
#include "convshard/transport.hpp"

namespace convshard {

inline constexpr std::array<std::byte, 4> kFrameMagic{std::byte{'C'}, std::byte{'S'},
                                                      std::byte{'H'}, std::byte{'1'}};
inline constexpr std::size_t kFrameHeaderBytes = 13;
inline constexpr std::uint64_t kMaxPayloadBytes = std::uint64_t{1} << 40;
inline constexpr std::uint8_t kProtocolVersion = 1;

enum class MsgType : std::uint8_t {
  Hello = 1,
  BenchRequest = 2,
  BenchReport = 3,
  ConvTask = 4,
  ConvResult = 5,
  AllOk = 6,
  TrainOver = 7,
};

enum class ConvDirection : std::uint8_t { Forward = 0, BackwardData = 1, BackwardKernel = 2 };

const char* to_string(MsgType t);
const char* to_string(ConvDirection d);

namespace msg {

struct Hello {
  std::uint8_t protocolVersion = kProtocolVersion;
  std::string deviceName;
  friend bool operator==(const Hello&, const Hello&) = default;
};

struct BenchRequest {
  BenchSpec spec;
  friend bool operator==(const BenchRequest&, const BenchRequest&) = default;
};

struct BenchReport {
  double elapsedSeconds = 0.0;
  friend bool operator==(const BenchReport&, const BenchReport&) = default;
};

/// One convolution job. Forward and BackwardKernel carry the full input and
/// a kernel subset; BackwardData carries an empty input, the kernels
/// restricted to an input-channel subset, and the full gradOut in `extra`.
struct ConvTask {
  std::uint32_t layerOrdinal = 0;
  ConvDirection direction = ConvDirection::Forward;
  Tensor4 input;
  KernelBank kernels;
  std::uint32_t numMaps = 0;
  Tensor4 extra;
  friend bool operator==(const ConvTask&, const ConvTask&) = default;
};

/// Output of a ConvTask. For BackwardKernel the dims are kernel-bank dims.
struct ConvResult {
  std::uint32_t layerOrdinal = 0;
  ConvDirection direction = ConvDirection::Forward;
  Tensor4 output;
  friend bool operator==(const ConvResult&, const ConvResult&) = default;
};

struct AllOk {
  friend bool operator==(const AllOk&, const AllOk&) = default;
};
struct TrainOver {
  friend bool operator==(const TrainOver&, const TrainOver&) = default;
};

}  // namespace msg

using Message = std::variant<msg::Hello, msg::BenchRequest, msg::BenchReport, msg::ConvTask,
                             msg::ConvResult, msg::AllOk, msg::TrainOver>;

MsgType type_of(const Message& m);

/// Borrowed view of a ConvTask, so large operands are serialized without a
/// copy. Empty tensors encode as all-zero dims.
struct ConvTaskView {
  std::uint32_t layerOrdinal = 0;
  ConvDirection direction = ConvDirection::Forward;
  const detail::Dense4<double>* input = nullptr;
  const detail::Dense4<double>* kernels = nullptr;
  const detail::Dense4<double>* extra = nullptr;
};

class ByteSink {
 public:
  virtual ~ByteSink() = default;
  virtual void write(std::span<const std::byte> bytes) = 0;
};

class ByteSource {
 public:
  virtual ~ByteSource() = default;
  /// Fills `out` completely or throws.
  virtual void read(std::span<std::byte> out) = 0;
};

/// Payload size in bytes, without the 13-byte header.
std::uint64_t payload_size(const Message& m);
std::uint64_t payload_size(const ConvTaskView& t);

void encode_message(const Message& m, ByteSink& sink);
void encode_conv_task(const ConvTaskView& t, ByteSink& sink);

/// Single frame as bytes. Identical input gives identical bytes.
std::vector<std::byte> encode_message(const Message& m);

struct FrameHeader {
  MsgType type;
  std::uint64_t payloadLen;
};

/// Validates magic, type and size. Needs all 13 header bytes.
FrameHeader parse_header(std::span<const std::byte, kFrameHeaderBytes> bytes);

/// Parses a payload of `payloadLen` bytes from `src`. Never reads more than
/// payloadLen bytes; leftover or inconsistent fields throw CorruptionError.
Message decode_payload(MsgType type, std::uint64_t payloadLen, ByteSource& src);

/// Decodes exactly one frame from the front of `bytes`. Throws
/// IncompleteFrameError if the frame is not all there yet.
Message decode_message(std::span<const std::byte> bytes, std::size_t* consumed = nullptr);

/// Reassembles frames from arbitrary chunks.
class FrameAssembler {
 public:
  void feed(std::span<const std::byte> chunk);
  /// Next complete message, if any. A bad header or payload throws and
  /// leaves the assembler unusable, since the stream position is lost.
  std::optional<Message> next();
  std::size_t buffered() const { return buf_.size() - start_; }

 private:
  std::vector<std::byte> buf_;
  std::size_t start_ = 0;
  bool broken_ = false;
};

/// Per-message-type traffic counters for one direction.
struct TrafficCounter {
  std::uint64_t frames = 0;
  std::uint64_t bytes = 0;     // including the 13-byte header
  std::uint64_t elements = 0;  // 64-bit float payload elements
};

struct TrafficStats {
  std::array<TrafficCounter, 8> sent{};
  std::array<TrafficCounter, 8> received{};

  const TrafficCounter& sent_of(MsgType t) const { return sent[static_cast<std::size_t>(t)]; }
  const TrafficCounter& received_of(MsgType t) const {
    return received[static_cast<std::size_t>(t)];
  }
  /// Float elements carried by ConvTask and ConvResult frames, both ways.
  std::uint64_t conv_elements() const;
  void reset() { *this = {}; }
};

/// Framed message endpoint over a Connection, with traffic accounting.
class MessageChannel {
 public:
  explicit MessageChannel(std::unique_ptr<Connection> conn,
                          Millis timeout = std::chrono::seconds(300));
  ~MessageChannel();
  MessageChannel(MessageChannel&&) noexcept;
  MessageChannel& operator=(MessageChannel&&) noexcept;

  void send(const Message& m);
  void send_conv_task(const ConvTaskView& t);

  /// Blocks for one full frame. Throws TimeoutError, ConnectionError, or a
  /// ProtocolError subclass on malformed input.
  Message recv();

  /// Receives a ConvResult whose data lands directly in `target`, offset
  /// by `begin` along `axis` (0 or 1). Throws CorruptionError if the header
  /// disagrees with `expected`.
  void recv_conv_result_into(std::uint32_t layerOrdinal, ConvDirection direction,
                             const Shape4& expected, detail::Dense4<double>& target,
                             std::size_t axis, std::size_t begin);

  /// Streams a ConvResult of `dims` whose data is produced in order, one
  /// block of d1*d2*d3 values per outer index.
  void send_conv_result_stream(std::uint32_t layerOrdinal, ConvDirection direction,
                               const Shape4& dims,
                               const std::function<void(std::size_t first, std::size_t count,
                                                        std::vector<double>& out)>& produce,
                               std::size_t blockSamples);

  const TrafficStats& stats() const { return stats_; }
  TrafficStats& stats() { return stats_; }
  Connection& connection() { return *conn_; }
  std::string peer() const { return conn_->peer(); }
  Millis timeout() const { return timeout_; }
  void set_timeout(Millis t) { timeout_ = t; }
  void close();

 private:
  class Sink;
  class Source;

  FrameHeader read_header();
  void read_bytes(std::span<std::byte> out);

  std::unique_ptr<Connection> conn_;
  std::vector<std::byte> rbuf_;
  std::size_t rpos_ = 0;
  std::size_t rlen_ = 0;
  Millis timeout_;
  TrafficStats stats_;
};

}  // namespace convshard
