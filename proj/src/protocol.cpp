#include "convshard/protocol.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>

#include "convshard/errors.hpp"

namespace convshard {

const char* to_string(MsgType t) {
  switch (t) {
    case MsgType::Hello: return "Hello";
    case MsgType::BenchRequest: return "BenchRequest";
    case MsgType::BenchReport: return "BenchReport";
    case MsgType::ConvTask: return "ConvTask";
    case MsgType::ConvResult: return "ConvResult";
    case MsgType::AllOk: return "AllOk";
    case MsgType::TrainOver: return "TrainOver";
  }
  return "unknown";
}

const char* to_string(ConvDirection d) {
  switch (d) {
    case ConvDirection::Forward: return "Forward";
    case ConvDirection::BackwardData: return "BackwardData";
    case ConvDirection::BackwardKernel: return "BackwardKernel";
  }
  return "unknown";
}

MsgType type_of(const Message& m) { return static_cast<MsgType>(m.index() + 1); }

std::uint64_t TrafficStats::conv_elements() const {
  return sent_of(MsgType::ConvTask).elements + sent_of(MsgType::ConvResult).elements +
         received_of(MsgType::ConvTask).elements + received_of(MsgType::ConvResult).elements;
}

namespace {

constexpr std::size_t kDimsBytes = 16;

// ---------------------------------------------------------------------------
// Little-endian primitives

template <typename T>
T to_le(T v) {
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    return v;
  } else {
    auto b = std::bit_cast<std::array<std::byte, sizeof(T)>>(v);
    std::reverse(b.begin(), b.end());
    return std::bit_cast<T>(b);
  }
}

class Writer {
 public:
  explicit Writer(ByteSink& sink) : sink_(sink) {}

  template <typename T>
  void put(T v) {
    const T le = to_le(v);
    sink_.write(std::as_bytes(std::span<const T, 1>(&le, 1)));
  }

  void put_dims(const Shape4& s) {
    for (std::size_t i = 0; i < 4; ++i) put(static_cast<std::uint32_t>(s[i]));
  }

  void put_doubles(std::span<const double> v) {
    if constexpr (std::endian::native == std::endian::little) {
      sink_.write(std::as_bytes(v));
    } else {
      std::array<double, 512> tmp;
      while (!v.empty()) {
        const std::size_t n = std::min(v.size(), tmp.size());
        for (std::size_t i = 0; i < n; ++i) tmp[i] = to_le(v[i]);
        sink_.write(std::as_bytes(std::span<const double>(tmp.data(), n)));
        v = v.subspan(n);
      }
    }
  }

  void put_bytes(std::span<const std::byte> b) { sink_.write(b); }

 private:
  ByteSink& sink_;
};

// Enforces the payload bound on top of a raw source.
class Reader {
 public:
  Reader(ByteSource& src, std::uint64_t limit) : src_(src), remaining_(limit) {}

  std::uint64_t remaining() const { return remaining_; }

  void raw(std::span<std::byte> out) {
    if (out.size() > remaining_)
      throw CorruptionError("field of " + std::to_string(out.size()) + " bytes runs past payload (" +
                            std::to_string(remaining_) + " left)");
    src_.read(out);
    remaining_ -= out.size();
  }

  template <typename T>
  T get() {
    T v;
    raw(std::as_writable_bytes(std::span<T, 1>(&v, 1)));
    return to_le(v);
  }

  // Dims are either all zero (absent array) or all positive.
  Shape4 get_dims() {
    std::array<std::size_t, 4> d{};
    for (auto& x : d) x = get<std::uint32_t>();
    const Shape4 s{d[0], d[1], d[2], d[3]};
    const bool allZero = d[0] == 0 && d[1] == 0 && d[2] == 0 && d[3] == 0;
    if (!allZero && !s.all_positive())
      throw CorruptionError("dims " + s.to_string() + " mix zero and nonzero extents");
    if (!allZero) {
      // Reject before multiplying anything that cannot fit the payload.
      unsigned __int128 count = 1;
      for (std::size_t x : d) count *= x;
      if (count * 8 > remaining_)
        throw CorruptionError("dims " + s.to_string() + " need more data than the " +
                              std::to_string(remaining_) + " payload bytes left");
    }
    return s;
  }

  void get_doubles(std::span<double> out) {
    raw(std::as_writable_bytes(out));
    if constexpr (std::endian::native != std::endian::little)
      for (auto& v : out) v = to_le(v);
  }

  template <typename Dense>
  Dense get_array() {
    const Shape4 s = get_dims();
    if (s.size() == 0) return Dense();
    Dense a(s);
    get_doubles(a.values());
    return a;
  }

 private:
  ByteSource& src_;
  std::uint64_t remaining_;
};

class VectorSink final : public ByteSink {
 public:
  explicit VectorSink(std::vector<std::byte>& out) : out_(out) {}
  void write(std::span<const std::byte> bytes) override {
    out_.insert(out_.end(), bytes.begin(), bytes.end());
  }

 private:
  std::vector<std::byte>& out_;
};

class SpanSource final : public ByteSource {
 public:
  explicit SpanSource(std::span<const std::byte> bytes) : bytes_(bytes) {}
  void read(std::span<std::byte> out) override {
    if (out.size() > bytes_.size()) throw IncompleteFrameError("frame truncated");
    std::copy_n(bytes_.begin(), out.size(), out.begin());
    bytes_ = bytes_.subspan(out.size());
  }

 private:
  std::span<const std::byte> bytes_;
};

std::uint64_t array_bytes(const detail::Dense4<double>* a) {
  return kDimsBytes + (a ? a->size() * 8 : 0);
}

void put_array(Writer& w, const detail::Dense4<double>* a) {
  if (!a || a->empty()) {
    w.put_dims({});
    return;
  }
  w.put_dims(a->shape());
  w.put_doubles(a->values());
}

void check_u32(const Shape4& s, const char* what) {
  for (std::size_t i = 0; i < 4; ++i)
    if (s[i] > std::numeric_limits<std::uint32_t>::max())
      throw SizeError(std::string(what) + " dims " + s.to_string() + " exceed 32-bit extents");
}

void write_header(Writer& w, MsgType type, std::uint64_t payloadLen) {
  if (payloadLen > kMaxPayloadBytes)
    throw SizeError("payload of " + std::to_string(payloadLen) + " bytes exceeds the 2^40 limit");
  w.put_bytes(kFrameMagic);
  w.put(static_cast<std::uint8_t>(type));
  w.put(payloadLen);
}

ConvDirection parse_direction(std::uint8_t d) {
  if (d > 2) throw CorruptionError("unknown conv direction " + std::to_string(d));
  return static_cast<ConvDirection>(d);
}

ConvTaskView view_of(const msg::ConvTask& t) {
  return {t.layerOrdinal, t.direction, &t.input, &t.kernels, &t.extra};
}

std::uint64_t result_payload(const Shape4& dims) { return 4 + 1 + kDimsBytes + dims.size() * 8; }

std::uint64_t element_count(const Message& m) {
  if (const auto* t = std::get_if<msg::ConvTask>(&m))
    return t->input.size() + t->kernels.size() + t->extra.size();
  if (const auto* r = std::get_if<msg::ConvResult>(&m)) return r->output.size();
  return 0;
}

}  // namespace

std::uint64_t payload_size(const ConvTaskView& t) {
  return 4 + 1 + array_bytes(t.input) + array_bytes(t.kernels) + 4 + array_bytes(t.extra);
}

std::uint64_t payload_size(const Message& m) {
  return std::visit(
      [](const auto& v) -> std::uint64_t {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, msg::Hello>) return 1 + 4 + v.deviceName.size();
        else if constexpr (std::is_same_v<T, msg::BenchRequest>) return 2 * kDimsBytes + 8;
        else if constexpr (std::is_same_v<T, msg::BenchReport>) return 8;
        else if constexpr (std::is_same_v<T, msg::ConvTask>) return payload_size(view_of(v));
        else if constexpr (std::is_same_v<T, msg::ConvResult>) return result_payload(v.output.shape());
        else return 0;
      },
      m);
}

void encode_conv_task(const ConvTaskView& t, ByteSink& sink) {
  if (!t.kernels || t.kernels->empty()) throw DimensionError("ConvTask needs kernels");
  for (const auto* a : {t.input, t.kernels, t.extra})
    if (a) check_u32(a->shape(), "ConvTask");
  Writer w(sink);
  write_header(w, MsgType::ConvTask, payload_size(t));
  w.put(t.layerOrdinal);
  w.put(static_cast<std::uint8_t>(t.direction));
  put_array(w, t.input);
  put_array(w, t.kernels);
  w.put(static_cast<std::uint32_t>(t.kernels->shape().d0));
  put_array(w, t.extra);
}

void encode_message(const Message& m, ByteSink& sink) {
  if (const auto* t = std::get_if<msg::ConvTask>(&m)) {
    if (t->numMaps != t->kernels.shape().d0)
      throw DimensionError("ConvTask numMaps " + std::to_string(t->numMaps) +
                           " differs from kernel count " + std::to_string(t->kernels.shape().d0));
    encode_conv_task(view_of(*t), sink);
    return;
  }
  Writer w(sink);
  const MsgType type = type_of(m);
  const std::uint64_t len = payload_size(m);
  if (const auto* h = std::get_if<msg::Hello>(&m)) {
    if (h->deviceName.size() > std::numeric_limits<std::uint32_t>::max())
      throw SizeError("device name too long");
  }
  if (const auto* r = std::get_if<msg::ConvResult>(&m)) check_u32(r->output.shape(), "ConvResult");
  write_header(w, type, len);
  std::visit(
      [&](const auto& v) {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, msg::Hello>) {
          w.put(v.protocolVersion);
          w.put(static_cast<std::uint32_t>(v.deviceName.size()));
          w.put_bytes(std::as_bytes(std::span(v.deviceName.data(), v.deviceName.size())));
        } else if constexpr (std::is_same_v<T, msg::BenchRequest>) {
          check_u32(v.spec.input, "BenchRequest");
          check_u32(v.spec.kernels, "BenchRequest");
          w.put_dims(v.spec.input);
          w.put_dims(v.spec.kernels);
          w.put(v.spec.repetitions);
          w.put(v.spec.warmups);
        } else if constexpr (std::is_same_v<T, msg::BenchReport>) {
          w.put(v.elapsedSeconds);
        } else if constexpr (std::is_same_v<T, msg::ConvResult>) {
          w.put(v.layerOrdinal);
          w.put(static_cast<std::uint8_t>(v.direction));
          put_array(w, &v.output);
        }
      },
      m);
}

std::vector<std::byte> encode_message(const Message& m) {
  std::vector<std::byte> out;
  out.reserve(kFrameHeaderBytes + payload_size(m));
  VectorSink sink(out);
  encode_message(m, sink);
  return out;
}

FrameHeader parse_header(std::span<const std::byte, kFrameHeaderBytes> bytes) {
  if (!std::equal(kFrameMagic.begin(), kFrameMagic.end(), bytes.begin()))
    throw ProtocolError("bad frame magic");
  const auto type = static_cast<std::uint8_t>(bytes[4]);
  if (type < 1 || type > 7) throw ProtocolError("unknown message type " + std::to_string(type));
  std::uint64_t len;
  std::memcpy(&len, bytes.data() + 5, 8);
  len = to_le(len);
  if (len > kMaxPayloadBytes)
    throw SizeError("frame announces " + std::to_string(len) + " payload bytes, above 2^40");
  return {static_cast<MsgType>(type), len};
}

Message decode_payload(MsgType type, std::uint64_t payloadLen, ByteSource& src) {
  Reader r(src, payloadLen);
  Message m;
  switch (type) {
    case MsgType::Hello: {
      msg::Hello h;
      h.protocolVersion = r.get<std::uint8_t>();
      const auto n = r.get<std::uint32_t>();
      if (n > r.remaining()) throw CorruptionError("device name runs past payload");
      h.deviceName.resize(n);
      r.raw(std::as_writable_bytes(std::span(h.deviceName.data(), n)));
      m = std::move(h);
      break;
    }
    case MsgType::BenchRequest: {
      msg::BenchRequest b;
      for (Shape4* s : {&b.spec.input, &b.spec.kernels}) {
        std::array<std::size_t, 4> d{};
        for (auto& x : d) x = r.get<std::uint32_t>();
        *s = {d[0], d[1], d[2], d[3]};
      }
      b.spec.repetitions = r.get<std::uint32_t>();
      b.spec.warmups = r.get<std::uint32_t>();
      m = b;
      break;
    }
    case MsgType::BenchReport:
      m = msg::BenchReport{r.get<double>()};
      break;
    case MsgType::ConvTask: {
      msg::ConvTask t;
      t.layerOrdinal = r.get<std::uint32_t>();
      t.direction = parse_direction(r.get<std::uint8_t>());
      t.input = r.get_array<Tensor4>();
      t.kernels = r.get_array<KernelBank>();
      t.numMaps = r.get<std::uint32_t>();
      t.extra = r.get_array<Tensor4>();
      if (t.kernels.empty()) throw CorruptionError("ConvTask without kernels");
      if (t.numMaps != t.kernels.shape().d0)
        throw CorruptionError("ConvTask numMaps " + std::to_string(t.numMaps) +
                              " differs from kernel count " + std::to_string(t.kernels.shape().d0));
      m = std::move(t);
      break;
    }
    case MsgType::ConvResult: {
      msg::ConvResult c;
      c.layerOrdinal = r.get<std::uint32_t>();
      c.direction = parse_direction(r.get<std::uint8_t>());
      c.output = r.get_array<Tensor4>();
      m = std::move(c);
      break;
    }
    case MsgType::AllOk: m = msg::AllOk{}; break;
    case MsgType::TrainOver: m = msg::TrainOver{}; break;
    default: throw ProtocolError("unknown message type");
  }
  if (r.remaining() != 0)
    throw CorruptionError(std::to_string(r.remaining()) + " unread bytes after " +
                          to_string(type) + " payload");
  return m;
}

Message decode_message(std::span<const std::byte> bytes, std::size_t* consumed) {
  // A short prefix can already be rejected if its magic is wrong.
  const std::size_t check = std::min(bytes.size(), kFrameMagic.size());
  if (!std::equal(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(check), kFrameMagic.begin()))
    throw ProtocolError("bad frame magic");
  if (bytes.size() < kFrameHeaderBytes)
    throw IncompleteFrameError("have " + std::to_string(bytes.size()) + " of 13 header bytes");
  const FrameHeader h = parse_header(bytes.first<kFrameHeaderBytes>());
  if (bytes.size() - kFrameHeaderBytes < h.payloadLen)
    throw IncompleteFrameError("have " + std::to_string(bytes.size() - kFrameHeaderBytes) + " of " +
                               std::to_string(h.payloadLen) + " payload bytes");
  SpanSource src(bytes.subspan(kFrameHeaderBytes, h.payloadLen));
  Message m = decode_payload(h.type, h.payloadLen, src);
  if (consumed) *consumed = kFrameHeaderBytes + h.payloadLen;
  return m;
}

void FrameAssembler::feed(std::span<const std::byte> chunk) {
  if (start_ > 0 && start_ >= buf_.size() / 2) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(start_));
    start_ = 0;
  }
  buf_.insert(buf_.end(), chunk.begin(), chunk.end());
}

std::optional<Message> FrameAssembler::next() {
  if (broken_) throw ProtocolError("stream already failed; drop the connection");
  try {
    std::size_t used = 0;
    Message m = decode_message(std::span(buf_).subspan(start_), &used);
    start_ += used;
    return m;
  } catch (const IncompleteFrameError&) {
    return std::nullopt;
  } catch (...) {
    broken_ = true;
    throw;
  }
}

// ---------------------------------------------------------------------------
// MessageChannel

class MessageChannel::Sink final : public ByteSink {
 public:
  explicit Sink(Connection& conn) : conn_(conn) { buf_.reserve(kCap); }
  ~Sink() override = default;

  void write(std::span<const std::byte> bytes) override {
    if (buf_.size() + bytes.size() <= kCap) {
      buf_.insert(buf_.end(), bytes.begin(), bytes.end());
      return;
    }
    flush();
    if (bytes.size() >= kCap) conn_.write_all(bytes);
    else buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }

  void flush() {
    if (!buf_.empty()) conn_.write_all(buf_);
    buf_.clear();
  }

 private:
  static constexpr std::size_t kCap = 64 * 1024;
  Connection& conn_;
  std::vector<std::byte> buf_;
};

class MessageChannel::Source final : public ByteSource {
 public:
  explicit Source(MessageChannel& ch) : ch_(ch) {}
  void read(std::span<std::byte> out) override { ch_.read_bytes(out); }

 private:
  MessageChannel& ch_;
};

MessageChannel::MessageChannel(std::unique_ptr<Connection> conn, Millis timeout)
    : conn_(std::move(conn)), rbuf_(64 * 1024), timeout_(timeout) {}
MessageChannel::~MessageChannel() = default;
MessageChannel::MessageChannel(MessageChannel&&) noexcept = default;
MessageChannel& MessageChannel::operator=(MessageChannel&&) noexcept = default;

void MessageChannel::close() {
  if (conn_) conn_->close();
}

void MessageChannel::read_bytes(std::span<std::byte> out) {
  std::size_t done = 0;
  while (done < out.size()) {
    if (rpos_ == rlen_) {
      // Large reads bypass the buffer.
      if (out.size() - done >= rbuf_.size()) {
        read_exact(*conn_, out.subspan(done), timeout_);
        return;
      }
      rpos_ = 0;
      rlen_ = conn_->read_some(rbuf_, timeout_);
      if (rlen_ == 0)
        throw ConnectionError("peer " + conn_->peer() + " closed the stream mid-frame");
    }
    const std::size_t n = std::min(out.size() - done, rlen_ - rpos_);
    std::memcpy(out.data() + done, rbuf_.data() + rpos_, n);
    rpos_ += n;
    done += n;
  }
}

FrameHeader MessageChannel::read_header() {
  std::array<std::byte, kFrameHeaderBytes> h;
  if (rpos_ == rlen_) {
    rpos_ = 0;
    rlen_ = conn_->read_some(rbuf_, timeout_);
    if (rlen_ == 0) throw ConnectionError("peer " + conn_->peer() + " closed the connection");
  }
  read_bytes(h);
  return parse_header(h);
}

void MessageChannel::send(const Message& m) {
  Sink sink(*conn_);
  encode_message(m, sink);
  sink.flush();
  auto& c = stats_.sent[static_cast<std::size_t>(type_of(m))];
  ++c.frames;
  c.bytes += kFrameHeaderBytes + payload_size(m);
  c.elements += element_count(m);
}

void MessageChannel::send_conv_task(const ConvTaskView& t) {
  Sink sink(*conn_);
  encode_conv_task(t, sink);
  sink.flush();
  auto& c = stats_.sent[static_cast<std::size_t>(MsgType::ConvTask)];
  ++c.frames;
  c.bytes += kFrameHeaderBytes + payload_size(t);
  for (const auto* a : {t.input, t.kernels, t.extra}) c.elements += a ? a->size() : 0;
}

Message MessageChannel::recv() {
  const FrameHeader h = read_header();
  Source src(*this);
  Message m = decode_payload(h.type, h.payloadLen, src);
  auto& c = stats_.received[static_cast<std::size_t>(h.type)];
  ++c.frames;
  c.bytes += kFrameHeaderBytes + h.payloadLen;
  c.elements += element_count(m);
  return m;
}

void MessageChannel::recv_conv_result_into(std::uint32_t layerOrdinal, ConvDirection direction,
                                           const Shape4& expected, detail::Dense4<double>& target,
                                           std::size_t axis, std::size_t begin) {
  const FrameHeader h = read_header();
  if (h.type != MsgType::ConvResult)
    throw ProtocolError(std::string("expected ConvResult from ") + peer() + ", got " +
                        to_string(h.type));
  Source src(*this);
  Reader r(src, h.payloadLen);
  const auto layer = r.get<std::uint32_t>();
  const auto dir = parse_direction(r.get<std::uint8_t>());
  const Shape4 dims = r.get_dims();
  if (layer != layerOrdinal || dir != direction || dims != expected ||
      h.payloadLen != result_payload(expected))
    throw CorruptionError("ConvResult from " + peer() + " is layer " + std::to_string(layer) + " " +
                          to_string(dir) + " " + dims.to_string() + ", expected layer " +
                          std::to_string(layerOrdinal) + " " + to_string(direction) + " " +
                          expected.to_string());
  const Shape4& ts = target.shape();
  const std::size_t block = expected.d1 * expected.d2 * expected.d3;
  if (axis == 0) {
    if (begin + expected.d0 > ts.d0 || block != ts.d1 * ts.d2 * ts.d3)
      throw DimensionError("result " + expected.to_string() + " does not fit " + ts.to_string());
    r.get_doubles({target.data().data() + begin * block, expected.size()});
  } else {
    if (expected.d0 != ts.d0 || begin + expected.d1 > ts.d1 || expected.d2 != ts.d2 ||
        expected.d3 != ts.d3)
      throw DimensionError("result " + expected.to_string() + " does not fit " + ts.to_string());
    for (std::size_t i = 0; i < expected.d0; ++i) r.get_doubles({target.plane(i, begin), block});
  }
  auto& c = stats_.received[static_cast<std::size_t>(MsgType::ConvResult)];
  ++c.frames;
  c.bytes += kFrameHeaderBytes + h.payloadLen;
  c.elements += expected.size();
}

void MessageChannel::send_conv_result_stream(
    std::uint32_t layerOrdinal, ConvDirection direction, const Shape4& dims,
    const std::function<void(std::size_t, std::size_t, std::vector<double>&)>& produce,
    std::size_t blockSamples) {
  check_u32(dims, "ConvResult");
  if (!dims.all_positive()) throw DimensionError("ConvResult dims must be positive");
  const std::uint64_t len = result_payload(dims);
  Sink sink(*conn_);
  Writer w(sink);
  write_header(w, MsgType::ConvResult, len);
  w.put(layerOrdinal);
  w.put(static_cast<std::uint8_t>(direction));
  w.put_dims(dims);
  const std::size_t block = dims.d1 * dims.d2 * dims.d3;
  std::vector<double> buf;
  for (std::size_t first = 0; first < dims.d0; first += blockSamples) {
    const std::size_t count = std::min(blockSamples, dims.d0 - first);
    buf.clear();
    produce(first, count, buf);
    if (buf.size() != count * block)
      throw DimensionError("result producer gave " + std::to_string(buf.size()) + " values, expected " +
                           std::to_string(count * block));
    w.put_doubles(buf);
  }
  sink.flush();
  auto& c = stats_.sent[static_cast<std::size_t>(MsgType::ConvResult)];
  ++c.frames;
  c.bytes += kFrameHeaderBytes + len;
  c.elements += dims.size();
}

}  // namespace convshard
