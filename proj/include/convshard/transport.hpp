#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>

namespace convshard {

using Millis = std::chrono::milliseconds;

/// Ordered, reliable byte stream. One writer and one reader at a time.
class Connection {
 public:
  virtual ~Connection() = default;

  /// Blocks until every byte is handed to the transport. Throws
  /// ConnectionError if the peer is gone.
  virtual void write_all(std::span<const std::byte> bytes) = 0;

  /// Blocks until at least one byte arrives; returns 0 on orderly end of
  /// stream. Throws TimeoutError after `timeout` without data.
  virtual std::size_t read_some(std::span<std::byte> out, Millis timeout) = 0;

  virtual void close() = 0;
  virtual std::string peer() const = 0;
};

/// Reads exactly out.size() bytes. Throws ConnectionError on end of stream.
void read_exact(Connection& conn, std::span<std::byte> out, Millis timeout);

/// Two connected in-memory endpoints. Each direction buffers at most
/// `capacity` bytes, so a fast writer waits for its reader like a socket.
std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_loopback_pair(
    std::size_t capacity = std::size_t{4} << 20);

std::unique_ptr<Connection> tcp_connect(const std::string& host, std::uint16_t port,
                                        Millis timeout = Millis(10000));

class TcpListener {
 public:
  explicit TcpListener(std::uint16_t port, const std::string& bindAddress = "0.0.0.0");
  ~TcpListener();
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  /// Port actually bound (useful when constructed with port 0).
  std::uint16_t port() const { return port_; }
  std::unique_ptr<Connection> accept(Millis timeout);

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

/// "host:port" or "host" (default port).
std::pair<std::string, std::uint16_t> split_address(const std::string& address,
                                                    std::uint16_t defaultPort);

inline constexpr std::uint16_t kDefaultPort = 7077;

/// CONVSHARD_PORT if set and valid, otherwise 7077.
std::uint16_t default_port();

}  // namespace convshard
