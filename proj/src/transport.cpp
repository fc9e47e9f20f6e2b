#include "convshard/transport.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <vector>

#include "convshard/errors.hpp"

namespace convshard {

void read_exact(Connection& conn, std::span<std::byte> out, Millis timeout) {
  std::size_t got = 0;
  while (got < out.size()) {
    const std::size_t n = conn.read_some(out.subspan(got), timeout);
    if (n == 0)
      throw ConnectionError("peer " + conn.peer() + " closed the stream after " +
                            std::to_string(got) + " of " + std::to_string(out.size()) + " bytes");
    got += n;
  }
}

// ---------------------------------------------------------------------------
// In-memory loopback

namespace {

// Bounded ring buffer shared by one writer and one reader.
class Pipe {
 public:
  explicit Pipe(std::size_t capacity) : ring_(std::max<std::size_t>(capacity, 1)) {}

  void write(std::span<const std::byte> bytes) {
    std::unique_lock lock(mu_);
    while (!bytes.empty()) {
      cv_.wait(lock, [&] { return readerGone_ || writerGone_ || size_ < ring_.size(); });
      if (readerGone_ || writerGone_) throw ConnectionError("loopback peer closed");
      const std::size_t tail = (head_ + size_) % ring_.size();
      const std::size_t n =
          std::min({bytes.size(), ring_.size() - size_, ring_.size() - tail});
      std::memcpy(ring_.data() + tail, bytes.data(), n);
      size_ += n;
      bytes = bytes.subspan(n);
      cv_.notify_all();
    }
  }

  std::size_t read(std::span<std::byte> out, Millis timeout) {
    std::unique_lock lock(mu_);
    if (!cv_.wait_for(lock, timeout, [&] { return size_ > 0 || writerGone_ || readerGone_; }))
      throw TimeoutError("no data from loopback peer within " + std::to_string(timeout.count()) +
                         " ms");
    if (readerGone_) throw ConnectionError("loopback endpoint already closed");
    std::size_t done = 0;
    while (done < out.size() && size_ > 0) {
      const std::size_t n = std::min({out.size() - done, size_, ring_.size() - head_});
      std::memcpy(out.data() + done, ring_.data() + head_, n);
      head_ = (head_ + n) % ring_.size();
      size_ -= n;
      done += n;
    }
    cv_.notify_all();
    return done;
  }

  void close_writer() {
    std::lock_guard lock(mu_);
    writerGone_ = true;
    cv_.notify_all();
  }
  void close_reader() {
    std::lock_guard lock(mu_);
    readerGone_ = true;
    size_ = 0;
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::byte> ring_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
  bool writerGone_ = false;
  bool readerGone_ = false;
};

class LoopbackConnection final : public Connection {
 public:
  LoopbackConnection(std::shared_ptr<Pipe> in, std::shared_ptr<Pipe> out, std::string name)
      : in_(std::move(in)), out_(std::move(out)), name_(std::move(name)) {}
  ~LoopbackConnection() override { close(); }

  void write_all(std::span<const std::byte> bytes) override { out_->write(bytes); }
  std::size_t read_some(std::span<std::byte> out, Millis timeout) override {
    return in_->read(out, timeout);
  }
  void close() override {
    if (closed_) return;
    closed_ = true;
    out_->close_writer();
    in_->close_reader();
  }
  std::string peer() const override { return name_; }

 private:
  std::shared_ptr<Pipe> in_, out_;
  std::string name_;
  bool closed_ = false;
};

}  // namespace

std::pair<std::unique_ptr<Connection>, std::unique_ptr<Connection>> make_loopback_pair(
    std::size_t capacity) {
  auto ab = std::make_shared<Pipe>(capacity);
  auto ba = std::make_shared<Pipe>(capacity);
  return {std::make_unique<LoopbackConnection>(ba, ab, "loopback:b"),
          std::make_unique<LoopbackConnection>(ab, ba, "loopback:a")};
}

// ---------------------------------------------------------------------------
// TCP

namespace {

std::string errno_text() { return std::strerror(errno); }

int wait_fd(int fd, short events, Millis timeout) {
  pollfd p{fd, events, 0};
  for (;;) {
    const int r = ::poll(&p, 1, static_cast<int>(std::min<long long>(timeout.count(), 1 << 30)));
    if (r < 0 && errno == EINTR) continue;
    return r;
  }
}

class TcpConnection final : public Connection {
 public:
  TcpConnection(int fd, std::string peer) : fd_(fd), peer_(std::move(peer)) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~TcpConnection() override { close(); }

  void write_all(std::span<const std::byte> bytes) override {
    while (!bytes.empty()) {
      const ssize_t n = ::send(fd_, bytes.data(), bytes.size(), MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw ConnectionError("send to " + peer_ + " failed: " + errno_text());
      }
      bytes = bytes.subspan(static_cast<std::size_t>(n));
    }
  }

  std::size_t read_some(std::span<std::byte> out, Millis timeout) override {
    const int r = wait_fd(fd_, POLLIN, timeout);
    if (r == 0)
      throw TimeoutError("no data from " + peer_ + " within " + std::to_string(timeout.count()) +
                         " ms");
    if (r < 0) throw ConnectionError("poll on " + peer_ + " failed: " + errno_text());
    for (;;) {
      const ssize_t n = ::recv(fd_, out.data(), out.size(), 0);
      if (n >= 0) return static_cast<std::size_t>(n);
      if (errno == EINTR) continue;
      throw ConnectionError("recv from " + peer_ + " failed: " + errno_text());
    }
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }
  std::string peer() const override { return peer_; }

 private:
  int fd_;
  std::string peer_;
};

}  // namespace

std::unique_ptr<Connection> tcp_connect(const std::string& host, std::uint16_t port,
                                        Millis timeout) {
  const std::string where = host + ":" + std::to_string(port);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res))
    throw ConnectionError("cannot resolve " + where + ": " + ::gai_strerror(rc));
  std::string lastError = "no addresses";
  for (addrinfo* a = res; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, a->ai_addr, a->ai_addrlen);
    if (rc < 0 && errno == EINPROGRESS) {
      if (wait_fd(fd, POLLOUT, timeout) > 0) {
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
        errno = err;
      } else {
        errno = ETIMEDOUT;
      }
    }
    if (rc == 0) {
      ::fcntl(fd, F_SETFL, flags);
      ::freeaddrinfo(res);
      return std::make_unique<TcpConnection>(fd, where);
    }
    lastError = errno_text();
    ::close(fd);
  }
  ::freeaddrinfo(res);
  throw ConnectionError("cannot connect to " + where + ": " + lastError);
}

TcpListener::TcpListener(std::uint16_t port, const std::string& bindAddress) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw ConnectionError("socket: " + errno_text());
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, bindAddress.c_str(), &addr.sin_addr) != 1) {
    ::close(fd_);
    throw ConfigError("bad bind address " + bindAddress);
  }
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(fd_, 16) < 0) {
    const std::string err = errno_text();
    ::close(fd_);
    throw ConnectionError("cannot listen on " + bindAddress + ":" + std::to_string(port) + ": " + err);
  }
  socklen_t len = sizeof addr;
  ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Connection> TcpListener::accept(Millis timeout) {
  const int r = wait_fd(fd_, POLLIN, timeout);
  if (r == 0)
    throw TimeoutError("no connection on port " + std::to_string(port_) + " within " +
                       std::to_string(timeout.count()) + " ms");
  if (r < 0) throw ConnectionError("poll on listener failed: " + errno_text());
  sockaddr_in peer{};
  socklen_t len = sizeof peer;
  const int fd = ::accept(fd_, reinterpret_cast<sockaddr*>(&peer), &len);
  if (fd < 0) throw ConnectionError("accept failed: " + errno_text());
  char ip[INET_ADDRSTRLEN] = {};
  ::inet_ntop(AF_INET, &peer.sin_addr, ip, sizeof ip);
  return std::make_unique<TcpConnection>(fd, std::string(ip) + ":" + std::to_string(ntohs(peer.sin_port)));
}

std::pair<std::string, std::uint16_t> split_address(const std::string& address,
                                                    std::uint16_t defaultPort) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) return {address, defaultPort};
  const std::string host = address.substr(0, colon), port = address.substr(colon + 1);
  unsigned value = 0;
  auto [p, ec] = std::from_chars(port.data(), port.data() + port.size(), value);
  if (host.empty() || ec != std::errc() || p != port.data() + port.size() || value == 0 ||
      value > 65535)
    throw ConfigError("bad address '" + address + "', expected host:port");
  return {host, static_cast<std::uint16_t>(value)};
}

std::uint16_t default_port() {
  const char* env = std::getenv("CONVSHARD_PORT");
  if (!env || !*env) return kDefaultPort;
  unsigned value = 0;
  const std::string s(env);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (ec != std::errc() || p != s.data() + s.size() || value == 0 || value > 65535)
    throw ConfigError("CONVSHARD_PORT='" + s + "' is not a valid port");
  return static_cast<std::uint16_t>(value);
}

}  // namespace convshard
