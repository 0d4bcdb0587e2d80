#include "insitu/net.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include "insitu/errors.hpp"

namespace insitu::net {

namespace {

std::string errno_text() { return std::strerror(errno); }

sockaddr_un unix_address(const std::string& path) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (path.size() >= sizeof(addr.sun_path)) {
    throw ArgumentError("socket path too long: " + path);
  }
  std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
  return addr;
}

}  // namespace

void Fd::reset() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Fd::shutdown() const {
  if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

Fd unix_listen(const std::string& path, int backlog) {
  ::unlink(path.c_str());
  Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd.valid()) throw ResourceError("socket: " + errno_text());
  auto addr = unix_address(path);
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    throw ResourceError("bind " + path + ": " + errno_text());
  }
  if (::listen(fd.get(), backlog) != 0) {
    throw ResourceError("listen " + path + ": " + errno_text());
  }
  return fd;
}

Fd unix_connect(const std::string& path, std::chrono::milliseconds timeout) {
  auto addr = unix_address(path);
  auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    Fd fd(::socket(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!fd.valid()) throw ResourceError("socket: " + errno_text());
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) {
      return fd;
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      throw PeerLostError("connect " + path + ": " + errno_text());
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
}

std::pair<Fd, std::uint16_t> tcp_listen(const std::string& host, std::uint16_t port,
                                        int backlog) {
  Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!fd.valid()) throw ResourceError("socket: " + errno_text());
  int one = 1;
  ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    throw ArgumentError("bad listen address: " + host);
  }
  if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    throw ResourceError("bind " + host + ":" + std::to_string(port) + ": " + errno_text());
  }
  if (::listen(fd.get(), backlog) != 0) throw ResourceError("listen: " + errno_text());
  socklen_t len = sizeof(addr);
  ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&addr), &len);
  return {std::move(fd), ntohs(addr.sin_port)};
}

Fd tcp_connect(const std::string& host, std::uint16_t port,
               std::chrono::milliseconds timeout) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    throw ArgumentError("bad address: " + host);
  }
  auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    Fd fd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0) {
      set_nodelay(fd.get());
      return fd;
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      throw PeerLostError("connect " + host + ":" + std::to_string(port) + ": " +
                          errno_text());
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
}

Fd accept_with_timeout(const Fd& listener, std::chrono::milliseconds timeout) {
  if (!wait_readable(listener.get(), timeout)) return Fd{};
  int c = ::accept4(listener.get(), nullptr, nullptr, SOCK_CLOEXEC);
  if (c < 0) return Fd{};
  return Fd(c);
}

void write_all(int fd, std::span<const std::uint8_t> data) {
  std::size_t off = 0;
  while (off < data.size()) {
    ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw PeerLostError("send: " + errno_text());
    }
    off += static_cast<std::size_t>(n);
  }
}

bool read_exact(int fd, void* dst, std::size_t n) {
  auto* p = static_cast<std::uint8_t*>(dst);
  std::size_t off = 0;
  while (off < n) {
    ssize_t r = ::recv(fd, p + off, n - off, 0);
    if (r == 0) {
      if (off == 0) return false;
      throw PeerLostError("connection closed mid-message");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      if (off == 0 && (errno == ECONNRESET || errno == EBADF || errno == ENOTCONN)) {
        return false;
      }
      throw PeerLostError("recv: " + errno_text());
    }
    off += static_cast<std::size_t>(r);
  }
  return true;
}

bool wait_readable(int fd, std::chrono::milliseconds timeout) {
  pollfd p{fd, POLLIN, 0};
  for (;;) {
    int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (r < 0 && errno == EINTR) continue;
    return r > 0;
  }
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

}  // namespace insitu::net
