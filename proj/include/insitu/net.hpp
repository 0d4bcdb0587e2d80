#pragma once

// Thin POSIX socket helpers. Everything that talks between processes (rank
// mesh, steering bus, stream server) goes through these.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>

namespace insitu::net {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  ~Fd() { reset(); }
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;

  int get() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  int release() { return std::exchange(fd_, -1); }
  void reset();
  // Wakes any thread blocked reading this descriptor without closing it.
  void shutdown() const;

 private:
  int fd_ = -1;
};

Fd unix_listen(const std::string& path, int backlog = 16);
// Retries until the listener exists or the timeout expires.
Fd unix_connect(const std::string& path, std::chrono::milliseconds timeout);

// Binds host:port (port 0 picks a free port); returns the fd and bound port.
std::pair<Fd, std::uint16_t> tcp_listen(const std::string& host, std::uint16_t port,
                                        int backlog = 16);
Fd tcp_connect(const std::string& host, std::uint16_t port,
               std::chrono::milliseconds timeout);

// Returns an invalid Fd on timeout.
Fd accept_with_timeout(const Fd& listener, std::chrono::milliseconds timeout);

// Throws PeerLostError on failure.
void write_all(int fd, std::span<const std::uint8_t> data);
// False on orderly EOF before any byte; throws PeerLostError on a short read.
bool read_exact(int fd, void* dst, std::size_t n);
// True if readable (or hung up) within the timeout.
bool wait_readable(int fd, std::chrono::milliseconds timeout);

void set_nodelay(int fd);

}  // namespace insitu::net
