#pragma once

// Tagged point-to-point messaging between ranks. Stands in for MPI: the sim
// engine's ghost exchange and the compositor's binary swap both run over a
// MessageEndpoint, backed either by in-process queues (LocalFabric, used by
// tests that drive several ranks as threads) or by Unix stream sockets
// between rank processes (SocketMesh).

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "insitu/net.hpp"
#include "insitu/wire.hpp"

namespace insitu::comm {

using Tag = std::uint32_t;
using namespace std::chrono_literals;

inline constexpr std::chrono::milliseconds kDefaultRecvTimeout = 10s;

class MessageEndpoint {
 public:
  virtual ~MessageEndpoint() = default;

  virtual int rank() const = 0;
  virtual int size() const = 0;
  virtual void send(int peer, Tag tag, std::span<const std::uint8_t> payload) = 0;
  // First pending message from `peer` carrying `tag`; messages with other
  // tags stay queued. Throws PeerLostError on timeout or disconnect.
  virtual wire::Bytes recv(int peer, Tag tag,
                           std::chrono::milliseconds timeout = kDefaultRecvTimeout) = 0;

  std::uint64_t bytes_sent() const { return bytes_sent_; }

 protected:
  std::uint64_t bytes_sent_ = 0;
};

// Per-sender inbound queue with tag matching.
class Mailbox {
 public:
  void push(Tag tag, wire::Bytes payload);
  void close();
  wire::Bytes pop(Tag tag, std::chrono::milliseconds timeout, int peer);

 private:
  struct Entry {
    Tag tag;
    wire::Bytes payload;
  };
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Entry> queue_;
  bool closed_ = false;
};

class LocalFabric {
 public:
  explicit LocalFabric(int size);
  ~LocalFabric();

  int size() const { return size_; }
  MessageEndpoint& endpoint(int rank);
  // Simulates the loss of `rank`: every mailbox it feeds is closed.
  void disconnect(int rank);

 private:
  class Endpoint;
  int size_;
  // inbox_[dst][src]
  std::vector<std::vector<std::unique_ptr<Mailbox>>> inbox_;
  std::vector<std::unique_ptr<Endpoint>> endpoints_;
};

struct MeshOptions {
  std::string directory;   // where the per-rank listening sockets live
  std::string name;        // distinguishes several meshes in one run
  int rank = 0;
  int size = 1;
  std::uint64_t checksum = 0;  // RunSpec digest; must match on every rank
  std::chrono::milliseconds connect_timeout = 10s;
};

// Full mesh of Unix stream sockets. Each connection has a reader thread that
// drains into the matching Mailbox, so paired sends of large payloads cannot
// deadlock on socket buffers.
class SocketMesh final : public MessageEndpoint {
 public:
  explicit SocketMesh(const MeshOptions& opts);
  ~SocketMesh() override;

  SocketMesh(const SocketMesh&) = delete;
  SocketMesh& operator=(const SocketMesh&) = delete;

  int rank() const override { return opts_.rank; }
  int size() const override { return opts_.size; }
  void send(int peer, Tag tag, std::span<const std::uint8_t> payload) override;
  wire::Bytes recv(int peer, Tag tag, std::chrono::milliseconds timeout) override;

  static std::string socket_path(const MeshOptions& opts, int rank);

 private:
  struct Link {
    net::Fd fd;
    std::mutex send_mu;
    std::thread reader;
  };

  void handshake(Link& link, int expected_peer, bool initiator);
  void reader_loop(int peer);

  MeshOptions opts_;
  std::string listen_path_;
  std::vector<std::unique_ptr<Link>> links_;
  std::vector<std::unique_ptr<Mailbox>> inbox_;
};

// Deterministic sum over all ranks: gathered at rank 0 in rank order, then
// broadcast, so every rank sees bit-identical results.
double allreduce_sum(MessageEndpoint& ep, double value, Tag tag);

}  // namespace insitu::comm
