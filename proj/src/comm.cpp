#include "insitu/comm.hpp"

#include <unistd.h>

#include <algorithm>
#include <cstring>

#include "insitu/errors.hpp"

namespace insitu::comm {

void Mailbox::push(Tag tag, wire::Bytes payload) {
  {
    std::lock_guard lock(mu_);
    queue_.push_back({tag, std::move(payload)});
  }
  cv_.notify_all();
}

void Mailbox::close() {
  {
    std::lock_guard lock(mu_);
    closed_ = true;
  }
  cv_.notify_all();
}

wire::Bytes Mailbox::pop(Tag tag, std::chrono::milliseconds timeout, int peer) {
  std::unique_lock lock(mu_);
  auto deadline = std::chrono::steady_clock::now() + timeout;
  for (;;) {
    auto it = std::find_if(queue_.begin(), queue_.end(),
                           [tag](const Entry& e) { return e.tag == tag; });
    if (it != queue_.end()) {
      wire::Bytes out = std::move(it->payload);
      queue_.erase(it);
      return out;
    }
    if (closed_) throw PeerLostError("rank " + std::to_string(peer) + " disconnected");
    if (cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
      auto again = std::find_if(queue_.begin(), queue_.end(),
                                [tag](const Entry& e) { return e.tag == tag; });
      if (again != queue_.end()) continue;
      throw PeerLostError("timed out waiting for rank " + std::to_string(peer) +
                          " (tag " + std::to_string(tag) + ")");
    }
  }
}

class LocalFabric::Endpoint final : public MessageEndpoint {
 public:
  Endpoint(LocalFabric& fabric, int rank) : fabric_(fabric), rank_(rank) {}
  int rank() const override { return rank_; }
  int size() const override { return fabric_.size_; }
  void send(int peer, Tag tag, std::span<const std::uint8_t> payload) override {
    bytes_sent_ += payload.size();
    fabric_.inbox_.at(peer).at(rank_)->push(tag, wire::Bytes(payload.begin(), payload.end()));
  }
  wire::Bytes recv(int peer, Tag tag, std::chrono::milliseconds timeout) override {
    return fabric_.inbox_.at(rank_).at(peer)->pop(tag, timeout, peer);
  }

 private:
  LocalFabric& fabric_;
  int rank_;
};

LocalFabric::LocalFabric(int size) : size_(size) {
  if (size < 1) throw ArgumentError("fabric size must be positive");
  inbox_.resize(size);
  for (auto& row : inbox_) {
    for (int i = 0; i < size; ++i) row.push_back(std::make_unique<Mailbox>());
  }
  for (int r = 0; r < size; ++r) endpoints_.push_back(std::make_unique<Endpoint>(*this, r));
}

LocalFabric::~LocalFabric() = default;

MessageEndpoint& LocalFabric::endpoint(int rank) { return *endpoints_.at(rank); }

void LocalFabric::disconnect(int rank) {
  for (int dst = 0; dst < size_; ++dst) inbox_[dst][rank]->close();
}

namespace {

constexpr char kHello[] = "MESH";

}  // namespace

std::string SocketMesh::socket_path(const MeshOptions& opts, int rank) {
  return opts.directory + "/" + opts.name + ".r" + std::to_string(rank) + ".sock";
}

SocketMesh::SocketMesh(const MeshOptions& opts) : opts_(opts) {
  if (opts.size < 1 || opts.rank < 0 || opts.rank >= opts.size) {
    throw ArgumentError("bad mesh rank/size");
  }
  for (int i = 0; i < opts.size; ++i) {
    links_.push_back(std::make_unique<Link>());
    inbox_.push_back(std::make_unique<Mailbox>());
  }
  net::Fd listener;
  if (opts.rank + 1 < opts.size) {
    listen_path_ = socket_path(opts, opts.rank);
    listener = net::unix_listen(listen_path_);
  }
  try {
    for (int peer = 0; peer < opts.rank; ++peer) {
      links_[peer]->fd = net::unix_connect(socket_path(opts, peer), opts.connect_timeout);
      handshake(*links_[peer], peer, true);
    }
    for (int accepted = opts.rank + 1; accepted < opts.size; ++accepted) {
      net::Fd c = net::accept_with_timeout(listener, opts.connect_timeout);
      if (!c.valid()) throw PeerLostError("mesh '" + opts.name + "': peers did not connect");
      Link tmp;
      tmp.fd = std::move(c);
      handshake(tmp, -1, false);
    }
  } catch (...) {
    if (!listen_path_.empty()) ::unlink(listen_path_.c_str());
    throw;
  }
  if (!listen_path_.empty()) ::unlink(listen_path_.c_str());
  for (int peer = 0; peer < opts.size; ++peer) {
    if (peer == opts.rank) continue;
    links_[peer]->reader = std::thread([this, peer] { reader_loop(peer); });
  }
}

void SocketMesh::handshake(Link& link, int expected_peer, bool initiator) {
  auto send_hello = [&](int fd) {
    wire::Writer w;
    w.magic(kHello);
    w.u16(static_cast<std::uint16_t>(opts_.rank));
    w.u64(opts_.checksum);
    net::write_all(fd, w.buffer());
  };
  auto read_hello = [&](int fd) {
    std::uint8_t raw[14];
    if (!net::wait_readable(fd, opts_.connect_timeout) || !net::read_exact(fd, raw, sizeof(raw))) {
      throw PeerLostError("mesh handshake: no hello");
    }
    wire::Reader r(raw);
    r.expect_magic(kHello);
    int peer = r.u16();
    std::uint64_t sum = r.u64();
    if (sum != opts_.checksum) {
      throw ConfigError("run spec checksum mismatch between rank " +
                        std::to_string(opts_.rank) + " and rank " + std::to_string(peer));
    }
    return peer;
  };
  if (initiator) {
    send_hello(link.fd.get());
    int peer = read_hello(link.fd.get());
    if (peer != expected_peer) throw ProtocolError("mesh handshake: unexpected peer");
  } else {
    int peer = read_hello(link.fd.get());
    if (peer <= opts_.rank || peer >= opts_.size || links_[peer]->fd.valid()) {
      throw ProtocolError("mesh handshake: bad peer rank " + std::to_string(peer));
    }
    send_hello(link.fd.get());
    links_[peer]->fd = std::move(link.fd);
  }
}

void SocketMesh::reader_loop(int peer) {
  int fd = links_[peer]->fd.get();
  try {
    for (;;) {
      std::uint32_t head[2];
      if (!net::read_exact(fd, head, sizeof(head))) break;
      wire::Bytes payload(head[1]);
      if (head[1] > 0 && !net::read_exact(fd, payload.data(), payload.size())) break;
      inbox_[peer]->push(head[0], std::move(payload));
    }
  } catch (const Error&) {
  }
  inbox_[peer]->close();
}

void SocketMesh::send(int peer, Tag tag, std::span<const std::uint8_t> payload) {
  bytes_sent_ += payload.size();
  if (peer == opts_.rank) {
    inbox_[peer]->push(tag, wire::Bytes(payload.begin(), payload.end()));
    return;
  }
  auto& link = *links_.at(peer);
  std::uint32_t head[2] = {tag, static_cast<std::uint32_t>(payload.size())};
  std::lock_guard lock(link.send_mu);
  net::write_all(link.fd.get(), {reinterpret_cast<const std::uint8_t*>(head), sizeof(head)});
  net::write_all(link.fd.get(), payload);
}

wire::Bytes SocketMesh::recv(int peer, Tag tag, std::chrono::milliseconds timeout) {
  return inbox_.at(peer)->pop(tag, timeout, peer);
}

SocketMesh::~SocketMesh() {
  for (auto& link : links_) link->fd.shutdown();
  for (auto& link : links_) {
    if (link->reader.joinable()) link->reader.join();
  }
}

double allreduce_sum(MessageEndpoint& ep, double value, Tag tag) {
  const int n = ep.size();
  if (n == 1) return value;
  auto pack = [](double v) {
    wire::Writer w;
    w.f64(v);
    return w.take();
  };
  if (ep.rank() == 0) {
    double sum = value;
    for (int r = 1; r < n; ++r) {
      auto b = ep.recv(r, tag);
      sum += wire::Reader(b).f64();
    }
    auto out = pack(sum);
    for (int r = 1; r < n; ++r) ep.send(r, tag, out);
    return sum;
  }
  ep.send(0, tag, pack(value));
  auto b = ep.recv(0, tag);
  return wire::Reader(b).f64();
}

}  // namespace insitu::comm
