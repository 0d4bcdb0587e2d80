#include "insitu/stream_server.hpp"

#include <sys/socket.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "insitu/errors.hpp"
#include "insitu/log.hpp"
#include "insitu/websocket.hpp"

namespace insitu::stream {

namespace {

using Clock = std::chrono::steady_clock;
constexpr std::size_t kControlDepth = 64;
constexpr std::size_t kReadChunk = 64 * 1024;

std::string content_type(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  if (ext == ".html") return "text/html; charset=utf-8";
  if (ext == ".js" || ext == ".mjs") return "text/javascript";
  if (ext == ".css") return "text/css";
  if (ext == ".json") return "application/json";
  if (ext == ".png") return "image/png";
  if (ext == ".svg") return "image/svg+xml";
  if (ext == ".wasm") return "application/wasm";
  return "application/octet-stream";
}

// Splits concatenated messages, keeping an incomplete tail in `buf`.
template <typename Fn>
void drain_messages(wire::Bytes& buf, Fn&& fn) {
  std::size_t off = 0;
  for (;;) {
    std::span<const std::uint8_t> rest(buf.data() + off, buf.size() - off);
    auto len = message_length(rest);
    if (!len || rest.size() < *len) break;
    fn(rest.first(*len));
    off += *len;
  }
  buf.erase(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(off));
}

}  // namespace

struct StreamServer::Encoded {
  FrameMessage meta;  // payload left empty
  wire::Bytes payload;
};

struct StreamServer::Session {
  int id = 0;
  net::Fd fd;
  bool websocket = false;
  std::mutex write_mu;

  std::mutex mu;
  std::condition_variable cv;
  std::shared_ptr<const Encoded> slot;
  std::uint64_t slot_seq = 0;
  std::uint64_t next_seq = 1;
  std::deque<wire::Bytes> control;
  bool ready = false;
  bool dead = false;
  ClientCounters counters;

  std::thread thread;
  std::thread writer;
  std::atomic<bool> finished{false};
};

StreamServer::StreamServer(const ServerOptions& opts, ServerHooks hooks)
    : opts_(opts), hooks_(std::move(hooks)) {
  auto [fd, port] = net::tcp_listen(opts_.host, opts_.port);
  listener_ = std::move(fd);
  port_ = port;
  acceptor_ = std::thread([this] { accept_loop(); });
  stats_thread_ = std::thread([this] { stats_loop(); });
  log::info("stream server listening on ", opts_.host, ":", port_);
}

StreamServer::~StreamServer() { stop(); }

void StreamServer::stop() {
  if (stop_.exchange(true)) return;
  {
    std::lock_guard lock(stop_mu_);
    stop_cv_.notify_all();
  }
  if (acceptor_.joinable()) acceptor_.join();
  if (stats_thread_.joinable()) stats_thread_.join();
  std::list<std::shared_ptr<Session>> sessions;
  {
    std::lock_guard lock(sessions_mu_);
    sessions.swap(sessions_);
  }
  for (auto& s : sessions) {
    {
      std::lock_guard lock(s->mu);
      s->dead = true;
      s->cv.notify_all();
    }
    s->fd.shutdown();
  }
  for (auto& s : sessions) {
    if (s->thread.joinable()) s->thread.join();
  }
  listener_.reset();
}

void StreamServer::offer_image(const render::DepthImage& image, Encoding encoding, std::uint64_t sim_step,
                               std::uint64_t capture_ts_us) {
  auto e = std::make_shared<Encoded>();
  e->meta.sim_step = sim_step;
  e->meta.capture_ts_us = capture_ts_us;
  e->meta.width = static_cast<std::uint16_t>(image.size.width);
  e->meta.height = static_cast<std::uint16_t>(image.size.height);
  e->meta.encoding = encoding;
  if (encoding != Encoding::raw && encoding != Encoding::rle) {
    throw ArgumentError("images stream as raw or rle, not encoding " + std::to_string(static_cast<int>(encoding)));
  }
  // Skip the encoding work when nobody is listening.
  if (client_count() > 0) e->payload = encode_payload(image, encoding);
  offer(std::move(e));
}

void StreamServer::offer_vdi(const render::Vdi& vdi, std::uint64_t sim_step, std::uint64_t capture_ts_us) {
  auto e = std::make_shared<Encoded>();
  e->meta.sim_step = sim_step;
  e->meta.capture_ts_us = capture_ts_us;
  e->meta.width = static_cast<std::uint16_t>(vdi.size.width);
  e->meta.height = static_cast<std::uint16_t>(vdi.size.height);
  e->meta.encoding = Encoding::vdi;
  if (client_count() > 0) e->payload = encode_payload(vdi);
  offer(std::move(e));
}

void StreamServer::offer(std::shared_ptr<const Encoded> frame) {
  frames_offered_++;
  {
    std::lock_guard lock(fps_mu_);
    auto now = Clock::now();
    offer_times_.push_back(now);
    while (!offer_times_.empty() && now - offer_times_.front() > std::chrono::seconds(1)) offer_times_.pop_front();
  }
  bool delivered = false;
  std::lock_guard lock(sessions_mu_);
  const bool encoded = !frame->payload.empty() || frame->meta.width == 0 || frame->meta.height == 0;
  for (auto& s : sessions_) {
    std::lock_guard slock(s->mu);
    if (!s->ready || s->dead || !encoded) continue;
    s->counters.offered++;
    if (s->slot) s->counters.dropped++;
    s->slot = frame;
    s->slot_seq = s->next_seq++;
    s->cv.notify_all();
    delivered = true;
  }
  if (!delivered) frames_without_client_++;
}

std::size_t StreamServer::client_count() const {
  std::lock_guard lock(sessions_mu_);
  std::size_t n = 0;
  for (const auto& s : sessions_) {
    std::lock_guard slock(s->mu);
    if (s->ready && !s->dead) ++n;
  }
  return n;
}

std::vector<ClientCounters> StreamServer::client_counters() const {
  std::lock_guard lock(sessions_mu_);
  std::vector<ClientCounters> out;
  for (const auto& s : sessions_) {
    std::lock_guard slock(s->mu);
    if (s->ready) out.push_back(s->counters);
  }
  return out;
}

std::optional<double> StreamServer::roundtrip_ms() const {
  std::lock_guard lock(latency_mu_);
  return latency_.latest(now_us());
}

StatsMessage StreamServer::current_stats() {
  StatsMessage s = hooks_.stats ? hooks_.stats() : StatsMessage{};
  {
    std::lock_guard lock(fps_mu_);
    auto now = Clock::now();
    while (!offer_times_.empty() && now - offer_times_.front() > std::chrono::seconds(1)) offer_times_.pop_front();
    s.frames_per_second = static_cast<double>(offer_times_.size());
  }
  s.roundtrip_ms = roundtrip_ms();
  return s;
}

void StreamServer::broadcast_stats() {
  auto msg = encode_stats(current_stats());
  std::lock_guard lock(sessions_mu_);
  for (auto& s : sessions_) push_control(*s, msg);
}

void StreamServer::push_control(Session& s, wire::Bytes msg) {
  std::lock_guard lock(s.mu);
  if (s.dead) return;
  if (s.control.size() >= kControlDepth) s.control.pop_front();
  s.control.push_back(std::move(msg));
  s.cv.notify_all();
}

void StreamServer::stats_loop() {
  std::unique_lock lock(stop_mu_);
  while (!stop_) {
    stop_cv_.wait_for(lock, opts_.stats_interval, [&] { return stop_.load(); });
    if (stop_) break;
    lock.unlock();
    broadcast_stats();
    lock.lock();
  }
}

void StreamServer::accept_loop() {
  while (!stop_) {
    net::Fd fd = net::accept_with_timeout(listener_, std::chrono::milliseconds(100));
    reap();
    if (!fd.valid()) continue;
    net::set_nodelay(fd.get());
    auto s = std::make_shared<Session>();
    s->fd = std::move(fd);
    {
      std::lock_guard lock(sessions_mu_);
      s->id = next_id_++;
      s->counters.id = s->id;
      sessions_.push_back(s);
    }
    s->thread = std::thread([this, s] { serve_session(s); });
  }
}

void StreamServer::reap() {
  std::list<std::shared_ptr<Session>> done;
  {
    std::lock_guard lock(sessions_mu_);
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if ((*it)->finished) {
        done.push_back(*it);
        it = sessions_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (auto& s : done) {
    if (s->thread.joinable()) s->thread.join();
    log::info("stream client ", s->id, " reaped (", s->counters.sent, " frames sent, ", s->counters.dropped,
              " dropped)");
  }
}

void StreamServer::serve_session(std::shared_ptr<Session> s) {
  const int fd = s->fd.get();
  auto finish = [&] {
    {
      std::lock_guard lock(s->mu);
      s->dead = true;
      s->cv.notify_all();
    }
    s->fd.shutdown();
    if (s->writer.joinable()) s->writer.join();
    s->finished = true;
  };
  try {
    char magic[4];
    if (!net::wait_readable(fd, opts_.handshake_timeout) || !net::read_exact(fd, magic, 4)) {
      finish();
      return;
    }
    std::string_view m(magic, 4);
    if (m == "GET ") {
      auto req = ws::read_http_request(fd, "GET ");
      if (!ws::is_upgrade(req)) {
        serve_static(fd, req.path);
        finish();
        return;
      }
      ws::send_upgrade_response(fd, req);
      s->websocket = true;
    } else if (m != kRawHello) {
      throw ProtocolError("unknown client greeting");
    }
    {
      std::lock_guard lock(s->mu);
      s->counters.websocket = s->websocket;
      s->ready = true;
    }
    s->writer = std::thread([this, s] { writer_loop(s); });
    push_control(*s, encode_stats(current_stats()));

    if (s->websocket) {
      ws::WsReader reader(fd, true, &s->write_mu, false);
      while (!stop_) {
        auto msg = reader.next();
        if (!msg) break;
        wire::Bytes buf = std::move(msg->payload);
        drain_messages(buf, [&](auto bytes) { handle_message(*s, bytes); });
        if (!buf.empty()) throw ProtocolError("partial message inside a websocket frame");
      }
    } else {
      wire::Bytes buf;
      std::vector<std::uint8_t> chunk(kReadChunk);
      while (!stop_) {
        ssize_t n = ::recv(fd, chunk.data(), chunk.size(), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        buf.insert(buf.end(), chunk.begin(), chunk.begin() + n);
        drain_messages(buf, [&](auto bytes) { handle_message(*s, bytes); });
      }
    }
  } catch (const Error& e) {
    log::warn("stream client ", s->id, ": ", e.what());
  }
  finish();
}

void StreamServer::writer_loop(std::shared_ptr<Session> s) {
  const int fd = s->fd.get();
  for (;;) {
    std::deque<wire::Bytes> control;
    std::shared_ptr<const Encoded> frame;
    std::uint64_t seq = 0;
    {
      std::unique_lock lock(s->mu);
      s->cv.wait(lock, [&] { return s->dead || s->slot || !s->control.empty(); });
      if (s->dead) return;
      control.swap(s->control);
      frame = std::move(s->slot);
      s->slot.reset();
      seq = s->slot_seq;
    }
    try {
      std::lock_guard wlock(s->write_mu);
      for (const auto& msg : control) {
        if (s->websocket) {
          net::write_all(fd, ws::encode_frame(ws::Opcode::binary, msg));
        } else {
          net::write_all(fd, msg);
        }
      }
      if (frame) {
        FrameMessage meta = frame->meta;
        meta.frame_seq = seq;
        auto header = encode_frame_header(meta, static_cast<std::uint32_t>(frame->payload.size()));
        if (s->websocket) {
          net::write_all(fd, ws::frame_head(ws::Opcode::binary, header.size() + frame->payload.size()));
        }
        net::write_all(fd, header);
        net::write_all(fd, frame->payload);
      }
    } catch (const PeerLostError&) {
      std::lock_guard lock(s->mu);
      s->dead = true;
      s->fd.shutdown();
      return;
    }
    if (frame) {
      std::lock_guard lock(s->mu);
      s->counters.sent++;
      s->counters.last_sent_seq = seq;
    }
  }
}

void StreamServer::handle_message(Session& s, std::span<const std::uint8_t> bytes) {
  std::string_view m(reinterpret_cast<const char*>(bytes.data()), 4);
  if (m == "STER") {
    auto cmd = steer::decode_command(bytes);
    SteerReply rep;
    if (hooks_.steer) {
      auto r = hooks_.steer(cmd.body);
      rep.accepted = r.accepted;
      rep.seq = r.command.seq;
      rep.apply_at_step = r.command.apply_at_step;
      rep.reason = r.reason;
    } else {
      rep.reason = "steering is not available";
    }
    push_control(s, encode_reply(rep));
  } else if (m == "VIZP") {
    auto v = decode_viz(bytes);
    if (hooks_.viz) {
      try {
        hooks_.viz(v);
      } catch (const ArgumentError& e) {
        log::warn("stream client ", s.id, ": rejected viz parameter: ", e.what());
      }
    }
  } else if (m == "ECHO") {
    auto e = decode_echo(bytes);
    std::lock_guard lock(latency_mu_);
    latency_.record(e.capture_ts_us, now_us());
  } else if (m == "ISTR") {
    return;
  } else {
    throw ProtocolError("clients may not send '" + std::string(m) + "' messages");
  }
}

void StreamServer::serve_static(int fd, const std::string& raw_path) {
  std::string path = raw_path.substr(0, raw_path.find('?'));
  if (opts_.static_dir.empty() || path.empty() || path[0] != '/' || path.find("..") != std::string::npos) {
    ws::send_http_response(fd, 404, "text/plain", "not found\n");
    return;
  }
  if (path.back() == '/') path += "index.html";
  std::filesystem::path file = std::filesystem::path(opts_.static_dir) / path.substr(1);
  std::ifstream in(file, std::ios::binary);
  if (!in || std::filesystem::is_directory(file)) {
    ws::send_http_response(fd, 404, "text/plain", "not found\n");
    return;
  }
  std::stringstream body;
  body << in.rdbuf();
  ws::send_http_response(fd, 200, content_type(file), body.str());
}

std::unique_ptr<StreamClient> StreamClient::connect(const std::string& host, std::uint16_t port,
                                                    Transport transport, std::chrono::milliseconds timeout) {
  std::unique_ptr<StreamClient> c(new StreamClient());
  c->fd_ = net::tcp_connect(host, port, timeout);
  c->transport_ = transport;
  if (transport == Transport::websocket) {
    ws::client_handshake(c->fd_.get(), host, "/stream");
  } else {
    net::write_all(c->fd_.get(), {reinterpret_cast<const std::uint8_t*>(kRawHello), 4});
  }
  return c;
}

StreamClient::~StreamClient() = default;

std::optional<Message> StreamClient::next(std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  for (;;) {
    if (transport_ == Transport::raw) {
      auto len = message_length(buffer_);
      if (len && buffer_.size() >= *len) {
        wire::Bytes msg(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(*len));
        buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(*len));
        return decode_message(msg);
      }
    } else if (!ready_.empty()) {
      auto msg = std::move(ready_.front());
      ready_.pop_front();
      return decode_message(msg);
    }
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (left.count() < 0 || !net::wait_readable(fd_.get(), std::max(left, std::chrono::milliseconds(0)))) {
      return std::nullopt;
    }
    if (transport_ == Transport::raw) {
      std::uint8_t chunk[kReadChunk];
      ssize_t n = ::recv(fd_.get(), chunk, sizeof(chunk), 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw PeerLostError("stream server closed the connection");
      buffer_.insert(buffer_.end(), chunk, chunk + n);
    } else {
      ws::WsReader reader(fd_.get(), false, &write_mu_, true);
      auto msg = reader.next();
      if (!msg) throw PeerLostError("stream server closed the connection");
      wire::Bytes buf = std::move(msg->payload);
      drain_messages(buf, [&](auto bytes) { ready_.emplace_back(bytes.begin(), bytes.end()); });
      if (!buf.empty()) throw ProtocolError("partial message inside a websocket frame");
    }
  }
}

void StreamClient::send_raw(std::span<const std::uint8_t> message) {
  std::lock_guard lock(write_mu_);
  if (transport_ == Transport::websocket) {
    net::write_all(fd_.get(), ws::encode_frame(ws::Opcode::binary, message, std::random_device{}()));
  } else {
    net::write_all(fd_.get(), message);
  }
}

void StreamClient::send_steer(const steer::CommandBody& body) {
  steer::SteeringCommand cmd;
  cmd.body = body;
  send_raw(steer::encode_command(cmd));
}

void StreamClient::send_viz(const VizParam& v) { send_raw(encode_viz(v)); }

void StreamClient::send_echo(std::uint64_t capture_ts_us) { send_raw(encode_echo(Echo{capture_ts_us})); }

void StreamClient::close() {
  if (fd_.valid()) {
    fd_.shutdown();
    fd_.reset();
  }
}

}  // namespace insitu::stream
