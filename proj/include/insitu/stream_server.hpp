#pragma once

// Head-node frame streaming. Clients connect over TCP either as a browser
// (HTTP GET upgraded to WebSocket, one message per binary frame) or as a raw
// stream (send "ISTR" first, then concatenated messages). Plain HTTP GETs
// are answered from a static directory when one is configured.
//
// Each client has a frame slot of depth one: offering a frame replaces any
// frame the client has not started receiving yet, so a slow client only
// ever sees the newest frame and never holds up the producer. frame_seq is
// per client and assigned at offer time, so gaps in what a client receives
// are exactly the frames dropped for it.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "insitu/net.hpp"
#include "insitu/steer_bus.hpp"
#include "insitu/stream_wire.hpp"

namespace insitu::stream {

struct ServerOptions {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;  // 0 picks a free port
  std::string static_dir;  // served for non-upgrade GETs when set
  std::chrono::milliseconds stats_interval{1000};
  std::chrono::milliseconds handshake_timeout{5000};
};

struct ServerHooks {
  // Steering submissions; without a hook every command is rejected.
  std::function<steer::SubmitResult(const steer::CommandBody&)> steer;
  // Visualization changes; may throw ArgumentError to reject.
  std::function<void(const VizParam&)> viz;
  // Supplies sim_steps_per_second and rank states for STAT messages.
  std::function<StatsMessage()> stats;
};

struct ClientCounters {
  int id = 0;
  bool websocket = false;
  std::uint64_t offered = 0;
  std::uint64_t sent = 0;
  std::uint64_t dropped = 0;
  std::uint64_t last_sent_seq = 0;
};

class StreamServer {
 public:
  StreamServer(const ServerOptions& opts, ServerHooks hooks);
  ~StreamServer();

  StreamServer(const StreamServer&) = delete;
  StreamServer& operator=(const StreamServer&) = delete;

  std::uint16_t port() const { return port_; }

  // Never blocks on clients. Frames offered with no client connected are
  // dropped and counted.
  void offer_image(const render::DepthImage& image, Encoding encoding, std::uint64_t sim_step,
                   std::uint64_t capture_ts_us);
  void offer_vdi(const render::Vdi& vdi, std::uint64_t sim_step, std::uint64_t capture_ts_us);

  std::size_t client_count() const;
  std::vector<ClientCounters> client_counters() const;
  std::uint64_t frames_offered() const { return frames_offered_.load(); }
  std::uint64_t frames_without_client() const { return frames_without_client_.load(); }
  std::optional<double> roundtrip_ms() const;
  // Sends a STAT message to every client now.
  void broadcast_stats();

  void stop();

 private:
  struct Encoded;
  struct Session;

  void offer(std::shared_ptr<const Encoded> frame);
  void accept_loop();
  void stats_loop();
  void serve_session(std::shared_ptr<Session> s);
  void writer_loop(std::shared_ptr<Session> s);
  void handle_message(Session& s, std::span<const std::uint8_t> bytes);
  void serve_static(int fd, const std::string& path);
  void push_control(Session& s, wire::Bytes msg);
  StatsMessage current_stats();
  void reap();

  ServerOptions opts_;
  ServerHooks hooks_;
  net::Fd listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stop_{false};
  std::thread acceptor_;
  std::thread stats_thread_;
  mutable std::mutex sessions_mu_;
  std::list<std::shared_ptr<Session>> sessions_;
  int next_id_ = 1;
  std::atomic<std::uint64_t> frames_offered_{0};
  std::atomic<std::uint64_t> frames_without_client_{0};
  mutable std::mutex latency_mu_;
  LatencyTracker latency_;
  std::mutex fps_mu_;
  std::deque<std::chrono::steady_clock::time_point> offer_times_;
  std::mutex stop_mu_;
  std::condition_variable stop_cv_;
};

enum class Transport { raw, websocket };

// Client side of the stream protocol, used by tests, tools and the Python
// bindings.
class StreamClient {
 public:
  static std::unique_ptr<StreamClient> connect(const std::string& host, std::uint16_t port, Transport transport,
                                               std::chrono::milliseconds timeout = std::chrono::seconds(5));
  ~StreamClient();

  // Next message from the server, or nullopt on timeout. Throws
  // PeerLostError once the server has closed the connection.
  std::optional<Message> next(std::chrono::milliseconds timeout);
  void send_steer(const steer::CommandBody& body);
  void send_viz(const VizParam& v);
  void send_echo(std::uint64_t capture_ts_us);
  void send_raw(std::span<const std::uint8_t> message);
  void close();

 private:
  StreamClient() = default;
  net::Fd fd_;
  Transport transport_ = Transport::raw;
  std::mutex write_mu_;
  wire::Bytes buffer_;
  std::deque<wire::Bytes> ready_;
};

}  // namespace insitu::stream
