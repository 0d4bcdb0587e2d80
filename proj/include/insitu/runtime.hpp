#pragma once

// Per-rank process composition. Every rank runs the simulation on its main
// thread and a render/composite loop on a second thread; the two meet only
// in the rank's shared-memory segment. Rank 0 also hosts the steering head
// and, when serving, the stream server.
//
// Render loop, once per frame: rank 0 broadcasts a render control message
// (frame number, view parameters, stop flag) over the render mesh; each rank
// renders the newest snapshot of its own particles in place from shared
// memory, the ranks binary-swap the results, and rank 0 offers the frame to
// the stream server.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "insitu/comm.hpp"
#include "insitu/shm.hpp"
#include "insitu/sim.hpp"
#include "insitu/steer_bus.hpp"
#include "insitu/stream_server.hpp"
#include "insitu/stream_wire.hpp"

namespace insitu::runtime {

enum class PeerLossPolicy { abort, degrade };

struct BenchOptions {
  bool enabled = false;
  int opaque_frames = 300;
  int vdi_frames = 20;
  int steer_every = 10;        // frames between synthetic SetParam commands
  double orbit_degrees = 0.5;  // camera rotation per frame
};

struct RunSpec {
  sim::SimConfig sim;
  render::ImageSize image{256, 256};
  stream::Encoding encoding = stream::Encoding::rle;  // opaque frames
  stream::RenderMode mode = stream::RenderMode::opaque;
  bool serve = false;
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;
  std::string static_dir;
  std::uint64_t delay_steps = steer::kDefaultDelaySteps;
  std::int64_t ack_timeout_ms = 2000;
  std::int64_t connect_timeout_ms = 10000;
  std::uint64_t max_steps = 0;   // 0: until Terminate
  std::uint64_t max_frames = 0;  // 0: until the simulation ends
  std::int64_t frame_interval_ms = 0;
  // Niceness added to each rank's simulation thread. When ranks share CPUs a
  // positive value keeps the render loop responsive.
  int sim_nice = 0;
  double radius = 0.3;
  double vmin = 0.0;
  double vmax = 3.0;
  int s_max = render::kDefaultSegmentCap;
  double opacity = 1.0;
  std::string run_dir;
  std::string steer_script;
  std::string scope;  // shared-memory name prefix
  PeerLossPolicy on_peer_loss = PeerLossPolicy::abort;
  BenchOptions bench;
};

// Throws ConfigError naming the violated rule.
void validate(const RunSpec& spec);

// JSON with the SimConfig nested under "sim". Missing keys keep defaults;
// unknown keys raise ConfigError.
std::string to_json(const RunSpec& spec);
RunSpec parse_run_spec(const std::string& json_text);
RunSpec load_run_spec(const std::string& path);
void save_run_spec(const RunSpec& spec, const std::string& path);

// FNV-1a of the canonical JSON form; every rank must agree on it.
std::uint64_t checksum(const RunSpec& spec);

// Render control message, rank 0 to every other rank once per frame:
// "RCTL", frame_seq u64, stop u8, camera 10 f64, vmin f64, vmax f64,
// radius f64, mode u8.
struct RenderControl {
  std::uint64_t frame_seq = 0;
  bool stop = false;
  stream::ViewParams view;
  bool operator==(const RenderControl&) const = default;
};
wire::Bytes encode_control(const RenderControl& c);
RenderControl decode_control(std::span<const std::uint8_t> bytes);

struct RankSummary {
  int rank = 0;
  int exit_code = 0;
  std::string error;
  std::uint64_t final_step = 0;
  std::uint64_t steps = 0;
  std::uint64_t published = 0;
  std::uint64_t frames = 0;
  std::uint64_t opaque_frames = 0;
  std::uint64_t torn_views = 0;
  std::uint64_t lag_violations = 0;
  std::uint64_t composite_failures = 0;
  std::uint64_t swap_bytes_opaque = 0;  // binary-swap payload in opaque frames
  std::uint64_t gather_bytes = 0;
  std::uint64_t late_commands = 0;
  std::vector<std::uint32_t> epochs;
  double sim_seconds = 0.0;
  std::vector<steer::AppliedEntry> applied;
  // Benchmark samples, rank 0 only.
  std::vector<double> frame_ms;
  std::vector<double> render_ms;
  std::vector<double> reproject_ms;
  std::vector<double> steer_latency_ms;
};
std::string to_json(const RankSummary& s);
RankSummary parse_rank_summary(const std::string& json_text);

struct BenchReport {
  int ranks = 0;
  std::size_t particles = 0;
  render::ImageSize image;
  std::uint64_t frames = 0;
  double fps = 0.0;
  double fps_stdev = 0.0;
  double sim_sps = 0.0;
  double steer_latency_ms = 0.0;
  std::uint64_t steer_commands = 0;
  double fresh_render_ms = 0.0;  // per-frame render + composite at rank 0
  double reproject_ms = 0.0;     // one VDI frame to a 1-degree rotated camera
  std::uint64_t bytes_exchanged = 0;  // swap payload, all ranks, opaque frames
  std::uint64_t bytes_expected = 0;   // frames * k * 8wh(1 - 1/k)
  std::vector<std::string> warnings;
};
std::string to_json(const BenchReport& r);

// Exit codes of a rank process.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitPeerLost = 3;
int exit_code_for(const std::exception_ptr& e);

// One rank's services around a Simulation the caller owns and steps.
class RankRuntime {
 public:
  // Connects to the other ranks (meshes, steering). Throws ConfigError on a
  // spec mismatch between ranks, PeerLostError when a rank does not show up.
  RankRuntime(const RunSpec& spec, int rank);
  ~RankRuntime();

  RankRuntime(const RankRuntime&) = delete;
  RankRuntime& operator=(const RankRuntime&) = delete;

  comm::MessageEndpoint& sim_endpoint();
  int rank() const { return rank_; }

  // Installs the steering and publishing hooks, publishes the initial state
  // and starts the render loop.
  void attach(sim::Simulation& sim);
  // True once the caller should stop stepping.
  bool done() const;
  // Stops rendering, shuts the services down in order, writes the rank's
  // summary and applied-command log to the run directory. Idempotent.
  RankSummary finish();

  steer::SteerHead* head() { return head_.get(); }
  stream::StreamServer* server() { return server_.get(); }

 private:
  void before_step(sim::SimState& state);
  void after_step(sim::SimState& state);
  void render_loop();
  void render_frames();
  RenderControl next_control(std::uint64_t seq);
  stream::StatsMessage stats();
  void bench_on_apply(const steer::SteeringCommand& cmd);
  void shutdown_services();
  void write_outputs(const RankSummary& s);

  RunSpec spec_;
  int rank_;
  std::uint64_t checksum_;
  std::unique_ptr<comm::SocketMesh> sim_mesh_;
  std::unique_ptr<comm::SocketMesh> render_mesh_;
  std::unique_ptr<steer::SteerHead> head_;
  std::unique_ptr<steer::SteerInbox> inbox_;
  std::unique_ptr<stream::StreamServer> server_;
  std::optional<shm::SegmentWriter> writer_;
  sim::Simulation* sim_ = nullptr;

  std::thread render_thread_;
  std::exception_ptr render_error_;
  std::atomic<bool> sim_done_{false};
  std::atomic<bool> stop_requested_{false};
  std::atomic<std::uint64_t> last_published_{0};
  bool finished_ = false;
  RankSummary summary_;

  mutable std::mutex view_mu_;
  stream::ViewParams view_;

  mutable std::mutex sps_mu_;
  std::chrono::steady_clock::time_point sps_window_start_;
  std::uint64_t sps_window_steps_ = 0;
  double sim_sps_ = 0.0;
  std::chrono::steady_clock::time_point run_start_;

  std::mutex applied_mu_;
  std::vector<steer::SteeringCommand> applied_commands_;

  // Benchmark bookkeeping at rank 0.
  std::mutex bench_mu_;
  std::map<std::uint64_t, std::chrono::steady_clock::time_point> bench_submitted_;
};

// Runs one rank to completion inside the calling process and returns its
// exit code; errors are logged and recorded in the summary.
int run_rank(const RunSpec& spec, int rank);

struct LaunchResult {
  std::vector<int> exit_codes;
  std::vector<std::string> leaked_segments;
  int exit_code() const;
};

// Forks one process per rank, waits for all of them, then checks for leaked
// shared-memory segments under the run's scope. Creates run_dir when empty.
LaunchResult launch(RunSpec& spec);

// Fills in a scratch run directory and a unique scope when unset.
void prepare_run(RunSpec& spec);

// Launches a benchmark run and assembles the report from the rank outputs.
BenchReport run_benchmark(RunSpec spec);

// Reads the per-rank summaries written by a finished run.
std::vector<RankSummary> read_summaries(const RunSpec& spec);

}  // namespace insitu::runtime

namespace insitu {

namespace detail {
// Runs before the Simulation base is built: forks the ranks and connects
// this rank's runtime.
struct InSituBoot {
  InSituBoot(const sim::SimConfig& cfg, int argc, char** argv);
  runtime::RunSpec spec;
  int rank = 0;
  std::vector<int> children;  // pids, rank 0 only
  std::unique_ptr<runtime::RankRuntime> rt;
};
}  // namespace detail

// Drop-in replacement for sim::Simulation that turns a single-process MD
// program into an in-situ run: the constructor forks rank_count - 1 copies of
// the program that continue as ranks 1..k-1 (their stdout silenced), and
// attaches shared memory, rendering, compositing, steering and, with
// --insitu.serve=true, the stream server. Arguments of the form
// --insitu.<key>=<value> override RunSpec keys (for example
// --insitu.port=9000 or --insitu.max_steps=500); INSITU_SPEC may name a
// RunSpec JSON file to start from. Other arguments are left alone.
class InSituSimulation : private detail::InSituBoot, public sim::Simulation {
 public:
  InSituSimulation(const sim::SimConfig& cfg, int argc, char** argv);
  ~InSituSimulation() override;

  bool finished() const;
  int rank() const { return InSituBoot::rank; }
  // Shuts the run down early; the destructor does the same.
  runtime::RankSummary finish();
};

}  // namespace insitu
