#include "insitu/runtime.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/resource.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "insitu/composite.hpp"
#include "insitu/errors.hpp"
#include "insitu/log.hpp"
#include "insitu/render.hpp"

namespace insitu::runtime {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

constexpr comm::Tag kControlTag = 0x5243;  // "RC"
constexpr comm::Tag kBarrierTag = 0x4642;  // "FB"

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

json sim_to_json(const sim::SimConfig& c) {
  return {{"particle_count", c.particle_count}, {"box_length", c.box_length},
          {"dt", c.dt},                         {"cutoff", c.cutoff},
          {"target_temperature", c.target_temperature},
          {"thermostat", c.thermostat},         {"seed", c.seed},
          {"rank_count", c.rank_count},         {"steps_per_publish", c.steps_per_publish},
          {"lattice_jitter", c.lattice_jitter}};
}

// Copies known keys into `out`, rejecting unknown ones.
template <typename Fn>
void read_keys(const json& j, const std::string& where, Fn&& field) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    try {
      if (!field(it.key(), it.value())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    } catch (const json::exception& e) {
      throw ConfigError("bad value for '" + it.key() + "' in " + where + ": " + e.what());
    } catch (const ArgumentError& e) {
      throw ConfigError("bad value for '" + it.key() + "' in " + where + ": " + e.what());
    }
  }
}

sim::SimConfig sim_from_json(const json& j) {
  sim::SimConfig c;
  read_keys(j, "sim", [&](const std::string& k, const json& v) {
    if (k == "particle_count") c.particle_count = v.get<std::size_t>();
    else if (k == "box_length") c.box_length = v.get<double>();
    else if (k == "dt") c.dt = v.get<double>();
    else if (k == "cutoff") c.cutoff = v.get<double>();
    else if (k == "target_temperature") c.target_temperature = v.get<double>();
    else if (k == "thermostat") c.thermostat = v.get<bool>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "rank_count") c.rank_count = v.get<int>();
    else if (k == "steps_per_publish") c.steps_per_publish = v.get<int>();
    else if (k == "lattice_jitter") c.lattice_jitter = v.get<double>();
    else return false;
    return true;
  });
  return c;
}

std::string policy_name(PeerLossPolicy p) { return p == PeerLossPolicy::abort ? "abort" : "degrade"; }

PeerLossPolicy parse_policy(const std::string& s) {
  if (s == "abort") return PeerLossPolicy::abort;
  if (s == "degrade") return PeerLossPolicy::degrade;
  throw ConfigError("on_peer_loss must be abort or degrade, got '" + s + "'");
}

json spec_to_json(const RunSpec& s) {
  return {{"sim", sim_to_json(s.sim)},
          {"width", s.image.width},
          {"height", s.image.height},
          {"encoding", stream::to_string(s.encoding)},
          {"mode", stream::to_string(s.mode)},
          {"serve", s.serve},
          {"host", s.host},
          {"port", s.port},
          {"static_dir", s.static_dir},
          {"delay_steps", s.delay_steps},
          {"ack_timeout_ms", s.ack_timeout_ms},
          {"connect_timeout_ms", s.connect_timeout_ms},
          {"max_steps", s.max_steps},
          {"max_frames", s.max_frames},
          {"frame_interval_ms", s.frame_interval_ms},
          {"sim_nice", s.sim_nice},
          {"radius", s.radius},
          {"vmin", s.vmin},
          {"vmax", s.vmax},
          {"s_max", s.s_max},
          {"opacity", s.opacity},
          {"run_dir", s.run_dir},
          {"steer_script", s.steer_script},
          {"scope", s.scope},
          {"on_peer_loss", policy_name(s.on_peer_loss)},
          {"bench",
           {{"enabled", s.bench.enabled},
            {"opaque_frames", s.bench.opaque_frames},
            {"vdi_frames", s.bench.vdi_frames},
            {"steer_every", s.bench.steer_every},
            {"orbit_degrees", s.bench.orbit_degrees}}}};
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFoundError("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ResourceError("cannot write " + path.string());
  out << text;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stdev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean(v), acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

render::Vec3 box_center(const sim::SimConfig& c) {
  double h = c.box_length / 2;
  return {h, h, h};
}

}  // namespace

// ----- RunSpec -----

void validate(const RunSpec& spec) {
  sim::validate(spec.sim);
  const int k = spec.sim.rank_count;
  if (k < 1 || (k & (k - 1)) != 0) {
    throw ConfigError("rank_count must be a power of two for binary-swap compositing, got " + std::to_string(k));
  }
  if (spec.image.width < 1 || spec.image.height < 1 || spec.image.width > 65535 || spec.image.height > 65535) {
    throw ConfigError("image size must be within 1..65535 per side");
  }
  if (spec.encoding == stream::Encoding::vdi) {
    throw ConfigError("encoding applies to opaque frames and must be raw or rle; use mode = vdi for VDI frames");
  }
  if (spec.delay_steps < 2) throw ConfigError("delay_steps must be at least 2");
  if (spec.ack_timeout_ms <= 0 || spec.connect_timeout_ms <= 0) throw ConfigError("timeouts must be positive");
  if (spec.frame_interval_ms < 0) throw ConfigError("frame_interval_ms must be >= 0");
  if (spec.sim_nice < 0 || spec.sim_nice > 19) throw ConfigError("sim_nice must be within 0..19");
  if (!(spec.radius > 0)) throw ConfigError("radius must be positive");
  if (!(spec.vmax > spec.vmin)) throw ConfigError("vmax must exceed vmin");
  if (spec.s_max < 1 || spec.s_max > 65535) throw ConfigError("s_max must be within 1..65535");
  if (!(spec.opacity > 0 && spec.opacity <= 1)) throw ConfigError("opacity must be in (0, 1]");
  if (spec.bench.enabled) {
    if (spec.bench.opaque_frames < 1 || spec.bench.vdi_frames < 1 || spec.bench.steer_every < 1) {
      throw ConfigError("benchmark frame counts and steer_every must be positive");
    }
  }
}

std::string to_json(const RunSpec& spec) { return spec_to_json(spec).dump(2); }

RunSpec parse_run_spec(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run spec is not valid JSON: ") + e.what());
  }
  RunSpec s;
  read_keys(j, "run spec", [&](const std::string& k, const json& v) {
    if (k == "sim") s.sim = sim_from_json(v);
    else if (k == "width") s.image.width = v.get<int>();
    else if (k == "height") s.image.height = v.get<int>();
    else if (k == "encoding") s.encoding = stream::parse_encoding(v.get<std::string>());
    else if (k == "mode") s.mode = stream::parse_mode(v.get<std::string>());
    else if (k == "serve") s.serve = v.get<bool>();
    else if (k == "host") s.host = v.get<std::string>();
    else if (k == "port") s.port = v.get<std::uint16_t>();
    else if (k == "static_dir") s.static_dir = v.get<std::string>();
    else if (k == "delay_steps") s.delay_steps = v.get<std::uint64_t>();
    else if (k == "ack_timeout_ms") s.ack_timeout_ms = v.get<std::int64_t>();
    else if (k == "connect_timeout_ms") s.connect_timeout_ms = v.get<std::int64_t>();
    else if (k == "max_steps") s.max_steps = v.get<std::uint64_t>();
    else if (k == "max_frames") s.max_frames = v.get<std::uint64_t>();
    else if (k == "frame_interval_ms") s.frame_interval_ms = v.get<std::int64_t>();
    else if (k == "sim_nice") s.sim_nice = v.get<int>();
    else if (k == "radius") s.radius = v.get<double>();
    else if (k == "vmin") s.vmin = v.get<double>();
    else if (k == "vmax") s.vmax = v.get<double>();
    else if (k == "s_max") s.s_max = v.get<int>();
    else if (k == "opacity") s.opacity = v.get<double>();
    else if (k == "run_dir") s.run_dir = v.get<std::string>();
    else if (k == "steer_script") s.steer_script = v.get<std::string>();
    else if (k == "scope") s.scope = v.get<std::string>();
    else if (k == "on_peer_loss") s.on_peer_loss = parse_policy(v.get<std::string>());
    else if (k == "bench") {
      read_keys(v, "bench", [&](const std::string& bk, const json& bv) {
        if (bk == "enabled") s.bench.enabled = bv.get<bool>();
        else if (bk == "opaque_frames") s.bench.opaque_frames = bv.get<int>();
        else if (bk == "vdi_frames") s.bench.vdi_frames = bv.get<int>();
        else if (bk == "steer_every") s.bench.steer_every = bv.get<int>();
        else if (bk == "orbit_degrees") s.bench.orbit_degrees = bv.get<double>();
        else return false;
        return true;
      });
    } else {
      return false;
    }
    return true;
  });
  return s;
}

RunSpec load_run_spec(const std::string& path) { return parse_run_spec(read_file(path)); }

void save_run_spec(const RunSpec& spec, const std::string& path) { write_file(path, to_json(spec)); }

std::uint64_t checksum(const RunSpec& spec) {
  std::string canon = spec_to_json(spec).dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : canon) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// ----- render control -----

wire::Bytes encode_control(const RenderControl& c) {
  wire::Writer w(4 + 8 + 1 + 13 * 8 + 1);
  w.magic("RCTL");
  w.u64(c.frame_seq);
  w.u8(c.stop ? 1 : 0);
  const auto& cam = c.view.camera;
  for (double v : cam.position) w.f64(v);
  w.f64(cam.orientation.w);
  w.f64(cam.orientation.x);
  w.f64(cam.orientation.y);
  w.f64(cam.orientation.z);
  w.f64(cam.vertical_fov);
  w.f64(cam.near);
  w.f64(cam.far);
  w.f64(c.view.cmap.vmin);
  w.f64(c.view.cmap.vmax);
  w.f64(c.view.radius);
  w.u8(static_cast<std::uint8_t>(c.view.mode));
  return w.take();
}

RenderControl decode_control(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic("RCTL");
  RenderControl c;
  c.frame_seq = r.u64();
  c.stop = r.u8() != 0;
  auto& cam = c.view.camera;
  for (double& v : cam.position) v = r.f64();
  cam.orientation.w = r.f64();
  cam.orientation.x = r.f64();
  cam.orientation.y = r.f64();
  cam.orientation.z = r.f64();
  cam.vertical_fov = r.f64();
  cam.near = r.f64();
  cam.far = r.f64();
  c.view.cmap.vmin = r.f64();
  c.view.cmap.vmax = r.f64();
  c.view.radius = r.f64();
  std::uint8_t mode = r.u8();
  if (mode > 1) throw ProtocolError("render control: unknown mode " + std::to_string(mode));
  c.view.mode = static_cast<stream::RenderMode>(mode);
  if (r.remaining() != 0) throw ProtocolError("render control: trailing bytes");
  return c;
}

// ----- summaries and reports -----

std::string to_json(const RankSummary& s) {
  json applied = json::array();
  for (const auto& e : s.applied) applied.push_back({e.seq, e.step});
  json j = {{"rank", s.rank},
            {"exit_code", s.exit_code},
            {"error", s.error},
            {"final_step", s.final_step},
            {"steps", s.steps},
            {"published", s.published},
            {"frames", s.frames},
            {"opaque_frames", s.opaque_frames},
            {"torn_views", s.torn_views},
            {"lag_violations", s.lag_violations},
            {"composite_failures", s.composite_failures},
            {"swap_bytes_opaque", s.swap_bytes_opaque},
            {"gather_bytes", s.gather_bytes},
            {"late_commands", s.late_commands},
            {"epochs", s.epochs},
            {"sim_seconds", s.sim_seconds},
            {"applied", applied},
            {"frame_ms", s.frame_ms},
            {"render_ms", s.render_ms},
            {"reproject_ms", s.reproject_ms},
            {"steer_latency_ms", s.steer_latency_ms}};
  return j.dump(1);
}

RankSummary parse_rank_summary(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
    RankSummary s;
    s.rank = j.at("rank").get<int>();
    s.exit_code = j.at("exit_code").get<int>();
    s.error = j.at("error").get<std::string>();
    s.final_step = j.at("final_step").get<std::uint64_t>();
    s.steps = j.at("steps").get<std::uint64_t>();
    s.published = j.at("published").get<std::uint64_t>();
    s.frames = j.at("frames").get<std::uint64_t>();
    s.opaque_frames = j.at("opaque_frames").get<std::uint64_t>();
    s.torn_views = j.at("torn_views").get<std::uint64_t>();
    s.lag_violations = j.at("lag_violations").get<std::uint64_t>();
    s.composite_failures = j.at("composite_failures").get<std::uint64_t>();
    s.swap_bytes_opaque = j.at("swap_bytes_opaque").get<std::uint64_t>();
    s.gather_bytes = j.at("gather_bytes").get<std::uint64_t>();
    s.late_commands = j.at("late_commands").get<std::uint64_t>();
    s.epochs = j.at("epochs").get<std::vector<std::uint32_t>>();
    s.sim_seconds = j.at("sim_seconds").get<double>();
    for (const auto& e : j.at("applied")) s.applied.push_back({e.at(0).get<std::uint64_t>(), e.at(1).get<std::uint64_t>()});
    s.frame_ms = j.at("frame_ms").get<std::vector<double>>();
    s.render_ms = j.at("render_ms").get<std::vector<double>>();
    s.reproject_ms = j.at("reproject_ms").get<std::vector<double>>();
    s.steer_latency_ms = j.at("steer_latency_ms").get<std::vector<double>>();
    return s;
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("bad rank summary: ") + e.what());
  }
}

std::string to_json(const BenchReport& r) {
  json j = {{"ranks", r.ranks},
            {"particles", r.particles},
            {"width", r.image.width},
            {"height", r.image.height},
            {"frames", r.frames},
            {"fps", r.fps},
            {"fps_stdev", r.fps_stdev},
            {"sim_sps", r.sim_sps},
            {"steer_latency_ms", r.steer_latency_ms},
            {"steer_commands", r.steer_commands},
            {"fresh_render_ms", r.fresh_render_ms},
            {"reproject_ms", r.reproject_ms},
            {"bytes_exchanged", r.bytes_exchanged},
            {"bytes_expected", r.bytes_expected},
            {"warnings", r.warnings}};
  return j.dump(2);
}

int exit_code_for(const std::exception_ptr& e) {
  if (!e) return kExitOk;
  try {
    std::rethrow_exception(e);
  } catch (const ConfigError&) {
    return kExitConfig;
  } catch (const PeerLostError&) {
    return kExitPeerLost;
  } catch (const CompositeError&) {
    return kExitPeerLost;
  } catch (...) {
    return kExitFailure;
  }
}

// ----- RankRuntime -----

RankRuntime::RankRuntime(const RunSpec& spec, int rank)
    : spec_(spec), rank_(rank), checksum_(checksum(spec)) {
  validate(spec_);
  const int k = spec_.sim.rank_count;
  if (rank < 0 || rank >= k) throw ConfigError("rank " + std::to_string(rank) + " outside 0.." + std::to_string(k - 1));
  if (spec_.run_dir.empty()) throw ConfigError("run_dir must be set before starting a rank");
  summary_.rank = rank;
  const auto connect_timeout = std::chrono::milliseconds(spec_.connect_timeout_ms);

  comm::MeshOptions mo{spec_.run_dir, "sim", rank, k, checksum_, connect_timeout};
  sim_mesh_ = std::make_unique<comm::SocketMesh>(mo);
  mo.name = "render";
  render_mesh_ = std::make_unique<comm::SocketMesh>(mo);

  const std::string steer_path = (std::filesystem::path(spec_.run_dir) / "steer.sock").string();
  if (rank == 0) {
    steer::HeadOptions ho{steer_path, k, checksum_, spec_.delay_steps,
                          std::chrono::milliseconds(spec_.ack_timeout_ms)};
    head_ = std::make_unique<steer::SteerHead>(ho);
    std::exception_ptr accept_error;
    std::thread acceptor([&] {
      try {
        head_->accept_ranks(connect_timeout);
      } catch (...) {
        accept_error = std::current_exception();
      }
    });
    try {
      inbox_ = steer::SteerInbox::connect(steer_path, 0, checksum_, connect_timeout);
    } catch (...) {
      acceptor.join();
      throw;
    }
    acceptor.join();
    if (accept_error) std::rethrow_exception(accept_error);
  } else {
    inbox_ = steer::SteerInbox::connect(steer_path, rank, checksum_, connect_timeout);
  }

  const std::size_t local_estimate = spec_.sim.particle_count / static_cast<std::size_t>(k) + 1;
  writer_.emplace(shm::SegmentWriter::create({rank, 0, spec_.scope}, shm::grown_capacity(local_estimate)));

  view_.camera = render::default_camera(spec_.sim.box_length);
  view_.cmap = {spec_.vmin, spec_.vmax};
  view_.radius = spec_.radius;
  view_.mode = spec_.mode;

  if (rank == 0 && spec_.serve) {
    stream::ServerOptions so;
    so.host = spec_.host;
    so.port = spec_.port;
    so.static_dir = spec_.static_dir;
    stream::ServerHooks hooks;
    hooks.steer = [this](const steer::CommandBody& body) { return head_->submit(body); };
    hooks.viz = [this](const stream::VizParam& v) {
      std::lock_guard lock(view_mu_);
      stream::apply_viz(view_, v);
    };
    hooks.stats = [this] { return stats(); };
    server_ = std::make_unique<stream::StreamServer>(so, std::move(hooks));
    log::info("rank 0: streaming on ", spec_.host, ":", server_->port());
  }

  if (rank == 0 && !spec_.steer_script.empty()) {
    for (const auto& entry : steer::load_script(spec_.steer_script)) {
      auto r = head_->submit_at(entry.body, entry.step);
      if (!r.accepted) {
        log::warn("steering script: '", steer::describe(entry.body), "' at step ", entry.step,
                  " rejected: ", r.reason);
      }
    }
  }
}

RankRuntime::~RankRuntime() {
  try {
    finish();
  } catch (const std::exception& e) {
    log::error("rank ", rank_, ": shutdown failed: ", e.what());
  }
}

comm::MessageEndpoint& RankRuntime::sim_endpoint() { return *sim_mesh_; }

void RankRuntime::attach(sim::Simulation& sim) {
  if (sim_) throw ArgumentError("runtime already attached to a simulation");
  sim_ = &sim;
  sim.set_hooks([this](sim::SimState& s) { before_step(s); }, [this](sim::SimState& s) { after_step(s); });
  const auto& st = sim.state();
  writer_->publish(sim::snapshot(st));
  last_published_ = st.sim_step;
  ++summary_.published;
  summary_.final_step = st.sim_step;
  run_start_ = sps_window_start_ = Clock::now();
  render_thread_ = std::thread([this] { render_loop(); });
  // Linux applies niceness per thread; the render thread keeps the old one.
  if (spec_.sim_nice > 0) {
    errno = 0;
    int current = ::getpriority(PRIO_PROCESS, static_cast<id_t>(::syscall(SYS_gettid)));
    if (errno == 0) ::setpriority(PRIO_PROCESS, static_cast<id_t>(::syscall(SYS_gettid)), current + spec_.sim_nice);
  }
}

bool RankRuntime::done() const {
  if (!sim_) return true;
  if (stop_requested_) return true;
  const auto& st = sim_->state();
  return st.terminate_requested || (spec_.max_steps != 0 && st.sim_step >= spec_.max_steps);
}

void RankRuntime::before_step(sim::SimState& state) {
  if (head_) head_->observe_step(state.sim_step);
  steer::GateHooks hooks;
  hooks.paused = [&state] { return state.paused; };
  hooks.stop = [this] { return stop_requested_.load(); };
  hooks.apply = [this, &state](const steer::SteeringCommand& cmd, std::uint64_t step) {
    std::string why;
    if (!sim::apply_steering(state, cmd, &why)) {
      log::warn("rank ", rank_, ": steering seq ", cmd.seq, " not applied: ", why);
    }
    {
      std::lock_guard lock(applied_mu_);
      summary_.applied.push_back({cmd.seq, step});
      applied_commands_.push_back(cmd);
    }
    if (rank_ == 0 && spec_.bench.enabled) bench_on_apply(cmd);
  };
  steer::before_step(*inbox_, state.sim_step, hooks);
}

void RankRuntime::after_step(sim::SimState& state) {
  summary_.final_step = state.sim_step;
  if (state.paused) return;
  ++summary_.steps;
  {
    std::lock_guard lock(sps_mu_);
    ++sps_window_steps_;
    auto now = Clock::now();
    double secs = std::chrono::duration<double>(now - sps_window_start_).count();
    if (secs >= 0.5) {
      sim_sps_ = static_cast<double>(sps_window_steps_) / secs;
      sps_window_steps_ = 0;
      sps_window_start_ = now;
    }
  }
  const auto spp = static_cast<std::uint64_t>(spec_.sim.steps_per_publish);
  if (state.sim_step % spp == 0) {
    writer_->publish(sim::snapshot(state));
    last_published_ = state.sim_step;
    ++summary_.published;
  }
}

stream::StatsMessage RankRuntime::stats() {
  stream::StatsMessage m;
  {
    std::lock_guard lock(sps_mu_);
    m.sim_steps_per_second = sim_sps_;
  }
  if (head_) {
    for (auto s : head_->rank_states()) {
      m.rank_states.push_back(s == steer::RankState::ok ? stream::RankHealth::ok : stream::RankHealth::lost);
    }
  }
  return m;
}

void RankRuntime::bench_on_apply(const steer::SteeringCommand& cmd) {
  std::lock_guard lock(bench_mu_);
  auto it = bench_submitted_.find(cmd.seq);
  if (it == bench_submitted_.end()) return;
  summary_.steer_latency_ms.push_back(ms_since(it->second));
  bench_submitted_.erase(it);
}

RenderControl RankRuntime::next_control(std::uint64_t seq) {
  RenderControl c;
  c.frame_seq = seq;
  const std::uint64_t frames = summary_.frames;
  const auto& b = spec_.bench;
  if (sim_done_ || stop_requested_) c.stop = true;
  if (spec_.max_frames != 0 && frames >= spec_.max_frames) c.stop = true;

  std::lock_guard lock(view_mu_);
  if (b.enabled && !c.stop) {
    const auto opaque = static_cast<std::uint64_t>(b.opaque_frames);
    const auto total = opaque + static_cast<std::uint64_t>(b.vdi_frames);
    view_.mode = frames < opaque ? stream::RenderMode::opaque : stream::RenderMode::vdi;
    if (frames > 0) {
      view_.camera = view_.camera.orbited(box_center(spec_.sim), {0, 1, 0}, b.orbit_degrees * std::numbers::pi / 180);
    }
    if (frames < opaque && frames % static_cast<std::uint64_t>(b.steer_every) == 0) {
      double t = (frames / static_cast<std::uint64_t>(b.steer_every)) % 2 == 0 ? 1.02 : 1.0;
      std::lock_guard block(bench_mu_);
      auto r = head_->submit(steer::CommandBody::set_param("target_temperature", t));
      if (r.accepted) bench_submitted_[r.command.seq] = Clock::now();
    }
    if (frames >= total) {
      head_->submit(steer::CommandBody::terminate());
      c.stop = true;
    }
  }
  if (c.stop && spec_.max_frames != 0 && frames >= spec_.max_frames && head_ && !head_->terminating()) {
    head_->submit(steer::CommandBody::terminate());
  }
  c.view = view_;
  return c;
}

void RankRuntime::render_loop() {
  try {
    render_frames();
  } catch (...) {
    render_error_ = std::current_exception();
    try {
      std::rethrow_exception(render_error_);
    } catch (const std::exception& e) {
      log::error("rank ", rank_, ": render loop stopped: ", e.what());
    }
    // Under the abort policy a broken render loop ends the run; rank 0 does
    // that through the steering bus so every rank stops at the same step.
    if (head_ && !head_->terminating()) head_->submit(steer::CommandBody::terminate());
  }
}

void RankRuntime::render_frames() {
  const int k = spec_.sim.rank_count;
  const auto topo = composite::Topology::make(k);
  shm::SnapshotFollower follower({rank_, 0, spec_.scope});
  const auto spp = static_cast<std::uint64_t>(spec_.sim.steps_per_publish);
  const auto exchange_timeout = std::chrono::milliseconds(spec_.connect_timeout_ms);
  const auto size = spec_.image;

  render::DepthImage image(size);
  render::Vdi vdi(size, spec_.s_max, view_.camera);
  std::uint64_t image_step = 0;
  auto last_frame_end = Clock::now();

  for (std::uint64_t seq = 1;; ++seq) {
    RenderControl ctl;
    if (rank_ == 0) {
      ctl = next_control(seq);
      auto msg = encode_control(ctl);
      for (int r = 1; r < k; ++r) {
        try {
          render_mesh_->send(r, kControlTag, msg);
        } catch (const PeerLostError&) {
          if (!ctl.stop) throw;
        }
      }
    } else {
      // Rank 0 may be slow to start the next frame; keep waiting while it is
      // connected, and give up shortly after the local simulation ended.
      std::optional<Clock::time_point> done_at;
      for (;;) {
        auto t0 = Clock::now();
        try {
          ctl = decode_control(render_mesh_->recv(0, kControlTag, std::chrono::milliseconds(500)));
          break;
        } catch (const PeerLostError&) {
          if (ms_since(t0) < 400) {
            if (sim_done_) return;
            throw;
          }
          if (sim_done_) {
            if (!done_at) done_at = Clock::now();
            if (Clock::now() - *done_at > std::chrono::seconds(5)) return;
          }
        }
      }
    }
    if (ctl.stop) break;

    const auto t_render = Clock::now();
    render::RenderOptions ro;
    ro.radius = ctl.view.radius;
    ro.cell_size = spec_.sim.cutoff;
    ro.cmap = ctl.view.cmap;
    const std::uint64_t latest = last_published_.load();
    std::uint64_t step = image_step;
    bool ok = false;
    if (ctl.view.mode == stream::RenderMode::opaque) {
      ok = follower.view([&](std::span<const sim::ParticleRecord> recs, std::uint64_t s, double) {
        image = render::render_spheres(recs, ctl.view.camera, size, ro);
        step = s;
      });
    } else {
      render::VdiOptions vo;
      vo.render = ro;
      vo.opacity = spec_.opacity;
      vo.s_max = spec_.s_max;
      ok = follower.view([&](std::span<const sim::ParticleRecord> recs, std::uint64_t s, double) {
        vdi = render::build_vdi(recs, ctl.view.camera, size, vo);
        step = s;
      });
    }
    if (!ok) {
      // Every attempt raced the writer; reuse the previous frame's data.
      ++summary_.torn_views;
      step = image_step;
    }
    image_step = step;
    if (step + spp < latest) ++summary_.lag_violations;
    summary_.epochs = follower.epochs();

    composite::ExchangeOptions eo{seq, exchange_timeout};
    composite::ExchangeStats xs;
    try {
      if (ctl.view.mode == stream::RenderMode::opaque) {
        auto frame = composite::binary_swap(image, topo, *render_mesh_, eo, &xs);
        summary_.swap_bytes_opaque += xs.swap_payload_bytes;
        ++summary_.opaque_frames;
        if (frame && server_) server_->offer_image(*frame, spec_.encoding, step, stream::now_us());
        if (rank_ == 0 && spec_.bench.enabled) summary_.render_ms.push_back(ms_since(t_render));
      } else {
        auto frame = composite::binary_swap(vdi, topo, *render_mesh_, eo, &xs);
        if (frame && server_) server_->offer_vdi(*frame, step, stream::now_us());
        if (frame && spec_.bench.enabled) {
          auto cam = frame->camera.orbited(box_center(spec_.sim), {0, 1, 0}, std::numbers::pi / 180);
          auto t0 = Clock::now();
          auto reprojected = render::composite_vdi_to_image(*frame, cam);
          summary_.reproject_ms.push_back(ms_since(t0));
          if (reprojected.size != frame->size) throw Error("reprojection changed the image size");
        }
      }
      summary_.gather_bytes += xs.gather_payload_bytes;
    } catch (const CompositeError& e) {
      ++summary_.composite_failures;
      if (spec_.on_peer_loss == PeerLossPolicy::abort) throw;
      log::warn("rank ", rank_, ": frame ", seq, " dropped: ", e.what());
    }
    ++summary_.frames;

    if (rank_ == 0) {
      if (spec_.bench.enabled && ctl.view.mode == stream::RenderMode::opaque) {
        summary_.frame_ms.push_back(ms_since(last_frame_end));
      }
      if (spec_.frame_interval_ms > 0) {
        std::this_thread::sleep_until(last_frame_end + std::chrono::milliseconds(spec_.frame_interval_ms));
      }
      last_frame_end = Clock::now();
    }
  }
}

void RankRuntime::shutdown_services() {
  // Two barriers: everyone is done stepping before the head goes away, and
  // the head is gone before inboxes close, so no rank looks lost.
  auto barrier = [this] {
    try {
      comm::allreduce_sum(*sim_mesh_, 0.0, kBarrierTag);
    } catch (const Error& e) {
      log::warn("rank ", rank_, ": shutdown barrier: ", e.what());
    }
  };
  barrier();
  if (server_) server_->stop();
  if (head_) head_->close();
  barrier();
  if (inbox_) inbox_->close();
}

RankSummary RankRuntime::finish() {
  if (finished_) return summary_;
  finished_ = true;
  sim_done_ = true;
  stop_requested_ = true;
  if (render_thread_.joinable()) render_thread_.join();
  if (writer_) writer_->terminate();
  shutdown_services();
  if (writer_) writer_->close();

  summary_.late_commands = inbox_ ? inbox_->late_count() : 0;
  summary_.sim_seconds = sim_ ? std::chrono::duration<double>(Clock::now() - run_start_).count() : 0.0;
  if (render_error_) {
    summary_.exit_code = exit_code_for(render_error_);
    try {
      std::rethrow_exception(render_error_);
    } catch (const std::exception& e) {
      summary_.error = e.what();
    }
  }
  try {
    write_outputs(summary_);
  } catch (const Error& e) {
    log::error("rank ", rank_, ": ", e.what());
  }
  return summary_;
}

void RankRuntime::write_outputs(const RankSummary& s) {
  std::filesystem::path dir(spec_.run_dir);
  write_file(dir / ("rank" + std::to_string(rank_) + ".json"), to_json(s));
  std::lock_guard lock(applied_mu_);
  write_file(dir / ("steer_rank" + std::to_string(rank_) + ".log"),
             steer::format_applied_log(s.applied, applied_commands_));
}

// ----- process level -----

int run_rank(const RunSpec& spec, int rank) {
  std::unique_ptr<RankRuntime> rt;
  try {
    rt = std::make_unique<RankRuntime>(spec, rank);
    sim::Simulation sim(spec.sim, rank, rt->sim_endpoint());
    rt->attach(sim);
    std::exception_ptr step_error;
    try {
      while (!rt->done()) sim.advance();
    } catch (...) {
      step_error = std::current_exception();
    }
    RankSummary s = rt->finish();
    if (step_error) std::rethrow_exception(step_error);
    return s.exit_code;
  } catch (const std::exception& e) {
    int code = exit_code_for(std::current_exception());
    log::error("rank ", rank, ": ", e.what());
    if (!spec.run_dir.empty()) {
      RankSummary s;
      s.rank = rank;
      s.exit_code = code;
      s.error = e.what();
      try {
        write_file(std::filesystem::path(spec.run_dir) / ("rank" + std::to_string(rank) + ".json"), to_json(s));
      } catch (const Error&) {
      }
    }
    return code;
  }
}

int LaunchResult::exit_code() const {
  int worst = 0;
  for (int c : exit_codes) {
    if (c != 0 && (worst == 0 || c < worst)) worst = c;
  }
  if (worst == 0 && !leaked_segments.empty()) worst = kExitFailure;
  return worst;
}

void prepare_run(RunSpec& spec) {
  static int counter = 0;
  if (spec.run_dir.empty()) {
    std::string tmpl = (std::filesystem::temp_directory_path() / "insitu-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw ResourceError("cannot create a run directory under the temp dir");
    spec.run_dir = tmpl;
  } else {
    std::filesystem::create_directories(spec.run_dir);
  }
  if (spec.scope.empty()) spec.scope = "p" + std::to_string(::getpid()) + "n" + std::to_string(counter++);
}

LaunchResult launch(RunSpec& spec) {
  prepare_run(spec);
  validate(spec);
  save_run_spec(spec, (std::filesystem::path(spec.run_dir) / "spec.json").string());
  const int k = spec.sim.rank_count;
  std::fflush(nullptr);
  std::vector<pid_t> pids;
  for (int r = 0; r < k; ++r) {
    pid_t pid = ::fork();
    if (pid < 0) {
      for (pid_t p : pids) ::kill(p, SIGTERM);
      throw ResourceError("fork failed");
    }
    if (pid == 0) {
      int code = run_rank(spec, r);
      std::fflush(nullptr);
      ::_exit(code);
    }
    pids.push_back(pid);
  }
  LaunchResult out;
  for (pid_t pid : pids) {
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    out.exit_codes.push_back(WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status));
  }
  out.leaked_segments = shm::list_segments(spec.scope + ".insitu.");
  return out;
}

std::vector<RankSummary> read_summaries(const RunSpec& spec) {
  std::vector<RankSummary> out;
  for (int r = 0; r < spec.sim.rank_count; ++r) {
    out.push_back(parse_rank_summary(
        read_file((std::filesystem::path(spec.run_dir) / ("rank" + std::to_string(r) + ".json")).string())));
  }
  return out;
}

BenchReport run_benchmark(RunSpec spec) {
  spec.bench.enabled = true;
  spec.max_frames = 0;
  auto res = launch(spec);
  if (res.exit_code() != 0) {
    std::string codes;
    for (int c : res.exit_codes) codes += " " + std::to_string(c);
    throw Error("benchmark run failed, rank exit codes:" + codes);
  }
  auto sums = read_summaries(spec);
  const auto& head = sums.at(0);
  const int k = spec.sim.rank_count;

  BenchReport r;
  r.ranks = k;
  r.particles = spec.sim.particle_count;
  r.image = spec.image;
  r.frames = head.frame_ms.size();
  // Frame rate over windows of 10 frames; the first frame includes startup.
  std::vector<double> window_fps;
  const std::size_t w = 10;
  for (std::size_t i = 1; i + w <= head.frame_ms.size(); i += w) {
    double ms = std::accumulate(head.frame_ms.begin() + static_cast<std::ptrdiff_t>(i),
                                head.frame_ms.begin() + static_cast<std::ptrdiff_t>(i + w), 0.0);
    window_fps.push_back(1000.0 * static_cast<double>(w) / ms);
  }
  r.fps = mean(window_fps);
  r.fps_stdev = stdev(window_fps);
  r.sim_sps = head.sim_seconds > 0 ? static_cast<double>(head.steps) / head.sim_seconds : 0.0;
  r.steer_latency_ms = mean(head.steer_latency_ms);
  r.steer_commands = head.steer_latency_ms.size();
  r.fresh_render_ms = mean(head.render_ms);
  r.reproject_ms = mean(head.reproject_ms);
  const std::uint64_t per_rank = k > 1 ? composite::kPixelBytes * spec.image.pixels() / static_cast<std::uint64_t>(k) *
                                             static_cast<std::uint64_t>(k - 1)
                                       : 0;
  for (const auto& s : sums) {
    r.bytes_exchanged += s.swap_bytes_opaque;
    r.bytes_expected += s.opaque_frames * per_rank;
  }
  if (r.fps < 60) r.warnings.push_back("render loop below 60 fps");
  if (r.reproject_ms >= 20) r.warnings.push_back("VDI reprojection slower than 20 ms");
  if (!(r.reproject_ms < 0.5 * r.fresh_render_ms)) r.warnings.push_back("reprojection not cheaper than half a fresh render");
  if (r.bytes_exchanged != r.bytes_expected) r.warnings.push_back("compositor traffic differs from 8wh(1-1/k) per rank");
  if (!res.leaked_segments.empty()) r.warnings.push_back("leaked shared-memory segments");
  return r;
}

}  // namespace insitu::runtime

// ----- InSituSimulation -----

namespace insitu {

namespace detail {

namespace {

// Applies --insitu.<key>=<value> overrides; dotted keys reach nested objects
// ("--insitu.bench.opaque_frames=50"). Values parse as JSON when they can and
// fall back to strings.
runtime::RunSpec spec_from_args(const sim::SimConfig& cfg, int argc, char** argv) {
  runtime::RunSpec base;
  if (const char* path = std::getenv("INSITU_SPEC")) base = runtime::load_run_spec(path);
  base.sim = cfg;
  auto j = nlohmann::json::parse(runtime::to_json(base));
  const std::string prefix = "--insitu.";
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg.rfind(prefix, 0) != 0) continue;
    auto eq = arg.find('=');
    if (eq == std::string::npos) throw ConfigError("expected " + prefix + "<key>=<value>, got '" + arg + "'");
    std::string key = arg.substr(prefix.size(), eq - prefix.size());
    std::string value = arg.substr(eq + 1);
    nlohmann::json v;
    try {
      v = nlohmann::json::parse(value);
    } catch (const nlohmann::json::exception&) {
      v = value;
    }
    nlohmann::json* node = &j;
    std::size_t start = 0;
    for (auto dot = key.find('.'); dot != std::string::npos; dot = key.find('.', start)) {
      node = &(*node)[key.substr(start, dot - start)];
      start = dot + 1;
    }
    (*node)[key.substr(start)] = v;
  }
  return runtime::parse_run_spec(j.dump());
}

}  // namespace

InSituBoot::InSituBoot(const sim::SimConfig& cfg, int argc, char** argv) {
  spec = spec_from_args(cfg, argc, argv);
  runtime::prepare_run(spec);
  runtime::validate(spec);
  std::fflush(nullptr);
  for (int r = 1; r < spec.sim.rank_count; ++r) {
    pid_t pid = ::fork();
    if (pid < 0) throw ResourceError("fork failed");
    if (pid == 0) {
      rank = r;
      children.clear();
      int devnull = ::open("/dev/null", O_WRONLY);
      if (devnull >= 0) {
        ::dup2(devnull, STDOUT_FILENO);
        ::close(devnull);
      }
      break;
    }
    children.push_back(pid);
  }
  try {
    rt = std::make_unique<runtime::RankRuntime>(spec, rank);
  } catch (const std::exception& e) {
    if (rank != 0) {
      log::error("rank ", rank, ": ", e.what());
      std::fflush(nullptr);
      ::_exit(runtime::exit_code_for(std::current_exception()));
    }
    throw;
  }
}

}  // namespace detail

InSituSimulation::InSituSimulation(const sim::SimConfig& cfg, int argc, char** argv)
    : InSituBoot(cfg, argc, argv), sim::Simulation(InSituBoot::spec.sim, InSituBoot::rank, rt->sim_endpoint()) {
  rt->attach(*this);
}

InSituSimulation::~InSituSimulation() {
  finish();
  for (int pid : children) {
    int status = 0;
    while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
    }
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      log::warn("rank process ", pid, " ended with status ", status);
    }
  }
  children.clear();
}

bool InSituSimulation::finished() const { return sim::Simulation::finished() || rt->done(); }

runtime::RankSummary InSituSimulation::finish() { return rt->finish(); }

}  // namespace insitu
