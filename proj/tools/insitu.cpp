// Command-line front end: launches runs and benchmarks, replays steering
// scripts and dumps shared-memory segment headers.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "insitu/errors.hpp"
#include "insitu/log.hpp"
#include "insitu/runtime.hpp"
#include "insitu/shm.hpp"

using namespace insitu;
using runtime::RunSpec;

namespace {

// Options shared by run, bench and replay. Values left at their sentinel
// keep whatever the --spec file (or the defaults) says.
struct RunFlags {
  std::string spec_file;
  std::string config_file;
  int ranks = 0;
  std::size_t particles = 0;
  double box = 0;
  double density = 0.5;
  std::string size;
  std::string encoding;
  std::string mode;
  bool serve = false;
  std::string host;
  int port = -1;
  std::string static_dir;
  std::uint64_t delay_steps = 0;
  std::uint64_t steps = 0;
  std::uint64_t frames = 0;
  std::int64_t frame_interval_ms = -1;
  int sim_nice = -1;
  std::string steer_script;
  std::string run_dir;
  std::string scope;
  std::string on_peer_loss;
};

void add_run_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--spec", f.spec_file, "RunSpec JSON file to start from")->check(CLI::ExistingFile);
  app->add_option("--config", f.config_file, "simulation key = value file")->check(CLI::ExistingFile);
  app->add_option("--ranks", f.ranks, "rank processes (power of two)");
  app->add_option("--particles", f.particles, "particle count");
  app->add_option("--box", f.box, "box edge length (default: from --density)");
  app->add_option("--density", f.density, "number density used when --box is not given");
  app->add_option("--size", f.size, "frame size WxH, e.g. 256x256");
  app->add_option("--encoding", f.encoding, "opaque frame encoding: raw | rle");
  app->add_option("--mode", f.mode, "render mode: opaque | vdi");
  app->add_flag("--serve", f.serve, "run the stream server on rank 0");
  app->add_option("--host", f.host, "stream server address");
  app->add_option("--port", f.port, "stream server port (0 picks one)");
  app->add_option("--static-dir", f.static_dir, "directory served to plain HTTP GETs");
  app->add_option("--delay-steps", f.delay_steps, "steering delay in steps (>= 2)");
  app->add_option("--steps", f.steps, "step limit (0 runs until Terminate)");
  app->add_option("--frames", f.frames, "frame limit (0 runs until the simulation ends)");
  app->add_option("--frame-interval-ms", f.frame_interval_ms, "minimum time between frames");
  app->add_option("--sim-nice", f.sim_nice, "niceness added to the simulation threads (0..19)");
  app->add_option("--run-dir", f.run_dir, "directory for sockets and per-rank outputs");
  app->add_option("--scope", f.scope, "shared-memory name prefix (default: unique per run)");
  app->add_option("--on-peer-loss", f.on_peer_loss, "abort | degrade");
}

RunSpec build_spec(const RunFlags& f, RunSpec spec) {
  if (!f.spec_file.empty()) spec = runtime::load_run_spec(f.spec_file);
  if (!f.config_file.empty()) spec.sim = sim::load_sim_config(f.config_file);
  if (f.ranks > 0) spec.sim.rank_count = f.ranks;
  if (f.particles > 0) {
    spec.sim.particle_count = f.particles;
    if (f.box <= 0) spec.sim.box_length = std::cbrt(static_cast<double>(f.particles) / f.density);
  }
  if (f.box > 0) spec.sim.box_length = f.box;
  if (!f.size.empty()) {
    int w = 0, h = 0;
    char x = 0;
    std::istringstream in(f.size);
    if (!(in >> w >> x >> h) || (x != 'x' && x != 'X')) throw ArgumentError("--size expects WxH, got " + f.size);
    spec.image = {w, h};
  }
  if (!f.encoding.empty()) spec.encoding = stream::parse_encoding(f.encoding);
  if (!f.mode.empty()) spec.mode = stream::parse_mode(f.mode);
  if (f.serve) spec.serve = true;
  if (!f.host.empty()) spec.host = f.host;
  if (f.port >= 0) spec.port = static_cast<std::uint16_t>(f.port);
  if (!f.static_dir.empty()) spec.static_dir = f.static_dir;
  if (f.delay_steps > 0) spec.delay_steps = f.delay_steps;
  if (f.steps > 0) spec.max_steps = f.steps;
  if (f.frames > 0) spec.max_frames = f.frames;
  if (f.frame_interval_ms >= 0) spec.frame_interval_ms = f.frame_interval_ms;
  if (f.sim_nice >= 0) spec.sim_nice = f.sim_nice;
  if (!f.steer_script.empty()) spec.steer_script = std::filesystem::absolute(f.steer_script).string();
  if (!f.run_dir.empty()) spec.run_dir = f.run_dir;
  if (!f.scope.empty()) spec.scope = f.scope;
  if (!f.on_peer_loss.empty()) {
    spec.on_peer_loss = f.on_peer_loss == "degrade" ? runtime::PeerLossPolicy::degrade
                                                     : f.on_peer_loss == "abort"
                                                           ? runtime::PeerLossPolicy::abort
                                                           : throw ArgumentError("--on-peer-loss: abort | degrade");
  }
  return spec;
}

void print_run(const RunSpec& spec, const runtime::LaunchResult& res) {
  std::cout << "run directory  " << spec.run_dir << "\n";
  for (std::size_t r = 0; r < res.exit_codes.size(); ++r) {
    std::cout << "rank " << r << " exit " << res.exit_codes[r];
    try {
      auto s = runtime::read_summaries(spec).at(r);
      std::cout << "  step " << s.final_step << "  frames " << s.frames << "  applied " << s.applied.size();
      if (!s.error.empty()) std::cout << "  error: " << s.error;
    } catch (const Error&) {
    }
    std::cout << "\n";
  }
  if (!res.leaked_segments.empty()) {
    std::cout << "leaked segments:";
    for (const auto& n : res.leaked_segments) std::cout << " " << n;
    std::cout << "\n";
  }
}

int cmd_run(const RunFlags& f) {
  RunSpec spec = build_spec(f, {});
  auto res = runtime::launch(spec);
  print_run(spec, res);
  return res.exit_code();
}

int cmd_replay(const RunFlags& f, const std::string& script) {
  RunFlags g = f;
  g.steer_script = script;
  RunSpec spec = build_spec(g, {});
  // Check the script before starting any rank.
  auto entries = steer::load_script(spec.steer_script);
  std::cout << "replaying " << entries.size() << " commands from " << script << "\n";
  auto res = runtime::launch(spec);
  print_run(spec, res);
  std::ifstream log(std::filesystem::path(spec.run_dir) / "steer_rank0.log");
  if (log) std::cout << "applied (seq step command):\n" << log.rdbuf();
  return res.exit_code();
}

int cmd_bench(const RunFlags& f, int opaque_frames, const std::string& out) {
  RunSpec defaults;
  defaults.sim.rank_count = 4;
  defaults.sim.particle_count = 8000;
  defaults.sim.box_length = std::cbrt(8000.0 / f.density);
  defaults.image = {256, 256};
  // On a shared CPU the simulations would otherwise starve the render loop.
  defaults.sim_nice = 10;
  RunSpec spec = build_spec(f, defaults);
  spec.bench.opaque_frames = opaque_frames;
  auto report = runtime::run_benchmark(spec);
  std::string text = runtime::to_json(report);
  std::cout << text << "\n";
  if (!out.empty()) {
    std::ofstream o(out);
    o << text << "\n";
  }
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  // Reprojection being cheaper than a fresh render is the one hard property.
  return report.reproject_ms < 0.5 * report.fresh_render_ms ? 0 : 1;
}

int cmd_shmdump(const std::vector<std::string>& names, const std::string& prefix) {
  if (names.empty()) {
    std::vector<std::string> found;
    for (auto& n : shm::list_segments(prefix)) {
      if (n.find("insitu.r") != std::string::npos) found.push_back(n);
    }
    if (found.empty()) std::cout << "no segments matching '" << prefix << "'\n";
    for (const auto& n : found) {
      std::cout << n << "\n" << shm::format_header(shm::read_header("/" + n)) << "\n";
    }
    return 0;
  }
  for (const auto& n : names) {
    auto name = shm::SegmentName::parse(n);
    std::cout << name.str() << "\n" << shm::format_header(shm::read_header(name)) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (!std::getenv("INSITU_LOG")) log::set_threshold(log::Level::info);
  CLI::App app{"In-situ particle simulation, rendering and steering"};
  app.require_subcommand(1);

  RunFlags run_flags, bench_flags, replay_flags;
  auto* run = app.add_subcommand("run", "launch a run with one process per rank");
  add_run_flags(run, run_flags);
  run->add_option("--steer-script", run_flags.steer_script, "steering script replayed from rank 0");

  auto* bench = app.add_subcommand("bench", "benchmark the render loop (defaults: 4 ranks, 8000 particles, 256x256)");
  add_run_flags(bench, bench_flags);
  int opaque_frames = 300;
  std::string bench_out;
  bench->add_option("--opaque-frames", opaque_frames, "frames timed for the frame rate (>= 300 for a report)");
  bench->add_option("--out", bench_out, "also write the JSON report here");

  auto* replay = app.add_subcommand("replay", "run a steering script and print the applied commands");
  add_run_flags(replay, replay_flags);
  std::string script;
  replay->add_option("script", script, "steering script: <step> set <name> <value> | pause | resume | terminate")
      ->required();

  auto* dump = app.add_subcommand("shmdump", "print shared-memory segment headers");
  std::vector<std::string> names;
  std::string prefix = "";
  dump->add_option("segments", names, "segment names, e.g. insitu.r0.e0 (default: all live segments)");
  dump->add_option("--prefix", prefix, "list only segments whose name starts with this prefix");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(run_flags);
    if (*bench) return cmd_bench(bench_flags, opaque_frames, bench_out);
    if (*replay) return cmd_replay(replay_flags, script);
    if (*dump) return cmd_shmdump(names, prefix);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return runtime::kExitConfig;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return runtime::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return runtime::kExitFailure;
  }
  return 0;
}
