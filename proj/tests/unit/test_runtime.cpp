#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <thread>

#include "insitu/errors.hpp"
#include "insitu/net.hpp"
#include "insitu/runtime.hpp"
#include "insitu/shm.hpp"
#include "insitu/stream_server.hpp"

using namespace insitu;
using namespace insitu::runtime;
using namespace std::chrono_literals;

namespace {

RunSpec small_spec(int ranks, std::size_t particles, std::uint64_t max_steps) {
  RunSpec s;
  s.sim.particle_count = particles;
  s.sim.box_length = 10.0;
  s.sim.rank_count = ranks;
  s.image = {64, 64};
  s.max_steps = max_steps;
  return s;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::string scratch_dir() {
  std::string tmpl = (std::filesystem::temp_directory_path() / "insitu-rt-test-XXXXXX").string();
  REQUIRE(::mkdtemp(tmpl.data()) != nullptr);
  return tmpl;
}

std::uint16_t free_port() {
  auto [fd, port] = net::tcp_listen("127.0.0.1", 0);
  return port;
}

}  // namespace

TEST_CASE("run spec json round trip and checksum") {
  RunSpec s = small_spec(4, 512, 100);
  s.encoding = stream::Encoding::raw;
  s.mode = stream::RenderMode::vdi;
  s.on_peer_loss = PeerLossPolicy::degrade;
  s.bench.enabled = true;
  s.bench.opaque_frames = 42;
  s.steer_script = "/tmp/x.steer";
  RunSpec back = parse_run_spec(to_json(s));
  CHECK(to_json(back) == to_json(s));
  CHECK(checksum(back) == checksum(s));

  RunSpec other = s;
  other.sim.dt = 0.002;
  CHECK(checksum(other) != checksum(s));

  RunSpec partial = parse_run_spec(R"({"sim": {"particle_count": 64}, "width": 32})");
  CHECK(partial.sim.particle_count == 64);
  CHECK(partial.image.width == 32);
  CHECK(partial.image.height == 256);

  CHECK_THROWS_AS(parse_run_spec(R"({"colour": 1})"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec(R"({"sim": {"dtt": 1}})"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec(R"({"width": "wide"})"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec(R"({"mode": "volume"})"), ConfigError);
  CHECK_THROWS_AS(parse_run_spec("{"), ConfigError);
}

TEST_CASE("run spec validation") {
  CHECK_NOTHROW(validate(small_spec(4, 256, 10)));
  auto bad = [](auto mutate) {
    RunSpec s = small_spec(2, 256, 10);
    mutate(s);
    CHECK_THROWS_AS(validate(s), ConfigError);
  };
  bad([](RunSpec& s) { s.sim.rank_count = 3; });
  bad([](RunSpec& s) { s.delay_steps = 1; });
  bad([](RunSpec& s) { s.encoding = stream::Encoding::vdi; });
  bad([](RunSpec& s) { s.image.width = 0; });
  bad([](RunSpec& s) { s.vmax = s.vmin; });
  bad([](RunSpec& s) { s.opacity = 0; });
  bad([](RunSpec& s) { s.sim.dt = -1; });
}

TEST_CASE("render control round trip") {
  RenderControl c;
  c.frame_seq = 77;
  c.stop = true;
  c.view.camera = render::default_camera(16).orbited({8, 8, 8}, {0, 1, 0}, 0.3);
  c.view.cmap = {0.5, 2.5};
  c.view.radius = 0.45;
  c.view.mode = stream::RenderMode::vdi;
  auto bytes = encode_control(c);
  CHECK(bytes.size() == 4 + 8 + 1 + 13 * 8 + 1);
  CHECK(decode_control(bytes) == c);
  bytes.back() = 7;
  CHECK_THROWS_AS(decode_control(bytes), ProtocolError);
}

TEST_CASE("one headless rank runs its step limit and leaves no segments") {
  RunSpec s = small_spec(1, 125, 100);
  auto res = launch(s);
  REQUIRE(res.exit_codes.size() == 1);
  CHECK(res.exit_codes[0] == 0);
  CHECK(res.leaked_segments.empty());
  auto sums = read_summaries(s);
  CHECK(sums[0].final_step == 100);
  CHECK(sums[0].steps == 100);
  CHECK(sums[0].published == 101);  // initial state plus every step
  CHECK(sums[0].lag_violations == 0);
  CHECK(sums[0].error.empty());
}

TEST_CASE("terminate from a script stops every rank at the same step") {
  RunSpec s = small_spec(2, 216, 0);
  s.run_dir = scratch_dir();
  write_text(std::filesystem::path(s.run_dir) / "stop.steer",
             "# set, pause/resume, then stop\n5 set dt 0.0015\n8 pause\n8 resume\n20 terminate\n");
  s.steer_script = (std::filesystem::path(s.run_dir) / "stop.steer").string();
  auto res = launch(s);
  CHECK(res.exit_code() == 0);
  CHECK(res.leaked_segments.empty());
  auto sums = read_summaries(s);
  for (const auto& r : sums) {
    CHECK(r.final_step == 19);  // the command for step 20 runs before producing it
    CHECK(r.late_commands == 0);
    CHECK(r.applied.size() == 4);
  }
  CHECK(sums[0].applied == sums[1].applied);
  auto log0 = read_text(std::filesystem::path(s.run_dir) / "steer_rank0.log");
  auto log1 = read_text(std::filesystem::path(s.run_dir) / "steer_rank1.log");
  CHECK(log0 == log1);
  CHECK(log0.find("terminate") != std::string::npos);
}

TEST_CASE("four ranks apply a random script identically") {
  RunSpec s = small_spec(4, 256, 0);
  s.run_dir = scratch_dir();
  std::mt19937_64 rng(7);
  std::ostringstream script;
  std::uint64_t step = 2;
  const char* names[] = {"dt", "target_temperature"};
  for (int i = 0; i < 30; ++i) {
    step += rng() % 3;
    std::uniform_real_distribution<double> dt(0.0008, 0.0012), temp(0.8, 1.2);
    int which = static_cast<int>(rng() % 2);
    script << step << " set " << names[which] << " " << (which == 0 ? dt(rng) : temp(rng)) << "\n";
  }
  script << step + 3 << " terminate\n";
  write_text(std::filesystem::path(s.run_dir) / "random.steer", script.str());
  s.steer_script = (std::filesystem::path(s.run_dir) / "random.steer").string();
  auto res = launch(s);
  CHECK(res.exit_code() == 0);
  CHECK(res.leaked_segments.empty());
  auto sums = read_summaries(s);
  REQUIRE(sums.size() == 4);
  CHECK(sums[0].applied.size() == 31);
  for (const auto& r : sums) {
    CHECK(r.applied == sums[0].applied);
    CHECK(r.final_step == sums[0].final_step);
    CHECK(r.late_commands == 0);
  }
  // Compositing worked on every frame.
  for (const auto& r : sums) CHECK(r.composite_failures == 0);
}

TEST_CASE("run spec mismatch between ranks aborts with a config error") {
  RunSpec a = small_spec(2, 128, 50);
  prepare_run(a);
  RunSpec b = a;
  b.sim.seed = 99;
  b.connect_timeout_ms = a.connect_timeout_ms = 3000;
  std::fflush(nullptr);
  pid_t p0 = ::fork();
  if (p0 == 0) ::_exit(run_rank(a, 0));
  pid_t p1 = ::fork();
  if (p1 == 0) ::_exit(run_rank(b, 1));
  std::vector<int> codes;
  for (pid_t p : {p0, p1}) {
    int status = 0;
    ::waitpid(p, &status, 0);
    REQUIRE(WIFEXITED(status));
    codes.push_back(WEXITSTATUS(status));
  }
  CHECK(codes[0] != 0);
  CHECK(codes[1] != 0);
  CHECK((codes[0] == kExitConfig || codes[1] == kExitConfig));
  CHECK(shm::list_segments(a.scope + ".insitu.").empty());
}

TEST_CASE("served run streams frames and stops on a remote terminate") {
  RunSpec s = small_spec(2, 216, 0);
  s.serve = true;
  s.port = free_port();
  s.frame_interval_ms = 20;
  prepare_run(s);
  std::fflush(nullptr);
  pid_t launcher = ::fork();
  if (launcher == 0) ::_exit(launch(s).exit_code());

  auto client = stream::StreamClient::connect("127.0.0.1", s.port, stream::Transport::websocket, 20s);
  int frames = 0, stats = 0;
  std::uint64_t last_seq = 0;
  bool replied = false;
  auto deadline = std::chrono::steady_clock::now() + 30s;
  while (std::chrono::steady_clock::now() < deadline && (frames < 5 || !replied)) {
    auto m = client->next(1s);
    if (!m) continue;
    if (auto* f = std::get_if<stream::FrameMessage>(&*m)) {
      CHECK(f->frame_seq > last_seq);
      last_seq = f->frame_seq;
      CHECK(f->width == 64);
      CHECK(stream::frame_pixels(*f).size() == 64u * 64u);
      if (++frames == 5) client->send_steer(steer::CommandBody::terminate());
    } else if (auto* st = std::get_if<stream::StatsMessage>(&*m)) {
      CHECK(st->rank_states.size() == 2);
      ++stats;
    } else if (auto* r = std::get_if<stream::SteerReply>(&*m)) {
      CHECK(r->accepted);
      replied = true;
    }
  }
  CHECK(frames >= 5);
  CHECK(stats >= 1);
  CHECK(replied);
  client.reset();
  int status = 0;
  ::waitpid(launcher, &status, 0);
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);
  auto sums = read_summaries(s);
  CHECK(sums[0].applied.size() == 1);
  CHECK(sums[0].applied == sums[1].applied);
}

TEST_CASE("frame limit ends a vdi-mode run through the steering bus") {
  RunSpec s = small_spec(2, 216, 0);
  s.mode = stream::RenderMode::vdi;
  s.sim.steps_per_publish = 3;
  s.max_frames = 5;
  auto res = launch(s);
  CHECK(res.exit_code() == 0);
  CHECK(res.leaked_segments.empty());
  auto sums = read_summaries(s);
  for (const auto& r : sums) {
    CHECK(r.frames == 5);
    CHECK(r.opaque_frames == 0);
    CHECK(r.composite_failures == 0);
    CHECK(r.lag_violations == 0);
    CHECK(r.applied.size() == 1);
    CHECK(r.final_step == sums[0].final_step);
  }
}
