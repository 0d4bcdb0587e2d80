#include <doctest.h>

#include <unistd.h>

#include <atomic>
#include <random>
#include <thread>

#include "insitu/errors.hpp"
#include "insitu/steer_bus.hpp"

using namespace insitu;
using namespace insitu::steer;
using namespace std::chrono_literals;

namespace {

std::string socket_path() {
  static int counter = 0;
  return "/tmp/insitu-steer-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + ".sock";
}

SteeringCommand cmd(std::uint64_t seq, std::uint64_t step, CommandBody body = CommandBody::set_param("dt", 0.002)) {
  SteeringCommand c;
  c.seq = seq;
  c.apply_at_step = step;
  c.body = std::move(body);
  return c;
}

std::vector<std::uint64_t> seqs(const std::vector<SteeringCommand>& v) {
  std::vector<std::uint64_t> out;
  for (const auto& c : v) out.push_back(c.seq);
  return out;
}

// Head plus k connected inboxes.
struct Bus {
  HeadOptions opts;
  std::unique_ptr<SteerHead> head;
  std::vector<std::unique_ptr<SteerInbox>> inboxes;

  explicit Bus(int k, std::chrono::milliseconds ack_timeout = kDefaultAckTimeout) {
    opts.socket_path = socket_path();
    opts.rank_count = k;
    opts.checksum = 42;
    opts.ack_timeout = ack_timeout;
    head = std::make_unique<SteerHead>(opts);
    std::thread acceptor([&] { head->accept_ranks(5s); });
    for (int r = 0; r < k; ++r) inboxes.push_back(SteerInbox::connect(opts.socket_path, r, 42, 5s));
    acceptor.join();
  }
  ~Bus() { head->close(); }
};

}  // namespace

TEST_CASE("inbox polling") {
  SteerInbox in(0);
  CHECK(in.poll(5).empty());
  in.deliver(cmd(2, 7));
  in.deliver(cmd(1, 7));
  in.deliver(cmd(3, 8));
  CHECK(in.poll(6).empty());
  CHECK(seqs(in.poll(7)) == std::vector<std::uint64_t>{1, 2});
  CHECK(in.late_count() == 0);

  // Step 8 already ran when seq 4 shows up; it goes out with the next poll.
  in.deliver(cmd(4, 8));
  CHECK(seqs(in.poll(8)) == std::vector<std::uint64_t>{3, 4});
  in.deliver(cmd(5, 8));
  CHECK(seqs(in.poll(10)) == std::vector<std::uint64_t>{5});
  CHECK(in.late_count() == 1);
}

TEST_CASE("horizon waits") {
  SteerInbox in(0);
  CHECK_FALSE(in.wait_for_horizon(3, 10ms));
  std::thread t([&] {
    std::this_thread::sleep_for(20ms);
    in.set_horizon(3);
  });
  CHECK(in.wait_for_horizon(3, 2s));
  t.join();
  in.set_horizon(1);
  CHECK(in.horizon() == 3);
  in.close();
  CHECK_THROWS_AS(in.wait_for_horizon(4, 1s), PeerLostError);
}

TEST_CASE("paused release takes everything up to the first resume") {
  SteerInbox in(0);
  in.deliver(cmd(1, 20));
  in.deliver(cmd(2, 21, CommandBody::resume()));
  in.deliver(cmd(3, 22));
  in.deliver(cmd(4, 23, CommandBody::terminate()));
  CHECK(seqs(in.release_paused(10ms)) == std::vector<std::uint64_t>{1, 2});
  CHECK(seqs(in.release_paused(10ms)) == std::vector<std::uint64_t>{3, 4});
  CHECK(in.release_paused(10ms).empty());
}

TEST_CASE("gate applies commands at their step and releases pauses at the frozen step") {
  SteerInbox in(0);
  bool paused = false;
  std::vector<AppliedEntry> applied;
  GateHooks hooks{[&] { return paused; }, [] { return false; },
                  [&](const SteeringCommand& c, std::uint64_t step) {
                    if (c.body.kind == CommandKind::pause) paused = true;
                    if (c.body.kind == CommandKind::resume) paused = false;
                    applied.push_back({c.seq, step});
                  }};
  in.set_horizon(10);
  in.deliver(cmd(1, 3, CommandBody::pause()));
  in.deliver(cmd(2, 5));
  in.deliver(cmd(3, 9, CommandBody::resume()));
  std::uint64_t step = 0;
  for (int i = 0; i < 4; ++i) {
    before_step(in, step, hooks);
    if (!paused) ++step;
  }
  // Pause lands before step 3 is produced, so the counter freezes at 2 until
  // the resume releases it.
  CHECK(step == 3);
  CHECK(paused == false);
  CHECK(applied == std::vector<AppliedEntry>{{1, 3}, {2, 2}, {3, 2}});
}

TEST_CASE("head assigns seq and apply step") {
  Bus bus(1);
  auto& head = *bus.head;
  head.observe_step(100);
  CHECK(head.horizon() == 101);
  auto r = head.submit(CommandBody::set_param("dt", 0.002));
  REQUIRE(r.accepted);
  CHECK(r.command.apply_at_step == 102);
  CHECK(r.command.seq == 1);
  auto r2 = head.submit(CommandBody::pause());
  CHECK(r2.command.seq == 2);

  auto bad = head.submit(CommandBody::set_param("bogus", 1));
  CHECK_FALSE(bad.accepted);
  CHECK(bad.reason.find("bogus") != std::string::npos);
  CHECK(head.last_seq() == 2);

  CHECK(head.wait_acked(2, 2s));
  CHECK(bus.inboxes[0]->pending() == 2);
  CHECK(bus.inboxes[0]->horizon() == 101);

  CHECK_FALSE(head.submit_at(CommandBody::resume(), 101).accepted);
  CHECK(head.submit_at(CommandBody::resume(), 150).accepted);
  CHECK_FALSE(head.submit_at(CommandBody::resume(), 140).accepted);
  CHECK(head.history().size() == 3);
}

TEST_CASE("four ranks acknowledge one command") {
  Bus bus(4);
  auto r = bus.head->submit(CommandBody::set_param("target_temperature", 1.5));
  REQUIRE(r.accepted);
  CHECK(bus.head->wait_acked(r.command.seq, 2s));
  CHECK(bus.head->low_water_mark() == r.command.seq);
  for (auto& in : bus.inboxes) CHECK(in->pending() == 1);
  CHECK_FALSE(bus.head->degraded());
}

TEST_CASE("head option checks") {
  HeadOptions o;
  o.socket_path = socket_path();
  o.delay_steps = 1;
  CHECK_THROWS_AS(SteerHead{o}, ConfigError);
  o.delay_steps = 2;
  o.rank_count = 0;
  CHECK_THROWS_AS(SteerHead{o}, ConfigError);
}

TEST_CASE("checksum mismatch is a config error") {
  HeadOptions o;
  o.socket_path = socket_path();
  o.rank_count = 1;
  o.checksum = 1;
  SteerHead head(o);
  auto in = SteerInbox::connect(o.socket_path, 0, 2, 2s);
  CHECK_THROWS_AS(head.accept_ranks(2s), ConfigError);
}

TEST_CASE("missing ranks time out") {
  HeadOptions o;
  o.socket_path = socket_path();
  o.rank_count = 2;
  SteerHead head(o);
  auto in = SteerInbox::connect(o.socket_path, 0, 0, 2s);
  CHECK_THROWS_AS(head.accept_ranks(200ms), PeerLostError);
}

TEST_CASE("a killed rank degrades the run") {
  Bus bus(4);
  auto t0 = std::chrono::steady_clock::now();
  bus.inboxes[2].reset();
  bus.head->submit(CommandBody::set_param("dt", 0.001));
  while (!bus.head->degraded() && std::chrono::steady_clock::now() - t0 < 3s) std::this_thread::sleep_for(5ms);
  CHECK(std::chrono::steady_clock::now() - t0 < 2s + 500ms);
  auto states = bus.head->rank_states();
  CHECK(states[2] == RankState::lost);
  CHECK(states[0] == RankState::ok);
  CHECK(bus.head->wait_acked(1, 2s));
}

TEST_CASE("a rank that stops acking is lost after the ack timeout") {
  HeadOptions o;
  o.socket_path = socket_path();
  o.rank_count = 1;
  o.ack_timeout = 200ms;
  SteerHead head(o);
  // Raw peer that says hello and then never reads.
  auto fd = net::unix_connect(o.socket_path, 2s);
  wire::Writer w(14);
  w.magic("SHLO");
  w.u16(0);
  w.u64(0);
  net::write_all(fd.get(), w.buffer());
  head.accept_ranks(2s);
  auto t0 = std::chrono::steady_clock::now();
  head.submit(CommandBody::pause());
  while (!head.degraded() && std::chrono::steady_clock::now() - t0 < 2s) std::this_thread::sleep_for(5ms);
  CHECK(head.degraded());
  CHECK(std::chrono::steady_clock::now() - t0 >= 200ms);
}

TEST_CASE("terminate ends submissions and expected disconnects are not losses") {
  Bus bus(2);
  CHECK(bus.head->submit(CommandBody::terminate()).accepted);
  CHECK(bus.head->terminating());
  auto late = bus.head->submit(CommandBody::pause());
  CHECK_FALSE(late.accepted);
  bus.inboxes.clear();
  std::this_thread::sleep_for(50ms);
  CHECK_FALSE(bus.head->degraded());
}

TEST_CASE("inbox notices a vanished head") {
  Bus bus(1);
  bus.head->close();
  CHECK_THROWS_AS(bus.inboxes[0]->wait_for_horizon(1000, 2s), PeerLostError);
  CHECK(bus.inboxes[0]->head_lost());
}

TEST_CASE("steering scripts") {
  auto s = parse_script("# warmup\n10 set dt 0.002\n5 pause  # hold\n\n7 resume\n20 terminate\n");
  REQUIRE(s.size() == 4);
  CHECK(s[0] == ScriptEntry{5, CommandBody::pause()});
  CHECK(s[1] == ScriptEntry{7, CommandBody::resume()});
  CHECK(s[2] == ScriptEntry{10, CommandBody::set_param("dt", 0.002)});
  CHECK(s[3] == ScriptEntry{20, CommandBody::terminate()});
  CHECK_THROWS_AS(parse_script("x pause\n"), ConfigError);
  CHECK_THROWS_AS(parse_script("-3 pause\n"), ConfigError);
  CHECK_THROWS_AS(parse_script("3 jump\n"), ConfigError);
  CHECK_THROWS_AS(parse_script("3 set dt\n"), ConfigError);
  CHECK_THROWS_AS(parse_script("3 set dt 1x\n"), ConfigError);
  CHECK_THROWS_AS(parse_script("3 pause now\n"), ConfigError);
  CHECK_THROWS_AS(load_script("/nonexistent/script.txt"), NotFoundError);
}

TEST_CASE("applied log round trip") {
  std::vector<AppliedEntry> e{{1, 5}, {2, 5}, {3, 9}};
  std::vector<SteeringCommand> c{cmd(1, 5), cmd(2, 5, CommandBody::pause()), cmd(3, 9, CommandBody::resume())};
  auto text = format_applied_log(e, c);
  CHECK(text == "1 5 set dt 0.002\n2 5 pause\n3 9 resume\n");
  CHECK(parse_applied_log(text) == e);
}

TEST_CASE("randomly paced ranks agree on every applied step") {
  constexpr int kRanks = 4;
  Bus bus(kRanks);
  struct RankLog {
    std::vector<AppliedEntry> applied;
    std::uint64_t final_step = 0;
  };
  std::vector<RankLog> logs(kRanks);
  std::atomic<bool> abort{false};

  std::vector<std::thread> ranks;
  for (int r = 0; r < kRanks; ++r) {
    ranks.emplace_back([&, r] {
      std::mt19937 rng(r + 1);
      std::uniform_int_distribution<int> pace(0, 300);
      bool paused = false, done = false;
      std::uint64_t step = 0;
      GateHooks hooks{[&] { return paused; }, [&] { return done || abort.load(); },
                      [&](const SteeringCommand& c, std::uint64_t at) {
                        if (c.body.kind == CommandKind::pause) paused = true;
                        if (c.body.kind == CommandKind::resume) paused = false;
                        if (c.body.kind == CommandKind::terminate) done = true;
                        logs[r].applied.push_back({c.seq, at});
                      }};
      while (!done && !abort) {
        if (r == 0) bus.head->observe_step(step);
        before_step(*bus.inboxes[r], step, hooks, 20ms);
        if (done) break;
        if (!paused) ++step;
        std::this_thread::sleep_for(std::chrono::microseconds(pace(rng)));
      }
      logs[r].final_step = step;
    });
  }

  std::mt19937 rng(99);
  std::uniform_int_distribution<int> kind(0, 9), gap(0, 2000);
  std::vector<SubmitResult> sent;
  bool paused = false;
  for (int i = 0; i < 49; ++i) {
    CommandBody body = CommandBody::set_param("dt", 0.001 + 0.0001 * i);
    int k = kind(rng);
    if (k < 2) body = paused ? CommandBody::resume() : CommandBody::pause();
    if (body.kind == CommandKind::pause) paused = true;
    if (body.kind == CommandKind::resume) paused = false;
    sent.push_back(bus.head->submit(body));
    std::this_thread::sleep_for(std::chrono::microseconds(gap(rng)));
  }
  sent.push_back(bus.head->submit(CommandBody::terminate()));
  for (auto& t : ranks) t.join();

  REQUIRE(logs[0].applied.size() == 50);
  for (int r = 1; r < kRanks; ++r) CHECK(logs[r].applied == logs[0].applied);
  for (std::size_t i = 0; i < sent.size(); ++i) {
    REQUIRE(sent[i].accepted);
    const auto& e = logs[0].applied[i];
    CHECK(e.seq == sent[i].command.seq);
    if (i > 0) CHECK(e.seq > logs[0].applied[i - 1].seq);
    CHECK(e.step <= sent[i].observed_step + 2 + bus.inboxes[0]->late_count());
  }
  for (auto& in : bus.inboxes) CHECK(in->late_count() == 0);
}
