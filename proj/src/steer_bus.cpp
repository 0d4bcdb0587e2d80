#include "insitu/steer_bus.hpp"

#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "insitu/errors.hpp"
#include "insitu/log.hpp"

namespace insitu::steer {

namespace {

using Clock = std::chrono::steady_clock;

wire::Bytes encode_hello(int rank, std::uint64_t checksum) {
  wire::Writer w(14);
  w.magic("SHLO");
  w.u16(static_cast<std::uint16_t>(rank));
  w.u64(checksum);
  return w.take();
}

wire::Bytes encode_horizon(std::uint64_t horizon) {
  wire::Writer w(12);
  w.magic("SHZN");
  w.u64(horizon);
  return w.take();
}

bool read_magic(int fd, char (&magic)[4]) { return net::read_exact(fd, magic, 4); }

std::vector<std::uint8_t> read_body(int fd, std::size_t n) {
  std::vector<std::uint8_t> b(n);
  if (n > 0 && !net::read_exact(fd, b.data(), n)) throw PeerLostError("stream closed mid-message");
  return b;
}

// Reads the rest of a STER message after its magic.
SteeringCommand read_command(int fd) {
  wire::Writer w(64);
  w.magic("STER");
  auto head = read_body(fd, 8 + 8 + 1 + 2);
  w.bytes(head);
  std::uint16_t name_len;
  std::memcpy(&name_len, head.data() + 17, 2);
  w.bytes(read_body(fd, name_len + 8u));
  return decode_command(w.buffer());
}

const char* kind_name(CommandKind k) {
  switch (k) {
    case CommandKind::set_param:
      return "set";
    case CommandKind::pause:
      return "pause";
    case CommandKind::resume:
      return "resume";
    case CommandKind::terminate:
      return "terminate";
  }
  return "?";
}

}  // namespace

struct SteerHead::Link {
  int rank = -1;
  net::Fd fd;
  std::mutex send_mu;
  std::thread reader;
  RankState state = RankState::ok;
  std::uint64_t acked = 0;
  std::deque<std::pair<std::uint64_t, Clock::time_point>> outstanding;
};

SteerHead::SteerHead(const HeadOptions& opts) : opts_(opts) {
  if (opts_.rank_count < 1) throw ConfigError("rank_count must be >= 1");
  if (opts_.delay_steps < 2) {
    throw ConfigError("delay_steps must be >= 2 so a command never targets a step already under way");
  }
  listener_ = net::unix_listen(opts_.socket_path);
}

SteerHead::~SteerHead() { close(); }

void SteerHead::accept_ranks(std::chrono::milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  std::vector<std::unique_ptr<Link>> links(opts_.rank_count);
  int joined = 0;
  while (joined < opts_.rank_count) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (left.count() <= 0) {
      throw PeerLostError("only " + std::to_string(joined) + " of " + std::to_string(opts_.rank_count) +
                          " ranks joined the steering bus");
    }
    net::Fd fd = net::accept_with_timeout(listener_, left);
    if (!fd.valid()) continue;
    char magic[4];
    if (!net::wait_readable(fd.get(), left) || !read_magic(fd.get(), magic) ||
        std::string_view(magic, 4) != "SHLO") {
      throw ProtocolError("steering peer sent no hello");
    }
    auto body = read_body(fd.get(), 10);
    wire::Reader rr(body);
    int rank = rr.u16();
    std::uint64_t checksum = rr.u64();
    if (checksum != opts_.checksum) {
      throw ConfigError("rank " + std::to_string(rank) + " runs a different RunSpec (checksum mismatch)");
    }
    if (rank >= opts_.rank_count || links[rank]) {
      throw ProtocolError("unexpected steering hello from rank " + std::to_string(rank));
    }
    auto link = std::make_unique<Link>();
    link->rank = rank;
    link->fd = std::move(fd);
    links[rank] = std::move(link);
    ++joined;
  }
  {
    std::lock_guard lock(mu_);
    links_ = std::move(links);
    for (auto& l : links_) {
      Link* raw = l.get();
      l->reader = std::thread([this, raw] { reader_loop(raw); });
    }
    broadcast_locked(encode_horizon(horizon_));
  }
  monitor_ = std::thread([this] { monitor_loop(); });
}

void SteerHead::observe_step(std::uint64_t step) {
  std::lock_guard lock(mu_);
  if (step < observed_) return;
  observed_ = step;
  std::uint64_t h = step + opts_.delay_steps - 1;
  if (h > horizon_) {
    horizon_ = h;
    broadcast_locked(encode_horizon(horizon_));
  }
}

std::uint64_t SteerHead::observed_step() const {
  std::lock_guard lock(mu_);
  return observed_;
}

std::uint64_t SteerHead::horizon() const {
  std::lock_guard lock(mu_);
  return horizon_;
}

SubmitResult SteerHead::submit(const CommandBody& body) {
  std::lock_guard lock(mu_);
  return enqueue(body, observed_ + opts_.delay_steps);
}

SubmitResult SteerHead::submit_at(const CommandBody& body, std::uint64_t apply_at_step) {
  std::lock_guard lock(mu_);
  if (apply_at_step <= horizon_ || apply_at_step < last_apply_) {
    SubmitResult r;
    r.reason = "step " + std::to_string(apply_at_step) + " is not schedulable (horizon " +
               std::to_string(horizon_) + ", last scheduled " + std::to_string(last_apply_) + ")";
    r.observed_step = observed_;
    return r;
  }
  return enqueue(body, apply_at_step);
}

SubmitResult SteerHead::enqueue(const CommandBody& body, std::uint64_t apply_at_step) {
  SubmitResult r;
  r.observed_step = observed_;
  if (terminating_) {
    r.reason = "run is terminating";
    return r;
  }
  if (body.kind == CommandKind::set_param) {
    if (auto why = check_param(body.name, body.value)) {
      r.reason = *why;
      return r;
    }
  }
  r.accepted = true;
  r.command.seq = next_seq_++;
  r.command.apply_at_step = apply_at_step;
  r.command.body = body;
  r.command.issued_at = std::chrono::system_clock::now();
  last_apply_ = std::max(last_apply_, apply_at_step);
  if (body.kind == CommandKind::terminate) terminating_ = true;
  history_.push_back(r);
  const auto now = Clock::now();
  for (auto& l : links_) {
    if (l->state == RankState::ok) l->outstanding.emplace_back(r.command.seq, now);
  }
  broadcast_locked(encode_command(r.command));
  log::info("steer: seq ", r.command.seq, " '", describe(body), "' at step ", apply_at_step);
  return r;
}

void SteerHead::broadcast_locked(const wire::Bytes& msg) {
  for (auto& l : links_) {
    if (l->state != RankState::ok) continue;
    try {
      std::lock_guard send_lock(l->send_mu);
      net::write_all(l->fd.get(), msg);
    } catch (const PeerLostError& e) {
      mark_lost(*l, e.what());
    }
  }
}

void SteerHead::mark_lost(Link& link, const std::string& why) {
  if (link.state == RankState::lost) return;
  if (terminating_) {
    link.outstanding.clear();
    return;
  }
  link.state = RankState::lost;
  link.outstanding.clear();
  log::warn("steer: rank ", link.rank, " lost (", why, "); run is degraded");
  acked_cv_.notify_all();
}

void SteerHead::reader_loop(Link* link) {
  const int fd = link->fd.get();
  try {
    for (;;) {
      char magic[4];
      if (!read_magic(fd, magic)) break;
      if (std::string_view(magic, 4) != "SACK") throw ProtocolError("unexpected message on steering stream");
      wire::Writer w(14);
      w.magic("SACK");
      w.bytes(read_body(fd, 10));
      wire::Reader r(w.buffer());
      Ack ack = decode_ack(r);
      std::lock_guard lock(mu_);
      link->acked = std::max(link->acked, ack.seq);
      while (!link->outstanding.empty() && link->outstanding.front().first <= ack.seq) {
        link->outstanding.pop_front();
      }
      acked_cv_.notify_all();
    }
  } catch (const Error& e) {
    if (!stop_) {
      std::lock_guard lock(mu_);
      mark_lost(*link, e.what());
    }
    return;
  }
  if (!stop_) {
    std::lock_guard lock(mu_);
    mark_lost(*link, "stream closed");
  }
}

void SteerHead::monitor_loop() {
  while (!stop_) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    std::lock_guard lock(mu_);
    const auto now = Clock::now();
    for (auto& l : links_) {
      if (l->state == RankState::ok && !l->outstanding.empty() &&
          now - l->outstanding.front().second > opts_.ack_timeout) {
        mark_lost(*l, "no ack for seq " + std::to_string(l->outstanding.front().first));
      }
    }
  }
}

std::uint64_t SteerHead::low_water_mark() const {
  std::lock_guard lock(mu_);
  std::uint64_t lwm = std::numeric_limits<std::uint64_t>::max();
  bool any = false;
  for (const auto& l : links_) {
    if (l->state != RankState::ok) continue;
    lwm = std::min(lwm, l->acked);
    any = true;
  }
  return any ? lwm : 0;
}

std::uint64_t SteerHead::last_seq() const {
  std::lock_guard lock(mu_);
  return next_seq_ - 1;
}

std::vector<RankState> SteerHead::rank_states() const {
  std::lock_guard lock(mu_);
  std::vector<RankState> out(opts_.rank_count, RankState::ok);
  for (const auto& l : links_) out[l->rank] = l->state;
  return out;
}

bool SteerHead::degraded() const {
  auto states = rank_states();
  return std::any_of(states.begin(), states.end(), [](RankState s) { return s == RankState::lost; });
}

std::vector<SubmitResult> SteerHead::history() const {
  std::lock_guard lock(mu_);
  return history_;
}

bool SteerHead::wait_acked(std::uint64_t seq, std::chrono::milliseconds timeout) const {
  std::unique_lock lock(mu_);
  return acked_cv_.wait_for(lock, timeout, [&] {
    for (const auto& l : links_) {
      if (l->state == RankState::ok && l->acked < seq) return false;
    }
    return true;
  });
}

void SteerHead::close() {
  if (stop_.exchange(true)) return;
  {
    std::lock_guard lock(mu_);
    for (auto& l : links_) l->fd.shutdown();
  }
  for (auto& l : links_) {
    if (l->reader.joinable()) l->reader.join();
  }
  if (monitor_.joinable()) monitor_.join();
  listener_.reset();
  ::unlink(opts_.socket_path.c_str());
}

SteerInbox::SteerInbox(int rank) : rank_(rank) {}

std::unique_ptr<SteerInbox> SteerInbox::connect(const std::string& socket_path, int rank,
                                                std::uint64_t checksum, std::chrono::milliseconds timeout) {
  auto inbox = std::make_unique<SteerInbox>(rank);
  inbox->fd_ = net::unix_connect(socket_path, timeout);
  net::write_all(inbox->fd_.get(), encode_hello(rank, checksum));
  SteerInbox* raw = inbox.get();
  inbox->reader_ = std::thread([raw] { raw->reader_loop(); });
  return inbox;
}

SteerInbox::~SteerInbox() {
  close();
  if (fd_.valid()) fd_.shutdown();
  if (reader_.joinable()) reader_.join();
}

void SteerInbox::reader_loop() {
  const int fd = fd_.get();
  try {
    for (;;) {
      char magic[4];
      if (!read_magic(fd, magic)) break;
      std::string_view m(magic, 4);
      if (m == "STER") {
        SteeringCommand cmd = read_command(fd);
        std::uint64_t seq = cmd.seq;
        deliver(std::move(cmd));
        std::lock_guard lock(send_mu_);
        net::write_all(fd, encode_ack({static_cast<std::uint16_t>(rank_), seq}));
      } else if (m == "SHZN") {
        auto body = read_body(fd, 8);
        wire::Reader r(body);
        set_horizon(r.u64());
      } else {
        throw ProtocolError("unexpected message on steering stream");
      }
    }
  } catch (const Error& e) {
    log::debug("steer inbox ", rank_, ": ", e.what());
  }
  std::lock_guard lock(mu_);
  head_lost_ = true;
  cv_.notify_all();
}

void SteerInbox::deliver(SteeringCommand cmd) {
  std::lock_guard lock(mu_);
  pending_.emplace(cmd.seq, std::move(cmd));
  cv_.notify_all();
}

void SteerInbox::set_horizon(std::uint64_t horizon) {
  std::lock_guard lock(mu_);
  horizon_ = std::max(horizon_, horizon);
  cv_.notify_all();
}

void SteerInbox::close() {
  std::lock_guard lock(mu_);
  closed_ = true;
  cv_.notify_all();
}

bool SteerInbox::wait_for_horizon(std::uint64_t step, std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, timeout, [&] { return horizon_ >= step || closed_ || head_lost_; });
  if (horizon_ >= step) return true;
  if (closed_) throw PeerLostError("steering inbox closed");
  if (head_lost_) throw PeerLostError("steering head went away");
  return false;
}

std::vector<SteeringCommand> SteerInbox::poll(std::uint64_t step) {
  std::lock_guard lock(mu_);
  std::vector<SteeringCommand> out;
  for (auto it = pending_.begin(); it != pending_.end();) {
    if (it->second.apply_at_step <= step) {
      if (it->second.apply_at_step < step) ++late_;
      out.push_back(std::move(it->second));
      it = pending_.erase(it);
    } else {
      ++it;
    }
  }
  return out;
}

std::vector<SteeringCommand> SteerInbox::release_paused(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  auto find_release = [&] {
    return std::find_if(pending_.begin(), pending_.end(), [](const auto& kv) {
      auto k = kv.second.body.kind;
      return k == CommandKind::resume || k == CommandKind::terminate;
    });
  };
  auto it = find_release();
  if (it == pending_.end()) {
    cv_.wait_for(lock, timeout, [&] { return find_release() != pending_.end() || closed_ || head_lost_; });
    it = find_release();
    if (it == pending_.end()) return {};
  }
  std::vector<SteeringCommand> out;
  auto end = std::next(it);
  for (auto i = pending_.begin(); i != end; ++i) out.push_back(std::move(i->second));
  pending_.erase(pending_.begin(), end);
  return out;
}

std::uint64_t SteerInbox::late_count() const {
  std::lock_guard lock(mu_);
  return late_;
}

std::uint64_t SteerInbox::horizon() const {
  std::lock_guard lock(mu_);
  return horizon_;
}

std::size_t SteerInbox::pending() const {
  std::lock_guard lock(mu_);
  return pending_.size();
}

bool SteerInbox::head_lost() const {
  std::lock_guard lock(mu_);
  return head_lost_;
}

void before_step(SteerInbox& inbox, std::uint64_t current_step, const GateHooks& hooks,
                 std::chrono::milliseconds slice) {
  while (!hooks.stop()) {
    if (hooks.paused()) {
      for (const auto& cmd : inbox.release_paused(slice)) hooks.apply(cmd, current_step);
      if (!hooks.paused()) return;
      continue;
    }
    if (!inbox.wait_for_horizon(current_step + 1, slice)) continue;
    for (const auto& cmd : inbox.poll(current_step + 1)) hooks.apply(cmd, current_step + 1);
    return;
  }
}

std::string format_applied_log(const std::vector<AppliedEntry>& entries,
                               const std::vector<SteeringCommand>& commands) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    os << entries[i].seq << ' ' << entries[i].step;
    if (i < commands.size()) {
      const auto& b = commands[i].body;
      os << ' ' << kind_name(b.kind);
      if (b.kind == CommandKind::set_param) os << ' ' << b.name << ' ' << b.value;
    }
    os << '\n';
  }
  return os.str();
}

std::vector<AppliedEntry> parse_applied_log(const std::string& text) {
  std::vector<AppliedEntry> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    AppliedEntry e;
    if (!(ls >> e.seq >> e.step)) throw ProtocolError("bad applied-log line: " + line);
    out.push_back(e);
  }
  return out;
}

std::vector<ScriptEntry> parse_script(const std::string& text) {
  std::vector<ScriptEntry> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string first;
    if (!(ls >> first)) continue;
    auto fail = [&](const std::string& why) {
      throw ConfigError("steering script line " + std::to_string(lineno) + ": " + why);
    };
    ScriptEntry e;
    try {
      std::size_t used = 0;
      if (first.empty() || first[0] == '-') fail("step must be a non-negative integer");
      e.step = std::stoull(first, &used);
      if (used != first.size()) fail("step must be a non-negative integer");
    } catch (const std::logic_error&) {
      fail("step must be a non-negative integer");
    }
    std::string cmd;
    if (!(ls >> cmd)) fail("missing command");
    if (cmd == "set") {
      std::string name, value;
      if (!(ls >> name >> value)) fail("set needs a name and a value");
      try {
        std::size_t used = 0;
        e.body = CommandBody::set_param(name, std::stod(value, &used));
        if (used != value.size()) fail("bad value '" + value + "'");
      } catch (const std::logic_error&) {
        fail("bad value '" + value + "'");
      }
    } else if (cmd == "pause") {
      e.body = CommandBody::pause();
    } else if (cmd == "resume") {
      e.body = CommandBody::resume();
    } else if (cmd == "terminate") {
      e.body = CommandBody::terminate();
    } else {
      fail("unknown command '" + cmd + "'");
    }
    std::string extra;
    if (ls >> extra) fail("unexpected trailing '" + extra + "'");
    out.push_back(e);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
  return out;
}

std::vector<ScriptEntry> load_script(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open steering script " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_script(ss.str());
}

}  // namespace insitu::steer
