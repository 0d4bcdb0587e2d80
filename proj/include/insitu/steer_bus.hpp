#pragma once

// Ordered distribution of steering commands from the head (rank 0) to every
// rank's inbox over Unix stream sockets.
//
// Commands carry the step at which they take effect. So that no rank can run
// past a step before it has seen every command for that step, the head also
// streams a horizon: all commands with apply_at_step <= horizon have been
// sent. The head keeps horizon = observed_step + delay - 1, and a fresh
// command gets apply_at_step = observed_step + delay, so it always lands
// beyond what any rank may already have executed.
//
// Stream messages are self-delimiting: STER and SACK as in
// steering_command.hpp, plus
//   SHLO  rank u16, run checksum u64   (inbox -> head, once)
//   SHZN  horizon u64                  (head -> inbox)

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "insitu/net.hpp"
#include "insitu/steering_command.hpp"

namespace insitu::steer {

inline constexpr std::uint64_t kDefaultDelaySteps = 2;
inline constexpr std::chrono::milliseconds kDefaultAckTimeout{2000};

enum class RankState : std::uint8_t { ok = 0, lost = 1 };

struct SubmitResult {
  bool accepted = false;
  std::string reason;       // set when rejected
  SteeringCommand command;  // seq and apply_at_step when accepted
  std::uint64_t observed_step = 0;
};

struct HeadOptions {
  std::string socket_path;
  int rank_count = 1;
  std::uint64_t checksum = 0;
  std::uint64_t delay_steps = kDefaultDelaySteps;
  std::chrono::milliseconds ack_timeout = kDefaultAckTimeout;
};

// Head side: sequencing, fan-out and ack tracking.
class SteerHead {
 public:
  explicit SteerHead(const HeadOptions& opts);
  ~SteerHead();

  SteerHead(const SteerHead&) = delete;
  SteerHead& operator=(const SteerHead&) = delete;

  // Accepts one inbox per rank. Throws PeerLostError on timeout and
  // ConfigError on a checksum mismatch.
  void accept_ranks(std::chrono::milliseconds timeout);

  // Rank 0 reports its step before each step; advances the horizon.
  void observe_step(std::uint64_t step);
  std::uint64_t observed_step() const;
  std::uint64_t horizon() const;

  // Live submission: apply_at_step = observed + delay. Unknown or invalid
  // parameters are rejected without a broadcast.
  SubmitResult submit(const CommandBody& body);
  // Scripted submission at an explicit step. Rejected if the step is not
  // beyond the horizon or precedes an earlier command's step.
  SubmitResult submit_at(const CommandBody& body, std::uint64_t apply_at_step);

  // Smallest seq acknowledged by every live rank.
  std::uint64_t low_water_mark() const;
  std::uint64_t last_seq() const;
  std::vector<RankState> rank_states() const;
  bool degraded() const;
  // Every command sent so far, in seq order.
  std::vector<SubmitResult> history() const;
  // After Terminate, rank disconnects are expected and not counted as loss.
  bool terminating() const { return terminating_.load(); }

  // Blocks until every live rank acked `seq` or the timeout passes.
  bool wait_acked(std::uint64_t seq, std::chrono::milliseconds timeout) const;

  void close();

 private:
  struct Link;
  SubmitResult enqueue(const CommandBody& body, std::uint64_t apply_at_step);
  void broadcast_locked(const wire::Bytes& msg);
  void reader_loop(Link* link);
  void monitor_loop();
  void mark_lost(Link& link, const std::string& why);

  HeadOptions opts_;
  net::Fd listener_;
  std::vector<std::unique_ptr<Link>> links_;
  mutable std::mutex mu_;
  mutable std::condition_variable acked_cv_;
  std::uint64_t observed_ = 0;
  std::uint64_t horizon_ = 0;
  std::uint64_t next_seq_ = 1;
  std::uint64_t last_apply_ = 0;
  std::vector<SubmitResult> history_;
  std::atomic<bool> terminating_{false};
  std::atomic<bool> stop_{false};
  std::thread monitor_;
};

// Rank side: a single-consumer queue drained between simulation steps. It
// can be fed by a head connection or directly (replay, tests).
class SteerInbox {
 public:
  // Unconnected inbox; use deliver() and set_horizon().
  explicit SteerInbox(int rank);
  // Connects to the head and starts the receive thread.
  static std::unique_ptr<SteerInbox> connect(const std::string& socket_path, int rank,
                                             std::uint64_t checksum,
                                             std::chrono::milliseconds timeout);
  ~SteerInbox();

  SteerInbox(const SteerInbox&) = delete;
  SteerInbox& operator=(const SteerInbox&) = delete;

  void deliver(SteeringCommand cmd);
  void set_horizon(std::uint64_t horizon);
  // Marks the inbox as closed; waits return instead of blocking.
  void close();

  // Blocks until horizon >= step. Returns false on timeout; throws
  // PeerLostError when the head went away.
  bool wait_for_horizon(std::uint64_t step, std::chrono::milliseconds timeout);

  // Commands to apply before the step that produces `step`: those tagged
  // with `step`, plus any whose step already passed (counted as late), in
  // seq order.
  std::vector<SteeringCommand> poll(std::uint64_t step);

  // While paused the step counter is frozen. If a Resume or Terminate is
  // pending, returns every pending command up to and including the first one
  // in seq order; otherwise waits up to `timeout` and returns empty.
  std::vector<SteeringCommand> release_paused(std::chrono::milliseconds timeout);

  std::uint64_t late_count() const;
  std::uint64_t horizon() const;
  std::size_t pending() const;
  bool head_lost() const;
  int rank() const { return rank_; }

 private:
  void reader_loop();

  int rank_;
  net::Fd fd_;
  std::thread reader_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::uint64_t, SteeringCommand> pending_;  // by seq
  std::uint64_t horizon_ = 0;
  std::uint64_t late_ = 0;
  bool closed_ = false;
  bool head_lost_ = false;
  std::mutex send_mu_;
};

// Rank-side step boundary. Call before every step with the current step
// counter. Unpaused: waits until the horizon covers the next step, then
// applies the commands for it. Paused: blocks until a Resume or Terminate
// releases the frozen step, applying the released batch at that step.
// Returns early once `stop` reports true.
struct GateHooks {
  std::function<bool()> paused;
  std::function<bool()> stop;
  std::function<void(const SteeringCommand&, std::uint64_t step)> apply;
};
void before_step(SteerInbox& inbox, std::uint64_t current_step, const GateHooks& hooks,
                 std::chrono::milliseconds slice = std::chrono::milliseconds(100));

// One applied command as recorded by a rank.
struct AppliedEntry {
  std::uint64_t seq = 0;
  std::uint64_t step = 0;
  bool operator==(const AppliedEntry&) const = default;
};

// Text log, one "seq step kind [name value]" line per command.
std::string format_applied_log(const std::vector<AppliedEntry>& entries,
                               const std::vector<SteeringCommand>& commands);
std::vector<AppliedEntry> parse_applied_log(const std::string& text);

// Steering scripts: one `<step> <command> [args]` per line, `#` comments.
// Commands: set <name> <value> | pause | resume | terminate.
struct ScriptEntry {
  std::uint64_t step = 0;
  CommandBody body;
  bool operator==(const ScriptEntry&) const = default;
};
std::vector<ScriptEntry> parse_script(const std::string& text);
std::vector<ScriptEntry> load_script(const std::string& path);

}  // namespace insitu::steer
