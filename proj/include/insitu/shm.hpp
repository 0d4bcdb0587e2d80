#pragma once

// Single-writer / single-reader particle snapshot channel over named POSIX
// shared memory.
//
// Every segment starts with a fixed 64-byte little-endian header followed by
// the payload: `particle_count` records of 24 bytes (position xyz, velocity
// xyz, float32). The writer brackets each publish with two increments of
// `generation` (odd while writing), so it never waits for the reader; the
// reader copies and re-checks the generation, retrying a bounded number of
// times. When a snapshot does not fit, the writer creates a successor segment
// at epoch+1 with twice the needed capacity, publishes there, and marks the
// old header superseded. Retired segments are unlinked once their reader has
// left or its lease went stale.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "insitu/errors.hpp"
#include "insitu/sim.hpp"

namespace insitu::shm {

using sim::ParticleRecord;
using sim::ParticleSnapshot;

inline constexpr std::size_t kHeaderBytes = 64;
inline constexpr std::size_t kRecordBytes = sizeof(ParticleRecord);
inline constexpr char kMagic[8] = {'I', 'N', 'S', 'I', 'T', 'U', '0', '1'};
inline constexpr std::uint32_t kLayoutVersion = 1;

inline constexpr std::uint32_t kFlagSuperseded = 1u << 0;
inline constexpr std::uint32_t kFlagTerminated = 1u << 1;

inline constexpr int kDefaultReadRetries = 16;
inline constexpr std::chrono::milliseconds kDefaultReapTimeout{5000};

// Reader lease word: 0 = never attached, 1 = detached, otherwise the
// reader's last heartbeat in CLOCK_MONOTONIC milliseconds (mod 2^32, >= 2).
inline constexpr std::uint32_t kLeaseNever = 0;
inline constexpr std::uint32_t kLeaseDetached = 1;

struct SegmentHeader {
  char magic[8];                   // 0
  std::uint32_t layout_version;    // 8
  std::uint32_t reader_lease;      // 12
  std::uint64_t generation;        // 16
  std::uint64_t capacity_bytes;    // 24
  std::uint64_t particle_count;    // 32
  std::uint64_t sim_step;          // 40
  double sim_time;                 // 48
  std::uint32_t flags;             // 56
  std::uint32_t successor_epoch;   // 60
};
static_assert(sizeof(SegmentHeader) == kHeaderBytes);

struct SegmentName {
  int rank = 0;
  std::uint32_t epoch = 0;
  // Optional run-scoped prefix, for running several systems on one host.
  std::string scope;

  // "insitu.r{rank}.e{epoch}", or "{scope}.insitu.r{rank}.e{epoch}".
  std::string str() const;
  std::string os_name() const { return "/" + str(); }
  SegmentName successor() const { return {rank, epoch + 1, scope}; }
  static SegmentName parse(const std::string& text);

  bool operator==(const SegmentName&) const = default;
};

// Smallest power of two >= 2 * (header + count * 24).
std::size_t grown_capacity(std::size_t particle_count);

class SegmentExistsError : public Error {
 public:
  using Error::Error;
};

struct PublishResult {
  enum class Outcome { ok, grew };
  Outcome outcome = Outcome::ok;
  SegmentName segment;  // where the snapshot now lives
};

struct WriterOptions {
  std::chrono::milliseconds reap_timeout = kDefaultReapTimeout;
};

class SegmentWriter {
 public:
  // Throws SegmentExistsError on a name collision, ArgumentError when the
  // capacity cannot hold one record, ResourceError on OS failure.
  static SegmentWriter create(const SegmentName& name, std::size_t capacity_bytes,
                              WriterOptions opts = {});

  SegmentWriter(SegmentWriter&&) noexcept;
  SegmentWriter& operator=(SegmentWriter&&) noexcept;
  ~SegmentWriter();

  PublishResult publish(const ParticleSnapshot& snap);
  PublishResult publish(std::span<const ParticleRecord> records, std::uint64_t sim_step,
                        double sim_time);

  // Sets the producer-terminated flag; readers see `terminated` once drained.
  void terminate();
  // Unlinks retired segments whose reader has detached or gone stale.
  // Returns how many retired segments are still held.
  std::size_t reap();
  // Terminates and unlinks every segment this writer created.
  void close();

  const SegmentName& current() const;
  std::size_t capacity() const;
  std::uint64_t generation() const;
  std::size_t retired_count() const;

 private:
  struct Segment;
  SegmentWriter();
  std::vector<Segment> retired_;
  std::unique_ptr<Segment> live_;
  WriterOptions opts_;
};

struct AcquireResult {
  enum class Kind { fresh, unchanged, superseded, terminated };
  Kind kind = Kind::unchanged;
  ParticleSnapshot snapshot;     // valid when fresh
  SegmentName successor;         // valid when superseded
};

class SegmentReader {
 public:
  // Throws NotFoundError if absent, IncompatibleError on bad magic/version.
  static SegmentReader attach(const SegmentName& name);

  SegmentReader(SegmentReader&&) noexcept;
  SegmentReader& operator=(SegmentReader&&) noexcept;
  ~SegmentReader();

  AcquireResult acquire(int max_retries = kDefaultReadRetries);

  // Zero-copy path: calls `fn(records, sim_step, sim_time)` on the shared
  // payload in place, then validates the generation. Returns false (and the
  // caller must discard whatever fn derived) if the writer intervened.
  template <typename Fn>
  bool view(Fn&& fn);

  // Header words as of now, unvalidated; also refreshes the reader lease.
  struct Status {
    std::uint64_t generation = 0;
    std::uint32_t flags = 0;
    std::uint32_t successor_epoch = 0;
  };
  Status status();

  void detach();
  bool attached() const;
  const SegmentName& name() const { return name_; }
  std::uint64_t last_seen_generation() const { return last_seen_; }
  // Latest published step according to the header (unvalidated peek).
  std::uint64_t peek_sim_step() const;

 private:
  SegmentReader() = default;
  bool begin_view(std::uint64_t& gen, std::span<const ParticleRecord>& records,
                  std::uint64_t& step, double& time) const;
  bool end_view(std::uint64_t gen);
  void heartbeat();

  SegmentName name_;
  const std::uint8_t* base_ = nullptr;  // read-only mapping of the segment
  std::size_t length_ = 0;
  std::uint8_t* lease_page_ = nullptr;  // writable mapping of the header page
  std::size_t lease_length_ = 0;
  std::uint64_t last_seen_ = 0;
};

template <typename Fn>
bool SegmentReader::view(Fn&& fn) {
  std::uint64_t gen = 0;
  std::span<const ParticleRecord> records;
  std::uint64_t step = 0;
  double time = 0.0;
  if (!begin_view(gen, records, step, time)) return false;
  fn(records, step, time);
  return end_view(gen);
}

// Follows superseded links transparently and keeps the newest snapshot.
class SnapshotFollower {
 public:
  explicit SnapshotFollower(SegmentName first) : next_(std::move(first)) {}

  // Polls once. Returns the new snapshot if there is one. Attaching is
  // retried lazily, so the follower may be created before the writer.
  std::optional<ParticleSnapshot> poll();
  bool terminated() const { return terminated_; }
  // Epochs attached so far, in order.
  const std::vector<std::uint32_t>& epochs() const { return epochs_; }
  std::uint64_t peek_sim_step() const;
  void detach();

  // Zero-copy counterpart of poll(): follows the chain to the newest
  // segment and runs fn(records, sim_step, sim_time) on its payload in
  // place, whether or not it changed since the last call. Returns false when
  // no segment exists yet or every attempt was torn; fn may have run on a
  // torn view then and its result must be discarded.
  template <typename Fn>
  bool view(Fn&& fn, int max_retries = kDefaultReadRetries);

 private:
  SegmentReader* settle();

  SegmentName next_;
  std::optional<SegmentReader> reader_;
  std::vector<std::uint32_t> epochs_;
  bool terminated_ = false;
};

template <typename Fn>
bool SnapshotFollower::view(Fn&& fn, int max_retries) {
  SegmentReader* r = settle();
  if (!r) return false;
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    if (r->view(fn)) return true;
  }
  return false;
}

// Header copy without attaching as the reader (for shmdump).
SegmentHeader read_header(const SegmentName& name);
SegmentHeader read_header(const std::string& os_name);
std::string format_header(const SegmentHeader& h);

// Names (without the leading '/') of live segments under /dev/shm whose name
// starts with `prefix`.
std::vector<std::string> list_segments(const std::string& prefix = "insitu.");

}  // namespace insitu::shm
