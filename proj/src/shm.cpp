#include "insitu/shm.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cerrno>
#include <cstddef>
#include <cstring>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <utility>

#include <time.h>

#include "insitu/errors.hpp"
#include "insitu/log.hpp"

namespace insitu::shm {

static_assert(offsetof(SegmentHeader, layout_version) == 8);
static_assert(offsetof(SegmentHeader, reader_lease) == 12);
static_assert(offsetof(SegmentHeader, generation) == 16);
static_assert(offsetof(SegmentHeader, capacity_bytes) == 24);
static_assert(offsetof(SegmentHeader, particle_count) == 32);
static_assert(offsetof(SegmentHeader, sim_step) == 40);
static_assert(offsetof(SegmentHeader, sim_time) == 48);
static_assert(offsetof(SegmentHeader, flags) == 56);
static_assert(offsetof(SegmentHeader, successor_epoch) == 60);

namespace {

template <typename T>
std::atomic_ref<T> atomic_at(const void* base, std::size_t offset) {
  auto* p = const_cast<T*>(reinterpret_cast<const T*>(static_cast<const std::uint8_t*>(base) + offset));
  return std::atomic_ref<T>(*p);
}

auto generation_of(const void* base) {
  return atomic_at<std::uint64_t>(base, offsetof(SegmentHeader, generation));
}
auto flags_of(const void* base) { return atomic_at<std::uint32_t>(base, offsetof(SegmentHeader, flags)); }
auto lease_of(const void* base) {
  return atomic_at<std::uint32_t>(base, offsetof(SegmentHeader, reader_lease));
}

std::uint32_t monotonic_ms() {
  timespec ts{};
  ::clock_gettime(CLOCK_MONOTONIC, &ts);
  auto ms = static_cast<std::uint64_t>(ts.tv_sec) * 1000u + static_cast<std::uint64_t>(ts.tv_nsec) / 1000000u;
  auto v = static_cast<std::uint32_t>(ms);
  return v < 2 ? 2 : v;
}

std::string errno_text() { return std::strerror(errno); }

struct Mapped {
  void* addr = nullptr;
  std::size_t length = 0;
};

Mapped map_fd(int fd, std::size_t length, int prot) {
  void* p = ::mmap(nullptr, length, prot, MAP_SHARED, fd, 0);
  if (p == MAP_FAILED) throw ResourceError("mmap: " + errno_text());
  return {p, length};
}

}  // namespace

std::string SegmentName::str() const {
  std::string base = "insitu.r" + std::to_string(rank) + ".e" + std::to_string(epoch);
  return scope.empty() ? base : scope + "." + base;
}

SegmentName SegmentName::parse(const std::string& text) {
  std::string t = text;
  if (!t.empty() && t.front() == '/') t.erase(0, 1);
  auto pos = t.rfind("insitu.r");
  if (pos == std::string::npos) throw ArgumentError("not a segment name: " + text);
  SegmentName n;
  if (pos > 0) {
    if (t[pos - 1] != '.') throw ArgumentError("not a segment name: " + text);
    n.scope = t.substr(0, pos - 1);
  }
  std::string rest = t.substr(pos + 8);
  auto dot = rest.find(".e");
  if (dot == std::string::npos) throw ArgumentError("not a segment name: " + text);
  try {
    std::size_t used = 0;
    n.rank = std::stoi(rest.substr(0, dot), &used);
    if (used != dot) throw std::invalid_argument("rank");
    std::string ep = rest.substr(dot + 2);
    n.epoch = static_cast<std::uint32_t>(std::stoul(ep, &used));
    if (used != ep.size()) throw std::invalid_argument("epoch");
  } catch (const std::logic_error&) {
    throw ArgumentError("not a segment name: " + text);
  }
  return n;
}

std::size_t grown_capacity(std::size_t particle_count) {
  std::size_t needed = kHeaderBytes + particle_count * kRecordBytes;
  return std::bit_ceil(2 * needed);
}

// ----- writer -----

struct SegmentWriter::Segment {
  SegmentName name;
  std::uint8_t* base = nullptr;
  std::size_t length = 0;
  bool unlinked = false;

  Segment() = default;
  Segment(Segment&& o) noexcept
      : name(std::move(o.name)), base(std::exchange(o.base, nullptr)),
        length(o.length), unlinked(o.unlinked) {}
  Segment& operator=(Segment&& o) noexcept {
    if (this != &o) {
      release();
      name = std::move(o.name);
      base = std::exchange(o.base, nullptr);
      length = o.length;
      unlinked = o.unlinked;
    }
    return *this;
  }
  ~Segment() { release(); }

  void unlink() {
    if (!unlinked) {
      ::shm_unlink(name.os_name().c_str());
      unlinked = true;
    }
  }
  void release() {
    if (base) {
      ::munmap(base, length);
      base = nullptr;
    }
  }
  SegmentHeader* header() const { return reinterpret_cast<SegmentHeader*>(base); }
  std::size_t payload_capacity() const { return (length - kHeaderBytes) / kRecordBytes; }

  static Segment create(const SegmentName& name, std::size_t capacity) {
    if (capacity < kHeaderBytes + kRecordBytes) {
      throw ArgumentError("segment capacity " + std::to_string(capacity) +
                          " is below header plus one record");
    }
    int fd = ::shm_open(name.os_name().c_str(), O_CREAT | O_EXCL | O_RDWR, 0600);
    if (fd < 0) {
      if (errno == EEXIST) throw SegmentExistsError("segment " + name.str() + " already exists");
      throw ResourceError("shm_open " + name.str() + ": " + errno_text());
    }
    Segment seg;
    seg.name = name;
    try {
      if (::ftruncate(fd, static_cast<off_t>(capacity)) != 0) {
        throw ResourceError("ftruncate " + name.str() + ": " + errno_text());
      }
      auto m = map_fd(fd, capacity, PROT_READ | PROT_WRITE);
      seg.base = static_cast<std::uint8_t*>(m.addr);
      seg.length = capacity;
    } catch (...) {
      ::close(fd);
      ::shm_unlink(name.os_name().c_str());
      seg.unlinked = true;
      throw;
    }
    ::close(fd);
    auto* h = seg.header();
    std::memset(h, 0, kHeaderBytes);
    std::memcpy(h->magic, kMagic, sizeof(kMagic));
    h->layout_version = kLayoutVersion;
    h->capacity_bytes = capacity;
    std::atomic_thread_fence(std::memory_order_release);
    return seg;
  }

  void write(std::span<const ParticleRecord> records, std::uint64_t step, double time) {
    auto gen = generation_of(base);
    const std::uint64_t g = gen.load(std::memory_order_relaxed);
    gen.store(g + 1, std::memory_order_relaxed);
    std::atomic_thread_fence(std::memory_order_release);
    atomic_at<std::uint64_t>(base, offsetof(SegmentHeader, particle_count))
        .store(records.size(), std::memory_order_relaxed);
    atomic_at<std::uint64_t>(base, offsetof(SegmentHeader, sim_step)).store(step, std::memory_order_relaxed);
    atomic_at<double>(base, offsetof(SegmentHeader, sim_time)).store(time, std::memory_order_relaxed);
    if (!records.empty()) std::memcpy(base + kHeaderBytes, records.data(), records.size_bytes());
    gen.store(g + 2, std::memory_order_release);
  }
};

SegmentWriter::SegmentWriter() = default;
SegmentWriter::SegmentWriter(SegmentWriter&&) noexcept = default;
SegmentWriter& SegmentWriter::operator=(SegmentWriter&& o) noexcept {
  if (this != &o) {
    close();
    retired_ = std::move(o.retired_);
    live_ = std::move(o.live_);
    opts_ = o.opts_;
  }
  return *this;
}

SegmentWriter::~SegmentWriter() { close(); }

SegmentWriter SegmentWriter::create(const SegmentName& name, std::size_t capacity_bytes,
                                    WriterOptions opts) {
  SegmentWriter w;
  w.opts_ = opts;
  w.live_ = std::make_unique<Segment>(Segment::create(name, capacity_bytes));
  return w;
}

PublishResult SegmentWriter::publish(const ParticleSnapshot& snap) {
  return publish(snap.records, snap.sim_step, snap.sim_time);
}

PublishResult SegmentWriter::publish(std::span<const ParticleRecord> records,
                                     std::uint64_t sim_step, double sim_time) {
  if (!live_) throw ArgumentError("publish on a closed writer");
  if (!retired_.empty()) reap();
  if (records.size() <= live_->payload_capacity()) {
    live_->write(records, sim_step, sim_time);
    return {PublishResult::Outcome::ok, live_->name};
  }
  SegmentName next = live_->name.successor();
  Segment grown = Segment::create(next, grown_capacity(records.size()));
  grown.write(records, sim_step, sim_time);
  auto* base = live_->base;
  atomic_at<std::uint32_t>(base, offsetof(SegmentHeader, successor_epoch))
      .store(next.epoch, std::memory_order_relaxed);
  flags_of(base).fetch_or(kFlagSuperseded, std::memory_order_release);
  log::debug("segment ", live_->name.str(), " superseded by ", next.str());
  retired_.push_back(std::move(*live_));
  *live_ = std::move(grown);
  return {PublishResult::Outcome::grew, next};
}

void SegmentWriter::terminate() {
  if (live_ && live_->base) flags_of(live_->base).fetch_or(kFlagTerminated, std::memory_order_release);
}

std::size_t SegmentWriter::reap() {
  const std::uint32_t now = monotonic_ms();
  const auto timeout = static_cast<std::uint32_t>(opts_.reap_timeout.count());
  std::size_t kept = 0;
  for (auto& seg : retired_) {
    if (seg.unlinked) continue;
    std::uint32_t lease = lease_of(seg.base).load(std::memory_order_acquire);
    bool gone = lease == kLeaseDetached ||
                (lease >= 2 && static_cast<std::uint32_t>(now - lease) > timeout);
    if (gone) {
      seg.unlink();
      seg.release();
    } else {
      ++kept;
    }
  }
  std::erase_if(retired_, [](const Segment& s) { return s.unlinked; });
  return kept;
}

void SegmentWriter::close() {
  if (live_ && live_->base) {
    terminate();
    live_->unlink();
    live_->release();
  }
  for (auto& seg : retired_) {
    seg.unlink();
    seg.release();
  }
  retired_.clear();
}

const SegmentName& SegmentWriter::current() const { return live_->name; }
std::size_t SegmentWriter::capacity() const { return live_->length; }
std::uint64_t SegmentWriter::generation() const {
  return generation_of(live_->base).load(std::memory_order_relaxed);
}
std::size_t SegmentWriter::retired_count() const { return retired_.size(); }

// ----- reader -----

SegmentReader SegmentReader::attach(const SegmentName& name) {
  int fd = ::shm_open(name.os_name().c_str(), O_RDWR, 0);
  if (fd < 0) {
    if (errno == ENOENT) throw NotFoundError("segment " + name.str() + " not found");
    throw ResourceError("shm_open " + name.str() + ": " + errno_text());
  }
  struct stat st {};
  if (::fstat(fd, &st) != 0 || static_cast<std::size_t>(st.st_size) < kHeaderBytes) {
    ::close(fd);
    throw IncompatibleError("segment " + name.str() + " is smaller than its header");
  }
  SegmentReader r;
  r.name_ = name;
  try {
    auto ro = map_fd(fd, static_cast<std::size_t>(st.st_size), PROT_READ);
    r.base_ = static_cast<const std::uint8_t*>(ro.addr);
    r.length_ = ro.length;
    auto rw = map_fd(fd, kHeaderBytes, PROT_READ | PROT_WRITE);
    r.lease_page_ = static_cast<std::uint8_t*>(rw.addr);
    r.lease_length_ = rw.length;
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::close(fd);
  std::atomic_thread_fence(std::memory_order_acquire);
  const auto* h = reinterpret_cast<const SegmentHeader*>(r.base_);
  if (std::memcmp(h->magic, kMagic, sizeof(kMagic)) != 0) {
    throw IncompatibleError("segment " + name.str() + " has a bad magic");
  }
  if (h->layout_version != kLayoutVersion) {
    throw IncompatibleError("segment " + name.str() + " has layout version " +
                            std::to_string(h->layout_version));
  }
  r.heartbeat();
  return r;
}

SegmentReader::SegmentReader(SegmentReader&& o) noexcept
    : name_(std::move(o.name_)),
      base_(std::exchange(o.base_, nullptr)),
      length_(o.length_),
      lease_page_(std::exchange(o.lease_page_, nullptr)),
      lease_length_(o.lease_length_),
      last_seen_(o.last_seen_) {}

SegmentReader& SegmentReader::operator=(SegmentReader&& o) noexcept {
  if (this != &o) {
    detach();
    name_ = std::move(o.name_);
    base_ = std::exchange(o.base_, nullptr);
    length_ = o.length_;
    lease_page_ = std::exchange(o.lease_page_, nullptr);
    lease_length_ = o.lease_length_;
    last_seen_ = o.last_seen_;
  }
  return *this;
}

SegmentReader::~SegmentReader() { detach(); }

bool SegmentReader::attached() const { return base_ != nullptr; }

void SegmentReader::heartbeat() {
  if (lease_page_) lease_of(lease_page_).store(monotonic_ms(), std::memory_order_release);
}

void SegmentReader::detach() {
  if (lease_page_) {
    lease_of(lease_page_).store(kLeaseDetached, std::memory_order_release);
    ::munmap(lease_page_, lease_length_);
    lease_page_ = nullptr;
  }
  if (base_) {
    ::munmap(const_cast<std::uint8_t*>(base_), length_);
    base_ = nullptr;
  }
}

std::uint64_t SegmentReader::peek_sim_step() const {
  if (!base_) return 0;
  return atomic_at<std::uint64_t>(base_, offsetof(SegmentHeader, sim_step)).load(std::memory_order_relaxed);
}

bool SegmentReader::begin_view(std::uint64_t& gen, std::span<const ParticleRecord>& records,
                               std::uint64_t& step, double& time) const {
  if (!base_) return false;
  gen = generation_of(base_).load(std::memory_order_acquire);
  if (gen & 1u) return false;
  auto count = atomic_at<std::uint64_t>(base_, offsetof(SegmentHeader, particle_count))
                   .load(std::memory_order_relaxed);
  step = atomic_at<std::uint64_t>(base_, offsetof(SegmentHeader, sim_step)).load(std::memory_order_relaxed);
  time = atomic_at<double>(base_, offsetof(SegmentHeader, sim_time)).load(std::memory_order_relaxed);
  const std::size_t fits = (length_ - kHeaderBytes) / kRecordBytes;
  if (count > fits) return false;
  records = {reinterpret_cast<const ParticleRecord*>(base_ + kHeaderBytes), static_cast<std::size_t>(count)};
  return true;
}

bool SegmentReader::end_view(std::uint64_t gen) {
  std::atomic_thread_fence(std::memory_order_acquire);
  bool ok = generation_of(base_).load(std::memory_order_relaxed) == gen;
  if (ok) last_seen_ = gen;
  return ok;
}

AcquireResult SegmentReader::acquire(int max_retries) {
  AcquireResult out;
  if (!base_) return out;
  heartbeat();
  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::uint64_t g1 = generation_of(base_).load(std::memory_order_acquire);
    if (g1 & 1u) continue;
    if (g1 == last_seen_) {
      std::uint32_t flags = flags_of(base_).load(std::memory_order_acquire);
      if (flags & kFlagSuperseded) {
        out.kind = AcquireResult::Kind::superseded;
        auto epoch = atomic_at<std::uint32_t>(base_, offsetof(SegmentHeader, successor_epoch))
                         .load(std::memory_order_relaxed);
        out.successor = {name_.rank, epoch, name_.scope};
      } else if (flags & kFlagTerminated) {
        out.kind = AcquireResult::Kind::terminated;
      }
      return out;
    }
    std::uint64_t gen = 0;
    std::span<const ParticleRecord> records;
    std::uint64_t step = 0;
    double time = 0.0;
    if (!begin_view(gen, records, step, time)) continue;
    out.snapshot.records.assign(records.begin(), records.end());
    out.snapshot.sim_step = step;
    out.snapshot.sim_time = time;
    if (end_view(gen)) {
      out.kind = AcquireResult::Kind::fresh;
      return out;
    }
  }
  out.snapshot = {};
  out.kind = AcquireResult::Kind::unchanged;
  return out;
}

// ----- follower -----

std::optional<ParticleSnapshot> SnapshotFollower::poll() {
  for (int hops = 0; hops < 64; ++hops) {
    if (!reader_) {
      try {
        reader_.emplace(SegmentReader::attach(next_));
        epochs_.push_back(next_.epoch);
      } catch (const NotFoundError&) {
        return std::nullopt;
      }
    }
    AcquireResult r = reader_->acquire();
    switch (r.kind) {
      case AcquireResult::Kind::fresh:
        return std::move(r.snapshot);
      case AcquireResult::Kind::unchanged:
        return std::nullopt;
      case AcquireResult::Kind::terminated:
        terminated_ = true;
        return std::nullopt;
      case AcquireResult::Kind::superseded:
        reader_->detach();
        reader_.reset();
        next_ = r.successor;
        break;
    }
  }
  return std::nullopt;
}

SegmentReader::Status SegmentReader::status() {
  Status st;
  if (!base_) return st;
  heartbeat();
  st.generation = generation_of(base_).load(std::memory_order_acquire);
  st.flags = flags_of(base_).load(std::memory_order_acquire);
  st.successor_epoch = atomic_at<std::uint32_t>(base_, offsetof(SegmentHeader, successor_epoch))
                           .load(std::memory_order_relaxed);
  return st;
}

// A superseded segment only ever holds older data than its successor, so
// the view path hops as soon as the flag is up.
SegmentReader* SnapshotFollower::settle() {
  for (int hops = 0; hops < 64; ++hops) {
    if (!reader_) {
      try {
        reader_.emplace(SegmentReader::attach(next_));
        epochs_.push_back(next_.epoch);
      } catch (const NotFoundError&) {
        return nullptr;
      }
    }
    auto st = reader_->status();
    if (st.flags & kFlagSuperseded) {
      next_ = {next_.rank, st.successor_epoch, next_.scope};
      reader_->detach();
      reader_.reset();
      continue;
    }
    if (st.flags & kFlagTerminated) terminated_ = true;
    return &*reader_;
  }
  return nullptr;
}

std::uint64_t SnapshotFollower::peek_sim_step() const {
  return reader_ ? reader_->peek_sim_step() : 0;
}

void SnapshotFollower::detach() { reader_.reset(); }

// ----- inspection -----

SegmentHeader read_header(const std::string& os_name) {
  int fd = ::shm_open(os_name.c_str(), O_RDONLY, 0);
  if (fd < 0) throw NotFoundError("segment " + os_name + " not found");
  struct stat st {};
  if (::fstat(fd, &st) != 0 || static_cast<std::size_t>(st.st_size) < kHeaderBytes) {
    ::close(fd);
    throw IncompatibleError("segment " + os_name + " is smaller than its header");
  }
  auto m = map_fd(fd, kHeaderBytes, PROT_READ);
  ::close(fd);
  SegmentHeader h;
  std::memcpy(&h, m.addr, kHeaderBytes);
  ::munmap(m.addr, m.length);
  return h;
}

SegmentHeader read_header(const SegmentName& name) { return read_header(name.os_name()); }

std::string format_header(const SegmentHeader& h) {
  std::ostringstream os;
  os << "magic            " << std::string(h.magic, sizeof(h.magic)) << '\n'
     << "layout_version   " << h.layout_version << '\n'
     << "reader_lease     " << h.reader_lease << '\n'
     << "generation       " << h.generation << (h.generation & 1 ? " (write in progress)" : "") << '\n'
     << "capacity_bytes   " << h.capacity_bytes << '\n'
     << "particle_count   " << h.particle_count << '\n'
     << "sim_step         " << h.sim_step << '\n'
     << "sim_time         " << std::setprecision(10) << h.sim_time << '\n'
     << "flags            0x" << std::hex << h.flags << std::dec
     << ((h.flags & kFlagSuperseded) ? " superseded" : "")
     << ((h.flags & kFlagTerminated) ? " terminated" : "") << '\n'
     << "successor_epoch  " << h.successor_epoch << '\n';
  return os.str();
}

std::vector<std::string> list_segments(const std::string& prefix) {
  std::vector<std::string> out;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator("/dev/shm", ec)) {
    auto name = entry.path().filename().string();
    if (name.rfind(prefix, 0) == 0) out.push_back(name);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace insitu::shm
