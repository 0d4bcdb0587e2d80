#include "insitu/composite.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "insitu/errors.hpp"
#include "insitu/log.hpp"

namespace insitu::composite {

using render::RayInterval;
using render::Supersegment;

Topology Topology::make(int k) {
  if (k < 1 || !std::has_single_bit(static_cast<unsigned>(k))) {
    throw ConfigError("compositing needs a power-of-two rank count, got " + std::to_string(k));
  }
  return {k, std::countr_zero(static_cast<unsigned>(k))};
}

PixelRange Topology::range_before(int rank, int stage, std::size_t pixels) const {
  PixelRange r{0, pixels};
  for (int s = 0; s < stage; ++s) {
    std::size_t mid = r.begin + r.size() / 2;
    if (keeps_lower(rank, s)) {
      r.end = mid;
    } else {
      r.begin = mid;
    }
  }
  return r;
}

// ----- pairwise operators -----

namespace {

void check_same_size(render::ImageSize a, render::ImageSize b) {
  if (a != b) {
    throw ArgumentError("image sizes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                        std::to_string(b.width) + "x" + std::to_string(b.height));
  }
}

std::vector<Supersegment> merge_pixel(std::span<const Supersegment> a, std::span<const Supersegment> b, int s_max) {
  if (b.empty()) return {a.begin(), a.end()};
  if (a.empty()) return {b.begin(), b.end()};
  std::vector<RayInterval> merged;
  merged.reserve(a.size() + b.size());
  std::size_t i = 0, j = 0;
  auto as_interval = [](const Supersegment& s) { return RayInterval{s.front, s.back, s.r, s.g, s.b, s.a}; };
  while (i < a.size() || j < b.size()) {
    if (j == b.size() || (i < a.size() && a[i].front <= b[j].front)) {
      merged.push_back(as_interval(a[i++]));
    } else {
      merged.push_back(as_interval(b[j++]));
    }
  }
  // A negative tolerance disables color-similarity merging: only overlap and
  // the S_max cap combine segments here.
  return render::merge_intervals(merged, s_max, -1.0);
}

void store_pixel(Vdi& vdi, std::size_t i, const std::vector<Supersegment>& segs) {
  vdi.counts[i] = static_cast<std::uint16_t>(segs.size());
  auto* dst = vdi.segments.data() + i * static_cast<std::size_t>(vdi.s_max);
  std::copy(segs.begin(), segs.end(), dst);
  std::fill(dst + segs.size(), dst + vdi.s_max, Supersegment{});
}

}  // namespace

DepthImage composite_depth_pair(const DepthImage& a, const DepthImage& b) {
  check_same_size(a.size, b.size);
  DepthImage out = a;
  for (std::size_t i = 0; i < out.rgba.size(); ++i) {
    if (b.depth[i] < a.depth[i]) {
      out.rgba[i] = b.rgba[i];
      out.depth[i] = b.depth[i];
    }
  }
  return out;
}

Vdi merge_vdi_pair(const Vdi& a, const Vdi& b) {
  check_same_size(a.size, b.size);
  if (!(a.camera == b.camera)) throw ArgumentError("VDIs were built for different cameras");
  if (a.s_max != b.s_max) throw ArgumentError("VDIs have different S_max");
  Vdi out(a.size, a.s_max, a.camera);
  for (std::size_t i = 0; i < a.counts.size(); ++i) store_pixel(out, i, merge_pixel(a.pixel(i), b.pixel(i), a.s_max));
  return out;
}

// ----- framing -----

wire::Bytes encode_stage(const StageHeader& h, std::span<const std::uint8_t> payload) {
  wire::Writer w(kStageHeaderBytes + payload.size());
  w.magic("BSWP");
  w.u8(h.stage);
  w.u16(h.sender);
  w.u64(h.frame_seq);
  w.u32(static_cast<std::uint32_t>(payload.size()));
  w.bytes(payload);
  return w.take();
}

StageHeader decode_stage(std::span<const std::uint8_t> message, std::span<const std::uint8_t>& payload) {
  wire::Reader r(message);
  r.expect_magic("BSWP");
  StageHeader h;
  h.stage = r.u8();
  h.sender = r.u16();
  h.frame_seq = r.u64();
  h.payload_len = r.u32();
  if (r.remaining() != h.payload_len) throw ProtocolError("stage payload length does not match its header");
  payload = r.bytes(h.payload_len);
  return h;
}

// ----- exchange -----

namespace {

// Fragment codecs for the two image kinds.
struct ImageOps {
  static wire::Bytes encode(const DepthImage& img, PixelRange r) {
    wire::Writer w(r.size() * kPixelBytes);
    for (std::size_t i = r.begin; i < r.end; ++i) {
      w.bytes(img.rgba[i].data(), 4);
      w.f32(img.depth[i]);
    }
    return w.take();
  }
  static void check(std::span<const std::uint8_t> payload, PixelRange r) {
    if (payload.size() != r.size() * kPixelBytes) throw ProtocolError("image fragment has the wrong size");
  }
  // own_is_a: this rank's pixels win depth ties.
  static void combine(DepthImage& img, PixelRange r, std::span<const std::uint8_t> payload, bool own_is_a) {
    check(payload, r);
    wire::Reader rd(payload);
    for (std::size_t i = r.begin; i < r.end; ++i) {
      auto c = rd.bytes(4);
      float d = rd.f32();
      bool take = own_is_a ? d < img.depth[i] : !(img.depth[i] < d);
      if (take) {
        std::memcpy(img.rgba[i].data(), c.data(), 4);
        img.depth[i] = d;
      }
    }
  }
  static void place(DepthImage& img, PixelRange r, std::span<const std::uint8_t> payload) {
    check(payload, r);
    wire::Reader rd(payload);
    for (std::size_t i = r.begin; i < r.end; ++i) {
      std::memcpy(img.rgba[i].data(), rd.bytes(4).data(), 4);
      img.depth[i] = rd.f32();
    }
  }
  static std::size_t pixels(const DepthImage& img) { return img.rgba.size(); }
};

struct VdiOps {
  static wire::Bytes encode(const Vdi& vdi, PixelRange r) {
    wire::Writer w(r.size() * 2);
    for (std::size_t i = r.begin; i < r.end; ++i) w.u16(vdi.counts[i]);
    for (std::size_t i = r.begin; i < r.end; ++i) {
      for (const auto& s : vdi.pixel(i)) {
        w.f32(s.front);
        w.f32(s.back);
        w.f32(s.r);
        w.f32(s.g);
        w.f32(s.b);
        w.f32(s.a);
      }
    }
    return w.take();
  }
  template <typename Fn>
  static void decode(const Vdi& like, PixelRange r, std::span<const std::uint8_t> payload, Fn&& fn) {
    wire::Reader rd(payload);
    std::vector<std::uint16_t> counts(r.size());
    for (auto& c : counts) {
      c = rd.u16();
      if (c > like.s_max) throw ProtocolError("VDI fragment count exceeds S_max");
    }
    std::vector<Supersegment> segs;
    for (std::size_t k = 0; k < counts.size(); ++k) {
      segs.resize(counts[k]);
      for (auto& s : segs) s = {rd.f32(), rd.f32(), rd.f32(), rd.f32(), rd.f32(), rd.f32()};
      fn(r.begin + k, segs);
    }
    if (rd.remaining() != 0) throw ProtocolError("trailing bytes in VDI fragment");
  }
  static void combine(Vdi& vdi, PixelRange r, std::span<const std::uint8_t> payload, bool own_is_a) {
    decode(vdi, r, payload, [&](std::size_t i, const std::vector<Supersegment>& other) {
      auto own = vdi.pixel(i);
      std::vector<Supersegment> own_copy(own.begin(), own.end());
      auto merged = own_is_a ? merge_pixel(own_copy, other, vdi.s_max) : merge_pixel(other, own_copy, vdi.s_max);
      store_pixel(vdi, i, merged);
    });
  }
  static void place(Vdi& vdi, PixelRange r, std::span<const std::uint8_t> payload) {
    decode(vdi, r, payload, [&](std::size_t i, const std::vector<Supersegment>& segs) { store_pixel(vdi, i, segs); });
  }
  static std::size_t pixels(const Vdi& vdi) { return vdi.counts.size(); }
};

wire::Bytes receive_stage(comm::MessageEndpoint& ep, int peer, comm::Tag tag, std::uint8_t stage,
                          const ExchangeOptions& opts) {
  const auto deadline = std::chrono::steady_clock::now() + opts.timeout;
  for (;;) {
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    wire::Bytes msg;
    try {
      msg = ep.recv(peer, tag, std::max(left, std::chrono::milliseconds(0)));
    } catch (const PeerLostError& e) {
      throw CompositeError("compositing frame " + std::to_string(opts.frame_seq) + " stage " +
                           std::to_string(stage) + ": " + e.what());
    }
    std::span<const std::uint8_t> payload;
    StageHeader h = decode_stage(msg, payload);
    if (h.frame_seq < opts.frame_seq) {
      log::debug("dropping stale compositing message for frame ", h.frame_seq);
      continue;
    }
    if (h.frame_seq != opts.frame_seq || h.stage != stage || h.sender != peer) {
      throw ProtocolError("compositing message out of sequence: frame " + std::to_string(h.frame_seq) + " stage " +
                          std::to_string(h.stage) + " from rank " + std::to_string(h.sender) + ", expected frame " +
                          std::to_string(opts.frame_seq) + " stage " + std::to_string(stage) + " from rank " +
                          std::to_string(peer));
    }
    // Keep the payload bytes only.
    return wire::Bytes(payload.begin(), payload.end());
  }
}

template <typename Ops, typename Frame>
std::optional<Frame> run_binary_swap(const Frame& local, const Topology& topo, comm::MessageEndpoint& ep,
                                     const ExchangeOptions& opts, ExchangeStats* stats) {
  if (ep.size() != topo.rank_count) {
    throw ConfigError("topology has " + std::to_string(topo.rank_count) + " ranks but the endpoint has " +
                      std::to_string(ep.size()));
  }
  const int rank = ep.rank();
  const std::size_t pixels = Ops::pixels(local);
  Frame work = local;
  ExchangeStats counted;

  for (int s = 0; s < topo.stages; ++s) {
    const int peer = topo.partner(rank, s);
    const PixelRange cur = topo.range_before(rank, s, pixels);
    const PixelRange keep = topo.range_before(rank, s + 1, pixels);
    const PixelRange give = keep.begin == cur.begin ? PixelRange{keep.end, cur.end} : PixelRange{cur.begin, keep.begin};
    auto payload = Ops::encode(work, give);
    StageHeader h{static_cast<std::uint8_t>(s), static_cast<std::uint16_t>(rank), opts.frame_seq, 0};
    ep.send(peer, kSwapTag, encode_stage(h, payload));
    counted.swap_payload_bytes += payload.size();
    auto received = receive_stage(ep, peer, kSwapTag, static_cast<std::uint8_t>(s), opts);
    Ops::combine(work, keep, received, topo.keeps_lower(rank, s));
  }

  const PixelRange mine = topo.owned(rank, pixels);
  std::optional<Frame> out;
  if (rank != 0) {
    auto payload = Ops::encode(work, mine);
    StageHeader h{kGatherStage, static_cast<std::uint16_t>(rank), opts.frame_seq, 0};
    ep.send(0, kGatherTag, encode_stage(h, payload));
    counted.gather_payload_bytes += payload.size();
  } else {
    for (int r = 1; r < topo.rank_count; ++r) {
      auto received = receive_stage(ep, r, kGatherTag, kGatherStage, opts);
      Ops::place(work, topo.owned(r, pixels), received);
    }
    out = std::move(work);
  }
  if (stats) {
    stats->swap_payload_bytes += counted.swap_payload_bytes;
    stats->gather_payload_bytes += counted.gather_payload_bytes;
  }
  return out;
}

}  // namespace

std::optional<DepthImage> binary_swap(const DepthImage& local, const Topology& topo, comm::MessageEndpoint& ep,
                                      const ExchangeOptions& opts, ExchangeStats* stats) {
  return run_binary_swap<ImageOps>(local, topo, ep, opts, stats);
}

std::optional<Vdi> binary_swap(const Vdi& local, const Topology& topo, comm::MessageEndpoint& ep,
                               const ExchangeOptions& opts, ExchangeStats* stats) {
  return run_binary_swap<VdiOps>(local, topo, ep, opts, stats);
}

}  // namespace insitu::composite
