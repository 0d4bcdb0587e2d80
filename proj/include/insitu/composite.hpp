#pragma once

// Sort-last compositing of per-rank renderings: pairwise depth and VDI
// merges, and a binary-swap exchange over a MessageEndpoint followed by a
// gather of the owned regions at rank 0.
//
// Regions are contiguous ranges of row-major pixel indices. At stage s a rank
// trades with rank ^ (1 << s); the rank whose bit s is clear keeps the lower
// half of the current range and acts as the `a` (front on ties) input, so the
// result equals a serial left fold over ranks 0..k-1.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <optional>

#include "insitu/comm.hpp"
#include "insitu/render.hpp"

namespace insitu::composite {

using render::DepthImage;
using render::Vdi;

// rgba8 + float depth per pixel on the wire.
inline constexpr std::size_t kPixelBytes = 8;
inline constexpr std::uint8_t kGatherStage = 0xFF;
inline constexpr comm::Tag kSwapTag = 0x4253;    // "BS"
inline constexpr comm::Tag kGatherTag = 0x4247;  // "BG"

struct PixelRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const PixelRange&) const = default;
};

struct Topology {
  int rank_count = 1;
  int stages = 0;

  // Throws ConfigError unless k is a power of two >= 1.
  static Topology make(int k);
  int partner(int rank, int stage) const { return rank ^ (1 << stage); }
  bool keeps_lower(int rank, int stage) const { return ((rank >> stage) & 1) == 0; }
  // Range a rank holds before `stage` runs (stage == stages gives the owned
  // range).
  PixelRange range_before(int rank, int stage, std::size_t pixels) const;
  PixelRange owned(int rank, std::size_t pixels) const { return range_before(rank, stages, pixels); }
};

// Per pixel the smaller depth wins; equal depths keep `a`.
DepthImage composite_depth_pair(const DepthImage& a, const DepthImage& b);

// Per pixel merge of both supersegment lists by front depth (ties: `a`
// first). Overlapping segments are composited together; lists longer than
// S_max fold their tail into the last segment.
Vdi merge_vdi_pair(const Vdi& a, const Vdi& b);

struct ExchangeOptions {
  std::uint64_t frame_seq = 0;
  std::chrono::milliseconds timeout{2000};
};

struct ExchangeStats {
  std::uint64_t swap_payload_bytes = 0;    // binary-swap stages only
  std::uint64_t gather_payload_bytes = 0;
};

// Collective over every rank of `ep`. Returns the assembled frame on rank 0
// and nullopt elsewhere. A lost or silent partner raises CompositeError; a
// stage or frame number from the future raises ProtocolError. Messages left
// over from an aborted earlier frame are discarded.
std::optional<DepthImage> binary_swap(const DepthImage& local, const Topology& topo, comm::MessageEndpoint& ep,
                                      const ExchangeOptions& opts, ExchangeStats* stats = nullptr);
std::optional<Vdi> binary_swap(const Vdi& local, const Topology& topo, comm::MessageEndpoint& ep,
                               const ExchangeOptions& opts, ExchangeStats* stats = nullptr);

struct StageHeader {
  std::uint8_t stage = 0;
  std::uint16_t sender = 0;
  std::uint64_t frame_seq = 0;
  std::uint32_t payload_len = 0;
};
inline constexpr std::size_t kStageHeaderBytes = 4 + 1 + 2 + 8 + 4;

wire::Bytes encode_stage(const StageHeader& h, std::span<const std::uint8_t> payload);
// Returns the header and a view of the payload inside `message`.
StageHeader decode_stage(std::span<const std::uint8_t> message, std::span<const std::uint8_t>& payload);

}  // namespace insitu::composite
