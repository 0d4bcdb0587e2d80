#pragma once

// Messages between the head's stream server and remote clients. All fields
// little-endian; every message starts with a 4-byte magic and is
// self-delimiting, so the same bytes travel over a raw TCP stream or one
// message per WebSocket binary frame.
//
//   FRM0  frame_seq u64, sim_step u64, capture_ts_us u64, width u16,
//         height u16, encoding u8, payload_len u32, payload        (37 + n)
//   STAT  fps f64, sim_steps_per_second f64, roundtrip_ms f64 (NaN when
//         absent), rank_count u16, rank_count x state u8 (0 ok, 1 lost)
//   STER  steering command (seq and apply_at_step are ignored inbound)
//   SRSP  accepted u8, seq u64, apply_at_step u64, reason_len u16, reason
//   VIZP  kind u8, then per kind: 0 camera (10 f64: position xyz,
//         orientation wxyz, vertical_fov, near, far), 1 color range
//         (vmin f64, vmax f64), 2 radius f64, 3 mode u8 (0 opaque, 1 vdi)
//   ECHO  capture_ts_us u64 echoed back by the client
//   ISTR  (no body) first bytes of a raw-TCP client connection

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "insitu/render.hpp"
#include "insitu/steering_command.hpp"
#include "insitu/wire.hpp"

namespace insitu::stream {

enum class Encoding : std::uint8_t { raw = 0, rle = 1, vdi = 2 };
Encoding parse_encoding(const std::string& name);
std::string to_string(Encoding e);

inline constexpr std::size_t kFrameHeaderBytes = 37;

struct FrameMessage {
  std::uint64_t frame_seq = 0;
  std::uint64_t sim_step = 0;
  std::uint64_t capture_ts_us = 0;
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  Encoding encoding = Encoding::raw;
  wire::Bytes payload;
  bool operator==(const FrameMessage&) const = default;
};

// Per-row run-length coding of an RGBA8 image. A run of 2..255 equal pixels
// is `count u8` + 4 bytes; anything else goes into literal blocks of
// `0x00, len u8 (1..255), len x 4 bytes`. Runs never cross rows.
wire::Bytes rle_encode(std::span<const render::Rgba8> pixels, int width, int height);
std::vector<render::Rgba8> rle_decode(std::span<const std::uint8_t> payload, int width, int height);

// Payload bytes for an image (raw or rle) or a VDI (the VDI file bytes).
wire::Bytes encode_payload(const render::DepthImage& image, Encoding encoding);
wire::Bytes encode_payload(const render::Vdi& vdi);

wire::Bytes encode_frame(const FrameMessage& frame);
// Header for `frame` with its payload appended separately (lets a server
// share one encoded payload between clients).
wire::Bytes encode_frame_header(const FrameMessage& frame, std::uint32_t payload_len);
FrameMessage decode_frame(std::span<const std::uint8_t> bytes);

// Pixels of a raw or rle frame; throws ProtocolError when the payload does
// not match the dimensions.
std::vector<render::Rgba8> frame_pixels(const FrameMessage& frame);
render::Vdi frame_vdi(const FrameMessage& frame);

enum class RankHealth : std::uint8_t { ok = 0, lost = 1 };

struct StatsMessage {
  double frames_per_second = 0;
  double sim_steps_per_second = 0;
  std::optional<double> roundtrip_ms;
  std::vector<RankHealth> rank_states;
  bool operator==(const StatsMessage&) const = default;
};
wire::Bytes encode_stats(const StatsMessage& s);
StatsMessage decode_stats(std::span<const std::uint8_t> bytes);

struct SteerReply {
  bool accepted = false;
  std::uint64_t seq = 0;
  std::uint64_t apply_at_step = 0;
  std::string reason;
  bool operator==(const SteerReply&) const = default;
};
wire::Bytes encode_reply(const SteerReply& r);
SteerReply decode_reply(std::span<const std::uint8_t> bytes);

enum class RenderMode : std::uint8_t { opaque = 0, vdi = 1 };
RenderMode parse_mode(const std::string& name);
std::string to_string(RenderMode m);

enum class VizKind : std::uint8_t { camera = 0, color_range = 1, radius = 2, mode = 3 };

struct VizParam {
  VizKind kind = VizKind::camera;
  render::CameraPose camera{};
  double vmin = 0, vmax = 0;
  double radius = 0;
  RenderMode mode = RenderMode::opaque;

  static VizParam set_camera(const render::CameraPose& c);
  static VizParam set_color_range(double vmin, double vmax);
  static VizParam set_radius(double r);
  static VizParam set_mode(RenderMode m);
  bool operator==(const VizParam&) const = default;
};
wire::Bytes encode_viz(const VizParam& v);
VizParam decode_viz(std::span<const std::uint8_t> bytes);

// Visualization state held at the head and shipped to every renderer.
struct ViewParams {
  render::CameraPose camera{};
  render::ColorMap cmap{};
  double radius = 0.3;
  RenderMode mode = RenderMode::opaque;
  bool operator==(const ViewParams&) const = default;
};
// Throws ArgumentError (state untouched) for out-of-range values.
void apply_viz(ViewParams& view, const VizParam& v);

struct Echo {
  std::uint64_t capture_ts_us = 0;
  bool operator==(const Echo&) const = default;
};
wire::Bytes encode_echo(const Echo& e);
Echo decode_echo(std::span<const std::uint8_t> bytes);

inline constexpr char kRawHello[5] = "ISTR";

using Message = std::variant<FrameMessage, StatsMessage, steer::SteeringCommand, SteerReply, VizParam, Echo>;

// Total length of the message at the start of `buffered`, or nullopt when
// more bytes are needed to tell. Throws ProtocolError on an unknown magic.
std::optional<std::size_t> message_length(std::span<const std::uint8_t> buffered);
Message decode_message(std::span<const std::uint8_t> bytes);

// Round trip from an echoed capture timestamp. Times are microseconds on the
// same monotonic clock as capture timestamps; measurements older than the
// stale limit are reported as absent.
class LatencyTracker {
 public:
  explicit LatencyTracker(std::uint64_t stale_after_us = 2'000'000) : stale_after_us_(stale_after_us) {}
  double record(std::uint64_t echoed_ts_us, std::uint64_t now_us);
  std::optional<double> latest(std::uint64_t now_us) const;

 private:
  std::uint64_t stale_after_us_;
  std::optional<double> last_ms_;
  std::uint64_t last_at_us_ = 0;
};

// Microseconds on the steady clock; the capture timestamp clock.
std::uint64_t now_us();

}  // namespace insitu::stream
