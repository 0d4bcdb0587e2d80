#include "insitu/stream_wire.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>

#include "insitu/errors.hpp"

namespace insitu::stream {

namespace {

constexpr std::uint8_t kLiteral = 0x00;
constexpr std::size_t kMaxRun = 255;

bool same(const render::Rgba8& a, const render::Rgba8& b) { return a == b; }

void put_camera(wire::Writer& w, const render::CameraPose& c) {
  for (double v : c.position) w.f64(v);
  w.f64(c.orientation.w);
  w.f64(c.orientation.x);
  w.f64(c.orientation.y);
  w.f64(c.orientation.z);
  w.f64(c.vertical_fov);
  w.f64(c.near);
  w.f64(c.far);
}

render::CameraPose get_camera(wire::Reader& r) {
  render::CameraPose c;
  for (double& v : c.position) v = r.f64();
  c.orientation.w = r.f64();
  c.orientation.x = r.f64();
  c.orientation.y = r.f64();
  c.orientation.z = r.f64();
  c.vertical_fov = r.f64();
  c.near = r.f64();
  c.far = r.f64();
  return c;
}

std::uint16_t read_u16(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint16_t v;
  std::memcpy(&v, b.data() + at, 2);
  return v;
}

std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, b.data() + at, 4);
  return v;
}

void expect_consumed(const wire::Reader& r, const char* what) {
  if (r.remaining() != 0) throw ProtocolError(std::string("trailing bytes after ") + what);
}

}  // namespace

Encoding parse_encoding(const std::string& name) {
  if (name == "raw") return Encoding::raw;
  if (name == "rle") return Encoding::rle;
  if (name == "vdi") return Encoding::vdi;
  throw ArgumentError("unknown encoding '" + name + "' (raw, rle, vdi)");
}

std::string to_string(Encoding e) {
  switch (e) {
    case Encoding::raw:
      return "raw";
    case Encoding::rle:
      return "rle";
    case Encoding::vdi:
      return "vdi";
  }
  return "?";
}

wire::Bytes rle_encode(std::span<const render::Rgba8> pixels, int width, int height) {
  if (width < 0 || height < 0 || pixels.size() != static_cast<std::size_t>(width) * height) {
    throw ArgumentError("pixel count does not match dimensions");
  }
  wire::Writer w(pixels.size() * 2);
  for (int y = 0; y < height; ++y) {
    auto row = pixels.subspan(static_cast<std::size_t>(y) * width, width);
    std::size_t i = 0;
    auto run_at = [&](std::size_t at) {
      std::size_t n = 1;
      while (at + n < row.size() && n < kMaxRun && same(row[at + n], row[at])) ++n;
      return n;
    };
    while (i < row.size()) {
      std::size_t run = run_at(i);
      if (run >= 2) {
        w.u8(static_cast<std::uint8_t>(run));
        w.bytes(row[i].data(), 4);
        i += run;
        continue;
      }
      std::size_t start = i, len = 0;
      while (i < row.size() && len < kMaxRun && run_at(i) < 2) {
        ++i;
        ++len;
      }
      w.u8(kLiteral);
      w.u8(static_cast<std::uint8_t>(len));
      for (std::size_t k = start; k < start + len; ++k) w.bytes(row[k].data(), 4);
    }
  }
  return w.take();
}

std::vector<render::Rgba8> rle_decode(std::span<const std::uint8_t> payload, int width, int height) {
  std::vector<render::Rgba8> out;
  out.reserve(static_cast<std::size_t>(width) * height);
  wire::Reader r(payload);
  for (int y = 0; y < height; ++y) {
    std::size_t filled = 0;
    while (filled < static_cast<std::size_t>(width)) {
      std::uint8_t head = r.u8();
      std::size_t n;
      if (head == kLiteral) {
        n = r.u8();
        if (n == 0 || filled + n > static_cast<std::size_t>(width)) throw ProtocolError("bad RLE literal length");
        for (std::size_t k = 0; k < n; ++k) {
          auto b = r.bytes(4);
          out.push_back({b[0], b[1], b[2], b[3]});
        }
      } else {
        n = head;
        if (filled + n > static_cast<std::size_t>(width)) throw ProtocolError("RLE run crosses a row end");
        auto b = r.bytes(4);
        out.insert(out.end(), n, render::Rgba8{b[0], b[1], b[2], b[3]});
      }
      filled += n;
    }
  }
  expect_consumed(r, "RLE payload");
  return out;
}

wire::Bytes encode_payload(const render::DepthImage& image, Encoding encoding) {
  switch (encoding) {
    case Encoding::raw: {
      wire::Writer w(image.rgba.size() * 4);
      w.bytes(image.rgba.data(), image.rgba.size() * 4);
      return w.take();
    }
    case Encoding::rle:
      return rle_encode(image.rgba, image.size.width, image.size.height);
    case Encoding::vdi:
      throw ArgumentError("vdi encoding needs a VDI, not an image");
  }
  throw ArgumentError("unsupported encoding id " + std::to_string(static_cast<int>(encoding)));
}

wire::Bytes encode_payload(const render::Vdi& vdi) { return render::encode_vdi(vdi); }

wire::Bytes encode_frame_header(const FrameMessage& f, std::uint32_t payload_len) {
  if (static_cast<std::uint8_t>(f.encoding) > 2) {
    throw ArgumentError("unsupported encoding id " + std::to_string(static_cast<int>(f.encoding)));
  }
  wire::Writer w(kFrameHeaderBytes);
  w.magic("FRM0");
  w.u64(f.frame_seq);
  w.u64(f.sim_step);
  w.u64(f.capture_ts_us);
  w.u16(f.width);
  w.u16(f.height);
  w.u8(static_cast<std::uint8_t>(f.encoding));
  w.u32(payload_len);
  return w.take();
}

wire::Bytes encode_frame(const FrameMessage& f) {
  if (f.payload.size() > std::numeric_limits<std::uint32_t>::max()) throw ArgumentError("frame payload too large");
  wire::Bytes out = encode_frame_header(f, static_cast<std::uint32_t>(f.payload.size()));
  out.insert(out.end(), f.payload.begin(), f.payload.end());
  return out;
}

FrameMessage decode_frame(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic("FRM0");
  FrameMessage f;
  f.frame_seq = r.u64();
  f.sim_step = r.u64();
  f.capture_ts_us = r.u64();
  f.width = r.u16();
  f.height = r.u16();
  auto enc = r.u8();
  if (enc > 2) throw ProtocolError("unknown frame encoding " + std::to_string(enc));
  f.encoding = static_cast<Encoding>(enc);
  auto len = r.u32();
  auto p = r.bytes(len);
  f.payload.assign(p.begin(), p.end());
  expect_consumed(r, "frame");
  if (f.encoding == Encoding::raw && len != static_cast<std::size_t>(f.width) * f.height * 4) {
    throw ProtocolError("raw frame payload does not match its dimensions");
  }
  return f;
}

std::vector<render::Rgba8> frame_pixels(const FrameMessage& f) {
  switch (f.encoding) {
    case Encoding::raw: {
      if (f.payload.size() != static_cast<std::size_t>(f.width) * f.height * 4) {
        throw ProtocolError("raw frame payload does not match its dimensions");
      }
      std::vector<render::Rgba8> px(static_cast<std::size_t>(f.width) * f.height);
      std::memcpy(px.data(), f.payload.data(), f.payload.size());
      return px;
    }
    case Encoding::rle:
      return rle_decode(f.payload, f.width, f.height);
    case Encoding::vdi:
      break;
  }
  throw ArgumentError("frame carries a VDI, not pixels");
}

render::Vdi frame_vdi(const FrameMessage& f) {
  if (f.encoding != Encoding::vdi) throw ArgumentError("frame does not carry a VDI");
  auto v = render::decode_vdi(f.payload);
  if (v.size.width != f.width || v.size.height != f.height) {
    throw ProtocolError("VDI dimensions differ from the frame header");
  }
  return v;
}

wire::Bytes encode_stats(const StatsMessage& s) {
  wire::Writer w(32 + s.rank_states.size());
  w.magic("STAT");
  w.f64(s.frames_per_second);
  w.f64(s.sim_steps_per_second);
  w.f64(s.roundtrip_ms ? *s.roundtrip_ms : std::numeric_limits<double>::quiet_NaN());
  if (s.rank_states.size() > 0xFFFF) throw ArgumentError("too many ranks for a stats message");
  w.u16(static_cast<std::uint16_t>(s.rank_states.size()));
  for (auto st : s.rank_states) w.u8(static_cast<std::uint8_t>(st));
  return w.take();
}

StatsMessage decode_stats(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic("STAT");
  StatsMessage s;
  s.frames_per_second = r.f64();
  s.sim_steps_per_second = r.f64();
  double rt = r.f64();
  if (!std::isnan(rt)) s.roundtrip_ms = rt;
  auto n = r.u16();
  for (int i = 0; i < n; ++i) {
    auto st = r.u8();
    if (st > 1) throw ProtocolError("unknown rank state " + std::to_string(st));
    s.rank_states.push_back(static_cast<RankHealth>(st));
  }
  expect_consumed(r, "stats");
  return s;
}

wire::Bytes encode_reply(const SteerReply& rep) {
  if (rep.reason.size() > 0xFFFF) throw ArgumentError("reason too long");
  wire::Writer w(23 + rep.reason.size());
  w.magic("SRSP");
  w.u8(rep.accepted ? 1 : 0);
  w.u64(rep.seq);
  w.u64(rep.apply_at_step);
  w.u16(static_cast<std::uint16_t>(rep.reason.size()));
  w.bytes(rep.reason.data(), rep.reason.size());
  return w.take();
}

SteerReply decode_reply(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic("SRSP");
  SteerReply rep;
  rep.accepted = r.u8() != 0;
  rep.seq = r.u64();
  rep.apply_at_step = r.u64();
  rep.reason = r.string(r.u16());
  expect_consumed(r, "steer reply");
  return rep;
}

RenderMode parse_mode(const std::string& name) {
  if (name == "opaque") return RenderMode::opaque;
  if (name == "vdi") return RenderMode::vdi;
  throw ArgumentError("unknown render mode '" + name + "' (opaque, vdi)");
}

std::string to_string(RenderMode m) { return m == RenderMode::vdi ? "vdi" : "opaque"; }

VizParam VizParam::set_camera(const render::CameraPose& c) {
  VizParam v;
  v.kind = VizKind::camera;
  v.camera = c;
  return v;
}

VizParam VizParam::set_color_range(double vmin, double vmax) {
  VizParam v;
  v.kind = VizKind::color_range;
  v.vmin = vmin;
  v.vmax = vmax;
  return v;
}

VizParam VizParam::set_radius(double r) {
  VizParam v;
  v.kind = VizKind::radius;
  v.radius = r;
  return v;
}

VizParam VizParam::set_mode(RenderMode m) {
  VizParam v;
  v.kind = VizKind::mode;
  v.mode = m;
  return v;
}

wire::Bytes encode_viz(const VizParam& v) {
  wire::Writer w(88);
  w.magic("VIZP");
  w.u8(static_cast<std::uint8_t>(v.kind));
  switch (v.kind) {
    case VizKind::camera:
      put_camera(w, v.camera);
      break;
    case VizKind::color_range:
      w.f64(v.vmin);
      w.f64(v.vmax);
      break;
    case VizKind::radius:
      w.f64(v.radius);
      break;
    case VizKind::mode:
      w.u8(static_cast<std::uint8_t>(v.mode));
      break;
  }
  return w.take();
}

VizParam decode_viz(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic("VIZP");
  VizParam v;
  auto kind = r.u8();
  switch (kind) {
    case 0:
      v = VizParam::set_camera(get_camera(r));
      break;
    case 1: {
      double a = r.f64();
      double b = r.f64();
      v = VizParam::set_color_range(a, b);
      break;
    }
    case 2:
      v = VizParam::set_radius(r.f64());
      break;
    case 3: {
      auto m = r.u8();
      if (m > 1) throw ProtocolError("unknown render mode " + std::to_string(m));
      v = VizParam::set_mode(static_cast<RenderMode>(m));
      break;
    }
    default:
      throw ProtocolError("unknown viz parameter kind " + std::to_string(kind));
  }
  expect_consumed(r, "viz parameter");
  return v;
}

void apply_viz(ViewParams& view, const VizParam& v) {
  switch (v.kind) {
    case VizKind::camera:
      v.camera.validate();
      view.camera = v.camera;
      return;
    case VizKind::color_range:
      if (!std::isfinite(v.vmin) || !std::isfinite(v.vmax) || !(v.vmin < v.vmax)) {
        throw ArgumentError("color range needs finite vmin < vmax");
      }
      view.cmap = {v.vmin, v.vmax};
      return;
    case VizKind::radius:
      if (!std::isfinite(v.radius) || !(v.radius > 0)) throw ArgumentError("radius must be positive");
      view.radius = v.radius;
      return;
    case VizKind::mode:
      view.mode = v.mode;
      return;
  }
}

wire::Bytes encode_echo(const Echo& e) {
  wire::Writer w(12);
  w.magic("ECHO");
  w.u64(e.capture_ts_us);
  return w.take();
}

Echo decode_echo(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic("ECHO");
  Echo e{r.u64()};
  expect_consumed(r, "echo");
  return e;
}

std::optional<std::size_t> message_length(std::span<const std::uint8_t> b) {
  if (b.size() < 4) return std::nullopt;
  std::string_view m(reinterpret_cast<const char*>(b.data()), 4);
  auto need = [&](std::size_t n) { return b.size() >= n; };
  if (m == "FRM0") {
    if (!need(kFrameHeaderBytes)) return std::nullopt;
    return kFrameHeaderBytes + read_u32(b, 33);
  }
  if (m == "STAT") {
    if (!need(30)) return std::nullopt;
    return 30 + static_cast<std::size_t>(read_u16(b, 28));
  }
  if (m == "STER") {
    if (!need(23)) return std::nullopt;
    return 23 + static_cast<std::size_t>(read_u16(b, 21)) + 8;
  }
  if (m == "SRSP") {
    if (!need(23)) return std::nullopt;
    return 23 + static_cast<std::size_t>(read_u16(b, 21));
  }
  if (m == "VIZP") {
    if (!need(5)) return std::nullopt;
    switch (b[4]) {
      case 0:
        return 5 + 80;
      case 1:
        return 5 + 16;
      case 2:
        return 5 + 8;
      case 3:
        return 5 + 1;
      default:
        throw ProtocolError("unknown viz parameter kind " + std::to_string(b[4]));
    }
  }
  if (m == "ECHO") return 12;
  if (m == "ISTR") return 4;
  throw ProtocolError("unknown message magic '" + std::string(m) + "'");
}

Message decode_message(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw ProtocolError("truncated message");
  std::string_view m(reinterpret_cast<const char*>(bytes.data()), 4);
  if (m == "FRM0") return decode_frame(bytes);
  if (m == "STAT") return decode_stats(bytes);
  if (m == "STER") {
    wire::Reader r(bytes);
    auto c = steer::decode_command(r);
    expect_consumed(r, "steering command");
    return c;
  }
  if (m == "SRSP") return decode_reply(bytes);
  if (m == "VIZP") return decode_viz(bytes);
  if (m == "ECHO") return decode_echo(bytes);
  throw ProtocolError("unknown message magic '" + std::string(m) + "'");
}

double LatencyTracker::record(std::uint64_t echoed_ts_us, std::uint64_t now) {
  double ms = now > echoed_ts_us ? static_cast<double>(now - echoed_ts_us) / 1000.0 : 0.0;
  last_ms_ = ms;
  last_at_us_ = now;
  return ms;
}

std::optional<double> LatencyTracker::latest(std::uint64_t now) const {
  if (!last_ms_ || (now > last_at_us_ && now - last_at_us_ > stale_after_us_)) return std::nullopt;
  return last_ms_;
}

std::uint64_t now_us() {
  return static_cast<std::uint64_t>(
      std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

}  // namespace insitu::stream
