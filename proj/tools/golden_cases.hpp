#pragma once

// Deterministic inputs behind the checked-in wire and reprojection fixtures
// in tests/golden. make_golden writes them; test_golden re-derives them and
// compares byte for byte, so any layout change shows up as a diff.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "insitu/render.hpp"
#include "insitu/steering_command.hpp"
#include "insitu/stream_wire.hpp"

namespace insitu::golden {

using File = std::pair<std::string, wire::Bytes>;

inline constexpr render::ImageSize kSize{32, 24};

// Fixed scene: 40 spheres from a 64-bit LCG (no library distributions, so
// the values are the same everywhere).
inline std::vector<sim::ParticleRecord> scene() {
  std::uint64_t state = 0x9E3779B97F4A7C15ull;
  auto next = [&] {
    state = state * 6364136223846793005ull + 1442695040888963407ull;
    return static_cast<double>(state >> 11) / 9007199254740992.0;
  };
  std::vector<sim::ParticleRecord> out(40);
  for (auto& p : out) {
    for (int c = 0; c < 3; ++c) p.position[c] = static_cast<float>(1.0 + 6.0 * next());
    for (int c = 0; c < 3; ++c) p.velocity[c] = static_cast<float>(3.0 * next() - 1.5);
  }
  return out;
}

inline render::CameraPose source_camera() { return render::CameraPose::look_at({4, 4, 16}, {4, 4, 4}, {0, 1, 0}); }

// 1 degree about the vertical axis through the scene center.
inline render::CameraPose target_camera() {
  return source_camera().orbited({4, 4, 4}, {0, 1, 0}, std::acos(-1.0) / 180.0);
}

inline render::RenderOptions render_options() {
  render::RenderOptions o;
  o.radius = 0.6;
  o.cell_size = 2.5;
  return o;
}

inline render::Vdi vdi() {
  render::VdiOptions o;
  o.render = render_options();
  return render::build_vdi(scene(), source_camera(), kSize, o);
}

inline std::string camera_json(const render::CameraPose& c) {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "{\n  \"position\": [%.17g, %.17g, %.17g],\n  \"orientation\": [%.17g, %.17g, %.17g, %.17g],\n"
                "  \"vertical_fov\": %.17g,\n  \"near\": %.17g,\n  \"far\": %.17g\n}\n",
                c.position[0], c.position[1], c.position[2], c.orientation.w, c.orientation.x, c.orientation.y,
                c.orientation.z, c.vertical_fov, c.near, c.far);
  return buf;
}

inline wire::Bytes rgba_bytes(const render::DepthImage& img) {
  wire::Bytes out;
  for (const auto& p : img.rgba) out.insert(out.end(), p.begin(), p.end());
  return out;
}

inline wire::Bytes text_bytes(const std::string& s) { return {s.begin(), s.end()}; }

inline std::vector<File> files() {
  std::vector<File> out;
  const auto image = render::render_spheres(scene(), source_camera(), kSize, render_options());
  const auto v = vdi();

  stream::FrameMessage f;
  f.frame_seq = 7;
  f.sim_step = 1200;
  f.capture_ts_us = 123456789;
  f.width = static_cast<std::uint16_t>(kSize.width);
  f.height = static_cast<std::uint16_t>(kSize.height);
  f.encoding = stream::Encoding::raw;
  f.payload = stream::encode_payload(image, stream::Encoding::raw);
  out.emplace_back("frame_raw.bin", stream::encode_frame(f));
  f.encoding = stream::Encoding::rle;
  f.payload = stream::encode_payload(image, stream::Encoding::rle);
  out.emplace_back("frame_rle.bin", stream::encode_frame(f));
  f.encoding = stream::Encoding::vdi;
  f.payload = stream::encode_payload(v);
  out.emplace_back("frame_vdi.bin", stream::encode_frame(f));

  stream::StatsMessage st;
  st.frames_per_second = 59.5;
  st.sim_steps_per_second = 812.25;
  st.roundtrip_ms = 14.5;
  st.rank_states = {stream::RankHealth::ok, stream::RankHealth::lost, stream::RankHealth::ok,
                    stream::RankHealth::ok};
  out.emplace_back("stat.bin", stream::encode_stats(st));
  st.roundtrip_ms.reset();
  st.rank_states = {stream::RankHealth::ok};
  out.emplace_back("stat_no_roundtrip.bin", stream::encode_stats(st));

  steer::SteeringCommand c;
  c.seq = 3;
  c.apply_at_step = 102;
  c.body = steer::CommandBody::set_param("dt", 0.002);
  out.emplace_back("ster_set_dt.bin", steer::encode_command(c));
  c.seq = 4;
  c.apply_at_step = 110;
  c.body = steer::CommandBody::pause();
  out.emplace_back("ster_pause.bin", steer::encode_command(c));

  // What a client sends for: dt slider, temperature slider, pause, resume.
  // Inbound commands leave seq and apply_at_step at zero.
  wire::Bytes session;
  for (const auto& body : {steer::CommandBody::set_param("dt", 0.0015),
                           steer::CommandBody::set_param("target_temperature", 1.25), steer::CommandBody::pause(),
                           steer::CommandBody::resume()}) {
    steer::SteeringCommand in;
    in.body = body;
    auto b = steer::encode_command(in);
    session.insert(session.end(), b.begin(), b.end());
  }
  out.emplace_back("client_session_ster.bin", session);

  out.emplace_back("srsp_accepted.bin", stream::encode_reply({true, 3, 102, ""}));
  out.emplace_back("srsp_rejected.bin", stream::encode_reply({false, 0, 0, "unknown parameter 'viscosity'"}));
  out.emplace_back("vizp_camera.bin", stream::encode_viz(stream::VizParam::set_camera(target_camera())));
  out.emplace_back("vizp_color_range.bin", stream::encode_viz(stream::VizParam::set_color_range(0.25, 2.75)));
  out.emplace_back("vizp_radius.bin", stream::encode_viz(stream::VizParam::set_radius(0.45)));
  out.emplace_back("vizp_mode.bin", stream::encode_viz(stream::VizParam::set_mode(stream::RenderMode::vdi)));
  out.emplace_back("echo.bin", stream::encode_echo({123456789}));

  out.emplace_back("golden.vdi", render::encode_vdi(v));
  out.emplace_back("golden_source_camera.json", text_bytes(camera_json(source_camera())));
  out.emplace_back("golden_camera.json", text_bytes(camera_json(target_camera())));
  const auto reprojected = render::composite_vdi_to_image(v, target_camera());
  out.emplace_back("golden_reprojected.rgba", rgba_bytes(reprojected));
  out.emplace_back("golden_reprojected.ppm", render::encode_ppm(reprojected));
  out.emplace_back("golden_identity.rgba", rgba_bytes(render::composite_vdi_to_image(v, source_camera())));
  return out;
}

}  // namespace insitu::golden
