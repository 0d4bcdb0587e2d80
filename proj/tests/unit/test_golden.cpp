#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "golden_cases.hpp"
#include "insitu/render.hpp"
#include "insitu/stream_wire.hpp"

using namespace insitu;

namespace {

wire::Bytes load(const std::string& name) {
  std::ifstream in(std::filesystem::path(INSITU_GOLDEN_DIR) / name, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing fixture " << name);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
void put(wire::Bytes& b, T v) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &v, sizeof(T));
  b.insert(b.end(), raw, raw + sizeof(T));
}

}  // namespace

TEST_CASE("checked-in fixtures match what the encoders produce today") {
  for (const auto& [name, bytes] : golden::files()) {
    CAPTURE(name);
    CHECK(load(name) == bytes);
  }
}

TEST_CASE("stream fixtures decode and re-encode byte for byte") {
  for (const char* name : {"frame_raw.bin", "frame_rle.bin", "frame_vdi.bin", "stat.bin", "stat_no_roundtrip.bin",
                           "ster_set_dt.bin", "ster_pause.bin", "srsp_accepted.bin", "srsp_rejected.bin",
                           "vizp_camera.bin", "vizp_color_range.bin", "vizp_radius.bin", "vizp_mode.bin",
                           "echo.bin"}) {
    CAPTURE(name);
    auto bytes = load(name);
    REQUIRE(stream::message_length(bytes) == bytes.size());
    auto m = stream::decode_message(bytes);
    wire::Bytes again = std::visit(
        [](const auto& msg) -> wire::Bytes {
          using T = std::decay_t<decltype(msg)>;
          if constexpr (std::is_same_v<T, stream::FrameMessage>) return stream::encode_frame(msg);
          else if constexpr (std::is_same_v<T, stream::StatsMessage>) return stream::encode_stats(msg);
          else if constexpr (std::is_same_v<T, steer::SteeringCommand>) return steer::encode_command(msg);
          else if constexpr (std::is_same_v<T, stream::SteerReply>) return stream::encode_reply(msg);
          else if constexpr (std::is_same_v<T, stream::VizParam>) return stream::encode_viz(msg);
          else return stream::encode_echo(msg);
        },
        m);
    CHECK(again == bytes);
  }
}

TEST_CASE("hand-assembled messages equal the fixtures") {
  wire::Bytes ster = {'S', 'T', 'E', 'R'};
  put<std::uint64_t>(ster, 3);
  put<std::uint64_t>(ster, 102);
  put<std::uint8_t>(ster, 0);
  put<std::uint16_t>(ster, 2);
  ster.push_back('d');
  ster.push_back('t');
  put<double>(ster, 0.002);
  CHECK(ster == load("ster_set_dt.bin"));

  wire::Bytes stat = {'S', 'T', 'A', 'T'};
  put<double>(stat, 59.5);
  put<double>(stat, 812.25);
  put<double>(stat, 14.5);
  put<std::uint16_t>(stat, 4);
  for (std::uint8_t s : {0, 1, 0, 0}) stat.push_back(s);
  CHECK(stat == load("stat.bin"));

  auto raw = load("frame_raw.bin");
  wire::Bytes head = {'F', 'R', 'M', '0'};
  put<std::uint64_t>(head, 7);
  put<std::uint64_t>(head, 1200);
  put<std::uint64_t>(head, 123456789);
  put<std::uint16_t>(head, 32);
  put<std::uint16_t>(head, 24);
  put<std::uint8_t>(head, 0);
  put<std::uint32_t>(head, 32 * 24 * 4);
  REQUIRE(raw.size() == head.size() + 32 * 24 * 4);
  CHECK(wire::Bytes(raw.begin(), raw.begin() + static_cast<std::ptrdiff_t>(head.size())) == head);
}

TEST_CASE("frame payloads agree with each other and with the vdi file") {
  auto raw = stream::decode_frame(load("frame_raw.bin"));
  auto rle = stream::decode_frame(load("frame_rle.bin"));
  auto vdi_frame = stream::decode_frame(load("frame_vdi.bin"));
  CHECK(stream::frame_pixels(raw) == stream::frame_pixels(rle));
  CHECK(vdi_frame.payload == load("golden.vdi"));

  // At the source camera the VDI reproduces the opaque render exactly.
  auto v = render::decode_vdi(load("golden.vdi"));
  auto identity = render::composite_vdi_to_image(v, v.camera);
  CHECK(golden::rgba_bytes(identity) == load("golden_identity.rgba"));
  auto pixels = stream::frame_pixels(raw);
  CHECK(std::vector<render::Rgba8>(identity.rgba) == pixels);
}

TEST_CASE("golden reprojection") {
  auto v = render::decode_vdi(load("golden.vdi"));
  auto img = render::composite_vdi_to_image(v, golden::target_camera());
  CHECK(golden::rgba_bytes(img) == load("golden_reprojected.rgba"));
  auto ppm = render::decode_ppm(load("golden_reprojected.ppm"));
  for (std::size_t i = 0; i < img.rgba.size(); ++i) {
    for (int c = 0; c < 3; ++c) CHECK(ppm.rgba[i][c] == img.rgba[i][c]);
  }
}
