#pragma once

// Software particle renderer: spheres ray cast into a color+depth image, or
// into a volumetric depth image (VDI) that can be recomposited from a nearby
// viewpoint without casting rays again.
//
// Conventions: the camera looks down its local -z axis with +y up; the
// orientation quaternion (w, x, y, z) maps camera-local to world. Pixel (0, 0)
// is the top-left corner and rays pass through pixel centers. Depth is the
// Euclidean distance from the camera position along the ray. Colors are
// premultiplied; background is (0, 0, 0, 0) at depth +inf.

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "insitu/sim.hpp"
#include "insitu/wire.hpp"

namespace insitu::render {

using sim::ParticleRecord;
using sim::ParticleSnapshot;

using Vec3 = std::array<double, 3>;

struct Quat {
  double w = 1, x = 0, y = 0, z = 0;
  bool operator==(const Quat&) const = default;
};

Quat quat_mul(const Quat& a, const Quat& b);
Quat quat_conj(const Quat& q);
Quat quat_normalized(const Quat& q);
Quat quat_from_axis_angle(const Vec3& axis, double radians);
Vec3 rotate(const Quat& q, const Vec3& v);

struct CameraPose {
  Vec3 position{0, 0, 10};
  Quat orientation{};
  double vertical_fov = 45.0;  // degrees
  double near = 0.01;
  double far = 1000.0;

  // Throws ArgumentError unless |q| = 1 within 1e-6, 0 < near < far and
  // 0 < fov < 180.
  void validate() const;
  bool operator==(const CameraPose&) const = default;

  static CameraPose look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                            double vertical_fov = 45.0);
  // Orbit `cam` by `radians` about the axis through `center` along `axis`.
  CameraPose orbited(const Vec3& center, const Vec3& axis, double radians) const;
};

// Camera placed on the +z side of a cubic box looking at its center.
CameraPose default_camera(double box_length);

struct ImageSize {
  int width = 256;
  int height = 256;
  std::size_t pixels() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
  bool operator==(const ImageSize&) const = default;
};

struct Ray {
  Vec3 origin;
  Vec3 dir;  // unit length
};

Ray camera_ray(const CameraPose& cam, ImageSize size, int px, int py);

// Entry and exit distances along a unit-direction ray, if it hits.
struct SphereHit {
  double t0;
  double t1;
};
bool intersect_sphere(const Ray& ray, const Vec3& center, double radius, SphereHit& hit);

using Rgba8 = std::array<std::uint8_t, 4>;
using Rgb8 = std::array<std::uint8_t, 3>;

struct ColorMap {
  double vmin = 0.0;
  double vmax = 3.0;
  bool operator==(const ColorMap&) const = default;
};

// Blue (vmin) to white (midpoint) to red (vmax), clamped outside the range.
Rgb8 velocity_color(double v_mag, const ColorMap& cmap);

// Headlight Lambert: ambient 0.25 plus 0.75 * max(0, n . -dir).
Rgb8 shade(const Rgb8& base, const Vec3& normal, const Vec3& dir);

struct DepthImage {
  ImageSize size;
  std::vector<Rgba8> rgba;
  std::vector<float> depth;

  DepthImage() = default;
  explicit DepthImage(ImageSize s);
  std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * size.width + x; }
  bool operator==(const DepthImage&) const = default;
};

inline constexpr float kBackgroundDepth = std::numeric_limits<float>::infinity();

struct RenderOptions {
  double radius = 0.3;
  // Grid cells are max(radius, cell_size) wide; the interaction cutoff is a
  // good choice for simulation snapshots.
  double cell_size = 2.5;
  ColorMap cmap{};
};

DepthImage render_spheres(std::span<const ParticleRecord> particles, const CameraPose& cam,
                          ImageSize size, const RenderOptions& opts = {});
DepthImage render_spheres(const ParticleSnapshot& snap, const CameraPose& cam, ImageSize size,
                          const RenderOptions& opts = {});
// Index of the sphere seen at each pixel, -1 for background.
std::vector<std::int32_t> nearest_hit_ids(std::span<const ParticleRecord> particles, const CameraPose& cam,
                                          ImageSize size, const RenderOptions& opts = {});

struct Supersegment {
  float front = 0;
  float back = 0;
  float r = 0, g = 0, b = 0, a = 0;  // premultiplied
  bool operator==(const Supersegment&) const = default;
};

inline constexpr int kDefaultSegmentCap = 8;
inline constexpr double kDefaultMergeTolerance = 16.0 / 255.0;

struct Vdi {
  ImageSize size;
  int s_max = kDefaultSegmentCap;
  CameraPose camera;
  std::vector<std::uint16_t> counts;          // per pixel
  std::vector<Supersegment> segments;          // fixed stride s_max per pixel

  Vdi() = default;
  Vdi(ImageSize s, int cap, const CameraPose& cam);
  std::span<const Supersegment> pixel(std::size_t i) const {
    return {segments.data() + i * static_cast<std::size_t>(s_max), counts[i]};
  }
  std::size_t segment_total() const;
  bool operator==(const Vdi&) const = default;
};

struct VdiOptions {
  RenderOptions render{};
  double opacity = 1.0;
  int s_max = kDefaultSegmentCap;
  double merge_tolerance = kDefaultMergeTolerance;
};

// One sphere crossing along a pixel ray, before merging.
struct RayInterval {
  double front;
  double back;
  float r, g, b, a;  // premultiplied
};

// Greedy front-to-back merge of sorted intervals into at most s_max
// supersegments. Exposed for testing.
std::vector<Supersegment> merge_intervals(std::span<const RayInterval> sorted, int s_max,
                                          double merge_tolerance);

Vdi build_vdi(std::span<const ParticleRecord> particles, const CameraPose& cam, ImageSize size,
              const VdiOptions& opts = {});
Vdi build_vdi(const ParticleSnapshot& snap, const CameraPose& cam, ImageSize size,
              const VdiOptions& opts = {});

// Front-to-back over-compositing of float premultiplied RGBA.
void composite_over(std::array<float, 4>& acc, const std::array<float, 4>& src);
Rgba8 to_rgba8(const std::array<float, 4>& c);

// At the VDI's own camera this composites each pixel list in place;
// otherwise every supersegment front is reprojected and point-splatted.
DepthImage composite_vdi_to_image(const Vdi& vdi, const CameraPose& cam);

// Binary PPM (P6) of the RGB channels.
wire::Bytes encode_ppm(const DepthImage& img);
void write_ppm(const DepthImage& img, const std::filesystem::path& path);
DepthImage decode_ppm(std::span<const std::uint8_t> bytes);

// VDI file: "VDIF", version u32, w u16, h u16, S_max u16, camera as 11 f64
// (position xyz, orientation wxyz, vertical_fov, near, far, aspect),
// per-pixel u16 counts, then the used supersegments as 6 f32 each.
inline constexpr std::uint32_t kVdiVersion = 1;
wire::Bytes encode_vdi(const Vdi& vdi);
Vdi decode_vdi(std::span<const std::uint8_t> bytes);
void save_vdi(const Vdi& vdi, const std::filesystem::path& path);
Vdi load_vdi(const std::filesystem::path& path);

}  // namespace insitu::render
