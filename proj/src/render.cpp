#include "insitu/render.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>

#include "insitu/errors.hpp"

namespace insitu::render {

namespace {

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
Vec3 normalized(const Vec3& a) {
  double n = std::sqrt(dot(a, a));
  if (n == 0) throw ArgumentError("cannot normalize a zero vector");
  return scale(a, 1.0 / n);
}

Vec3 center_of(const ParticleRecord& p) { return {p.position[0], p.position[1], p.position[2]}; }

double speed_of(const ParticleRecord& p) {
  double vx = p.velocity[0], vy = p.velocity[1], vz = p.velocity[2];
  return std::sqrt(vx * vx + vy * vy + vz * vz);
}

void check_size(ImageSize size) {
  if (size.width <= 0 || size.height <= 0) {
    throw ArgumentError("image size must be positive, got " + std::to_string(size.width) + "x" +
                        std::to_string(size.height));
  }
  if (size.width > 65535 || size.height > 65535) throw ArgumentError("image size exceeds 65535");
}

// Uniform grid over the particle bounding box; every sphere is listed in all
// cells its (slightly padded) bounding box touches, so a ray visiting cells in
// order meets every sphere it can hit no later than the cell holding the hit.
class SphereGrid {
 public:
  SphereGrid(std::span<const ParticleRecord> particles, double radius, double cell_size) {
    cell_ = std::max(radius, cell_size);
    if (particles.empty()) return;
    Vec3 lo{std::numeric_limits<double>::max(), std::numeric_limits<double>::max(),
            std::numeric_limits<double>::max()};
    Vec3 hi = scale(lo, -1.0);
    for (const auto& p : particles) {
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], static_cast<double>(p.position[a]));
        hi[a] = std::max(hi[a], static_cast<double>(p.position[a]));
      }
    }
    pad_ = 1e-6 * cell_;
    for (int a = 0; a < 3; ++a) {
      lo_[a] = lo[a] - radius - 2 * pad_;
      double extent = hi[a] + radius + 2 * pad_ - lo_[a];
      dims_[a] = std::clamp(static_cast<int>(std::ceil(extent / cell_)), 1, 512);
      // Grow the cell along this axis if the dimension cap kicked in.
      cellv_[a] = std::max(cell_, extent / dims_[a]);
      hi_[a] = lo_[a] + cellv_[a] * dims_[a];
    }
    const std::size_t ncell = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    start_.assign(ncell + 1, 0);
    auto for_cells = [&](const ParticleRecord& p, auto&& fn) {
      int c0[3], c1[3];
      for (int a = 0; a < 3; ++a) {
        double x = p.position[a];
        c0[a] = std::clamp(static_cast<int>(std::floor((x - radius - pad_ - lo_[a]) / cellv_[a])), 0, dims_[a] - 1);
        c1[a] = std::clamp(static_cast<int>(std::floor((x + radius + pad_ - lo_[a]) / cellv_[a])), 0, dims_[a] - 1);
      }
      for (int z = c0[2]; z <= c1[2]; ++z)
        for (int y = c0[1]; y <= c1[1]; ++y)
          for (int x = c0[0]; x <= c1[0]; ++x) fn(flat(x, y, z));
    };
    for (const auto& p : particles) for_cells(p, [&](std::size_t c) { ++start_[c + 1]; });
    for (std::size_t c = 0; c < ncell; ++c) start_[c + 1] += start_[c];
    items_.resize(start_[ncell]);
    std::vector<std::uint32_t> fill(start_.begin(), start_.end() - 1);
    for (std::uint32_t i = 0; i < particles.size(); ++i) {
      for_cells(particles[i], [&](std::size_t c) { items_[fill[c]++] = i; });
    }
  }

  // Visits cells along the ray in order of entry. visit(ids, t_exit) returns
  // true to stop.
  template <typename Visit>
  void traverse(const Ray& ray, double t_limit, Visit&& visit) const {
    if (items_.empty()) return;
    double t_enter = 0.0, t_leave = t_limit;
    for (int a = 0; a < 3; ++a) {
      double d = ray.dir[a];
      if (d == 0.0) {
        if (ray.origin[a] < lo_[a] || ray.origin[a] > hi_[a]) return;
        continue;
      }
      double ta = (lo_[a] - ray.origin[a]) / d;
      double tb = (hi_[a] - ray.origin[a]) / d;
      if (ta > tb) std::swap(ta, tb);
      t_enter = std::max(t_enter, ta);
      t_leave = std::min(t_leave, tb);
    }
    if (t_enter > t_leave) return;

    int cell[3], step[3];
    double t_next[3], t_delta[3];
    for (int a = 0; a < 3; ++a) {
      double x = ray.origin[a] + ray.dir[a] * t_enter;
      cell[a] = std::clamp(static_cast<int>(std::floor((x - lo_[a]) / cellv_[a])), 0, dims_[a] - 1);
      double d = ray.dir[a];
      if (d > 0) {
        step[a] = 1;
        t_next[a] = (lo_[a] + (cell[a] + 1) * cellv_[a] - ray.origin[a]) / d;
        t_delta[a] = cellv_[a] / d;
      } else if (d < 0) {
        step[a] = -1;
        t_next[a] = (lo_[a] + cell[a] * cellv_[a] - ray.origin[a]) / d;
        t_delta[a] = -cellv_[a] / d;
      } else {
        step[a] = 0;
        t_next[a] = std::numeric_limits<double>::infinity();
        t_delta[a] = std::numeric_limits<double>::infinity();
      }
    }
    for (;;) {
      int axis = 0;
      if (t_next[1] < t_next[axis]) axis = 1;
      if (t_next[2] < t_next[axis]) axis = 2;
      const double t_exit = t_next[axis];
      std::size_t c = flat(cell[0], cell[1], cell[2]);
      std::span<const std::uint32_t> ids(items_.data() + start_[c], start_[c + 1] - start_[c]);
      if (visit(ids, t_exit)) return;
      if (t_exit > t_leave) return;
      cell[axis] += step[axis];
      if (cell[axis] < 0 || cell[axis] >= dims_[axis]) return;
      t_next[axis] += t_delta[axis];
    }
  }

  double cell() const { return cell_; }

 private:
  std::size_t flat(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims_[1] + y) * dims_[0] + x;
  }

  double cell_ = 1.0;
  double pad_ = 0.0;
  double lo_[3]{}, hi_[3]{}, cellv_[3]{};
  int dims_[3]{1, 1, 1};
  std::vector<std::uint32_t> start_;
  std::vector<std::uint32_t> items_;
};

// Per-ray "already tested" marks so spheres listed in several cells are
// intersected once.
class VisitStamp {
 public:
  explicit VisitStamp(std::size_t n) : stamp_(n, 0) {}
  void next_ray() { ++ray_; }
  bool first_visit(std::uint32_t id) {
    if (stamp_[id] == ray_) return false;
    stamp_[id] = ray_;
    return true;
  }

 private:
  std::vector<std::uint32_t> stamp_;
  std::uint32_t ray_ = 0;
};

Rgb8 shaded_color(const ParticleRecord& p, const Ray& ray, double t, double radius, const ColorMap& cmap) {
  Vec3 hit = add(ray.origin, scale(ray.dir, t));
  Vec3 n = scale(sub(hit, center_of(p)), 1.0 / radius);
  return shade(velocity_color(speed_of(p), cmap), n, ray.dir);
}

}  // namespace

// ----- math -----

Quat quat_mul(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z, a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x, a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

Quat quat_conj(const Quat& q) { return {q.w, -q.x, -q.y, -q.z}; }

Quat quat_normalized(const Quat& q) {
  double n = std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
  if (n == 0) throw ArgumentError("zero quaternion");
  return {q.w / n, q.x / n, q.y / n, q.z / n};
}

Quat quat_from_axis_angle(const Vec3& axis, double radians) {
  Vec3 u = normalized(axis);
  double s = std::sin(radians / 2);
  return {std::cos(radians / 2), u[0] * s, u[1] * s, u[2] * s};
}

Vec3 rotate(const Quat& q, const Vec3& v) {
  // v' = v + 2w(u x v) + 2(u x (u x v)), u = (x, y, z)
  Vec3 u{q.x, q.y, q.z};
  Vec3 t = scale(cross(u, v), 2.0);
  return add(add(v, scale(t, q.w)), cross(u, t));
}

// ----- camera -----

void CameraPose::validate() const {
  const auto& q = orientation;
  double n = std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
  if (std::abs(n - 1.0) > 1e-6) throw ArgumentError("camera orientation is not a unit quaternion");
  if (!(near > 0 && near < far)) throw ArgumentError("camera needs 0 < near < far");
  if (!(vertical_fov > 0 && vertical_fov < 180)) throw ArgumentError("camera fov must lie in (0, 180)");
  for (double c : position) {
    if (!std::isfinite(c)) throw ArgumentError("camera position is not finite");
  }
}

CameraPose CameraPose::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double vertical_fov) {
  Vec3 back = normalized(sub(eye, target));
  Vec3 right = normalized(cross(up, back));
  Vec3 true_up = cross(back, right);
  // Rotation matrix columns are right, up, back.
  double m00 = right[0], m01 = true_up[0], m02 = back[0];
  double m10 = right[1], m11 = true_up[1], m12 = back[1];
  double m20 = right[2], m21 = true_up[2], m22 = back[2];
  Quat q;
  double tr = m00 + m11 + m22;
  if (tr > 0) {
    double s = std::sqrt(tr + 1.0) * 2;
    q = {0.25 * s, (m21 - m12) / s, (m02 - m20) / s, (m10 - m01) / s};
  } else if (m00 > m11 && m00 > m22) {
    double s = std::sqrt(1.0 + m00 - m11 - m22) * 2;
    q = {(m21 - m12) / s, 0.25 * s, (m01 + m10) / s, (m02 + m20) / s};
  } else if (m11 > m22) {
    double s = std::sqrt(1.0 + m11 - m00 - m22) * 2;
    q = {(m02 - m20) / s, (m01 + m10) / s, 0.25 * s, (m12 + m21) / s};
  } else {
    double s = std::sqrt(1.0 + m22 - m00 - m11) * 2;
    q = {(m10 - m01) / s, (m02 + m20) / s, (m12 + m21) / s, 0.25 * s};
  }
  CameraPose cam;
  cam.position = eye;
  cam.orientation = quat_normalized(q);
  cam.vertical_fov = vertical_fov;
  return cam;
}

CameraPose CameraPose::orbited(const Vec3& center, const Vec3& axis, double radians) const {
  Quat r = quat_from_axis_angle(axis, radians);
  CameraPose out = *this;
  out.position = add(center, rotate(r, sub(position, center)));
  out.orientation = quat_normalized(quat_mul(r, orientation));
  return out;
}

CameraPose default_camera(double box_length) {
  double c = box_length / 2;
  CameraPose cam = CameraPose::look_at({c, c, c + 2.2 * box_length}, {c, c, c}, {0, 1, 0});
  cam.far = 10 * box_length;
  return cam;
}

namespace {

// Pixel-center ray generation with the per-camera constants hoisted.
class RayGen {
 public:
  RayGen(const CameraPose& cam, ImageSize size)
      : cam_(cam), size_(size), tan_half_(std::tan(cam.vertical_fov * std::numbers::pi / 360.0)),
        aspect_(static_cast<double>(size.width) / size.height) {}

  Vec3 local_dir(int px, int py) const {
    double sx = ((px + 0.5) / size_.width * 2.0 - 1.0) * tan_half_ * aspect_;
    double sy = (1.0 - (py + 0.5) / size_.height * 2.0) * tan_half_;
    return normalized(Vec3{sx, sy, -1.0});
  }
  Ray operator()(int px, int py) const {
    return {cam_.position, normalized(rotate(cam_.orientation, local_dir(px, py)))};
  }

 private:
  CameraPose cam_;
  ImageSize size_;
  double tan_half_;
  double aspect_;
};

}  // namespace

Ray camera_ray(const CameraPose& cam, ImageSize size, int px, int py) { return RayGen(cam, size)(px, py); }

bool intersect_sphere(const Ray& ray, const Vec3& center, double radius, SphereHit& hit) {
  Vec3 oc = sub(ray.origin, center);
  double b = dot(oc, ray.dir);
  double c = dot(oc, oc) - radius * radius;
  double disc = b * b - c;
  if (disc < 0) return false;
  double s = std::sqrt(disc);
  hit = {-b - s, -b + s};
  return true;
}

// ----- color -----

Rgb8 velocity_color(double v_mag, const ColorMap& cmap) {
  double t = 0.5;
  if (cmap.vmax != cmap.vmin) t = std::clamp((v_mag - cmap.vmin) / (cmap.vmax - cmap.vmin), 0.0, 1.0);
  if (std::isnan(t)) t = 0.5;
  auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0))); };
  if (t <= 0.5) {
    double s = 2 * t;
    return {q(255 * s), q(255 * s), 255};
  }
  double s = 2 * t - 1;
  return {255, q(255 * (1 - s)), q(255 * (1 - s))};
}

Rgb8 shade(const Rgb8& base, const Vec3& normal, const Vec3& dir) {
  double lambert = std::max(0.0, -dot(normal, dir));
  double f = 0.25 + 0.75 * lambert;
  Rgb8 out;
  for (int c = 0; c < 3; ++c) {
    out[c] = static_cast<std::uint8_t>(std::lround(std::clamp(base[c] * f, 0.0, 255.0)));
  }
  return out;
}

// ----- opaque render -----

DepthImage::DepthImage(ImageSize s) : size(s), rgba(s.pixels(), Rgba8{0, 0, 0, 0}), depth(s.pixels(), kBackgroundDepth) {}

namespace {

// Calls on_hit(px, py, ray, id, t) for every pixel whose ray hits a sphere,
// with the nearest hit ordered by (t, id).
template <typename OnHit>
void trace_nearest(std::span<const ParticleRecord> particles, const CameraPose& cam, ImageSize size,
                   const RenderOptions& opts, OnHit&& on_hit) {
  check_size(size);
  cam.validate();
  if (!(opts.radius > 0)) throw ArgumentError("sphere radius must be positive");
  if (particles.empty()) return;
  SphereGrid grid(particles, opts.radius, opts.cell_size);
  VisitStamp stamp(particles.size());
  const double guard = 1e-9 * grid.cell();

  const RayGen rays(cam, size);
  for (int py = 0; py < size.height; ++py) {
    for (int px = 0; px < size.width; ++px) {
      Ray ray = rays(px, py);
      stamp.next_ray();
      double best_t = std::numeric_limits<double>::infinity();
      std::uint32_t best = 0;
      grid.traverse(ray, cam.far, [&](std::span<const std::uint32_t> ids, double t_exit) {
        for (std::uint32_t id : ids) {
          if (!stamp.first_visit(id)) continue;
          SphereHit h;
          if (!intersect_sphere(ray, center_of(particles[id]), opts.radius, h)) continue;
          if (h.t0 < cam.near || h.t0 > cam.far) continue;
          if (h.t0 < best_t || (h.t0 == best_t && id < best)) {
            best_t = h.t0;
            best = id;
          }
        }
        return best_t < t_exit - guard;
      });
      if (!std::isinf(best_t)) on_hit(px, py, ray, best, best_t);
    }
  }
}

}  // namespace

DepthImage render_spheres(std::span<const ParticleRecord> particles, const CameraPose& cam, ImageSize size,
                          const RenderOptions& opts) {
  check_size(size);
  DepthImage img(size);
  trace_nearest(particles, cam, size, opts, [&](int px, int py, const Ray& ray, std::uint32_t id, double t) {
    Rgb8 c = shaded_color(particles[id], ray, t, opts.radius, opts.cmap);
    std::size_t i = img.index(px, py);
    img.rgba[i] = {c[0], c[1], c[2], 255};
    img.depth[i] = static_cast<float>(t);
  });
  return img;
}

std::vector<std::int32_t> nearest_hit_ids(std::span<const ParticleRecord> particles, const CameraPose& cam,
                                          ImageSize size, const RenderOptions& opts) {
  check_size(size);
  std::vector<std::int32_t> ids(size.pixels(), -1);
  trace_nearest(particles, cam, size, opts, [&](int px, int py, const Ray&, std::uint32_t id, double) {
    ids[static_cast<std::size_t>(py) * size.width + px] = static_cast<std::int32_t>(id);
  });
  return ids;
}

DepthImage render_spheres(const ParticleSnapshot& snap, const CameraPose& cam, ImageSize size,
                          const RenderOptions& opts) {
  return render_spheres(std::span<const ParticleRecord>(snap.records), cam, size, opts);
}

// ----- VDI -----

Vdi::Vdi(ImageSize s, int cap, const CameraPose& cam)
    : size(s), s_max(cap), camera(cam), counts(s.pixels(), 0), segments(s.pixels() * static_cast<std::size_t>(cap)) {}

std::size_t Vdi::segment_total() const {
  std::size_t n = 0;
  for (auto c : counts) n += c;
  return n;
}

void composite_over(std::array<float, 4>& acc, const std::array<float, 4>& src) {
  const float k = 1.0f - acc[3];
  for (int c = 0; c < 4; ++c) acc[c] += k * src[c];
}

Rgba8 to_rgba8(const std::array<float, 4>& c) {
  Rgba8 out;
  for (int i = 0; i < 4; ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(c[i], 0.0f, 1.0f) * 255.0f));
  }
  return out;
}

namespace {

float max_straight_diff(const std::array<float, 4>& a, const std::array<float, 4>& b) {
  float d = 0;
  for (int c = 0; c < 3; ++c) {
    float sa = a[3] > 0 ? a[c] / a[3] : 0.0f;
    float sb = b[3] > 0 ? b[c] / b[3] : 0.0f;
    d = std::max(d, std::abs(sa - sb));
  }
  return d;
}

}  // namespace

std::vector<Supersegment> merge_intervals(std::span<const RayInterval> sorted, int s_max, double merge_tolerance) {
  if (s_max < 1) throw ArgumentError("S_max must be at least 1");
  std::vector<Supersegment> out;
  std::array<float, 4> acc{};
  std::array<float, 4> rep{};  // straight color reference of the open segment
  double front = 0, back = 0;
  bool open = false;
  auto close = [&] {
    out.push_back({static_cast<float>(front), static_cast<float>(back), acc[0], acc[1], acc[2], acc[3]});
  };
  for (const auto& iv : sorted) {
    std::array<float, 4> c{iv.r, iv.g, iv.b, iv.a};
    if (open) {
      bool overlaps = iv.front < back;
      bool similar = max_straight_diff(rep, c) <= merge_tolerance;
      bool full = static_cast<int>(out.size()) + 1 >= s_max;
      if (overlaps || similar || full) {
        composite_over(acc, c);
        back = std::max(back, iv.back);
        continue;
      }
      close();
    }
    acc = c;
    rep = c;
    front = iv.front;
    back = iv.back;
    open = true;
  }
  if (open) close();
  return out;
}

Vdi build_vdi(std::span<const ParticleRecord> particles, const CameraPose& cam, ImageSize size,
              const VdiOptions& opts) {
  check_size(size);
  cam.validate();
  if (opts.s_max < 1) throw ArgumentError("S_max must be at least 1");
  if (opts.s_max > 65535) throw ArgumentError("S_max exceeds 65535");
  if (!(opts.opacity > 0 && opts.opacity <= 1)) throw ArgumentError("opacity must lie in (0, 1]");
  const double radius = opts.render.radius;
  if (!(radius > 0)) throw ArgumentError("sphere radius must be positive");
  Vdi vdi(size, opts.s_max, cam);
  if (particles.empty()) return vdi;

  SphereGrid grid(particles, radius, opts.render.cell_size);
  VisitStamp stamp(particles.size());
  struct Crossing {
    double t0, t1;
    std::uint32_t id;
  };
  std::vector<Crossing> hits;
  std::vector<RayInterval> intervals;
  const float alpha = static_cast<float>(opts.opacity);

  const RayGen rays(cam, size);
  for (int py = 0; py < size.height; ++py) {
    for (int px = 0; px < size.width; ++px) {
      Ray ray = rays(px, py);
      stamp.next_ray();
      hits.clear();
      grid.traverse(ray, cam.far, [&](std::span<const std::uint32_t> ids, double) {
        for (std::uint32_t id : ids) {
          if (!stamp.first_visit(id)) continue;
          SphereHit h;
          if (!intersect_sphere(ray, center_of(particles[id]), radius, h)) continue;
          if (h.t0 < cam.near || h.t0 > cam.far) continue;
          hits.push_back({h.t0, h.t1, id});
        }
        return false;
      });
      if (hits.empty()) continue;
      std::sort(hits.begin(), hits.end(),
                [](const Crossing& a, const Crossing& b) { return a.t0 < b.t0 || (a.t0 == b.t0 && a.id < b.id); });
      intervals.clear();
      for (const auto& h : hits) {
        Rgb8 c = shaded_color(particles[h.id], ray, h.t0, radius, opts.render.cmap);
        intervals.push_back({h.t0, h.t1, c[0] / 255.0f * alpha, c[1] / 255.0f * alpha, c[2] / 255.0f * alpha, alpha});
      }
      auto segs = merge_intervals(intervals, opts.s_max, opts.merge_tolerance);
      std::size_t i = static_cast<std::size_t>(py) * size.width + px;
      vdi.counts[i] = static_cast<std::uint16_t>(segs.size());
      std::copy(segs.begin(), segs.end(), vdi.segments.begin() + static_cast<std::ptrdiff_t>(i * opts.s_max));
    }
  }
  return vdi;
}

Vdi build_vdi(const ParticleSnapshot& snap, const CameraPose& cam, ImageSize size, const VdiOptions& opts) {
  return build_vdi(std::span<const ParticleRecord>(snap.records), cam, size, opts);
}

DepthImage composite_vdi_to_image(const Vdi& vdi, const CameraPose& cam) {
  DepthImage img(vdi.size);
  const std::size_t n = vdi.size.pixels();
  if (cam == vdi.camera) {
    for (std::size_t i = 0; i < n; ++i) {
      auto segs = vdi.pixel(i);
      if (segs.empty()) continue;
      std::array<float, 4> acc{};
      for (const auto& s : segs) composite_over(acc, {s.r, s.g, s.b, s.a});
      img.rgba[i] = to_rgba8(acc);
      img.depth[i] = segs.front().front;
    }
    return img;
  }

  // Each supersegment's front point is moved into the new view and splatted
  // onto the single destination pixel containing it.
  const int w = vdi.size.width, h = vdi.size.height;
  const double tan_half = std::tan(cam.vertical_fov * std::numbers::pi / 360.0);
  const double aspect = static_cast<double>(w) / h;
  const Quat inv = quat_conj(cam.orientation);
  const Vec3 origin = rotate(inv, sub(vdi.camera.position, cam.position));
  const Quat to_dest = quat_mul(inv, vdi.camera.orientation);
  const RayGen src_rays(vdi.camera, vdi.size);
  const double sx = 1.0 / (tan_half * aspect), sy = 1.0 / tan_half;
  const double half_w = w / 2.0, half_h = h / 2.0;

  struct Splat {
    float depth;
    std::uint32_t dest;
    const Supersegment* source;  // source order breaks depth ties
  };
  std::vector<Splat> splat;
  splat.reserve(vdi.segment_total());

  for (int py = 0; py < h; ++py) {
    for (int px = 0; px < w; ++px) {
      std::size_t i = static_cast<std::size_t>(py) * w + px;
      auto segs = vdi.pixel(i);
      if (segs.empty()) continue;
      // The source ray expressed in the destination camera frame; lengths
      // are preserved, so the splat depth is the norm of the local point.
      const Vec3 dir = rotate(to_dest, src_rays.local_dir(px, py));
      for (const auto& s : segs) {
        const double lx = origin[0] + dir[0] * s.front;
        const double ly = origin[1] + dir[1] * s.front;
        const double lz = origin[2] + dir[2] * s.front;
        if (lz >= 0) continue;
        const double depth = std::sqrt(lx * lx + ly * ly + lz * lz);
        if (depth < cam.near || depth > cam.far) continue;
        const double inv_z = -1.0 / lz;
        const double fx = (lx * inv_z * sx + 1.0) * half_w;
        const double fy = (1.0 - ly * inv_z * sy) * half_h;
        if (!(fx >= 0 && fy >= 0 && fx < w && fy < h)) continue;
        splat.push_back({static_cast<float>(depth),
                         static_cast<std::uint32_t>(fy) * static_cast<std::uint32_t>(w) + static_cast<std::uint32_t>(fx),
                         &s});
      }
    }
  }

  // Bucket splats by destination pixel, then depth-sort each bucket.
  std::vector<std::uint32_t> start(n + 1, 0);
  for (const auto& sp : splat) ++start[sp.dest + 1];
  for (std::size_t k = 0; k < n; ++k) start[k + 1] += start[k];
  std::vector<Splat> bucketed(splat.size());
  {
    std::vector<std::uint32_t> fill(start.begin(), start.end() - 1);
    for (const auto& sp : splat) bucketed[fill[sp.dest]++] = sp;
  }
  for (std::size_t pix = 0; pix < n; ++pix) {
    auto first = bucketed.begin() + start[pix], last = bucketed.begin() + start[pix + 1];
    if (first == last) continue;
    if (last - first > 1) {
      std::sort(first, last, [](const Splat& a, const Splat& b) {
        return a.depth < b.depth || (a.depth == b.depth && a.source < b.source);
      });
    }
    std::array<float, 4> acc{};
    for (auto it = first; it != last && acc[3] < 1.0f; ++it) {
      const auto* s = it->source;
      composite_over(acc, {s->r, s->g, s->b, s->a});
    }
    img.rgba[pix] = to_rgba8(acc);
    img.depth[pix] = first->depth;
  }
  return img;
}

// ----- PPM -----

wire::Bytes encode_ppm(const DepthImage& img) {
  std::string head = "P6\n" + std::to_string(img.size.width) + " " + std::to_string(img.size.height) + "\n255\n";
  wire::Bytes out(head.begin(), head.end());
  out.reserve(head.size() + img.rgba.size() * 3);
  for (const auto& p : img.rgba) out.insert(out.end(), p.begin(), p.begin() + 3);
  return out;
}

void write_ppm(const DepthImage& img, const std::filesystem::path& path) {
  auto bytes = encode_ppm(img);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ResourceError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

DepthImage decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    std::string t;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) t.push_back(static_cast<char>(bytes[pos++]));
    return t;
  };
  if (token() != "P6") throw ProtocolError("not a binary PPM");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::logic_error&) {
    throw ProtocolError("malformed PPM header");
  }
  if (maxval != 255) throw ProtocolError("only 8-bit PPM is supported");
  ++pos;
  ImageSize size{w, h};
  check_size(size);
  if (bytes.size() - pos < size.pixels() * 3) throw ProtocolError("truncated PPM");
  DepthImage img(size);
  for (std::size_t i = 0; i < size.pixels(); ++i) {
    const auto* p = bytes.data() + pos + 3 * i;
    img.rgba[i] = {p[0], p[1], p[2], 255};
  }
  return img;
}

// ----- VDI file -----

wire::Bytes encode_vdi(const Vdi& vdi) {
  wire::Writer w(64 + vdi.counts.size() * 2 + vdi.segment_total() * 24);
  w.magic("VDIF");
  w.u32(kVdiVersion);
  w.u16(static_cast<std::uint16_t>(vdi.size.width));
  w.u16(static_cast<std::uint16_t>(vdi.size.height));
  w.u16(static_cast<std::uint16_t>(vdi.s_max));
  const auto& c = vdi.camera;
  for (double v : c.position) w.f64(v);
  w.f64(c.orientation.w);
  w.f64(c.orientation.x);
  w.f64(c.orientation.y);
  w.f64(c.orientation.z);
  w.f64(c.vertical_fov);
  w.f64(c.near);
  w.f64(c.far);
  w.f64(static_cast<double>(vdi.size.width) / vdi.size.height);
  for (auto n : vdi.counts) w.u16(n);
  for (std::size_t i = 0; i < vdi.counts.size(); ++i) {
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

Vdi decode_vdi(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  r.expect_magic("VDIF");
  std::uint32_t version = r.u32();
  if (version != kVdiVersion) throw IncompatibleError("unsupported VDI version " + std::to_string(version));
  ImageSize size{r.u16(), r.u16()};
  int s_max = r.u16();
  if (size.width == 0 || size.height == 0) throw ProtocolError("VDI has zero size");
  if (s_max < 1) throw ProtocolError("VDI has S_max 0");
  CameraPose cam;
  for (double& v : cam.position) v = r.f64();
  cam.orientation.w = r.f64();
  cam.orientation.x = r.f64();
  cam.orientation.y = r.f64();
  cam.orientation.z = r.f64();
  cam.vertical_fov = r.f64();
  cam.near = r.f64();
  cam.far = r.f64();
  r.f64();  // aspect, implied by the size
  Vdi vdi(size, s_max, cam);
  for (auto& n : vdi.counts) {
    n = r.u16();
    if (n > s_max) throw ProtocolError("VDI pixel count exceeds S_max");
  }
  for (std::size_t i = 0; i < vdi.counts.size(); ++i) {
    for (std::uint16_t k = 0; k < vdi.counts[i]; ++k) {
      auto& s = vdi.segments[i * static_cast<std::size_t>(s_max) + k];
      s.front = r.f32();
      s.back = r.f32();
      s.r = r.f32();
      s.g = r.f32();
      s.b = r.f32();
      s.a = r.f32();
    }
  }
  if (r.remaining() != 0) throw ProtocolError("trailing bytes after VDI");
  return vdi;
}

void save_vdi(const Vdi& vdi, const std::filesystem::path& path) {
  auto bytes = encode_vdi(vdi);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ResourceError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Vdi load_vdi(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw NotFoundError("cannot read " + path.string());
  wire::Bytes bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_vdi(bytes);
}

}  // namespace insitu::render
