#include <doctest.h>

#include <exception>
#include <random>
#include <thread>

#include "insitu/composite.hpp"
#include "insitu/errors.hpp"
#include "oracles.hpp"

using namespace insitu;
using namespace insitu::composite;
using render::ImageSize;
using render::Rgba8;
using render::Supersegment;

namespace {

// Runs fn(rank, endpoint) on k threads over an in-process fabric and
// rethrows the first failure.
template <typename Fn>
void run_ranks(comm::LocalFabric& fabric, Fn&& fn) {
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(fabric.size());
  for (int r = 0; r < fabric.size(); ++r) {
    threads.emplace_back([&, r] {
      try {
        fn(r, fabric.endpoint(r));
      } catch (...) {
        errors[r] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Random opaque image; depths are drawn from a small set so ties are common.
DepthImage random_image(ImageSize size, std::mt19937_64& rng) {
  DepthImage img(size);
  std::uniform_int_distribution<int> byte(0, 255), level(0, 12);
  for (std::size_t i = 0; i < img.rgba.size(); ++i) {
    int l = level(rng);
    if (l == 0) continue;
    img.rgba[i] = {static_cast<std::uint8_t>(byte(rng)), static_cast<std::uint8_t>(byte(rng)),
                   static_cast<std::uint8_t>(byte(rng)), 255};
    img.depth[i] = 1.0f + 0.5f * static_cast<float>(l);
  }
  return img;
}

// Serial left fold in rank order, written directly against the rule.
DepthImage fold_oracle(const std::vector<DepthImage>& images) {
  DepthImage out = images[0];
  for (std::size_t k = 1; k < images.size(); ++k) {
    for (std::size_t i = 0; i < out.rgba.size(); ++i) {
      if (images[k].depth[i] < out.depth[i]) {
        out.rgba[i] = images[k].rgba[i];
        out.depth[i] = images[k].depth[i];
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("topology") {
  CHECK_THROWS_AS(Topology::make(0), ConfigError);
  CHECK_THROWS_AS(Topology::make(3), ConfigError);
  CHECK_THROWS_AS(Topology::make(6), ConfigError);
  CHECK(Topology::make(1).stages == 0);
  CHECK(Topology::make(8).stages == 3);
  auto t = Topology::make(4);
  CHECK(t.partner(1, 0) == 0);
  CHECK(t.partner(1, 1) == 3);

  for (int k : {1, 2, 4, 8, 16}) {
    auto topo = Topology::make(k);
    for (std::size_t pixels : {std::size_t{1} * k, std::size_t{64 * 64}, std::size_t{1001}, std::size_t{256 * 256}}) {
      std::vector<int> owner(pixels, -1);
      for (int r = 0; r < k; ++r) {
        auto range = topo.owned(r, pixels);
        if (pixels % k == 0) CHECK(range.size() == pixels / k);
        for (std::size_t i = range.begin; i < range.end; ++i) {
          CHECK(owner[i] == -1);
          owner[i] = r;
        }
      }
      CHECK(std::count(owner.begin(), owner.end(), -1) == 0);
    }
  }
}

TEST_CASE("depth pair compositing") {
  std::mt19937_64 rng(5);
  ImageSize size{31, 17};
  auto x = random_image(size, rng);
  auto y = random_image(size, rng);
  auto z = random_image(size, rng);
  DepthImage bg(size);
  CHECK(composite_depth_pair(bg, x) == x);
  CHECK(composite_depth_pair(x, bg) == x);
  CHECK(composite_depth_pair(x, x) == x);
  CHECK(composite_depth_pair(composite_depth_pair(x, y), z) == composite_depth_pair(x, composite_depth_pair(y, z)));

  auto xy = composite_depth_pair(x, y);
  auto yx = composite_depth_pair(y, x);
  for (std::size_t i = 0; i < xy.rgba.size(); ++i) {
    CHECK(xy.depth[i] == yx.depth[i]);
    if (x.depth[i] == y.depth[i]) {
      CHECK(xy.rgba[i] == x.rgba[i]);
      CHECK(yx.rgba[i] == y.rgba[i]);
    } else {
      CHECK(xy.rgba[i] == yx.rgba[i]);
    }
  }
  CHECK_THROWS_AS(composite_depth_pair(x, DepthImage(ImageSize{30, 17})), ArgumentError);
}

TEST_CASE("binary swap equals the serial fold with exact traffic") {
  std::mt19937_64 rng(11);
  for (int k : {1, 2, 4, 8}) {
    auto topo = Topology::make(k);
    for (int scene = 0; scene < 6; ++scene) {
      ImageSize size{64, 32 + 8 * scene};
      std::vector<DepthImage> images;
      for (int r = 0; r < k; ++r) images.push_back(random_image(size, rng));
      comm::LocalFabric fabric(k);
      std::optional<DepthImage> frame;
      std::vector<ExchangeStats> stats(k);
      run_ranks(fabric, [&](int r, comm::MessageEndpoint& ep) {
        auto out = binary_swap(images[r], topo, ep, ExchangeOptions{static_cast<std::uint64_t>(scene)}, &stats[r]);
        CHECK(out.has_value() == (r == 0));
        if (out) frame = std::move(out);
      });
      REQUIRE(frame);
      CHECK(*frame == fold_oracle(images));
      const std::uint64_t wh = size.pixels();
      for (int r = 0; r < k; ++r) {
        CHECK(stats[r].swap_payload_bytes * k == kPixelBytes * wh * (k - 1));
        CHECK(stats[r].gather_payload_bytes == (r == 0 ? 0 : kPixelBytes * wh / k));
      }
    }
  }
}

TEST_CASE("binary swap of rendered opaque scenes") {
  for (int k : {2, 4}) {
    auto topo = Topology::make(k);
    auto all = oracle::random_particles(200, 10.0, 77 + k);
    std::vector<DepthImage> images;
    for (int r = 0; r < k; ++r) {
      std::vector<sim::ParticleRecord> part;
      for (std::size_t i = r; i < all.size(); i += k) part.push_back(all[i]);
      images.push_back(render::render_spheres(part, render::default_camera(10.0), {48, 48}));
    }
    comm::LocalFabric fabric(k);
    std::optional<DepthImage> frame;
    run_ranks(fabric, [&](int r, comm::MessageEndpoint& ep) {
      auto out = binary_swap(images[r], topo, ep, ExchangeOptions{});
      if (out) frame = std::move(out);
    });
    REQUIRE(frame);
    CHECK(*frame == fold_oracle(images));
  }
}

TEST_CASE("stage framing") {
  StageHeader h{3, 7, 99, 0};
  std::vector<std::uint8_t> payload{1, 2, 3};
  auto msg = encode_stage(h, payload);
  CHECK(msg.size() == kStageHeaderBytes + 3);
  CHECK(std::string(msg.begin(), msg.begin() + 4) == "BSWP");
  std::span<const std::uint8_t> back;
  auto d = decode_stage(msg, back);
  CHECK(d.stage == 3);
  CHECK(d.sender == 7);
  CHECK(d.frame_seq == 99);
  CHECK(d.payload_len == 3);
  CHECK(std::vector<std::uint8_t>(back.begin(), back.end()) == payload);
  msg[0] = 'X';
  CHECK_THROWS_AS(decode_stage(msg, back), ProtocolError);
  auto short_msg = encode_stage(h, payload);
  short_msg.pop_back();
  CHECK_THROWS_AS(decode_stage(short_msg, back), ProtocolError);
}

TEST_CASE("exchange failures") {
  ImageSize size{16, 16};
  std::mt19937_64 rng(3);
  auto img = random_image(size, rng);
  auto topo = Topology::make(2);

  SUBCASE("silent partner times out as a composite error") {
    comm::LocalFabric fabric(2);
    ExchangeOptions opts;
    opts.timeout = std::chrono::milliseconds(100);
    CHECK_THROWS_AS(binary_swap(img, topo, fabric.endpoint(0), opts), CompositeError);
  }
  SUBCASE("disconnected partner") {
    comm::LocalFabric fabric(2);
    fabric.disconnect(1);
    CHECK_THROWS_AS(binary_swap(img, topo, fabric.endpoint(0), ExchangeOptions{}), CompositeError);
  }
  SUBCASE("message from a future frame") {
    comm::LocalFabric fabric(2);
    StageHeader h{0, 1, 5, 0};
    auto payload = std::vector<std::uint8_t>(size.pixels() / 2 * kPixelBytes, 0);
    fabric.endpoint(1).send(0, kSwapTag, encode_stage(h, payload));
    CHECK_THROWS_AS(binary_swap(img, topo, fabric.endpoint(0), ExchangeOptions{4}), ProtocolError);
  }
  SUBCASE("leftovers of an aborted frame are skipped") {
    comm::LocalFabric fabric(2);
    StageHeader stale{0, 1, 3, 0};
    fabric.endpoint(1).send(0, kSwapTag, encode_stage(stale, std::vector<std::uint8_t>(8, 0)));
    std::optional<DepthImage> frame;
    run_ranks(fabric, [&](int r, comm::MessageEndpoint& ep) {
      auto out = binary_swap(img, topo, ep, ExchangeOptions{4});
      if (out) frame = std::move(out);
    });
    REQUIRE(frame);
    CHECK(*frame == img);
  }
  SUBCASE("topology and endpoint disagree") {
    comm::LocalFabric fabric(4);
    CHECK_THROWS_AS(binary_swap(img, topo, fabric.endpoint(0), ExchangeOptions{}), ConfigError);
  }
}

TEST_CASE("VDI pair merge") {
  render::CameraPose cam;
  ImageSize size{3, 1};
  Vdi a(size, 4, cam), b(size, 4, cam), empty(size, 4, cam);
  auto put = [](Vdi& v, std::size_t px, std::vector<Supersegment> segs) {
    v.counts[px] = static_cast<std::uint16_t>(segs.size());
    std::copy(segs.begin(), segs.end(), v.segments.begin() + static_cast<std::ptrdiff_t>(px * v.s_max));
  };
  put(a, 0, {{1, 2, 0.5f, 0, 0, 0.5f}, {5, 6, 0.2f, 0.2f, 0, 0.4f}});
  put(b, 0, {{3, 4, 0, 0.3f, 0, 0.3f}, {7, 8, 0, 0, 0.1f, 0.1f}});
  put(a, 1, {{1, 3, 0.5f, 0, 0, 0.5f}});
  put(b, 1, {{2, 4, 0, 0.5f, 0, 0.5f}});
  put(b, 2, {{1, 2, 0.1f, 0.1f, 0.1f, 0.2f}});

  CHECK(merge_vdi_pair(empty, b) == b);
  CHECK(merge_vdi_pair(a, empty) == a);

  Vdi m = merge_vdi_pair(a, b);
  auto p0 = m.pixel(0);
  REQUIRE(p0.size() == 4);
  CHECK(p0[0].front == 1);
  CHECK(p0[1].front == 3);
  CHECK(p0[2].front == 5);
  CHECK(p0[3].front == 7);

  auto p1 = m.pixel(1);
  REQUIRE(p1.size() == 1);
  CHECK(p1[0].front == 1);
  CHECK(p1[0].back == 4);
  CHECK(p1[0].a == doctest::Approx(0.75));
  CHECK(p1[0].g == doctest::Approx(0.25));

  // Over the cap the tail folds into the last segment.
  Vdi small_a(size, 2, cam), small_b(size, 2, cam);
  put(small_a, 0, {{1, 2, 0.1f, 0, 0, 0.1f}, {5, 6, 0.1f, 0, 0, 0.1f}});
  put(small_b, 0, {{3, 4, 0, 0.1f, 0, 0.1f}, {7, 8, 0, 0, 0.1f, 0.1f}});
  auto capped = merge_vdi_pair(small_a, small_b).pixel(0);
  REQUIRE(capped.size() == 2);
  CHECK(capped[1].front == 3);
  CHECK(capped[1].back == 8);

  render::CameraPose other = cam;
  other.position[0] = 1;
  CHECK_THROWS_AS(merge_vdi_pair(a, Vdi(size, 4, other)), ArgumentError);
  CHECK_THROWS_AS(merge_vdi_pair(a, Vdi(size, 3, cam)), ArgumentError);
}

TEST_CASE("merged VDIs composite like their images for depth-separated scenes") {
  // Two particle sets in disjoint depth slabs along the view axis.
  auto near_set = oracle::random_particles(60, 6.0, 21);
  auto far_set = oracle::random_particles(60, 6.0, 22);
  for (auto& p : far_set) p.position[2] -= 10.0f;
  render::CameraPose cam = render::CameraPose::look_at({3, 3, 20}, {3, 3, -2}, {0, 1, 0}, 30);
  ImageSize size{64, 64};
  render::VdiOptions opts;
  opts.opacity = 0.6;
  opts.s_max = 16;
  Vdi va = render::build_vdi(near_set, cam, size, opts);
  Vdi vb = render::build_vdi(far_set, cam, size, opts);
  auto merged_img = render::composite_vdi_to_image(merge_vdi_pair(vb, va), cam);
  auto ia = render::composite_vdi_to_image(va, cam);
  auto ib = render::composite_vdi_to_image(vb, cam);
  for (std::size_t i = 0; i < ia.rgba.size(); ++i) {
    // Image-space oracle: nearer image over the farther one.
    const auto& front = ia.depth[i] <= ib.depth[i] ? ia.rgba[i] : ib.rgba[i];
    const auto& back = ia.depth[i] <= ib.depth[i] ? ib.rgba[i] : ia.rgba[i];
    std::vector<std::array<double, 4>> layers{{front[0] / 255.0, front[1] / 255.0, front[2] / 255.0, front[3] / 255.0},
                                              {back[0] / 255.0, back[1] / 255.0, back[2] / 255.0, back[3] / 255.0}};
    auto want = oracle::composite_front_to_back(layers);
    for (int c = 0; c < 4; ++c) CHECK(std::abs(merged_img.rgba[i][c] / 255.0 - want[c]) <= 2.0 / 255.0 + 1e-9);
  }
}

TEST_CASE("VDI binary swap equals the serial merge fold") {
  for (int k : {2, 4, 8}) {
    auto topo = Topology::make(k);
    render::CameraPose cam = render::CameraPose::look_at({3, 3, 40}, {3, 3, 0}, {0, 1, 0}, 30);
    ImageSize size{32, 24};
    render::VdiOptions opts;
    opts.opacity = 0.5;
    opts.s_max = 12;
    std::vector<Vdi> vdis;
    for (int r = 0; r < k; ++r) {
      // Each rank's particles sit in their own depth slab.
      auto ps = oracle::random_particles(25, 6.0, 300 + r);
      for (auto& p : ps) p.position[2] = static_cast<float>(p.position[2] * 0.2 - 3.0 * r);
      opts.s_max = 12;
      vdis.push_back(render::build_vdi(ps, cam, size, opts));
    }
    Vdi want = vdis[0];
    for (int r = 1; r < k; ++r) want = merge_vdi_pair(want, vdis[r]);
    comm::LocalFabric fabric(k);
    std::optional<Vdi> frame;
    run_ranks(fabric, [&](int r, comm::MessageEndpoint& ep) {
      auto out = binary_swap(vdis[r], topo, ep, ExchangeOptions{});
      if (out) frame = std::move(out);
    });
    REQUIRE(frame);
    CHECK(*frame == want);
  }
}
