// Python bindings: single-rank simulation, rendering and VDI reprojection,
// the stream wire formats, and multi-rank launches driven by RunSpec JSON.

#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>

#include "insitu/errors.hpp"
#include "insitu/render.hpp"
#include "insitu/runtime.hpp"
#include "insitu/sim.hpp"
#include "insitu/stream_wire.hpp"

namespace py = pybind11;
using namespace insitu;

namespace {

using Records = py::array_t<float, py::array::c_style | py::array::forcecast>;
using Pixels = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::span<const sim::ParticleRecord> as_records(const Records& a) {
  if (a.ndim() != 2 || a.shape(1) != 6) throw ArgumentError("particles must have shape (N, 6): x y z vx vy vz");
  return {reinterpret_cast<const sim::ParticleRecord*>(a.data()), static_cast<std::size_t>(a.shape(0))};
}

std::vector<render::Rgba8> as_pixels(const Pixels& a) {
  if (a.ndim() != 3 || a.shape(2) != 4) throw ArgumentError("image must have shape (H, W, 4)");
  std::vector<render::Rgba8> out(static_cast<std::size_t>(a.shape(0) * a.shape(1)));
  std::memcpy(out.data(), a.data(), out.size() * 4);
  return out;
}

py::array_t<std::uint8_t> to_array(const std::vector<render::Rgba8>& px, int w, int h) {
  py::array_t<std::uint8_t> out({h, w, 4});
  std::memcpy(out.mutable_data(), px.data(), px.size() * 4);
  return out;
}

py::tuple image_tuple(const render::DepthImage& img) {
  py::array_t<float> depth({img.size.height, img.size.width});
  std::memcpy(depth.mutable_data(), img.depth.data(), img.depth.size() * sizeof(float));
  return py::make_tuple(to_array(img.rgba, img.size.width, img.size.height), depth);
}

py::bytes to_bytes(const wire::Bytes& b) { return {reinterpret_cast<const char*>(b.data()), b.size()}; }

wire::Bytes from_bytes(const py::bytes& b) {
  std::string_view s = b;
  return {s.begin(), s.end()};
}

render::RenderOptions render_options(double radius, double vmin, double vmax) {
  render::RenderOptions o;
  o.radius = radius;
  o.cmap = {vmin, vmax};
  return o;
}

py::array_t<double> vec3_rows(const sim::SimState& s, sim::Vec3 sim::Particle::*field) {
  py::array_t<double> out({static_cast<py::ssize_t>(s.particles.size()), py::ssize_t{3}});
  auto v = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < s.particles.size(); ++i) {
    for (int d = 0; d < 3; ++d) v(i, d) = (s.particles[i].*field)[d];
  }
  return out;
}

py::dict command_dict(const steer::SteeringCommand& c) {
  static const char* kinds[] = {"set_param", "pause", "resume", "terminate"};
  py::dict d;
  d["type"] = "steer";
  d["seq"] = c.seq;
  d["apply_at_step"] = c.apply_at_step;
  d["kind"] = kinds[static_cast<int>(c.body.kind)];
  d["name"] = c.body.name;
  d["value"] = c.body.value;
  return d;
}

steer::CommandBody make_body(const std::string& kind, const std::string& name, double value) {
  if (kind == "set_param") return steer::CommandBody::set_param(name, value);
  if (kind == "pause") return steer::CommandBody::pause();
  if (kind == "resume") return steer::CommandBody::resume();
  if (kind == "terminate") return steer::CommandBody::terminate();
  throw ArgumentError("unknown command kind " + kind);
}

py::dict message_dict(const stream::Message& m) {
  py::dict d;
  if (auto* f = std::get_if<stream::FrameMessage>(&m)) {
    d["type"] = "frame";
    d["frame_seq"] = f->frame_seq;
    d["sim_step"] = f->sim_step;
    d["capture_ts_us"] = f->capture_ts_us;
    d["width"] = f->width;
    d["height"] = f->height;
    d["encoding"] = stream::to_string(f->encoding);
    d["payload"] = to_bytes(f->payload);
    if (f->encoding == stream::Encoding::vdi) {
      d["vdi"] = stream::frame_vdi(*f);
    } else {
      d["pixels"] = to_array(stream::frame_pixels(*f), f->width, f->height);
    }
  } else if (auto* s = std::get_if<stream::StatsMessage>(&m)) {
    d["type"] = "stats";
    d["fps"] = s->frames_per_second;
    d["sim_steps_per_second"] = s->sim_steps_per_second;
    d["roundtrip_ms"] = s->roundtrip_ms ? py::cast(*s->roundtrip_ms) : py::none();
    py::list states;
    for (auto h : s->rank_states) states.append(h == stream::RankHealth::ok ? "ok" : "lost");
    d["rank_states"] = states;
  } else if (auto* c = std::get_if<steer::SteeringCommand>(&m)) {
    d = command_dict(*c);
  } else if (auto* r = std::get_if<stream::SteerReply>(&m)) {
    d["type"] = "reply";
    d["accepted"] = r->accepted;
    d["seq"] = r->seq;
    d["apply_at_step"] = r->apply_at_step;
    d["reason"] = r->reason;
  } else if (auto* v = std::get_if<stream::VizParam>(&m)) {
    static const char* kinds[] = {"camera", "color_range", "radius", "mode"};
    d["type"] = "viz";
    d["kind"] = kinds[static_cast<int>(v->kind)];
    d["camera"] = v->camera;
    d["vmin"] = v->vmin;
    d["vmax"] = v->vmax;
    d["radius"] = v->radius;
    d["mode"] = stream::to_string(v->mode);
  } else {
    d["type"] = "echo";
    d["capture_ts_us"] = std::get<stream::Echo>(m).capture_ts_us;
  }
  return d;
}

}  // namespace

PYBIND11_MODULE(_insitu, m) {
  m.doc() = "In-situ particle simulation, rendering, compositing and steering";

  static py::exception<Error> base(m, "InSituError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ArgumentError>(m, "ArgumentError", base.ptr());
  py::register_exception<ProtocolError>(m, "ProtocolError", base.ptr());
  py::register_exception<InstabilityError>(m, "InstabilityError", base.ptr());
  py::register_exception<PeerLostError>(m, "PeerLostError", base.ptr());

  py::class_<sim::SimConfig>(m, "SimConfig")
      .def(py::init<>())
      .def_readwrite("particle_count", &sim::SimConfig::particle_count)
      .def_readwrite("box_length", &sim::SimConfig::box_length)
      .def_readwrite("dt", &sim::SimConfig::dt)
      .def_readwrite("cutoff", &sim::SimConfig::cutoff)
      .def_readwrite("target_temperature", &sim::SimConfig::target_temperature)
      .def_readwrite("thermostat", &sim::SimConfig::thermostat)
      .def_readwrite("seed", &sim::SimConfig::seed)
      .def_readwrite("rank_count", &sim::SimConfig::rank_count)
      .def_readwrite("steps_per_publish", &sim::SimConfig::steps_per_publish)
      .def_readwrite("lattice_jitter", &sim::SimConfig::lattice_jitter)
      .def("validate", [](const sim::SimConfig& c) { sim::validate(c); })
      .def("to_text", [](const sim::SimConfig& c) { return sim::to_text(c); })
      .def_static("parse", &sim::parse_sim_config, py::arg("text"))
      .def(py::self == py::self);

  py::class_<sim::Simulation>(m, "Simulation", "Single-rank Lennard-Jones simulation")
      .def(py::init([](const sim::SimConfig& cfg) {
             if (cfg.rank_count != 1) throw ConfigError("Simulation runs one rank; use launch() for more");
             return std::make_unique<sim::Simulation>(cfg);
           }),
           py::arg("config"))
      .def(
          "advance",
          [](sim::Simulation& s, std::uint64_t steps) {
            py::gil_scoped_release nogil;
            for (std::uint64_t i = 0; i < steps && !s.finished(); ++i) s.advance();
          },
          py::arg("steps") = 1)
      .def("energy",
           [](sim::Simulation& s) {
             auto e = s.energy();
             return py::make_tuple(e.kinetic, e.potential);
           })
      .def("momentum", [](const sim::Simulation& s) { return sim::local_momentum(s.state()); })
      .def(
          "steer",
          [](sim::Simulation& s, const std::string& kind, const std::string& name, double value) {
            steer::SteeringCommand cmd;
            cmd.body = make_body(kind, name, value);
            std::string reason;
            if (!sim::apply_steering(s.state(), cmd, &reason)) throw ArgumentError(reason);
          },
          py::arg("kind"), py::arg("name") = "", py::arg("value") = 0.0)
      .def_property_readonly("step", [](const sim::Simulation& s) { return s.state().sim_step; })
      .def_property_readonly("time", [](const sim::Simulation& s) { return s.state().sim_time; })
      .def_property_readonly("dt", [](const sim::Simulation& s) { return s.state().dt; })
      .def_property_readonly("paused", [](const sim::Simulation& s) { return s.state().paused; })
      .def_property_readonly("finished", &sim::Simulation::finished)
      .def("positions", [](const sim::Simulation& s) { return vec3_rows(s.state(), &sim::Particle::x); })
      .def("velocities", [](const sim::Simulation& s) { return vec3_rows(s.state(), &sim::Particle::v); })
      .def("records", [](const sim::Simulation& s) {
        auto snap = sim::snapshot(s.state());
        py::array_t<float> out({static_cast<py::ssize_t>(snap.count()), py::ssize_t{6}});
        std::memcpy(out.mutable_data(), snap.records.data(), snap.count() * sizeof(sim::ParticleRecord));
        return out;
      });

  py::class_<render::CameraPose>(m, "CameraPose")
      .def(py::init<>())
      .def_readwrite("position", &render::CameraPose::position)
      .def_property(
          "orientation",
          [](const render::CameraPose& c) {
            auto q = c.orientation;
            return std::array<double, 4>{q.w, q.x, q.y, q.z};
          },
          [](render::CameraPose& c, std::array<double, 4> q) { c.orientation = {q[0], q[1], q[2], q[3]}; })
      .def_readwrite("vertical_fov", &render::CameraPose::vertical_fov)
      .def_readwrite("near", &render::CameraPose::near)
      .def_readwrite("far", &render::CameraPose::far)
      .def("validate", &render::CameraPose::validate)
      .def_static("look_at", &render::CameraPose::look_at, py::arg("eye"), py::arg("target"),
                  py::arg("up") = render::Vec3{0, 1, 0}, py::arg("vertical_fov") = 45.0)
      .def("orbited", &render::CameraPose::orbited, py::arg("center"), py::arg("axis"), py::arg("radians"))
      .def(py::self == py::self);
  m.def("default_camera", &render::default_camera, py::arg("box_length"));

  m.def(
      "render_spheres",
      [](const Records& particles, const render::CameraPose& cam, int width, int height, double radius,
         double vmin, double vmax) {
        auto recs = as_records(particles);
        render::DepthImage img;
        {
          py::gil_scoped_release nogil;
          img = render::render_spheres(recs, cam, {width, height}, render_options(radius, vmin, vmax));
        }
        return image_tuple(img);
      },
      py::arg("particles"), py::arg("camera"), py::arg("width"), py::arg("height"), py::arg("radius") = 0.3,
      py::arg("vmin") = 0.0, py::arg("vmax") = 3.0, "Returns (rgba uint8 HxWx4, depth float32 HxW)");

  py::class_<render::Vdi>(m, "Vdi")
      .def_property_readonly("width", [](const render::Vdi& v) { return v.size.width; })
      .def_property_readonly("height", [](const render::Vdi& v) { return v.size.height; })
      .def_readonly("s_max", &render::Vdi::s_max)
      .def_readonly("camera", &render::Vdi::camera)
      .def("segment_total", &render::Vdi::segment_total)
      .def("counts",
           [](const render::Vdi& v) {
             py::array_t<std::uint16_t> out({v.size.height, v.size.width});
             std::memcpy(out.mutable_data(), v.counts.data(), v.counts.size() * 2);
             return out;
           })
      .def(
          "render",
          [](const render::Vdi& v, const render::CameraPose& cam) {
            render::DepthImage img;
            {
              py::gil_scoped_release nogil;
              img = render::composite_vdi_to_image(v, cam);
            }
            return image_tuple(img);
          },
          py::arg("camera"), "Composite to an image at any camera; returns (rgba, depth)")
      .def("encode", [](const render::Vdi& v) { return to_bytes(render::encode_vdi(v)); })
      .def_static("decode", [](const py::bytes& b) { return render::decode_vdi(from_bytes(b)); })
      .def(py::self == py::self);

  m.def(
      "build_vdi",
      [](const Records& particles, const render::CameraPose& cam, int width, int height, double radius,
         double vmin, double vmax, double opacity, int s_max) {
        auto recs = as_records(particles);
        render::VdiOptions o;
        o.render = render_options(radius, vmin, vmax);
        o.opacity = opacity;
        o.s_max = s_max;
        py::gil_scoped_release nogil;
        return render::build_vdi(recs, cam, {width, height}, o);
      },
      py::arg("particles"), py::arg("camera"), py::arg("width"), py::arg("height"), py::arg("radius") = 0.3,
      py::arg("vmin") = 0.0, py::arg("vmax") = 3.0, py::arg("opacity") = 1.0,
      py::arg("s_max") = render::kDefaultSegmentCap);

  m.def(
      "rle_encode",
      [](const Pixels& img) {
        return to_bytes(stream::rle_encode(as_pixels(img), static_cast<int>(img.shape(1)),
                                           static_cast<int>(img.shape(0))));
      },
      py::arg("image"));
  m.def(
      "rle_decode",
      [](const py::bytes& b, int width, int height) {
        return to_array(stream::rle_decode(from_bytes(b), width, height), width, height);
      },
      py::arg("payload"), py::arg("width"), py::arg("height"));

  m.def(
      "encode_frame",
      [](const Pixels& img, std::uint64_t seq, std::uint64_t step, std::uint64_t ts, const std::string& enc) {
        stream::FrameMessage f;
        f.frame_seq = seq;
        f.sim_step = step;
        f.capture_ts_us = ts;
        f.height = static_cast<std::uint16_t>(img.shape(0));
        f.width = static_cast<std::uint16_t>(img.shape(1));
        f.encoding = stream::parse_encoding(enc);
        render::DepthImage di({f.width, f.height});
        di.rgba = as_pixels(img);
        f.payload = stream::encode_payload(di, f.encoding);
        return to_bytes(stream::encode_frame(f));
      },
      py::arg("image"), py::arg("frame_seq"), py::arg("sim_step"), py::arg("capture_ts_us") = 0,
      py::arg("encoding") = "rle", "FRM0 message for an RGBA image (raw or rle)");
  m.def(
      "encode_vdi_frame",
      [](const render::Vdi& v, std::uint64_t seq, std::uint64_t step, std::uint64_t ts) {
        stream::FrameMessage f{seq, step, ts, static_cast<std::uint16_t>(v.size.width),
                               static_cast<std::uint16_t>(v.size.height), stream::Encoding::vdi,
                               stream::encode_payload(v)};
        return to_bytes(stream::encode_frame(f));
      },
      py::arg("vdi"), py::arg("frame_seq"), py::arg("sim_step"), py::arg("capture_ts_us") = 0);
  m.def(
      "encode_stats",
      [](double fps, double sps, std::optional<double> rtt, const std::vector<std::string>& states) {
        stream::StatsMessage s{fps, sps, rtt, {}};
        for (const auto& st : states) {
          if (st != "ok" && st != "lost") throw ArgumentError("rank state must be ok or lost");
          s.rank_states.push_back(st == "ok" ? stream::RankHealth::ok : stream::RankHealth::lost);
        }
        return to_bytes(stream::encode_stats(s));
      },
      py::arg("fps"), py::arg("sim_steps_per_second"), py::arg("roundtrip_ms") = py::none(),
      py::arg("rank_states") = std::vector<std::string>{});
  m.def(
      "encode_steer",
      [](const std::string& kind, const std::string& name, double value, std::uint64_t seq,
         std::uint64_t apply_at_step) {
        steer::SteeringCommand c;
        c.seq = seq;
        c.apply_at_step = apply_at_step;
        c.body = make_body(kind, name, value);
        return to_bytes(steer::encode_command(c));
      },
      py::arg("kind"), py::arg("name") = "", py::arg("value") = 0.0, py::arg("seq") = 0,
      py::arg("apply_at_step") = 0, "STER message; clients send seq = apply_at_step = 0");
  m.def(
      "encode_echo", [](std::uint64_t ts) { return to_bytes(stream::encode_echo({ts})); }, py::arg("capture_ts_us"));
  m.def(
      "message_length",
      [](const py::bytes& b) { return stream::message_length(from_bytes(b)); }, py::arg("buffered"),
      "Length of the message starting the buffer, or None when more bytes are needed");
  m.def(
      "decode_message", [](const py::bytes& b) { return message_dict(stream::decode_message(from_bytes(b))); },
      py::arg("data"), "Decode one FRM0/STAT/STER/SRSP/VIZP/ECHO message into a dict");

  m.def("default_run_spec", [] { return runtime::to_json(runtime::RunSpec{}); });
  m.def(
      "validate_run_spec", [](const std::string& j) { runtime::validate(runtime::parse_run_spec(j)); },
      py::arg("spec_json"));
  m.def(
      "run_spec_checksum", [](const std::string& j) { return runtime::checksum(runtime::parse_run_spec(j)); },
      py::arg("spec_json"));
  m.def(
      "launch",
      [](const std::string& j) {
        auto spec = runtime::parse_run_spec(j);
        runtime::LaunchResult res;
        {
          py::gil_scoped_release nogil;
          res = runtime::launch(spec);
        }
        std::vector<std::string> summaries;
        for (const auto& s : runtime::read_summaries(spec)) summaries.push_back(runtime::to_json(s));
        py::dict d;
        d["exit_codes"] = res.exit_codes;
        d["exit_code"] = res.exit_code();
        d["leaked_segments"] = res.leaked_segments;
        d["spec"] = runtime::to_json(spec);
        d["summaries"] = summaries;
        return d;
      },
      py::arg("spec_json"), "Fork one process per rank and wait for them");
  m.def(
      "run_benchmark",
      [](const std::string& j) {
        auto spec = runtime::parse_run_spec(j);
        py::gil_scoped_release nogil;
        return runtime::to_json(runtime::run_benchmark(spec));
      },
      py::arg("spec_json"));
}
