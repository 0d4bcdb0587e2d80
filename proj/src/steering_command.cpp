#include "insitu/steering_command.hpp"

#include <cmath>
#include <sstream>

#include "insitu/errors.hpp"

namespace insitu::steer {

bool is_steerable_param(const std::string& name) {
  return name == "dt" || name == "target_temperature" || name == "thermostat";
}

std::optional<std::string> check_param(const std::string& name, double value) {
  if (!is_steerable_param(name)) return "unknown parameter '" + name + "'";
  if (!std::isfinite(value)) return "value for '" + name + "' is not finite";
  if (name == "dt" && value <= 0.0) return "dt must be positive";
  if (name == "target_temperature" && value <= 0.0) return "target_temperature must be positive";
  if (name == "thermostat" && value != 0.0 && value != 1.0) return "thermostat must be 0 or 1";
  return std::nullopt;
}

std::string describe(const CommandBody& body) {
  switch (body.kind) {
    case CommandKind::set_param: {
      std::ostringstream os;
      os << "set " << body.name << " " << body.value;
      return os.str();
    }
    case CommandKind::pause:
      return "pause";
    case CommandKind::resume:
      return "resume";
    case CommandKind::terminate:
      return "terminate";
  }
  return "?";
}

void encode_command(wire::Writer& w, const SteeringCommand& cmd) {
  w.magic("STER");
  w.u64(cmd.seq);
  w.u64(cmd.apply_at_step);
  w.u8(static_cast<std::uint8_t>(cmd.body.kind));
  if (cmd.body.name.size() > 0xFFFF) throw ArgumentError("parameter name too long");
  w.u16(static_cast<std::uint16_t>(cmd.body.name.size()));
  w.bytes(cmd.body.name.data(), cmd.body.name.size());
  w.f64(cmd.body.value);
}

wire::Bytes encode_command(const SteeringCommand& cmd) {
  wire::Writer w(32 + cmd.body.name.size());
  encode_command(w, cmd);
  return w.take();
}

SteeringCommand decode_command(wire::Reader& r) {
  r.expect_magic("STER");
  SteeringCommand cmd;
  cmd.seq = r.u64();
  cmd.apply_at_step = r.u64();
  auto kind = r.u8();
  if (kind > static_cast<std::uint8_t>(CommandKind::terminate)) {
    throw ProtocolError("unknown steering command kind " + std::to_string(kind));
  }
  cmd.body.kind = static_cast<CommandKind>(kind);
  auto len = r.u16();
  cmd.body.name = r.string(len);
  cmd.body.value = r.f64();
  cmd.issued_at = std::chrono::system_clock::now();
  return cmd;
}

SteeringCommand decode_command(std::span<const std::uint8_t> bytes) {
  wire::Reader r(bytes);
  return decode_command(r);
}

wire::Bytes encode_ack(const Ack& ack) {
  wire::Writer w(14);
  w.magic("SACK");
  w.u16(ack.rank);
  w.u64(ack.seq);
  return w.take();
}

Ack decode_ack(wire::Reader& r) {
  r.expect_magic("SACK");
  Ack a;
  a.rank = r.u16();
  a.seq = r.u64();
  return a;
}

}  // namespace insitu::steer
