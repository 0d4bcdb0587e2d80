#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "insitu/wire.hpp"

namespace insitu::steer {

enum class CommandKind : std::uint8_t { set_param = 0, pause = 1, resume = 2, terminate = 3 };

// What a client asks for; the head turns it into a SteeringCommand by
// assigning seq and apply_at_step.
struct CommandBody {
  CommandKind kind = CommandKind::set_param;
  std::string name;
  double value = 0.0;

  static CommandBody set_param(std::string name, double value) {
    return {CommandKind::set_param, std::move(name), value};
  }
  static CommandBody pause() { return {CommandKind::pause, {}, 0.0}; }
  static CommandBody resume() { return {CommandKind::resume, {}, 0.0}; }
  static CommandBody terminate() { return {CommandKind::terminate, {}, 0.0}; }

  bool operator==(const CommandBody&) const = default;
};

struct SteeringCommand {
  std::uint64_t seq = 0;
  std::uint64_t apply_at_step = 0;
  CommandBody body;
  // Not carried on the wire; stamped by whoever creates or receives it.
  std::chrono::system_clock::time_point issued_at{};
};

struct Ack {
  std::uint16_t rank = 0;
  std::uint64_t seq = 0;
};

// Simulation parameters a SetParam may name.
bool is_steerable_param(const std::string& name);
// Reason string when (name, value) must be rejected.
std::optional<std::string> check_param(const std::string& name, double value);

std::string describe(const CommandBody& body);

// STER: magic, seq u64, apply_at_step u64, kind u8, name_len u16, name, value f64.
wire::Bytes encode_command(const SteeringCommand& cmd);
void encode_command(wire::Writer& w, const SteeringCommand& cmd);
SteeringCommand decode_command(wire::Reader& r);
SteeringCommand decode_command(std::span<const std::uint8_t> bytes);

// SACK: magic, rank u16, seq u64.
wire::Bytes encode_ack(const Ack& ack);
Ack decode_ack(wire::Reader& r);

}  // namespace insitu::steer
