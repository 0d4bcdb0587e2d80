#pragma once

// Minimal RFC 6455 server and client pieces: the HTTP upgrade handshake and
// binary message framing over a connected socket. No extensions, no
// subprotocols.

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>

#include "insitu/wire.hpp"

namespace insitu::ws {

struct HttpRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> headers;  // names lower-cased
};

// Reads up to the blank line ending the request head. `prefix` holds bytes
// already consumed from the socket. Throws ProtocolError on malformed input.
HttpRequest read_http_request(int fd, std::string prefix = {});
bool is_upgrade(const HttpRequest& req);

// base64(SHA-1(key + RFC 6455 GUID)).
std::string accept_key(const std::string& client_key);
std::string base64(const std::uint8_t* data, std::size_t n);

void send_upgrade_response(int fd, const HttpRequest& req);
void send_http_response(int fd, int status, const std::string& content_type, const std::string& body);

enum class Opcode : std::uint8_t { continuation = 0, text = 1, binary = 2, close = 8, ping = 9, pong = 10 };

// One frame with FIN set. Clients must mask; servers must not.
wire::Bytes encode_frame(Opcode op, std::span<const std::uint8_t> payload, std::optional<std::uint32_t> mask = {});

// Frame header alone, for sending a payload that is written separately.
wire::Bytes frame_head(Opcode op, std::uint64_t payload_len);

struct WsMessage {
  Opcode opcode = Opcode::binary;
  wire::Bytes payload;
};

// Next complete data message (fragments joined). Answers pings, and on a
// close frame replies in kind and returns nullopt, as it does on EOF.
// `write_mu` guards writes shared with other threads.
class WsReader {
 public:
  WsReader(int fd, bool expect_masked, std::mutex* write_mu, bool client_side)
      : fd_(fd), expect_masked_(expect_masked), write_mu_(write_mu), client_side_(client_side) {}
  std::optional<WsMessage> next();

 private:
  void reply(Opcode op, std::span<const std::uint8_t> payload);
  int fd_;
  bool expect_masked_;
  std::mutex* write_mu_;
  bool client_side_;
};

// Client handshake for tests and tools; throws ProtocolError if the server
// does not switch protocols.
void client_handshake(int fd, const std::string& host, const std::string& path);

}  // namespace insitu::ws
