#include "insitu/websocket.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <algorithm>
#include <cctype>
#include <random>
#include <sstream>

#include "insitu/errors.hpp"
#include "insitu/net.hpp"

namespace insitu::ws {

namespace {

constexpr const char* kGuid = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
constexpr std::size_t kMaxHead = 16 * 1024;
constexpr std::uint64_t kMaxMessage = 256ull << 20;

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool header_has_token(const HttpRequest& req, const std::string& name, const std::string& token) {
  auto it = req.headers.find(name);
  if (it == req.headers.end()) return false;
  std::istringstream in(lower(it->second));
  std::string part;
  while (std::getline(in, part, ',')) {
    if (trim(part) == token) return true;
  }
  return false;
}

void read_or_throw(int fd, void* dst, std::size_t n) {
  if (!net::read_exact(fd, dst, n)) throw PeerLostError("websocket closed");
}

const char* reason_phrase(int status) {
  switch (status) {
    case 200:
      return "OK";
    case 400:
      return "Bad Request";
    case 404:
      return "Not Found";
    default:
      return "Error";
  }
}

}  // namespace

HttpRequest read_http_request(int fd, std::string prefix) {
  std::string head = std::move(prefix);
  while (head.find("\r\n\r\n") == std::string::npos) {
    if (head.size() > kMaxHead) throw ProtocolError("HTTP request head too large");
    char c;
    if (!net::read_exact(fd, &c, 1)) throw ProtocolError("connection closed inside HTTP request");
    head.push_back(c);
  }
  std::istringstream in(head);
  std::string line;
  std::getline(in, line);
  HttpRequest req;
  std::istringstream rl(trim(line));
  std::string version;
  if (!(rl >> req.method >> req.path >> version) || version.rfind("HTTP/1.", 0) != 0) {
    throw ProtocolError("malformed HTTP request line");
  }
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) break;
    auto colon = line.find(':');
    if (colon == std::string::npos) throw ProtocolError("malformed HTTP header");
    req.headers[lower(trim(line.substr(0, colon)))] = trim(line.substr(colon + 1));
  }
  return req;
}

bool is_upgrade(const HttpRequest& req) {
  return req.method == "GET" && header_has_token(req, "upgrade", "websocket") &&
         header_has_token(req, "connection", "upgrade") && req.headers.count("sec-websocket-key");
}

std::string base64(const std::uint8_t* data, std::size_t n) {
  std::string out(4 * ((n + 2) / 3) + 1, '\0');
  int len = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), data, static_cast<int>(n));
  out.resize(static_cast<std::size_t>(len));
  return out;
}

std::string accept_key(const std::string& client_key) {
  std::string s = client_key + kGuid;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(s.data()), s.size(), digest);
  return base64(digest, sizeof(digest));
}

void send_upgrade_response(int fd, const HttpRequest& req) {
  auto version = req.headers.find("sec-websocket-version");
  if (version == req.headers.end() || version->second != "13") {
    std::string resp = "HTTP/1.1 426 Upgrade Required\r\nSec-WebSocket-Version: 13\r\nContent-Length: 0\r\n\r\n";
    net::write_all(fd, {reinterpret_cast<const std::uint8_t*>(resp.data()), resp.size()});
    throw ProtocolError("unsupported websocket version");
  }
  std::string resp =
      "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Accept: " +
      accept_key(req.headers.at("sec-websocket-key")) + "\r\n\r\n";
  net::write_all(fd, {reinterpret_cast<const std::uint8_t*>(resp.data()), resp.size()});
}

void send_http_response(int fd, int status, const std::string& content_type, const std::string& body) {
  std::ostringstream os;
  os << "HTTP/1.1 " << status << ' ' << reason_phrase(status) << "\r\nContent-Type: " << content_type
     << "\r\nContent-Length: " << body.size() << "\r\nConnection: close\r\n\r\n"
     << body;
  std::string resp = os.str();
  net::write_all(fd, {reinterpret_cast<const std::uint8_t*>(resp.data()), resp.size()});
}

namespace {

void put_head(wire::Bytes& out, Opcode op, std::uint64_t n, bool masked) {
  out.push_back(static_cast<std::uint8_t>(0x80 | static_cast<std::uint8_t>(op)));
  const std::uint8_t mask_bit = masked ? 0x80 : 0x00;
  if (n < 126) {
    out.push_back(static_cast<std::uint8_t>(mask_bit | n));
  } else if (n <= 0xFFFF) {
    out.push_back(mask_bit | 126);
    out.push_back(static_cast<std::uint8_t>(n >> 8));
    out.push_back(static_cast<std::uint8_t>(n));
  } else {
    out.push_back(mask_bit | 127);
    for (int i = 7; i >= 0; --i) out.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  }
}

}  // namespace

wire::Bytes frame_head(Opcode op, std::uint64_t payload_len) {
  wire::Bytes out;
  put_head(out, op, payload_len, false);
  return out;
}

wire::Bytes encode_frame(Opcode op, std::span<const std::uint8_t> payload, std::optional<std::uint32_t> mask) {
  wire::Bytes out;
  out.reserve(payload.size() + 14);
  put_head(out, op, payload.size(), mask.has_value());
  if (mask) {
    std::uint8_t key[4] = {static_cast<std::uint8_t>(*mask >> 24), static_cast<std::uint8_t>(*mask >> 16),
                           static_cast<std::uint8_t>(*mask >> 8), static_cast<std::uint8_t>(*mask)};
    out.insert(out.end(), key, key + 4);
    for (std::size_t i = 0; i < payload.size(); ++i) out.push_back(payload[i] ^ key[i % 4]);
  } else {
    out.insert(out.end(), payload.begin(), payload.end());
  }
  return out;
}

void WsReader::reply(Opcode op, std::span<const std::uint8_t> payload) {
  std::optional<std::uint32_t> mask;
  if (client_side_) mask = std::random_device{}();
  auto frame = encode_frame(op, payload, mask);
  std::unique_lock<std::mutex> lock;
  if (write_mu_) lock = std::unique_lock(*write_mu_);
  try {
    net::write_all(fd_, frame);
  } catch (const PeerLostError&) {
  }
}

std::optional<WsMessage> WsReader::next() {
  WsMessage msg;
  bool in_fragment = false;
  for (;;) {
    std::uint8_t h[2];
    if (!net::read_exact(fd_, h, 2)) return std::nullopt;
    const bool fin = h[0] & 0x80;
    if (h[0] & 0x70) throw ProtocolError("websocket extension bits set");
    const auto op = static_cast<Opcode>(h[0] & 0x0F);
    const bool masked = h[1] & 0x80;
    if (masked != expect_masked_) throw ProtocolError("websocket masking rule violated");
    std::uint64_t len = h[1] & 0x7F;
    if (len == 126) {
      std::uint8_t b[2];
      read_or_throw(fd_, b, 2);
      len = (std::uint64_t{b[0]} << 8) | b[1];
    } else if (len == 127) {
      std::uint8_t b[8];
      read_or_throw(fd_, b, 8);
      len = 0;
      for (auto x : b) len = (len << 8) | x;
    }
    if (len > kMaxMessage) throw ProtocolError("websocket frame too large");
    std::uint8_t key[4] = {0, 0, 0, 0};
    if (masked) read_or_throw(fd_, key, 4);
    wire::Bytes payload(len);
    if (len > 0) read_or_throw(fd_, payload.data(), len);
    if (masked) {
      for (std::size_t i = 0; i < payload.size(); ++i) payload[i] ^= key[i % 4];
    }

    switch (op) {
      case Opcode::ping:
        reply(Opcode::pong, payload);
        continue;
      case Opcode::pong:
        continue;
      case Opcode::close:
        reply(Opcode::close, std::span<const std::uint8_t>(payload.data(), std::min<std::size_t>(payload.size(), 2)));
        return std::nullopt;
      case Opcode::continuation:
        if (!in_fragment) throw ProtocolError("unexpected websocket continuation");
        break;
      case Opcode::text:
      case Opcode::binary:
        if (in_fragment) throw ProtocolError("websocket message interleaved with a fragment");
        msg.opcode = op;
        in_fragment = true;
        break;
      default:
        throw ProtocolError("unknown websocket opcode");
    }
    if (msg.payload.size() + payload.size() > kMaxMessage) throw ProtocolError("websocket message too large");
    msg.payload.insert(msg.payload.end(), payload.begin(), payload.end());
    if (fin) return msg;
  }
}

void client_handshake(int fd, const std::string& host, const std::string& path) {
  std::uint8_t nonce[16];
  std::random_device rd;
  for (auto& b : nonce) b = static_cast<std::uint8_t>(rd());
  std::string key = base64(nonce, sizeof(nonce));
  std::string req = "GET " + path + " HTTP/1.1\r\nHost: " + host +
                    "\r\nUpgrade: websocket\r\nConnection: Upgrade\r\nSec-WebSocket-Key: " + key +
                    "\r\nSec-WebSocket-Version: 13\r\n\r\n";
  net::write_all(fd, {reinterpret_cast<const std::uint8_t*>(req.data()), req.size()});
  std::string head;
  while (head.find("\r\n\r\n") == std::string::npos) {
    if (head.size() > kMaxHead) throw ProtocolError("HTTP response head too large");
    char c;
    if (!net::read_exact(fd, &c, 1)) throw ProtocolError("server closed during websocket handshake");
    head.push_back(c);
  }
  if (head.rfind("HTTP/1.1 101", 0) != 0) throw ProtocolError("websocket upgrade refused: " + head.substr(0, head.find('\r')));
  if (lower(head).find(lower("sec-websocket-accept: " + accept_key(key))) == std::string::npos) {
    throw ProtocolError("bad Sec-WebSocket-Accept");
  }
}

}  // namespace insitu::ws
