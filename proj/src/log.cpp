#include "insitu/log.hpp"

#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <string>

namespace insitu::log {

namespace {

Level from_env() {
  const char* env = std::getenv("INSITU_LOG");
  if (!env) return Level::warn;
  std::string v(env);
  if (v == "debug") return Level::debug;
  if (v == "info") return Level::info;
  if (v == "error") return Level::error;
  if (v == "off") return Level::off;
  return Level::warn;
}

std::atomic<Level>& current() {
  static std::atomic<Level> level{from_env()};
  return level;
}

constexpr std::string_view kNames[] = {"debug", "info", "warn", "error", "off"};

}  // namespace

Level threshold() { return current().load(std::memory_order_relaxed); }
void set_threshold(Level level) { current().store(level, std::memory_order_relaxed); }

void write(Level level, std::string_view text) {
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[insitu " << kNames[static_cast<int>(level)] << " pid " << ::getpid() << "] "
            << text << '\n';
}

}  // namespace insitu::log
