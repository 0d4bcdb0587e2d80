#pragma once

#include <iostream>
#include <mutex>
#include <sstream>
#include <string_view>

namespace insitu::log {

enum class Level { debug = 0, info = 1, warn = 2, error = 3, off = 4 };

// Initialised from INSITU_LOG (debug|info|warn|error|off); default warn.
Level threshold();
void set_threshold(Level level);
void write(Level level, std::string_view text);

template <typename... Args>
void emit(Level level, const Args&... args) {
  if (level < threshold()) return;
  std::ostringstream os;
  (os << ... << args);
  write(level, os.str());
}

template <typename... Args>
void debug(const Args&... args) { emit(Level::debug, args...); }
template <typename... Args>
void info(const Args&... args) { emit(Level::info, args...); }
template <typename... Args>
void warn(const Args&... args) { emit(Level::warn, args...); }
template <typename... Args>
void error(const Args&... args) { emit(Level::error, args...); }

}  // namespace insitu::log
