#pragma once

// Minimal leveled logging to stderr. Verbosity comes from SLVAE_LOG_LEVEL
// (error, warn, info, debug); default is warn.

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string>
#include <string_view>

namespace slvae::log {

enum class Level { error = 0, warn = 1, info = 2, debug = 3 };

inline Level parse_level(std::string_view s) {
  if (s == "error") return Level::error;
  if (s == "info") return Level::info;
  if (s == "debug") return Level::debug;
  return Level::warn;
}

inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("SLVAE_LOG_LEVEL");
    return env ? parse_level(env) : Level::warn;
  }();
  return level;
}

inline void set_level(Level l) { threshold() = l; }

inline void write(Level l, std::string_view tag, std::string_view msg) {
  if (static_cast<int>(l) > static_cast<int>(threshold())) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[" << tag << "] " << msg << '\n';
}

inline void error(std::string_view msg) { write(Level::error, "error", msg); }
inline void warn(std::string_view msg) { write(Level::warn, "warn", msg); }
inline void info(std::string_view msg) { write(Level::info, "info", msg); }
inline void debug(std::string_view msg) { write(Level::debug, "debug", msg); }

}  // namespace slvae::log
