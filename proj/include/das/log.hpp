#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace das::logging {

enum class Level { quiet = 0, warn = 1, info = 2 };

inline std::atomic<int>& level_ref() {
  static std::atomic<int> level{static_cast<int>(Level::warn)};
  return level;
}

inline void set_level(Level l) { level_ref() = static_cast<int>(l); }

inline void warn(std::string_view msg) {
  if (level_ref() >= static_cast<int>(Level::warn)) std::clog << "[das] warning: " << msg << '\n';
}

inline void info(std::string_view msg) {
  if (level_ref() >= static_cast<int>(Level::info)) std::clog << "[das] " << msg << '\n';
}

}  // namespace das::logging
