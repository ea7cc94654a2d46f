#ifndef KGPATH_LOGGING_H_
#define KGPATH_LOGGING_H_

#include <iostream>
#include <string_view>

namespace kgpath::log {

enum class Level { kDebug = 0, kInfo = 1, kWarn = 2, kSilent = 3 };

inline Level& threshold() {
  static Level level = Level::kWarn;
  return level;
}

inline void emit(Level level, std::string_view msg) {
  if (level < threshold()) return;
  static constexpr const char* kTags[] = {"debug", "info", "warn"};
  std::clog << "[" << kTags[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void info(std::string_view msg) { emit(Level::kInfo, msg); }
inline void warn(std::string_view msg) { emit(Level::kWarn, msg); }

}  // namespace kgpath::log

#endif  // KGPATH_LOGGING_H_
