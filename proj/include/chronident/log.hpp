#ifndef CHRONIDENT_LOG_HPP
#define CHRONIDENT_LOG_HPP

#include <string>

namespace chronident::log {

enum class Level { quiet = 0, warn = 1, info = 2, debug = 3 };

/// Read once from CHRONIDENT_LOG (quiet|warn|info|debug, default warn).
Level level();
void set_level(Level lv);

/// Thread-safe, one line per call on stderr.
void write(Level lv, const std::string& msg);

inline void warn(const std::string& msg) { write(Level::warn, msg); }
inline void info(const std::string& msg) { write(Level::info, msg); }
inline void debug(const std::string& msg) { write(Level::debug, msg); }

}  // namespace chronident::log

#endif  // CHRONIDENT_LOG_HPP
