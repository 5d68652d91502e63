#include "chronident/log.hpp"

#include <atomic>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <string_view>

namespace chronident::log {

namespace {

Level from_env() {
  const char* v = std::getenv("CHRONIDENT_LOG");
  if (!v) return Level::warn;
  const std::string_view s(v);
  if (s == "quiet" || s == "0") return Level::quiet;
  if (s == "info" || s == "2") return Level::info;
  if (s == "debug" || s == "3") return Level::debug;
  return Level::warn;
}

std::atomic<int>& current() {
  static std::atomic<int> lv{static_cast<int>(from_env())};
  return lv;
}

std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

Level level() { return static_cast<Level>(current().load()); }

void set_level(Level lv) { current().store(static_cast<int>(lv)); }

void write(Level lv, const std::string& msg) {
  if (lv == Level::quiet || static_cast<int>(lv) > current().load()) return;
  static constexpr const char* tag[] = {"", "warn", "info", "debug"};
  std::lock_guard<std::mutex> lock(sink_mutex());
  std::cerr << "[chronident " << tag[static_cast<int>(lv)] << "] " << msg << '\n';
}

}  // namespace chronident::log
