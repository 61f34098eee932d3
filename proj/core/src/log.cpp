#include "ssdiff/log.hpp"

#include <atomic>
#include <cstdlib>
#include <mutex>
#include <string>

#include <fmt/core.h>

namespace ssdiff::log {

namespace {

Level level_from_env() {
  const char* env = std::getenv("SSDIFF_LOG");
  if (!env) return Level::Warn;
  const std::string v(env);
  if (v == "debug") return Level::Debug;
  if (v == "info") return Level::Info;
  if (v == "error") return Level::Error;
  if (v == "off") return Level::Off;
  return Level::Warn;
}

std::atomic<Level>& current() {
  static std::atomic<Level> lvl{level_from_env()};
  return lvl;
}

void emit(Level lvl, std::string_view tag, std::string_view message) {
  if (lvl < current().load()) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  fmt::print(stderr, "[ssdiff {}] {}\n", tag, message);
}

}  // namespace

void set_level(Level lvl) { current().store(lvl); }
Level level() { return current().load(); }

void debug(std::string_view message) { emit(Level::Debug, "debug", message); }
void info(std::string_view message) { emit(Level::Info, "info", message); }
void warn(std::string_view message) { emit(Level::Warn, "warn", message); }
void error(std::string_view message) { emit(Level::Error, "error", message); }

}  // namespace ssdiff::log
