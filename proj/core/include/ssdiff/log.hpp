#pragma once

#include <string_view>

namespace ssdiff::log {

enum class Level { Debug = 0, Info = 1, Warn = 2, Error = 3, Off = 4 };

// Threshold read once from SSDIFF_LOG (debug|info|warn|error|off); default warn.
void set_level(Level level);
[[nodiscard]] Level level();

void debug(std::string_view message);
void info(std::string_view message);
void warn(std::string_view message);
void error(std::string_view message);

}  // namespace ssdiff::log
