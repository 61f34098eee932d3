#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace ssdiff::io {

[[nodiscard]] std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it over the target.
void write_atomic(const std::filesystem::path& path, std::string_view contents);

[[nodiscard]] std::uint64_t fnv1a(std::string_view bytes);
[[nodiscard]] std::string hex64(std::uint64_t value);

// git describe of the source tree at configure time.
[[nodiscard]] std::string_view build_version() noexcept;

}  // namespace ssdiff::io
