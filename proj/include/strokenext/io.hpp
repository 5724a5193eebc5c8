#pragma once

#include <filesystem>
#include <string>

namespace strokenext {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr int kSchemaVersion = 1;

// Writes `path.tmp` and renames it over `path`; throws IoError.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);  // throws IoError

}  // namespace strokenext
