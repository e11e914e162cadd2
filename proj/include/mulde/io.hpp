#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace mulde::io {

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so a
/// failed run never leaves a partial artifact behind.
void atomic_write(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

nlohmann::json read_json(const std::filesystem::path& path);

/// Pretty-printed with a trailing newline; output is byte-stable for equal documents.
void write_json(const std::filesystem::path& path, const nlohmann::json& doc);

}  // namespace mulde::io
