#pragma once

#include <json.hpp>

#include <filesystem>
#include <vector>

#include "cutkit/error.hpp"

namespace cutkit::jsonl {

// Parse one JSON object per non-empty line. Errors name the 1-based line.
std::vector<nlohmann::json> load(const std::filesystem::path& path);

void save(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);

void append(const std::filesystem::path& path, const nlohmann::json& row);

// dump() that substitutes U+FFFD for undecodable bytes instead of throwing.
// Byte-level model output is not always valid UTF-8.
std::string dump_lossy(const nlohmann::json& row, int indent = -1);

}  // namespace cutkit::jsonl
