#pragma once

#include <filesystem>

#include "json.hpp"

namespace mha2gqa {

// Missing or unreadable files raise IoError; malformed JSON raises FormatError.
nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace mha2gqa
