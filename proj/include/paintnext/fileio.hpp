#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace paintnext {

/// Writes to a temporary sibling, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
/// Whole file as bytes; throws std::runtime_error when unreadable.
std::string read_file(const std::filesystem::path& path);

}  // namespace paintnext
