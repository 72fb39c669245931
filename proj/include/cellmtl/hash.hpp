#pragma once

#include <filesystem>
#include <span>
#include <string>

namespace cellmtl {

/// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::span<const std::byte> bytes);
std::string sha256_hex(const std::string& text);
/// Streams the file; throws LoadError if it cannot be read.
std::string sha256_file(const std::filesystem::path& path);

} // namespace cellmtl
