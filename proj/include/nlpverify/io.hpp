#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

namespace nlv {

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view content);

// Shortest decimal form that parses back to the same double.
std::string format_double(double value);

// Fixed 17 significant digits (always round-trip safe).
std::string format_double17(double value);

// Whole-token parse; nullopt on trailing garbage or empty input.
std::optional<double> parse_double(std::string_view text);

// Lowercase hex SHA-256 of bytes.
std::string sha256_hex(std::string_view bytes);

}  // namespace nlv
