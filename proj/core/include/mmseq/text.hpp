#pragma once

// Small text and file helpers shared by the on-disk formats.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mmseq {

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double v);
/// Strict parse of a whole token; throws ValidationError on junk.
double parse_double(std::string_view text);
long long parse_int(std::string_view text);
std::uint64_t parse_uint(std::string_view text);

std::vector<std::string_view> split_ws(std::string_view line);

/// Reads a whole file; throws IoError.
std::string read_file(const std::filesystem::path& path);

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written file. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

}  // namespace mmseq
