#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

namespace hypsae::io {

using Sha256 = std::array<std::uint8_t, 32>;

Sha256 sha256(std::string_view data);
std::string to_hex(const Sha256& digest);
std::string sha256_hex(std::string_view data);

void write_u32(std::ostream& os, std::uint32_t v);
void write_f32(std::ostream& os, float v);
std::uint32_t read_u32(std::istream& is);
float read_f32(std::istream& is);

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace hypsae::io
