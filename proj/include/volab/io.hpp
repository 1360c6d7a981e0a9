#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "volab/tensor.hpp"

namespace volab {

// Shortest round-trip decimal form; identical output on every run.
std::string format_double(double v);
double parse_double(std::string_view s);

std::vector<std::string> split_csv_line(std::string_view line);
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

namespace binary {
void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_f32(std::ostream& os, float v);
void write_string(std::ostream& os, std::string_view s);
std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
float read_f32(std::istream& is);
std::string read_string(std::istream& is);
void expect_magic(std::istream& is, std::string_view magic, const std::string& what);
}  // namespace binary

using NamedTensors = std::map<std::string, Tensor>;

// "VLCK", u32 count, then per tensor: u32 name length, name bytes, u32 rank,
// u32 dims, little-endian f32 values. Entries are written in name order.
void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::filesystem::path& path);

}  // namespace volab
