#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "spadapt/tensor.hpp"

namespace spadapt {

/// Binary tensor record:
///   "SPAT" | u8 version=1 | u8 dtype (1=f32, 2=f64) | u8 rank |
///   rank x u64 LE extents | raw LE values, row-major.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

namespace io {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_string(std::ostream& os, const std::string& s);  // u64 length + bytes

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
std::string read_string(std::istream& is);

}  // namespace io
}  // namespace spadapt
