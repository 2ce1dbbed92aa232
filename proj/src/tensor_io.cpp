#include "spadapt/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace spadapt {
namespace io {
namespace {

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(U));
  if (!is) throw TensorError("tensor stream truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }

std::string read_string(std::istream& is) {
  const auto n = read_u64(is);
  if (n > (1ull << 32)) throw TensorError("string length out of range");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw TensorError("tensor stream truncated");
  return s;
}

}  // namespace io

namespace {

constexpr char kMagic[4] = {'S', 'P', 'A', 'T'};
constexpr std::uint8_t kVersion = 1;

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kMagic, 4);
  io::write_u8(os, kVersion);
  io::write_u8(os, static_cast<std::uint8_t>(t.dtype()));
  if (t.rank() > 255) throw TensorError("write_tensor: rank too large");
  io::write_u8(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) io::write_u64(os, e);
  if (t.dtype() == DType::f32) {
    for (float v : t.values<float>()) io::write_u32(os, std::bit_cast<std::uint32_t>(v));
  } else {
    for (double v : t.values<double>()) io::write_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw TensorError("write_tensor: stream error");
}

Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw TensorError("read_tensor: bad magic");
  const auto version = io::read_u8(is);
  if (version != kVersion) {
    throw TensorError("read_tensor: unsupported version " + std::to_string(version));
  }
  const auto code = io::read_u8(is);
  if (code != 1 && code != 2) throw TensorError("read_tensor: unknown dtype code " + std::to_string(code));
  const auto rank = io::read_u8(is);
  Shape shape(rank);
  for (auto& e : shape) e = io::read_u64(is);
  const auto n = shape_numel(shape);
  if (code == 1) {
    std::vector<float> v(n);
    for (auto& x : v) x = std::bit_cast<float>(io::read_u32(is));
    return Tensor::from_values(std::move(shape), std::move(v));
  }
  std::vector<double> v(n);
  for (auto& x : v) x = std::bit_cast<double>(io::read_u64(is));
  return Tensor::from_values(std::move(shape), std::move(v));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw TensorError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw TensorError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace spadapt
