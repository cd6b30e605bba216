#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "mfopt/errors.hpp"
#include "mfopt/grid.hpp"

// Bit-exact little-endian block formats:
//   heightmap: magic "MDEH", u32 width, u32 height, f32 cell_size,
//              width*height f32 values row-major
//   mask:      magic "MDEM", same header, then 3 planes
//              (mass_density, youngs_modulus, poisson_ratio)
namespace mfopt::io {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("unexpected end of stream");
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

inline void write_u64(std::ostream& os, uint64_t v) {
  write_u32(os, uint32_t(v & 0xffffffffULL));
  write_u32(os, uint32_t(v >> 32));
}

inline uint64_t read_u64(std::istream& is) {
  const uint64_t lo = read_u32(is);
  const uint64_t hi = read_u32(is);
  return lo | (hi << 32);
}

inline void write_f32(std::ostream& os, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  write_u32(os, bits);
}

inline float read_f32(std::istream& is) {
  const uint32_t bits = read_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline void write_magic(std::ostream& os, const char m[4]) { os.write(m, 4); }

inline void expect_magic(std::istream& is, const char m[4]) {
  char got[4];
  is.read(got, 4);
  if (!is || std::memcmp(got, m, 4) != 0)
    throw IoError(std::string("bad magic, expected ") + std::string(m, 4));
}

inline void write_f32_plane(std::ostream& os, const std::vector<float>& v) {
  for (float x : v) write_f32(os, x);
}

inline void read_f32_plane(std::istream& is, std::vector<float>& v, size_t n) {
  v.resize(n);
  for (size_t i = 0; i < n; ++i) v[i] = read_f32(is);
}

inline void write_heightmap(std::ostream& os, const Heightmap& m) {
  write_magic(os, "MDEH");
  write_u32(os, uint32_t(m.width));
  write_u32(os, uint32_t(m.height));
  write_f32(os, m.cell_size);
  write_f32_plane(os, m.values);
}

inline Heightmap read_heightmap(std::istream& is) {
  expect_magic(is, "MDEH");
  Heightmap m;
  m.width = int(read_u32(is));
  m.height = int(read_u32(is));
  m.cell_size = read_f32(is);
  if (m.width < 8 || m.height < 8 || m.width > (1 << 16) || m.height > (1 << 16))
    throw IoError("heightmap dims out of range");
  read_f32_plane(is, m.values, size_t(m.width) * size_t(m.height));
  return m;
}

inline void write_mask(std::ostream& os, const MaterialMask& m) {
  write_magic(os, "MDEM");
  write_u32(os, uint32_t(m.width));
  write_u32(os, uint32_t(m.height));
  write_f32(os, m.cell_size);
  write_f32_plane(os, m.mass_density);
  write_f32_plane(os, m.youngs_modulus);
  write_f32_plane(os, m.poisson_ratio);
}

inline MaterialMask read_mask(std::istream& is) {
  expect_magic(is, "MDEM");
  MaterialMask m;
  m.width = int(read_u32(is));
  m.height = int(read_u32(is));
  m.cell_size = read_f32(is);
  if (m.width < 8 || m.height < 8 || m.width > (1 << 16) || m.height > (1 << 16))
    throw IoError("mask dims out of range");
  const size_t n = size_t(m.width) * size_t(m.height);
  read_f32_plane(is, m.mass_density, n);
  read_f32_plane(is, m.youngs_modulus, n);
  read_f32_plane(is, m.poisson_ratio, n);
  return m;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  return os;
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  return is;
}

}  // namespace mfopt::io
