#pragma once

// Little-endian encoding helpers shared by the binary file formats.

#include <bit>
#include <cstdint>

namespace pastille::binio {

inline void put_u32(char* p, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) p[b] = static_cast<char>((v >> (8 * b)) & 0xFFu);
}
inline void put_u64(char* p, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) p[b] = static_cast<char>((v >> (8 * b)) & 0xFFu);
}
inline void put_f32(char* p, float v) { put_u32(p, std::bit_cast<std::uint32_t>(v)); }

inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v = 0;
  for (int b = 0; b < 4; ++b) v |= std::uint32_t{static_cast<unsigned char>(p[b])} << (8 * b);
  return v;
}
inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= std::uint64_t{static_cast<unsigned char>(p[b])} << (8 * b);
  return v;
}
inline float get_f32(const char* p) { return std::bit_cast<float>(get_u32(p)); }

}  // namespace pastille::binio
