#ifndef KGPATH_BINARY_IO_H_
#define KGPATH_BINARY_IO_H_

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>

#include "kgpath/errors.h"

// Little-endian scalar I/O for the cache and checkpoint payloads.
namespace kgpath::binary {

template <typename Word>
inline Word to_little(Word w) {
  if constexpr (std::endian::native == std::endian::big) {
    Word out = 0;
    for (std::size_t i = 0; i < sizeof(Word); ++i) {
      out = static_cast<Word>((out << 8) | ((w >> (8 * i)) & 0xff));
    }
    return out;
  }
  return w;
}

inline void write_f64(std::ostream& out, double v) {
  std::uint64_t w;
  std::memcpy(&w, &v, sizeof w);
  w = to_little(w);
  out.write(reinterpret_cast<const char*>(&w), sizeof w);
}

inline void write_i32(std::ostream& out, std::int32_t v) {
  std::uint32_t w;
  std::memcpy(&w, &v, sizeof w);
  w = to_little(w);
  out.write(reinterpret_cast<const char*>(&w), sizeof w);
}

inline double read_f64(std::istream& in) {
  std::uint64_t w = 0;
  if (!in.read(reinterpret_cast<char*>(&w), sizeof w)) throw IoError("truncated binary payload");
  w = to_little(w);
  double v;
  std::memcpy(&v, &w, sizeof v);
  return v;
}

inline std::int32_t read_i32(std::istream& in) {
  std::uint32_t w = 0;
  if (!in.read(reinterpret_cast<char*>(&w), sizeof w)) throw IoError("truncated binary payload");
  w = to_little(w);
  std::int32_t v;
  std::memcpy(&v, &w, sizeof v);
  return v;
}

}  // namespace kgpath::binary

#endif  // KGPATH_BINARY_IO_H_
