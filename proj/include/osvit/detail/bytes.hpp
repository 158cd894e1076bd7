#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

// Little-endian scalar encoding helpers for the binary containers.
namespace osvit::detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
      std::swap(raw[i], raw[sizeof(T) - 1 - i]);
  }
  out.insert(out.end(), raw, raw + sizeof(T));
}

// Reads T at `offset`; caller guarantees bounds. `swap` flips byte order
// relative to little-endian.
template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t offset,
         bool swap = false) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, bytes.data() + offset, sizeof(T));
  const bool flip = swap != (std::endian::native == std::endian::big);
  if (flip) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i)
      std::swap(raw[i], raw[sizeof(T) - 1 - i]);
  }
  T value;
  std::memcpy(&value, raw, sizeof(T));
  return value;
}

}  // namespace osvit::detail
