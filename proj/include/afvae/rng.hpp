#pragma once

#include <cstdint>
#include <string_view>

namespace afvae {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Seed of the named stream `name`, draw `index`, under a base seed. Streams
/// with different names are independent, so changing how one is consumed
/// leaves the others untouched.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view name, std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return mix64(mix64(base ^ h) + index);
}

}  // namespace afvae
