#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>

namespace ctxcomp {

// FNV-1a, 64-bit. Used for document content digests, checkpoint integrity
// trailers and run fingerprints. Stable across platforms and builds.
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x00000100000001b3ULL;

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a(std::span<const std::uint32_t> ids, std::uint64_t h = kFnvOffset) {
  for (std::uint32_t id : ids) {
    // hash the little-endian byte view so the digest matches the file format
    unsigned char b[4] = {static_cast<unsigned char>(id & 0xff),
                          static_cast<unsigned char>((id >> 8) & 0xff),
                          static_cast<unsigned char>((id >> 16) & 0xff),
                          static_cast<unsigned char>((id >> 24) & 0xff)};
    h = fnv1a(b, 4, h);
  }
  return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = kFnvOffset) {
  return fnv1a(s.data(), s.size(), h);
}

inline std::string digest_hex(std::uint64_t d) {
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = hex[d & 0xf];
    d >>= 4;
  }
  return out;
}

}  // namespace ctxcomp
