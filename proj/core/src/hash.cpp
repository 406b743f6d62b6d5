#include "ctsft/hash.hpp"

#include <bit>
#include <cstring>

namespace ctsft {

Fingerprint& Fingerprint::bytes(const void* data, std::size_t size) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state_ ^= p[i];
    state_ *= 0x100000001b3ULL;
  }
  return *this;
}

Fingerprint& Fingerprint::text(std::string_view s) {
  integer(static_cast<std::int64_t>(s.size()));
  return bytes(s.data(), s.size());
}

Fingerprint& Fingerprint::integer(std::int64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) {
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFFU);
  }
  return bytes(buf, sizeof buf);
}

Fingerprint& Fingerprint::floats(std::span<const float> values) {
  for (float f : values) {
    integer(static_cast<std::int64_t>(std::bit_cast<std::uint32_t>(f)));
  }
  return *this;
}

std::string Fingerprint::hex() const { return to_hex(state_); }

std::string to_hex(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xFU];
    v >>= 4U;
  }
  return out;
}

}  // namespace ctsft
