#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace ctsft {

/// 64-bit FNV-1a, used for provenance fingerprints of checkpoints, example
/// sets and configurations. Not a cryptographic hash.
class Fingerprint {
 public:
  Fingerprint& bytes(const void* data, std::size_t size);
  Fingerprint& text(std::string_view s);
  Fingerprint& integer(std::int64_t v);
  Fingerprint& floats(std::span<const float> values);

  [[nodiscard]] std::uint64_t value() const { return state_; }
  [[nodiscard]] std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string to_hex(std::uint64_t v);

}  // namespace ctsft
