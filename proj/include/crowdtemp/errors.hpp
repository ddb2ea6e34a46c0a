#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace crowdtemp {

// Precondition or shape violation by the caller.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Argument outside the mathematical domain (e.g. sigma <= 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// NaN/Inf produced somewhere inside a computation.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged or could not make progress.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Ciphertext / key mismatch or corrupted wire data.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ContractError(what);
}

// FNV-1a, 64 bit. Used for checksums of parameter vectors and configs.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(s.data()), s.size()), h);
}

inline std::uint64_t fnv1a(std::span<const double> values, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(values.data()),
                                              values.size() * sizeof(double)),
               h);
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace crowdtemp
