#pragma once

// Paillier additively homomorphic encryption over fixed-point encodings.
// Simulation grade: key sizes 512/1024/2048 bits, seeded key generation.
//
// Encryption uses g = n + 1, so g^m = 1 + m*n (mod n^2), and draws the
// randomizer as r^n = hs^a with hs = h^n for a fixed unit h derived from n and
// a short random exponent a. hs^a comes from a precomputed fixed-base table.

#include <gmpxx.h>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "crowdtemp/errors.hpp"

namespace crowdtemp {

inline constexpr unsigned kDefaultScaleBits = 40;
inline constexpr unsigned kHeadroomBits = 32;  // room for 2^32 additions before wraparound

namespace detail {

inline std::vector<unsigned char> mpz_bytes(const mpz_class& z) {
  std::size_t count = (mpz_sizeinbase(z.get_mpz_t(), 2) + 7) / 8;
  std::vector<unsigned char> out(count);
  if (sgn(z) != 0) mpz_export(out.data(), &count, 1, 1, 1, 0, z.get_mpz_t());
  out.resize(sgn(z) == 0 ? 0 : count);
  return out;
}

inline mpz_class mpz_from_bytes(std::span<const unsigned char> bytes) {
  mpz_class z;
  if (!bytes.empty()) mpz_import(z.get_mpz_t(), bytes.size(), 1, 1, 1, 0, bytes.data());
  return z;
}

inline mpz_class mulmod(const mpz_class& a, const mpz_class& b, const mpz_class& m) {
  mpz_class r = a * b;
  mpz_mod(r.get_mpz_t(), r.get_mpz_t(), m.get_mpz_t());
  return r;
}

inline mpz_class powmod(const mpz_class& b, const mpz_class& e, const mpz_class& m) {
  mpz_class r;
  mpz_powm(r.get_mpz_t(), b.get_mpz_t(), e.get_mpz_t(), m.get_mpz_t());
  return r;
}

/// Fixed-base exponentiation with 4-bit windows: entry [i][d] = base^(d*16^i).
class CombTable {
 public:
  CombTable(const mpz_class& base, unsigned exp_bits, const mpz_class& modulus)
      : modulus_(modulus), windows_((exp_bits + 3) / 4) {
    table_.resize(windows_ * 16);
    mpz_class b = base;
    for (std::size_t i = 0; i < windows_; ++i) {
      table_[i * 16] = 1;
      for (unsigned d = 1; d < 16; ++d) table_[i * 16 + d] = mulmod(table_[i * 16 + d - 1], b, modulus_);
      b = mulmod(table_[i * 16 + 15], b, modulus_);
    }
  }

  unsigned exp_bits() const { return static_cast<unsigned>(windows_ * 4); }

  mpz_class pow(const mpz_class& e) const {
    require(mpz_sizeinbase(e.get_mpz_t(), 2) <= exp_bits(), "CombTable: exponent too large");
    mpz_class r = 1;
    for (std::size_t i = 0; i < windows_; ++i) {
      unsigned d = 0;
      for (unsigned k = 0; k < 4; ++k) d |= static_cast<unsigned>(mpz_tstbit(e.get_mpz_t(), i * 4 + k)) << k;
      if (d) r = mulmod(r, table_[i * 16 + d], modulus_);
    }
    return r;
  }

 private:
  mpz_class modulus_;
  std::size_t windows_;
  std::vector<mpz_class> table_;
};

}  // namespace detail

inline std::uint64_t modulus_key_id(const mpz_class& n) {
  const auto bytes = detail::mpz_bytes(n);
  return fnv1a(std::span<const unsigned char>(bytes));
}

struct PublicKey {
  mpz_class n;
  mpz_class n2;
  unsigned bits = 0;
  std::uint64_t key_id = 0;
  std::shared_ptr<const detail::CombTable> randomizer;

  /// Everything else is derived from the modulus, so clients can rebuild the
  /// key from n alone.
  static PublicKey from_modulus(const mpz_class& n) {
    PublicKey pk;
    pk.n = n;
    pk.n2 = n * n;
    pk.bits = static_cast<unsigned>(mpz_sizeinbase(n.get_mpz_t(), 2));
    pk.key_id = modulus_key_id(n);
    gmp_randclass rng(gmp_randinit_mt);
    rng.seed(static_cast<unsigned long>(pk.key_id));
    mpz_class h;
    do h = rng.get_z_range(n); while (h < 2 || gcd(h, n) != 1);
    const mpz_class hs = detail::powmod(h, n, pk.n2);
    pk.randomizer = std::make_shared<detail::CombTable>(hs, std::max(128u, pk.bits / 4), pk.n2);
    return pk;
  }
};

struct PrivateKey {
  mpz_class p, q;
  mpz_class p2, q2;
  mpz_class hp, hq;    // CRT decryption constants
  mpz_class q_inv_p;   // q^-1 mod p
  std::uint64_t key_id = 0;
  std::shared_ptr<std::atomic<std::size_t>> uses = std::make_shared<std::atomic<std::size_t>>(0);
};

struct KeyPair {
  PublicKey pk;
  PrivateKey sk;
};

namespace detail {

inline mpz_class random_prime(gmp_randclass& rng, unsigned bits) {
  mpz_class c = rng.get_z_bits(bits);
  mpz_setbit(c.get_mpz_t(), bits - 1);
  mpz_setbit(c.get_mpz_t(), bits - 2);
  mpz_class p;
  mpz_nextprime(p.get_mpz_t(), c.get_mpz_t());
  return p;
}

/// h = L_p(g^(p-1) mod p^2)^-1 mod p with L_p(x) = (x - 1) / p.
inline mpz_class crt_constant(const mpz_class& g, const mpz_class& p, const mpz_class& p2) {
  mpz_class x = powmod(g, p - 1, p2);
  x = (x - 1) / p;
  mpz_class inv;
  if (mpz_invert(inv.get_mpz_t(), x.get_mpz_t(), p.get_mpz_t()) == 0)
    throw NumericalError("paillier keygen: CRT constant not invertible");
  return inv;
}

}  // namespace detail

inline KeyPair keygen(unsigned bits, std::uint64_t seed) {
  if (bits != 512 && bits != 1024 && bits != 2048)
    throw ContractError("keygen: key size must be 512, 1024 or 2048 bits, got " + std::to_string(bits));
  gmp_randclass rng(gmp_randinit_mt);
  rng.seed(mpz_class(std::to_string(seed)));
  mpz_class p, q, n;
  for (;;) {
    p = detail::random_prime(rng, bits / 2);
    q = detail::random_prime(rng, bits / 2);
    if (p == q) continue;
    n = p * q;
    if (mpz_sizeinbase(n.get_mpz_t(), 2) != bits) continue;
    if (gcd(n, (p - 1) * (q - 1)) != 1) continue;
    break;
  }
  KeyPair kp;
  kp.pk = PublicKey::from_modulus(n);
  auto& sk = kp.sk;
  sk.p = p;
  sk.q = q;
  sk.p2 = p * p;
  sk.q2 = q * q;
  const mpz_class g = n + 1;
  sk.hp = detail::crt_constant(g, p, sk.p2);
  sk.hq = detail::crt_constant(g, q, sk.q2);
  mpz_invert(sk.q_inv_p.get_mpz_t(), q.get_mpz_t(), p.get_mpz_t());
  sk.key_id = kp.pk.key_id;
  return kp;
}

// ---------------------------------------------------------------------------
// Fixed-point encoding

/// round(v * 2^q) reduced mod n; negatives wrap to n - |m|.
inline mpz_class encode_fixed(const PublicKey& pk, double v, unsigned scale_bits) {
  if (!std::isfinite(v)) throw DomainError("encode: non-finite value");
  mpz_class m(std::nearbyint(std::ldexp(v, static_cast<int>(scale_bits))));
  if (mpz_sizeinbase(m.get_mpz_t(), 2) + kHeadroomBits + 1 >= pk.bits)
    throw DomainError("encode: value " + std::to_string(v) + " overflows the fixed-point bound at q=" +
                      std::to_string(scale_bits));
  if (sgn(m) < 0) m += pk.n;
  return m;
}

inline double decode_fixed(const mpz_class& n, mpz_class m, unsigned scale_bits) {
  if (m > n / 2) m -= n;
  return std::ldexp(m.get_d(), -static_cast<int>(scale_bits));
}

// ---------------------------------------------------------------------------
// Ciphertexts

struct EncryptedVector {
  std::uint64_t key_id = 0;
  unsigned scale_bits = kDefaultScaleBits;
  std::vector<mpz_class> c;

  std::size_t size() const { return c.size(); }
};

/// Encrypts with its own seeded randomness so ciphertexts are reproducible.
class Encryptor {
 public:
  Encryptor(PublicKey pk, std::uint64_t seed) : pk_(std::move(pk)), rng_(gmp_randinit_mt) {
    rng_.seed(mpz_class(std::to_string(seed)));
  }

  mpz_class encrypt_raw(const mpz_class& m) {
    const mpz_class a = rng_.get_z_bits(pk_.randomizer->exp_bits());
    mpz_class gm = m * pk_.n + 1;  // (1 + n)^m mod n^2
    mpz_mod(gm.get_mpz_t(), gm.get_mpz_t(), pk_.n2.get_mpz_t());
    return detail::mulmod(gm, pk_.randomizer->pow(a), pk_.n2);
  }

  EncryptedVector encrypt(std::span<const double> v, unsigned scale_bits = kDefaultScaleBits) {
    EncryptedVector out{pk_.key_id, scale_bits, {}};
    out.c.reserve(v.size());
    std::vector<mpz_class> plain;
    plain.reserve(v.size());
    // Encode everything first so an overflow leaves nothing half-encrypted.
    for (double x : v) plain.push_back(encode_fixed(pk_, x, scale_bits));
    for (const auto& m : plain) out.c.push_back(encrypt_raw(m));
    return out;
  }

  const PublicKey& public_key() const { return pk_; }

 private:
  PublicKey pk_;
  gmp_randclass rng_;
};

inline EncryptedVector encrypt(const PublicKey& pk, std::span<const double> v, unsigned scale_bits = kDefaultScaleBits,
                               std::uint64_t seed = 0) {
  return Encryptor(pk, seed).encrypt(v, scale_bits);
}

inline mpz_class decrypt_raw(const PrivateKey& sk, const mpz_class& c) {
  const auto part = [&](const mpz_class& p, const mpz_class& p2, const mpz_class& h) {
    mpz_class x = detail::powmod(c, p - 1, p2);
    x = (x - 1) / p;
    return detail::mulmod(x, h, p);
  };
  const mpz_class mp = part(sk.p, sk.p2, sk.hp);
  const mpz_class mq = part(sk.q, sk.q2, sk.hq);
  mpz_class u = detail::mulmod(mp - mq, sk.q_inv_p, sk.p);
  return mq + u * sk.q;
}

/// One call counts as one private-key use regardless of the vector length.
inline std::vector<double> decrypt(const PrivateKey& sk, const EncryptedVector& ev) {
  if (ev.key_id != sk.key_id)
    throw IntegrityError("decrypt: ciphertext key id " + hex64(ev.key_id) + " does not match private key " +
                         hex64(sk.key_id));
  ++*sk.uses;
  const mpz_class n = sk.p * sk.q;
  const mpz_class n2 = n * n;
  std::vector<double> out;
  out.reserve(ev.size());
  for (const auto& c : ev.c) {
    if (sgn(c) <= 0 || c >= n2) throw IntegrityError("decrypt: ciphertext outside Z*_{n^2}");
    out.push_back(decode_fixed(n, decrypt_raw(sk, c), ev.scale_bits));
  }
  return out;
}

inline void add_into(const PublicKey& pk, EncryptedVector& acc, const EncryptedVector& b) {
  if (acc.key_id != pk.key_id || b.key_id != pk.key_id) throw ContractError("add_encrypted: key mismatch");
  if (acc.scale_bits != b.scale_bits) throw ContractError("add_encrypted: scale mismatch");
  if (acc.size() != b.size()) throw ContractError("add_encrypted: length mismatch");
  for (std::size_t i = 0; i < acc.size(); ++i) acc.c[i] = detail::mulmod(acc.c[i], b.c[i], pk.n2);
}

inline EncryptedVector add_encrypted(const PublicKey& pk, const EncryptedVector& a, const EncryptedVector& b) {
  EncryptedVector out = a;
  add_into(pk, out, b);
  return out;
}

// ---------------------------------------------------------------------------
// Wire format (all integers little-endian):
//   "CTEV" | u16 version=1 | u16 reserved=0 | u64 key_id | u32 scale_bits | u32 count
//   count x ( u32 byte_length | big-endian magnitude bytes )

inline constexpr std::uint16_t kWireVersion = 1;

namespace detail {

template <class T>
void put_le(std::vector<unsigned char>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <class T>
T get_le(std::span<const unsigned char> in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ParseError("ciphertext wire: truncated at byte " + std::to_string(pos));
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(in[pos + i]) << (8 * i));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::vector<unsigned char> serialize(const EncryptedVector& ev) {
  std::vector<unsigned char> out{'C', 'T', 'E', 'V'};
  detail::put_le<std::uint16_t>(out, kWireVersion);
  detail::put_le<std::uint16_t>(out, 0);
  detail::put_le<std::uint64_t>(out, ev.key_id);
  detail::put_le<std::uint32_t>(out, ev.scale_bits);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ev.size()));
  for (const auto& c : ev.c) {
    const auto bytes = detail::mpz_bytes(c);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(bytes.size()));
    out.insert(out.end(), bytes.begin(), bytes.end());
  }
  return out;
}

inline EncryptedVector deserialize(std::span<const unsigned char> in) {
  if (in.size() < 4 || std::memcmp(in.data(), "CTEV", 4) != 0) throw ParseError("ciphertext wire: bad magic");
  std::size_t pos = 4;
  if (const auto v = detail::get_le<std::uint16_t>(in, pos); v != kWireVersion)
    throw ParseError("ciphertext wire: unsupported version " + std::to_string(v));
  detail::get_le<std::uint16_t>(in, pos);
  EncryptedVector ev;
  ev.key_id = detail::get_le<std::uint64_t>(in, pos);
  ev.scale_bits = detail::get_le<std::uint32_t>(in, pos);
  const auto count = detail::get_le<std::uint32_t>(in, pos);
  ev.c.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint32_t>(in, pos);
    if (pos + len > in.size()) throw ParseError("ciphertext wire: element " + std::to_string(i) + " truncated");
    ev.c.push_back(detail::mpz_from_bytes(in.subspan(pos, len)));
    pos += len;
  }
  if (pos != in.size()) throw ParseError("ciphertext wire: trailing bytes");
  return ev;
}

}  // namespace crowdtemp
