#ifndef DOMPAT_COMMON_HPP
#define DOMPAT_COMMON_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dompat {

inline constexpr std::string_view k_tool_version = "0.1.0";

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

enum class io_errc {
  open_failed,
  bad_magic,
  bad_version,
  truncated,
  size_mismatch,
  count_mismatch,
  write_failed,
  bad_payload,
};

/// File/format failures. `code()` distinguishes bad magic, unsupported
/// version, truncation and friends so callers can react per kind.
class io_error : public std::runtime_error {
 public:
  io_error(io_errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  io_errc code() const noexcept { return code_; }

 private:
  io_errc code_;
};

/// Raised when an optimization produces a non-finite loss.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

// std::uniform_real_distribution and friends are implementation-defined, so
// all random draws go through this wrapper to keep seeded runs reproducible
// across standard libraries.
class rng_stream {
 public:
  explicit rng_stream(std::uint64_t seed) : gen_(static_cast<std::uint32_t>(seed ^ (seed >> 32))) {}

  std::uint32_t next_u32() { return gen_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen_()) * (1.0 / 4294967296.0); }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(gen_()) % n; }

  /// Box-Muller; two raw draws per value.
  double gaussian(double mean, double sd) {
    const double u1 = (static_cast<double>(gen_()) + 1.0) * (1.0 / 4294967296.0);
    const double u2 = static_cast<double>(gen_()) * (1.0 / 4294967296.0);
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mean + sd * r * std::cos(6.283185307179586 * u2);
  }

  /// In-place Fisher-Yates.
  template <typename V>
  void shuffle(V& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937 gen_;
};

// ---------------------------------------------------------------------------
// Hashing (model/pattern fingerprints)
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a64(const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string to_hex16(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

/// FNV-1a over a whole file, hex-encoded. Empty string if unreadable.
inline std::string fingerprint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[4096];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const auto got = static_cast<std::size_t>(in.gcount());
    for (std::size_t i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    if (in.eof()) break;
  }
  return to_hex16(h);
}

// ---------------------------------------------------------------------------
// Little-endian binary IO
// ---------------------------------------------------------------------------

inline void write_u32le(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32le(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw io_error(io_errc::truncated, std::string("truncated file: expected ") + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void read_exact(std::istream& in, void* dst, std::size_t n, const char* what) {
  if (!in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n))) {
    throw io_error(io_errc::truncated, std::string("truncated file: expected ") + what);
  }
}

}  // namespace dompat

#endif  // DOMPAT_COMMON_HPP
