#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace autodet {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input could not be parsed (malformed JSON, wrong schema, undecodable image).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Input parsed but violates a domain invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Strings

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);

/// Lower-cases, trims and collapses internal whitespace runs to one space.
std::string normalize_phrase(std::string_view s);

std::vector<std::string> split(std::string_view s, std::string_view delim);
std::string join(const std::vector<std::string>& parts, std::string_view delim);

/// Replaces `${NAME}` with the value of environment variable NAME.
/// Unset variables are an error.
std::string interpolate_env(std::string_view s);

// ---------------------------------------------------------------------------
// Hashing

/// 64-bit FNV-1a. Stable across platforms and runs, used for seeding and
/// content addressing.
std::uint64_t fnv1a(std::string_view data, std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t hash_combine(std::uint64_t seed, std::string_view data);
std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value);
std::string hex64(std::uint64_t v);

// ---------------------------------------------------------------------------
// Random numbers

/// Deterministic generator. The engine is std::mt19937_64 (fully specified by
/// the standard); the distributions are implemented here because the standard
/// library ones are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next() { return engine_(); }
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();  // standard normal
  /// Uniform integer in [0, n). n must be > 0.
  std::size_t below(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Files

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling and rename, creating parent directories.
void write_file(const std::filesystem::path& path, std::string_view content);

}  // namespace autodet
