#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace skillloop {

struct Error : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised for malformed configuration, schema violations and invalid arguments.
struct ValidationError : public Error {
  using Error::Error;
};

struct IoError : public Error {
  using Error::Error;
};

// ---------------- hashing ----------------

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

/// 64-bit FNV-1a. Stable across processes and platforms; used for embeddings,
/// content-addressed ids and digests.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = kFnvOffset) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(std::uint64_t value);

/// Digest of arbitrary bytes as 16 hex chars.
std::string digest(std::string_view bytes);

/// Combines a base seed with a label into a new seed (splitmix64 finalizer).
std::uint64_t derive_seed(std::uint64_t base, std::string_view label);
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t value);

// ---------------- rng ----------------

/// Seeded generator with distribution helpers that do not depend on the
/// standard library's implementation-defined distributions, so sequences are
/// identical across toolchains.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  const T& pick(const std::vector<T>& items) {
    return items.at(static_cast<std::size_t>(below(items.size())));
  }

 private:
  std::mt19937_64 engine_;
};

// ---------------- strings ----------------

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
/// Collapses internal whitespace runs to single spaces and trims the ends.
std::string collapse_whitespace(std::string_view s);
/// Lowercased maximal runs of ASCII alphanumerics (bytes >= 0x80 count as
/// word characters so UTF-8 words stay intact).
std::vector<std::string> tokenize(std::string_view s);
std::string join(std::span<const std::string> parts, std::string_view sep);
bool iequals(std::string_view a, std::string_view b);

// ---------------- shared domain vocabulary ----------------

enum class Laterality { left, right, bilateral };

std::string_view to_string(Laterality l);
std::optional<Laterality> parse_laterality(std::string_view s);

/// The executable part of a structured output.
struct CanonicalAnswer {
  std::string target_id;
  std::optional<Laterality> laterality;
  std::optional<std::string> subregion;

  bool operator==(const CanonicalAnswer&) const = default;
};

/// Closed registry of reasoning skill tags.
const std::vector<std::string>& skill_tag_registry();
bool is_registered_tag(std::string_view tag);

namespace tags {
inline constexpr std::string_view kAnatomicalLocalization = "anatomical-localization";
inline constexpr std::string_view kSpatialRelation = "spatial-relation";
inline constexpr std::string_view kSynonymNormalization = "synonym-normalization";
inline constexpr std::string_view kModalityCue = "modality-cue";
inline constexpr std::string_view kNegationHandling = "negation-handling";
inline constexpr std::string_view kSubregionResolution = "subregion-resolution";
}  // namespace tags

}  // namespace skillloop
