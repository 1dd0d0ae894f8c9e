#include "skillloop/common.hpp"

#include <algorithm>
#include <cctype>

namespace skillloop {

std::string hex64(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xF];
    value >>= 4;
  }
  return out;
}

std::string digest(std::string_view bytes) { return hex64(fnv1a64(bytes)); }

namespace {
std::uint64_t splitmix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  return splitmix(base ^ fnv1a64(label));
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t value) {
  return splitmix(splitmix(base) ^ value);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw ValidationError("Rng::below: n must be positive");
  // rejection sampling removes modulo bias
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return x % n;
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view s) {
  auto is_space = [](unsigned char c) { return std::isspace(c) != 0; };
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

std::string join(std::span<const std::string> parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.append(sep);
    out.append(parts[i]);
  }
  return out;
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

std::string_view to_string(Laterality l) {
  switch (l) {
    case Laterality::left: return "left";
    case Laterality::right: return "right";
    case Laterality::bilateral: return "bilateral";
  }
  return "bilateral";
}

std::optional<Laterality> parse_laterality(std::string_view s) {
  const std::string v = to_lower(trim(s));
  if (v == "left") return Laterality::left;
  if (v == "right") return Laterality::right;
  if (v == "bilateral") return Laterality::bilateral;
  return std::nullopt;
}

const std::vector<std::string>& skill_tag_registry() {
  static const std::vector<std::string> kTags = {
      std::string(tags::kAnatomicalLocalization), std::string(tags::kSpatialRelation),
      std::string(tags::kSynonymNormalization),   std::string(tags::kModalityCue),
      std::string(tags::kNegationHandling),       std::string(tags::kSubregionResolution),
  };
  return kTags;
}

bool is_registered_tag(std::string_view tag) {
  const auto& reg = skill_tag_registry();
  return std::find(reg.begin(), reg.end(), tag) != reg.end();
}

}  // namespace skillloop
