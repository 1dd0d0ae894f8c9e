#include <doctest.h>

#include <set>

#include "oracles.hpp"
#include "skillloop/common.hpp"

using namespace skillloop;

TEST_CASE("fnv1a64 matches the reference loop and known vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
  for (const std::string s : {"lesion", "left", "spatial-relation", "\xc3\xa9"}) CHECK(fnv1a64(s) == oracle::fnv1a(s));
}

TEST_CASE("hex64 and digest are fixed width") {
  CHECK(hex64(0) == "0000000000000000");
  CHECK(hex64(0xabcULL) == "0000000000000abc");
  CHECK(digest("x").size() == 16);
  CHECK(digest("x") == digest("x"));
  CHECK(digest("x") != digest("y"));
}

TEST_CASE("derive_seed separates labels and values") {
  std::set<std::uint64_t> seen;
  for (const char* label : {"round", "group", "case_000", "case_001"}) seen.insert(derive_seed(7, label));
  for (std::uint64_t v = 0; v < 4; ++v) seen.insert(derive_seed(7, v));
  CHECK(seen.size() == 8);
  CHECK(derive_seed(7, "round") == derive_seed(7, "round"));
  CHECK(derive_seed(7, "round") != derive_seed(8, "round"));
}

TEST_CASE("Rng helpers stay in range and replay") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(b.uniform() == u);
  }
  Rng c(3);
  std::vector<int> hist(5, 0);
  for (int i = 0; i < 5000; ++i) ++hist[c.below(5)];
  for (int h : hist) CHECK(h > 800);
  CHECK_THROWS_AS(c.below(0), ValidationError);

  std::mt19937_64 ref(99);
  Rng d(99);
  for (int i = 0; i < 100; ++i) CHECK(d.below(7) == oracle::below(ref, 7));
}

TEST_CASE("string helpers") {
  CHECK(to_lower("LeFt") == "left");
  CHECK(trim("  a b \n") == "a b");
  CHECK(collapse_whitespace(" a \t b\n\nc ") == "a b c");
  CHECK(tokenize("Left-sided LESION, x2!") == std::vector<std::string>{"left", "sided", "lesion", "x2"});
  CHECK(tokenize("").empty());
  const std::vector<std::string> parts{"a", "b", "c"};
  CHECK(join(parts, ", ") == "a, b, c");
  CHECK(iequals("Axial MIP", "axial mip"));
  CHECK_FALSE(iequals("axial", "axia"));
}

TEST_CASE("tokenize agrees with the reference splitter") {
  for (const std::string s : {"segment the left lesion", "Résumé: 3 foci; bilateral?", "a--b__c", "  "})
    CHECK(tokenize(s) == oracle::words(s));
}

TEST_CASE("laterality names round-trip") {
  for (auto l : {Laterality::left, Laterality::right, Laterality::bilateral}) CHECK(parse_laterality(to_string(l)) == l);
  CHECK(parse_laterality("LEFT") == Laterality::left);
  CHECK_FALSE(parse_laterality("middle").has_value());
}

TEST_CASE("skill tag registry is closed with six tags") {
  const auto& reg = skill_tag_registry();
  CHECK(reg.size() == 6);
  CHECK(is_registered_tag(tags::kSpatialRelation));
  CHECK(is_registered_tag(tags::kSubregionResolution));
  CHECK_FALSE(is_registered_tag("made-up"));
}
