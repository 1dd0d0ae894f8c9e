#include <doctest.h>

#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "skillloop/skill_bank.hpp"

using namespace skillloop;
using namespace skillloop::bank;

namespace {

SkillArtifact with_counters(SkillArtifact a, double sw, std::int64_t cw, double so, std::int64_t co) {
  a.meta.sum_reward_with = sw;
  a.meta.count_with = cw;
  a.meta.sum_reward_without = so;
  a.meta.count_without = co;
  return a;
}

std::string random_content(std::mt19937_64& eng) {
  static const std::vector<std::string> kWords = {"left", "right", "lesion", "fragment", "superior", "inferior",
                                                  "synonym", "metastases", "midline", "portion", "restrict",
                                                  "bright", "axial", "coronal", "deposit", "laterality"};
  std::string s = "WHEN request ~";
  const int n = 2 + static_cast<int>(eng() % 6);
  for (int i = 0; i < n; ++i) s += " " + kWords[eng() % kWords.size()];
  return s;
}

std::vector<SkillArtifact> random_artifacts(std::mt19937_64& eng, int n, int round, int dim) {
  const auto& reg = skill_tag_registry();
  std::vector<SkillArtifact> out;
  for (int i = 0; i < n; ++i) {
    auto a = make_artifact(reg[eng() % 3], random_content(eng), round, {"ep-" + std::to_string(eng() % 1000)}, dim);
    a.meta.retrieval_count = static_cast<std::int64_t>(eng() % 5);
    a.meta.count_with = static_cast<std::int64_t>(eng() % 4);
    a.meta.sum_reward_with = static_cast<double>(a.meta.count_with) * 0.5;
    a.meta.count_without = static_cast<std::int64_t>(eng() % 4);
    a.meta.sum_reward_without = static_cast<double>(a.meta.count_without) * 0.25;
    out.push_back(std::move(a));
  }
  return out;
}

double total_with(const std::vector<SkillArtifact>& xs) {
  double s = 0.0;
  for (const auto& a : xs) s += a.meta.sum_reward_with;
  return s;
}

std::int64_t total_count(const std::vector<SkillArtifact>& xs) {
  std::int64_t s = 0;
  for (const auto& a : xs) s += a.meta.count_with + a.meta.count_without + a.meta.retrieval_count;
  return s;
}

std::vector<std::string> ids(const std::vector<SkillArtifact>& xs) {
  std::vector<std::string> out;
  for (const auto& a : xs) out.push_back(a.skill_id);
  return out;
}

}  // namespace

TEST_CASE("embedding of empty text is the zero vector") {
  const auto v = embed("", 64);
  CHECK(v.size() == 64);
  for (double x : v) CHECK(x == 0.0);
  CHECK_THROWS_AS(embed("x", 8), ValidationError);
}

TEST_CASE("embedding matches the hand definition and is order invariant") {
  for (const std::string s : {"left lesion", "Segment the LEFT lesion, please", "fragment superior superior"}) {
    const auto v = embed(s, 256);
    const auto ref = oracle::embed(s, 256);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v[i] == doctest::Approx(ref[i]).epsilon(1e-15));
  }
  CHECK(cosine(embed("left lesion", 256), embed("lesion left", 256)) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("skill ids are content addressed") {
  CHECK(make_skill_id("spatial-relation", "A  b") == make_skill_id("spatial-relation", "a b"));
  CHECK(make_skill_id("spatial-relation", "a b") != make_skill_id("modality-cue", "a b"));
  CHECK(make_skill_id("x", "y").rfind("sk-", 0) == 0);
}

TEST_CASE("retrieve: empty bank and k = 0") {
  SkillBank b;
  CHECK(retrieve(b, "left lesion", {}, 4).empty());
  b.artifacts.push_back(make_artifact("spatial-relation", "left lesion", 0, {}, 256));
  CHECK(retrieve(b, "left lesion", {}, 0).empty());
}

TEST_CASE("retrieve filters by the hand-computed similarity threshold") {
  SkillBank b;
  b.artifacts.push_back(make_artifact("spatial-relation", "left lesion side", 0, {}, 256));
  b.artifacts.push_back(make_artifact("modality-cue", "enhancement pattern contrast", 0, {}, 256));
  const std::string query = "segment left lesion";
  const auto q = oracle::embed(query, 256);
  auto dot = [](const std::vector<double>& x, const std::vector<double>& y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
  };
  const double s0 = dot(q, oracle::embed("left lesion side", 256));
  const double s1 = dot(q, oracle::embed("enhancement pattern contrast", 256));
  REQUIRE(s0 >= b.config.sim_threshold);
  REQUIRE(s1 < b.config.sim_threshold);
  const auto got = retrieve(b, query, {}, 4);
  REQUIRE(got.size() == 1);
  CHECK(got[0].tag == "spatial-relation");
}

TEST_CASE("retrieve ranks by similarity, then gain, then id, and is read-only") {
  SkillBank b;
  auto a1 = with_counters(make_artifact("spatial-relation", "left lesion", 0, {}, 256), 0.5, 1, 0.5, 1);
  auto a2 = with_counters(make_artifact("synonym-normalization", "left lesion", 0, {}, 256), 0.9, 1, 0.1, 1);
  auto a3 = make_artifact("modality-cue", "left lesion", 0, {}, 256);
  auto a4 = make_artifact("negation-handling", "left lesion", 0, {}, 256);
  auto far = make_artifact("subregion-resolution", "left lesion fragment superior portion", 0, {}, 256);
  b.artifacts = {a3, far, a1, a4, a2};
  const auto before = b;
  const auto got = retrieve(b, "left lesion", {}, 5);
  REQUIRE(got.size() == 5);
  CHECK(got[0].skill_id == a2.skill_id);
  CHECK(got[1].skill_id == a1.skill_id);
  const auto lo = std::min(a3.skill_id, a4.skill_id), hi = std::max(a3.skill_id, a4.skill_id);
  CHECK(got[2].skill_id == lo);
  CHECK(got[3].skill_id == hi);
  CHECK(got[4].skill_id == far.skill_id);
  CHECK(b == before);
  CHECK(ids(retrieve(b, "left lesion", {}, 5)) == ids(got));
  CHECK(retrieve(b, "left lesion", {}, 2).size() == 2);
}

TEST_CASE("request patterns drop stopwords and repeats") {
  CHECK(request_pattern("Please segment the left lesion on the left side") == "segment left lesion side");
  CHECK(request_pattern("") == "");
}

TEST_CASE("distill: counting and content") {
  DistillSource ep{"ep-1", "outline the left lesion", {{"spatial-relation", "keep left"}, {"synonym-normalization", "lesion"},
                                                      {"spatial-relation", "again"}},
                   CanonicalAnswer{"lesion", Laterality::left, std::nullopt}};
  const auto out = distill(std::span(&ep, 1), 3, DistillMode::heuristic, {});
  REQUIRE(out.size() == 2);
  CHECK(out[0].content == "WHEN request ~ outline left lesion THEN keep left → answer target=lesion laterality=left");
  CHECK(out[0].meta.created_round == 3);
  CHECK(out[0].meta.source_episode_ids == std::vector<std::string>{"ep-1"});
  CHECK(distill({}, 0, DistillMode::heuristic, {}).empty());

  DistillSource empty{"ep-2", "x", {}, std::nullopt};
  CHECK(distill(std::span(&empty, 1), 0, DistillMode::heuristic, {}).empty());
}

TEST_CASE("distill: identical episodes merge after dedup") {
  std::vector<DistillSource> eps(2, DistillSource{"", "outline the left lesion", {{"spatial-relation", "keep left"}},
                                                  CanonicalAnswer{"lesion", Laterality::left, std::nullopt}});
  eps[0].episode_id = "a";
  eps[1].episode_id = "b";
  const auto out = distill(eps, 0, DistillMode::heuristic, {});
  REQUIRE(out.size() == 2);
  const auto merged = dedup(out, 0.9);
  REQUIRE(merged.size() == 1);
  CHECK(merged[0].meta.source_episode_ids == std::vector<std::string>{"a", "b"});
}

TEST_CASE("distill: model-backed mode goes through the summarizer") {
  DistillSource ep{"e", "outline the left lesion", {{"spatial-relation", "keep left"}}, std::nullopt};
  std::string seen;
  const Summarizer s = [&](const std::string& prompt) {
    seen = prompt;
    return std::string("WHEN left THEN  keep left\n");
  };
  const auto out = distill(std::span(&ep, 1), 1, DistillMode::model_backed, {}, s);
  REQUIRE(out.size() == 1);
  CHECK(out[0].content == "WHEN left THEN keep left");
  CHECK(seen.find("Skill tag: spatial-relation") != std::string::npos);
  CHECK_THROWS_AS(distill(std::span(&ep, 1), 1, DistillMode::model_backed, {}), ValidationError);
}

TEST_CASE("dedup examples") {
  auto a = make_artifact("spatial-relation", "keep the left side", 0, {"e1"}, 256);
  auto b = make_artifact("spatial-relation", "keep the left side", 1, {"e2"}, 256);
  a.meta.retrieval_count = 3;
  b.meta.retrieval_count = 4;
  const auto one = dedup({a, b}, 0.9);
  REQUIRE(one.size() == 1);
  CHECK(one[0].meta.retrieval_count == 7);
  CHECK(one[0].meta.created_round == 0);

  const auto c = make_artifact("modality-cue", "keep the left side", 0, {}, 256);
  CHECK(dedup({a, c}, 0.9).size() == 2);

  std::vector<SkillArtifact> x = {a, c, make_artifact("negation-handling", "not the right", 0, {}, 256)};
  std::vector<SkillArtifact> xx = x;
  xx.insert(xx.end(), x.begin(), x.end());
  CHECK(ids(dedup(xx, 0.9)) == ids(dedup(x, 0.9)));
}

TEST_CASE("update_bank examples") {
  SkillBank b;
  b.round = 2;
  b.artifacts = {make_artifact("spatial-relation", "keep left", 0, {}, 256)};
  const auto same = update_bank(b, {});
  CHECK(same.round == 3);
  CHECK(same.artifacts == b.artifacts);

  auto dup = make_artifact("spatial-relation", "keep left", 2, {"e9"}, 256);
  dup.meta.count_with = 2;
  dup.meta.sum_reward_with = 1.5;
  const auto merged = update_bank(b, {dup});
  REQUIRE(merged.size() == 1);
  CHECK(merged.artifacts[0].meta.count_with == 2);
  CHECK(merged.artifacts[0].meta.sum_reward_with == 1.5);

  const auto grown = update_bank(b, {make_artifact("modality-cue", "bright contrast", 2, {}, 256),
                                     make_artifact("negation-handling", "not the right side", 2, {}, 256),
                                     make_artifact("subregion-resolution", "superior portion", 2, {}, 256)});
  CHECK(grown.size() == b.size() + 3);
}

TEST_CASE("bank algebra over randomized rounds") {
  std::mt19937_64 eng(31);
  SkillBank b;
  b.config.embedding_dim = 64;
  for (int t = 0; t < 10; ++t) {
    const auto delta = random_artifacts(eng, 1 + static_cast<int>(eng() % 8), t, 64);
    const double mass = total_with(b.artifacts) + total_with(delta);
    const auto counts = total_count(b.artifacts) + total_count(delta);
    const auto next = update_bank(b, delta);
    CHECK(next.size() <= b.size() + delta.size());
    CHECK(next.size() >= b.size());
    CHECK(next.round == b.round + 1);
    CHECK(total_with(next.artifacts) == doctest::Approx(mass).epsilon(1e-12));
    CHECK(total_count(next.artifacts) == counts);
    CHECK(dedup(next.artifacts, b.config.dedup_threshold) == next.artifacts);
    std::set<std::string> unique;
    for (const auto& a : next.artifacts) unique.insert(a.skill_id);
    CHECK(unique.size() == next.size());
    b = next;
  }
}

TEST_CASE("marginal gain examples") {
  const auto a = make_artifact("spatial-relation", "x", 0, {}, 64);
  const auto g = marginal_gain(with_counters(a, 0.9 + 0.8, 2, 0.5 + 0.7, 2));
  REQUIRE(g);
  CHECK(*g == doctest::Approx(0.25).epsilon(1e-12));
  CHECK_FALSE(marginal_gain(with_counters(a, 0.0, 0, 1.0, 2)));
  CHECK_FALSE(marginal_gain(with_counters(a, 1.0, 2, 0.0, 0)));
  CHECK(*marginal_gain(with_counters(a, 1.2, 2, 1.8, 3)) == doctest::Approx(0.0));
}

TEST_CASE("cull examples") {
  SkillBank b;
  b.config.embedding_dim = 64;
  const auto bad = with_counters(make_artifact("spatial-relation", "bad", 0, {}, 64), 0.4 * 10, 10, 0.5 * 10, 10);
  const auto young = with_counters(make_artifact("modality-cue", "young", 0, {}, 64), 0.05, 1, 0.95, 1);
  const auto good = with_counters(make_artifact("negation-handling", "good", 0, {}, 64), 9.0, 10, 5.0, 10);
  b.artifacts = {bad, young, good};
  const auto c = cull(b, 10, 0.0);
  CHECK(ids(c.artifacts) == ids({young, good}));
  SkillBank positive = b;
  positive.artifacts = {young, good};
  CHECK(cull(positive, 10, 0.0) == positive);
  CHECK_THROWS_AS(cull(b, 0, 0.0), ValidationError);
}

TEST_CASE("seed bank has one artifact per tag") {
  const auto s = seed_bank({});
  CHECK(s.size() == skill_tag_registry().size());
  std::set<std::string> tags;
  for (const auto& a : s.artifacts) tags.insert(a.tag);
  CHECK(tags.size() == s.size());
}

TEST_CASE("bank persistence round-trips") {
  std::mt19937_64 eng(77);
  for (int trial = 0; trial < 20; ++trial) {
    SkillBank b;
    b.config.embedding_dim = 32;
    b.round = trial;
    b.artifacts = dedup(random_artifacts(eng, static_cast<int>(eng() % 12), trial, 32), 0.9);
    for (auto& a : b.artifacts) a.meta.sum_reward_with = std::uniform_real_distribution<double>(0, 3)(eng);
    std::stringstream ss;
    write_bank(b, ss);
    const std::string text = ss.str();
    const auto back = read_bank(ss, b.config);
    CHECK(back == b);
    std::stringstream again;
    write_bank(back, again);
    CHECK(again.str() == text);
  }
}

TEST_CASE("empty bank file is a single header line") {
  SkillBank b;
  std::stringstream ss;
  write_bank(b, ss);
  CHECK(ss.str() == "{\"schema\":1,\"embedding_dim\":256,\"round\":0}\n");
}

TEST_CASE("bank read errors name the line") {
  SkillBank b;
  b.artifacts = {make_artifact("spatial-relation", "keep left", 0, {}, 256)};
  std::stringstream ss;
  write_bank(b, ss);
  const std::string full = ss.str();
  std::stringstream truncated(full.substr(0, full.size() - 40));
  try {
    (void)read_bank(truncated);
    FAIL("expected throw");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  std::stringstream wrong_schema("{\"schema\":9,\"embedding_dim\":256,\"round\":0}\n");
  CHECK_THROWS_WITH_AS(read_bank(wrong_schema), doctest::Contains("schema version 9"), ValidationError);
  std::stringstream no_header("");
  CHECK_THROWS_AS(read_bank(no_header), ValidationError);
}
