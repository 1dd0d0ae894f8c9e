#include "skillloop/skill_bank.hpp"

#include <algorithm>
#include <set>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace skillloop::bank {

using ojson = nlohmann::ordered_json;

const SkillArtifact* SkillBank::find(std::string_view skill_id) const {
  for (const auto& a : artifacts)
    if (a.skill_id == skill_id) return &a;
  return nullptr;
}

std::vector<double> embed(std::string_view text, int dim) {
  if (dim < 16) throw ValidationError("embed: dim must be >= 16, got " + std::to_string(dim));
  std::vector<double> v(static_cast<std::size_t>(dim), 0.0);
  for (const auto& tok : tokenize(text)) {
    const std::uint64_t h = fnv1a64(tok);
    const double sign = ((h >> 32) & 1U) ? -1.0 : 1.0;
    v[static_cast<std::size_t>(h % static_cast<std::uint64_t>(dim))] += sign;
  }
  double norm = 0.0;
  for (double x : v) norm += x * x;
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
  }
  return v;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::string normalize_content(std::string_view content) { return collapse_whitespace(to_lower(content)); }

std::string make_skill_id(std::string_view tag, std::string_view content) {
  std::string key(tag);
  key.push_back('\n');
  key += normalize_content(content);
  return "sk-" + hex64(fnv1a64(key));
}

SkillArtifact make_artifact(std::string tag, std::string content, int created_round,
                            std::vector<std::string> source_episode_ids, int embedding_dim) {
  SkillArtifact a;
  a.skill_id = make_skill_id(tag, content);
  a.embedding = embed(content, embedding_dim);
  a.tag = std::move(tag);
  a.content = std::move(content);
  a.meta.created_round = created_round;
  a.meta.source_episode_ids = std::move(source_episode_ids);
  return a;
}

std::optional<double> marginal_gain(const SkillArtifact& a) {
  if (a.meta.count_with == 0 || a.meta.count_without == 0) return std::nullopt;
  return a.meta.sum_reward_with / static_cast<double>(a.meta.count_with) -
         a.meta.sum_reward_without / static_cast<double>(a.meta.count_without);
}

std::vector<SkillArtifact> retrieve(const SkillBank& bank, std::string_view query_text,
                                    std::span<const std::string> view_captions, int k,
                                    const EmbeddingProvider& embedder) {
  if (k <= 0 || bank.artifacts.empty()) return {};
  std::string query(query_text);
  for (const auto& c : view_captions) {
    query.push_back(' ');
    query += c;
  }
  const auto q = embedder.embed(query, bank.config.embedding_dim);

  struct Scored {
    double sim;
    std::optional<double> gain;
    const SkillArtifact* artifact;
  };
  std::vector<Scored> scored;
  for (const auto& a : bank.artifacts) {
    const double sim = cosine(q, a.embedding);
    if (sim >= bank.config.sim_threshold) scored.push_back({sim, marginal_gain(a), &a});
  }
  std::sort(scored.begin(), scored.end(), [](const Scored& x, const Scored& y) {
    if (x.sim != y.sim) return x.sim > y.sim;
    if (x.gain.has_value() != y.gain.has_value()) return x.gain.has_value();
    if (x.gain && *x.gain != *y.gain) return *x.gain > *y.gain;
    return x.artifact->skill_id < y.artifact->skill_id;
  });
  std::vector<SkillArtifact> out;
  for (std::size_t i = 0; i < scored.size() && i < static_cast<std::size_t>(k); ++i) out.push_back(*scored[i].artifact);
  return out;
}

namespace {
const std::set<std::string>& stopwords() {
  static const std::set<std::string> words = {
      "a",    "an",   "and",  "are", "as",   "at",     "be",   "can",  "for",  "from", "in",   "is",  "it",
      "its",  "me",   "my",   "of",  "on",   "or",     "our",  "please", "seen", "that", "the",  "this", "to",
      "was",  "we",   "with", "you", "your", "kindly", "would", "could", "there"};
  return words;
}
}  // namespace

std::string request_pattern(std::string_view request_text) {
  std::vector<std::string> kept;
  for (auto& t : tokenize(request_text)) {
    if (stopwords().count(t) || std::find(kept.begin(), kept.end(), t) != kept.end()) continue;
    kept.push_back(std::move(t));
  }
  return join(kept, " ");
}

std::string describe_answer(const std::optional<CanonicalAnswer>& answer) {
  if (!answer) return "none";
  std::string out = "target=" + answer->target_id;
  if (answer->laterality) out += " laterality=" + std::string(to_string(*answer->laterality));
  if (answer->subregion) out += " subregion=" + *answer->subregion;
  return out;
}

std::vector<SkillArtifact> distill(std::span<const DistillSource> top_episodes, int round, DistillMode mode,
                                   const BankConfig& config, const Summarizer& summarizer) {
  if (mode == DistillMode::model_backed && !summarizer)
    throw ValidationError("distill: model-backed mode needs a summarizer");
  std::vector<SkillArtifact> out;
  for (const auto& ep : top_episodes) {
    std::vector<std::string> seen;
    for (const auto& step : ep.rationale) {
      if (std::find(seen.begin(), seen.end(), step.skill_tag) != seen.end()) continue;
      seen.push_back(step.skill_tag);
      std::string content;
      if (mode == DistillMode::heuristic) {
        content = "WHEN request ~ " + request_pattern(ep.request_text) + " THEN " + step.text + " → answer " +
                  describe_answer(ep.answer);
      } else {
        const std::string prompt =
            "Summarize the following successful reasoning step as a reusable strategy of the form "
            "'WHEN <trigger> THEN <resolution>'.\nSkill tag: " + step.skill_tag + "\nRequest: " + ep.request_text +
            "\nStep: " + step.text + "\nAnswer: " + describe_answer(ep.answer);
        content = collapse_whitespace(summarizer(prompt));
        if (content.empty()) continue;
      }
      out.push_back(make_artifact(step.skill_tag, std::move(content), round, {ep.episode_id}, config.embedding_dim));
    }
  }
  return out;
}

namespace {

void merge_into(SkillArtifact& survivor, const SkillArtifact& other) {
  auto& m = survivor.meta;
  m.retrieval_count += other.meta.retrieval_count;
  m.sum_reward_with += other.meta.sum_reward_with;
  m.count_with += other.meta.count_with;
  m.sum_reward_without += other.meta.sum_reward_without;
  m.count_without += other.meta.count_without;
  for (const auto& id : other.meta.source_episode_ids)
    if (std::find(m.source_episode_ids.begin(), m.source_episode_ids.end(), id) == m.source_episode_ids.end())
      m.source_episode_ids.push_back(id);
}

}  // namespace

std::vector<SkillArtifact> dedup(std::vector<SkillArtifact> artifacts, double dedup_threshold) {
  std::stable_sort(artifacts.begin(), artifacts.end(), [](const SkillArtifact& a, const SkillArtifact& b) {
    if (a.meta.created_round != b.meta.created_round) return a.meta.created_round < b.meta.created_round;
    return a.skill_id < b.skill_id;
  });
  std::vector<SkillArtifact> survivors;
  for (auto& a : artifacts) {
    SkillArtifact* target = nullptr;
    for (auto& s : survivors) {
      if (s.skill_id == a.skill_id || (s.tag == a.tag && cosine(s.embedding, a.embedding) >= dedup_threshold)) {
        target = &s;
        break;
      }
    }
    if (target) {
      merge_into(*target, a);
    } else {
      survivors.push_back(std::move(a));
    }
  }
  return survivors;
}

SkillBank update_bank(const SkillBank& bank, std::vector<SkillArtifact> new_artifacts) {
  SkillBank next;
  next.round = bank.round + 1;
  next.config = bank.config;
  std::vector<SkillArtifact> all = bank.artifacts;
  for (auto& a : new_artifacts) all.push_back(std::move(a));
  next.artifacts = dedup(std::move(all), bank.config.dedup_threshold);
  return next;
}

SkillBank cull(const SkillBank& bank, int min_uses, double min_gain) {
  if (min_uses < 1) throw ValidationError("cull: min_uses must be >= 1");
  SkillBank out = bank;
  std::erase_if(out.artifacts, [&](const SkillArtifact& a) {
    const auto uses = a.meta.count_with + a.meta.count_without;
    const auto gain = marginal_gain(a);
    return uses >= min_uses && gain && *gain < min_gain;
  });
  return out;
}

SkillBank seed_bank(const BankConfig& config) {
  static const std::vector<std::pair<std::string_view, std::string_view>> kSeeds = {
      {tags::kAnatomicalLocalization,
       "WHEN request describes a suspected abnormality or clinical finding THEN locate the matching bright "
       "structure in the views before naming the target"},
      {tags::kSpatialRelation,
       "WHEN request mentions left or right side or hemisphere THEN restrict the target to that side of the "
       "midline and set laterality"},
      {tags::kSynonymNormalization,
       "WHEN request uses a synonym abbreviation or misspelled wording THEN map it to the canonical target name "
       "before answering"},
      {tags::kModalityCue,
       "WHEN request refers to scan appearance or enhancement THEN use intensity contrast in the views to pick the "
       "target"},
      {tags::kNegationHandling,
       "WHEN request excludes a structure with not or only THEN drop the excluded part from the target"},
      {tags::kSubregionResolution,
       "WHEN request asks for a portion part or piece such as superior or inferior THEN answer the parent target "
       "with the subregion field"},
  };
  SkillBank b;
  b.config = config;
  for (const auto& [tag, content] : kSeeds)
    b.artifacts.push_back(make_artifact(std::string(tag), std::string(content), 0, {}, config.embedding_dim));
  b.artifacts = dedup(std::move(b.artifacts), config.dedup_threshold);
  return b;
}

// ---------------- persistence ----------------

namespace {

ojson artifact_to_json(const SkillArtifact& a) {
  ojson j;
  j["skill_id"] = a.skill_id;
  j["tag"] = a.tag;
  j["content"] = a.content;
  j["created_round"] = a.meta.created_round;
  j["source_episode_ids"] = a.meta.source_episode_ids;
  j["retrieval_count"] = a.meta.retrieval_count;
  j["sum_reward_with"] = a.meta.sum_reward_with;
  j["count_with"] = a.meta.count_with;
  j["sum_reward_without"] = a.meta.sum_reward_without;
  j["count_without"] = a.meta.count_without;
  j["embedding"] = a.embedding;
  return j;
}

SkillArtifact artifact_from_json(const ojson& j, int dim) {
  static const std::vector<std::string> kFields = {
      "skill_id",       "tag",        "content",           "created_round", "source_episode_ids", "retrieval_count",
      "sum_reward_with", "count_with", "sum_reward_without", "count_without", "embedding"};
  if (!j.is_object()) throw ValidationError("expected an object");
  for (const auto& [key, value] : j.items())
    if (std::find(kFields.begin(), kFields.end(), key) == kFields.end())
      throw ValidationError("unknown field '" + key + "'");
  SkillArtifact a;
  a.skill_id = j.at("skill_id").get<std::string>();
  a.tag = j.at("tag").get<std::string>();
  a.content = j.at("content").get<std::string>();
  a.meta.created_round = j.at("created_round").get<int>();
  a.meta.source_episode_ids = j.at("source_episode_ids").get<std::vector<std::string>>();
  a.meta.retrieval_count = j.at("retrieval_count").get<std::int64_t>();
  a.meta.sum_reward_with = j.at("sum_reward_with").get<double>();
  a.meta.count_with = j.at("count_with").get<std::int64_t>();
  a.meta.sum_reward_without = j.at("sum_reward_without").get<double>();
  a.meta.count_without = j.at("count_without").get<std::int64_t>();
  a.embedding = j.at("embedding").get<std::vector<double>>();
  if (static_cast<int>(a.embedding.size()) != dim)
    throw ValidationError("embedding length " + std::to_string(a.embedding.size()) + " != " + std::to_string(dim));
  if (a.meta.retrieval_count < 0 || a.meta.count_with < 0 || a.meta.count_without < 0)
    throw ValidationError("negative counter");
  return a;
}

}  // namespace

void write_bank(const SkillBank& bank, std::ostream& out) {
  ojson header;
  header["schema"] = kBankSchemaVersion;
  header["embedding_dim"] = bank.config.embedding_dim;
  header["round"] = bank.round;
  out << header.dump() << '\n';
  for (const auto& a : bank.artifacts) out << artifact_to_json(a).dump() << '\n';
}

SkillBank read_bank(std::istream& in, const BankConfig& config) {
  SkillBank bank;
  bank.config = config;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const ojson j = ojson::parse(line);
      if (!have_header) {
        if (!j.is_object() || !j.contains("schema")) throw ValidationError("missing header record");
        const int schema = j.at("schema").get<int>();
        if (schema != kBankSchemaVersion)
          throw ValidationError("schema version " + std::to_string(schema) + " unsupported (expected " +
                                std::to_string(kBankSchemaVersion) + ")");
        bank.config.embedding_dim = j.at("embedding_dim").get<int>();
        bank.round = j.at("round").get<int>();
        have_header = true;
        continue;
      }
      bank.artifacts.push_back(artifact_from_json(j, bank.config.embedding_dim));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("bank line " + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("bank line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw ValidationError("bank line 1: missing header record");
  for (std::size_t i = 0; i < bank.artifacts.size(); ++i)
    for (std::size_t j = i + 1; j < bank.artifacts.size(); ++j)
      if (bank.artifacts[i].skill_id == bank.artifacts[j].skill_id)
        throw ValidationError("bank: duplicate skill_id " + bank.artifacts[i].skill_id);
  return bank;
}

void save_bank(const SkillBank& bank, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write bank file " + path.string());
  write_bank(bank, f);
  if (!f) throw IoError("write failed for " + path.string());
}

SkillBank load_bank(const std::filesystem::path& path, const BankConfig& config) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open bank file " + path.string());
  return read_bank(f, config);
}

}  // namespace skillloop::bank
