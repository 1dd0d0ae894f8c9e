#pragma once

// Skill artifacts, the bank that holds them, retrieval, distillation,
// deduplication, culling and persistence.

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "skillloop/common.hpp"
#include "skillloop/trace.hpp"

namespace skillloop::bank {

inline constexpr int kBankSchemaVersion = 1;

struct SkillMetadata {
  int created_round = 0;
  std::vector<std::string> source_episode_ids;
  std::int64_t retrieval_count = 0;
  double sum_reward_with = 0.0;
  std::int64_t count_with = 0;
  double sum_reward_without = 0.0;
  std::int64_t count_without = 0;

  bool operator==(const SkillMetadata&) const = default;
};

struct SkillArtifact {
  std::string skill_id;  // content-addressed: hash of (tag, normalized content)
  std::string tag;
  std::string content;
  SkillMetadata meta;
  std::vector<double> embedding;

  bool operator==(const SkillArtifact&) const = default;
};

struct BankConfig {
  int embedding_dim = 256;
  int k = 4;
  double sim_threshold = 0.15;
  double dedup_threshold = 0.9;

  bool operator==(const BankConfig&) const = default;
};

/// Immutable-by-convention snapshot; every mutation returns a new value.
struct SkillBank {
  int round = 0;
  std::vector<SkillArtifact> artifacts;
  BankConfig config;

  std::size_t size() const { return artifacts.size(); }
  const SkillArtifact* find(std::string_view skill_id) const;
  bool operator==(const SkillBank&) const = default;
};

// ---------------- embeddings ----------------

/// Feature hashing over lowercase alphanumeric tokens: token -> FNV-1a 64,
/// index = h mod dim, sign = bit 32 of h (set -> -1), summed then L2
/// normalized. Throws for dim < 16.
std::vector<double> embed(std::string_view text, int dim);

/// Retrieval representation. The hashing embedder is the default; a remote
/// embedding service can implement the same interface.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::vector<double> embed(std::string_view text, int dim) const = 0;
};

class HashingEmbedder final : public EmbeddingProvider {
 public:
  std::vector<double> embed(std::string_view text, int dim) const override { return bank::embed(text, dim); }
};

double cosine(std::span<const double> a, std::span<const double> b);

std::string normalize_content(std::string_view content);
std::string make_skill_id(std::string_view tag, std::string_view content);
SkillArtifact make_artifact(std::string tag, std::string content, int created_round,
                            std::vector<std::string> source_episode_ids, int embedding_dim);

// ---------------- operations ----------------

/// Top-k by cosine(embed(query + captions), artifact embedding) among those at
/// or above the threshold; ties by higher marginal gain (undefined ranks
/// last), then skill_id. Read-only.
std::vector<SkillArtifact> retrieve(const SkillBank& bank, std::string_view query_text,
                                    std::span<const std::string> view_captions, int k,
                                    const EmbeddingProvider& embedder = HashingEmbedder{});

/// What distillation needs from an episode.
struct DistillSource {
  std::string episode_id;
  std::string request_text;
  std::vector<trace::RationaleStep> rationale;
  std::optional<CanonicalAnswer> answer;
};

enum class DistillMode { heuristic, model_backed };

/// Turns a summarization prompt into skill content (model-backed mode).
using Summarizer = std::function<std::string(const std::string& prompt)>;

/// Trigger pattern used in distilled content: distinct lowercase non-stopword
/// tokens in first-appearance order.
std::string request_pattern(std::string_view request_text);
std::string describe_answer(const std::optional<CanonicalAnswer>& answer);

/// One artifact per distinct skill tag per episode (first step of each tag).
std::vector<SkillArtifact> distill(std::span<const DistillSource> top_episodes, int round, DistillMode mode,
                                   const BankConfig& config, const Summarizer& summarizer = {});

/// Survivors in (created_round, skill_id) order; a later artifact merges into
/// the first survivor with the same tag and cosine >= threshold (or the same
/// skill_id). Merging sums counters and unions source ids.
std::vector<SkillArtifact> dedup(std::vector<SkillArtifact> artifacts, double dedup_threshold);

/// dedup(bank ∪ new), round + 1.
SkillBank update_bank(const SkillBank& bank, std::vector<SkillArtifact> new_artifacts);

/// mean(with) - mean(without); nullopt when either count is zero.
std::optional<double> marginal_gain(const SkillArtifact& artifact);

/// Removes artifacts observed at least min_uses times whose gain is defined
/// and below min_gain.
SkillBank cull(const SkillBank& bank, int min_uses = 10, double min_gain = 0.0);

/// One generic artifact per registered tag, used as a static starting bank.
SkillBank seed_bank(const BankConfig& config);

// ---------------- persistence ----------------

/// JSONL: header {"schema","embedding_dim","round"} then one artifact per line.
void write_bank(const SkillBank& bank, std::ostream& out);
/// `config` supplies retrieval/dedup settings; embedding_dim comes from the header.
SkillBank read_bank(std::istream& in, const BankConfig& config = {});
void save_bank(const SkillBank& bank, const std::filesystem::path& path);
SkillBank load_bank(const std::filesystem::path& path, const BankConfig& config = {});

}  // namespace skillloop::bank
