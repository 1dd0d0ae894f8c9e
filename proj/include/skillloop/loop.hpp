#pragma once

// Evolution rounds: sample tasks and rephrasings, retrieve skills from a frozen
// bank snapshot, query the policy, parse, execute, reward, attribute rewards to
// skills, select top episodes, distill and update the bank.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillloop/policy.hpp"
#include "skillloop/reward.hpp"
#include "skillloop/skill_bank.hpp"
#include "skillloop/trace.hpp"
#include "skillloop/volume.hpp"

namespace skillloop::loop {

/// label: every group repeats the target's canonical name; free_text: a styled
/// base request plus its rephrasings.
enum class PromptMode { free_text, label };

struct RoundConfig {
  int groups_per_round = 0;      // 0 = one group per case
  int variants_per_request = 5;  // |Ω(q)|, base request included
  double top_fraction = 0.2;     // ρ
  double reward_floor = 0.5;
  int retrieval_k = 4;
  bool retrieval_enabled = true;
  bool distillation_enabled = true;
  bank::DistillMode distill_mode = bank::DistillMode::heuristic;
  bank::Summarizer summarizer;  // required in model-backed mode
  reward::RewardWeights weights;
  double lambda = 1.0;
  std::uint64_t seed = 7;
  volume::NoiseConfig noise;
  policy::Decoding decoding;  // decoding.seed is replaced per episode
  bool include_images = false;
  bool cull_enabled = false;
  int cull_min_uses = 10;
  double cull_min_gain = 0.0;
  int threads = 1;  // 0 = hardware concurrency
  PromptMode mode = PromptMode::free_text;
  std::vector<trace::RequestStyle> base_styles = {trace::RequestStyle::radiology_note, trace::RequestStyle::referral,
                                                  trace::RequestStyle::consult_question};

  void validate() const;
};

struct EpisodeFlags {
  bool unresolved = false;
  bool transport_failure = false;
  std::vector<std::string> issues;
  bool operator==(const EpisodeFlags&) const = default;
};

/// One of n sampled outputs when group sampling is enabled.
struct Candidate {
  std::string raw_output;
  double dice = 0.0;
  double format = 0.0;
  double composite = 0.0;
  double advantage = 0.0;
  bool operator==(const Candidate&) const = default;
};

struct Episode {
  std::string episode_id;
  int round = 0;
  std::string case_id;
  std::string group_id;
  int variant_index = 0;
  std::string category;  // "base" or a perturbation category
  std::uint64_t seed = 0;
  trace::Request request;
  std::vector<std::string> retrieved_skill_ids;
  std::vector<std::string> retrieved_tags;
  std::string prompt_digest;
  nlohmann::ordered_json prompt;
  std::string raw_output;
  trace::StructuredOutput parsed;
  trace::FormatReport format;
  std::string predicted_mask_digest;
  double dice = 0.0;
  reward::RewardBreakdown reward;
  EpisodeFlags flags;
  std::vector<Candidate> candidates;
};

nlohmann::ordered_json to_json(const Episode& e);
Episode episode_from_json(const nlohmann::ordered_json& j);

struct AttributionRecord {
  std::string episode_id;
  std::string skill_id;
  bool retrieved = false;
  double reward = 0.0;
  int round = 0;
  bool operator==(const AttributionRecord&) const = default;
};

nlohmann::ordered_json to_json(const AttributionRecord& r);
AttributionRecord attribution_from_json(const nlohmann::ordered_json& j);

struct GainRow {
  std::string skill_id;
  std::string tag;
  std::optional<double> gain;
  std::int64_t count_with = 0;
  std::int64_t count_without = 0;
};

std::vector<GainRow> gain_table(const bank::SkillBank& bank);

/// Robustness statistics over rephrasing groups.
struct RoundStats {
  std::size_t groups = 0;
  std::size_t episodes = 0;
  double dice_mean = 0.0;
  double worst_mean = 0.0;  // mean over groups of the group minimum
  double worst_min = 0.0;   // minimum over all episodes
  double std_group = 0.0;   // mean over groups of the group std
  double std_pooled = 0.0;  // std over all episodes
  double objective = 0.0;
};

/// `group_dices` holds per-group Dice lists in group order.
RoundStats compute_stats(std::span<const std::vector<double>> group_dices, double lambda, bool sample_std = false);
/// Groups episodes by group_id (in first-appearance order).
std::vector<std::vector<double>> group_dices(std::span<const Episode> episodes);

struct RoundReport {
  int round = 0;
  std::size_t bank_size = 0;        // K_t, the snapshot used during the round
  std::size_t bank_size_after = 0;  // K_{t+1}
  std::map<std::string, std::int64_t> per_tag_retrieval_frequency;
  std::int64_t total_retrievals = 0;
  RoundStats stats;
  std::size_t selected = 0;
  std::size_t new_skill_count = 0;
  std::size_t merged_count = 0;
  std::size_t culled_count = 0;
  std::size_t unresolved = 0;
  std::size_t transport_failures = 0;
  std::vector<GainRow> marginal_gains;
};

nlohmann::ordered_json to_json(const RoundReport& r);
std::string report_csv_header();
std::string report_csv_row(const RoundReport& r);

struct RoundResult {
  std::vector<Episode> episodes;
  std::vector<AttributionRecord> attribution;
  bank::SkillBank new_bank;
  RoundReport report;
};

/// One round over the frozen snapshot `bank` (round index = bank.round).
RoundResult run_round(std::span<const volume::SceneCase> corpus, const bank::SkillBank& bank, policy::Policy& policy,
                      const RoundConfig& config);

struct EvolutionResult {
  bank::SkillBank final_bank;
  std::vector<RoundReport> reports;
};

/// Folds run_round `rounds` times. With `out_dir`, persists per round
/// `round_NNN/{episodes,attribution,bank}.jsonl` and `report.json`, plus
/// `reports.csv`, `reports.json` and `bank_final.jsonl`.
EvolutionResult run_evolution(std::span<const volume::SceneCase> corpus, const bank::SkillBank& initial,
                              policy::Policy& policy, const RoundConfig& config, int rounds,
                              const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                              const std::function<void(const RoundReport&)>& on_round = {});

/// One record per snapshot artifact: retrieved ones go to the with-counters,
/// the rest to the without-counters.
std::vector<AttributionRecord> attribute_skill_rewards(const Episode& episode, const bank::SkillBank& snapshot);
void apply_attribution(bank::SkillBank& bank, std::span<const AttributionRecord> records);

/// Ξ⁺: episodes with composite >= floor, best ceil(ρ·eligible) by composite,
/// ties by episode_id. Returns indices in rank order.
std::vector<std::size_t> select_top(std::span<const Episode> episodes, double top_fraction, double reward_floor);

/// Seeded sample of ceil(fraction·N) indices, ascending.
std::vector<std::size_t> sample_for_review(std::size_t n, double fraction, std::uint64_t seed);

// ---------------- JSONL helpers ----------------

void write_jsonl(std::span<const nlohmann::ordered_json> records, std::ostream& out);
std::vector<nlohmann::ordered_json> read_jsonl(const std::filesystem::path& path);
std::vector<Episode> load_episodes(const std::filesystem::path& path);
std::vector<AttributionRecord> load_attribution(const std::filesystem::path& path);

}  // namespace skillloop::loop
