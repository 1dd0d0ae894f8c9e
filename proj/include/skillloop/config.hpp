#pragma once

// The single run configuration document shared by every command.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillloop/loop.hpp"
#include "skillloop/policy.hpp"
#include "skillloop/skill_bank.hpp"
#include "skillloop/volume.hpp"

namespace skillloop::config {

struct RunConfig {
  std::optional<std::filesystem::path> corpus_dir;  // load cases from disk instead of synthesizing
  volume::CorpusConfig corpus;
  std::uint64_t corpus_seed = 11;
  std::vector<std::string> request_styles = {"radiology-note", "referral", "consult-question", "label-like"};

  std::string policy_mode = "scripted";
  policy::ScriptedConfig scripted;
  policy::RemoteConfig remote;

  int rounds = 5;
  loop::RoundConfig loop;  // loop.retrieval_k mirrors bank.k
  bank::BankConfig bank;
  std::string initial_bank = "empty";  // "empty", "seed" or a bank file path
  std::filesystem::path output_dir = "runs/default";

  double review_fraction = 0.05;
  std::uint64_t review_seed = 5;
  double sft_threshold = 0.5;
};

/// The published schema (resources/config.schema.json).
const nlohmann::json& schema();

/// Schema violations as "<json pointer>: <message>"; empty when valid.
/// Supports the keywords the published schema uses: type, properties,
/// additionalProperties, enum, minimum, maximum, exclusiveMinimum, items,
/// minItems, maxItems, minLength.
std::vector<std::string> validate_against(const nlohmann::json& document, const nlohmann::json& schema);

/// Validates, then fills a RunConfig over the defaults. Throws ValidationError
/// listing every violation.
RunConfig parse_run_config(const nlohmann::json& document);
RunConfig load_run_config(const std::filesystem::path& path);

/// Full document with every field populated; parse(to_json(c)) == c.
nlohmann::ordered_json to_json(const RunConfig& c);

}  // namespace skillloop::config
