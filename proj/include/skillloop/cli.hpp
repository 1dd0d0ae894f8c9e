#pragma once

// Commands behind the `skillloop` executable. Each writes human-readable
// progress to `out` and machine-readable files under the configured output
// directory.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "skillloop/config.hpp"
#include "skillloop/loop.hpp"

namespace skillloop::cli {

enum ExitCode { kOk = 0, kValidation = 1, kRuntime = 2 };

/// Parses argv and dispatches. Never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Corpus from corpus.dir when set, otherwise synthesized from the config.
std::vector<volume::SceneCase> load_corpus(const config::RunConfig& cfg);
/// "empty", "seed", or a bank file.
bank::SkillBank load_initial_bank(const config::RunConfig& cfg);
std::unique_ptr<policy::Policy> make_policy(const config::RunConfig& cfg);

struct SynthSummary {
  std::size_t cases = 0;
  std::size_t requests = 0;
};

/// Writes <dir>/cases/<case_id>/ and <dir>/requests.jsonl.
SynthSummary cmd_synth(const config::RunConfig& cfg, const std::filesystem::path& dir, std::ostream& out);

/// Runs the configured number of rounds (or `rounds` when set) into
/// cfg.output_dir. With dry_run, validates and returns without writing.
std::optional<loop::EvolutionResult> cmd_evolve(const config::RunConfig& cfg, std::optional<int> rounds, bool dry_run,
                                                std::ostream& out);

/// Dice figures in percentage points.
struct EvalRow {
  std::string mode;  // "label" or "free-text"
  double dice = 0.0;
  double worst = 0.0;
  double std = 0.0;
  double std_pooled = 0.0;
  std::size_t groups = 0;
  std::size_t episodes = 0;
};

std::string eval_csv_header();
std::string eval_csv_row(const EvalRow& row);

/// One round per mode with distillation off; retrieval only when a bank is
/// given. Writes eval.csv and eval.json under cfg.output_dir.
std::vector<EvalRow> cmd_eval(const config::RunConfig& cfg, const std::optional<std::filesystem::path>& bank_path,
                              bool sample_std, std::ostream& out);

/// inspect | dedup | cull | gains. dedup and cull rewrite the file.
void cmd_bank(const std::string& subcommand, const std::filesystem::path& bank_path, const config::RunConfig& cfg,
              std::ostream& out);

struct AblationRow {
  std::string name;
  double dice = 0.0;
  double worst = 0.0;
  double std = 0.0;
  double std_pooled = 0.0;
  std::size_t bank_size = 0;
  std::string seed_digest;  // digest of the ordered per-episode seeds
};

std::string ablation_csv_header();
std::string ablation_csv_row(const AblationRow& row);

/// Rows: no-skill baseline, grounded without evolution, full loop. Figures
/// from the final round of each. Writes ablation.csv and ablation.json.
std::vector<AblationRow> cmd_ablate(const config::RunConfig& cfg, std::ostream& out);

/// Writes JSONL records to `out`; warnings go to `err`. Returns the record count.
std::size_t cmd_export(const std::string& kind, const std::filesystem::path& episode_log, double threshold,
                       std::ostream& out, std::ostream& err);

/// Writes the sampled episodes as JSONL to `out`. Returns the sample size.
std::size_t cmd_review(const std::filesystem::path& episode_log, double fraction, std::uint64_t seed,
                       std::ostream& out);

}  // namespace skillloop::cli
