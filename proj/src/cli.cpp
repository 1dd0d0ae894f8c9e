#include <fstream>
#include <ostream>

#include <CLI11.hpp>

#include "skillloop/cli.hpp"
#include "skillloop/common.hpp"

namespace skillloop::cli {

namespace fs = std::filesystem;

namespace {

config::RunConfig config_from(const std::string& path) {
  return path.empty() ? config::parse_run_config(nlohmann::json::object()) : config::load_run_config(path);
}

/// Writes to `path`, or to `fallback` when the path is empty.
template <typename F>
void with_output(const std::string& path, std::ostream& fallback, F&& body) {
  if (path.empty()) {
    body(fallback);
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  body(f);
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Skill-bank evolution loop for free-text promptable segmentation", "skillloop"};
  app.require_subcommand(1);

  std::string config_path;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "run configuration (JSON)")->check(CLI::ExistingFile);
  };

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus and request set");
  add_config(synth);
  std::string synth_out;
  synth->add_option("-o,--out", synth_out, "output directory (default: <output.dir>/corpus)");

  auto* evolve = app.add_subcommand("evolve", "run evolution rounds");
  add_config(evolve);
  std::optional<int> rounds;
  bool dry_run = false;
  evolve->add_option("-r,--rounds", rounds, "override loop.rounds")->check(CLI::PositiveNumber);
  evolve->add_flag("--dry-run", dry_run, "validate the configuration and exit");

  auto* eval = app.add_subcommand("eval", "robustness table in label and free-text modes");
  add_config(eval);
  std::string eval_bank;
  bool sample_std = false;
  eval->add_option("-b,--bank", eval_bank, "skill bank to retrieve from")->check(CLI::ExistingFile);
  eval->add_flag("--sample-std", sample_std, "use the N-1 denominator for Std");

  auto* bankcmd = app.add_subcommand("bank", "inspect or maintain a bank file");
  add_config(bankcmd);
  std::string bank_sub;
  std::string bank_path;
  bankcmd->add_option("action", bank_sub, "inspect | dedup | cull | gains")
      ->required()
      ->check(CLI::IsMember({"inspect", "dedup", "cull", "gains"}));
  bankcmd->add_option("bank", bank_path, "bank JSONL file")->required();

  auto* ablate = app.add_subcommand("ablate", "three-row ablation on shared seeds");
  add_config(ablate);

  auto* exportcmd = app.add_subcommand("export", "training data from an episode log");
  add_config(exportcmd);
  std::string export_kind;
  std::string export_log;
  std::optional<double> threshold;
  std::string export_out;
  exportcmd->add_option("kind", export_kind, "sft | grpo")->required()->check(CLI::IsMember({"sft", "grpo"}));
  exportcmd->add_option("log", export_log, "episodes.jsonl")->required();
  exportcmd->add_option("-t,--threshold", threshold, "SFT reward threshold (default export.sft_threshold)");
  exportcmd->add_option("-o,--out", export_out, "output JSONL (default stdout)");

  auto* review = app.add_subcommand("review", "seeded audit sample of an episode log");
  add_config(review);
  std::string review_log;
  std::optional<double> fraction;
  std::optional<std::uint64_t> review_seed;
  std::string review_out;
  review->add_option("log", review_log, "episodes.jsonl")->required();
  review->add_option("-f,--fraction", fraction, "sample fraction (default review.fraction)");
  review->add_option("-s,--seed", review_seed, "sample seed (default review.seed)");
  review->add_option("-o,--out", review_out, "output JSONL (default stdout)");

  auto* show = app.add_subcommand("config", "print the effective configuration or the schema");
  add_config(show);
  bool show_schema = false;
  show->add_flag("--schema", show_schema, "print the JSON schema instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kValidation;
  }

  try {
    const auto cfg = config_from(config_path);
    if (*synth) {
      cmd_synth(cfg, synth_out.empty() ? cfg.output_dir / "corpus" : fs::path(synth_out), out);
    } else if (*evolve) {
      cmd_evolve(cfg, rounds, dry_run, out);
    } else if (*eval) {
      cmd_eval(cfg, eval_bank.empty() ? std::nullopt : std::optional<fs::path>(eval_bank), sample_std, out);
    } else if (*bankcmd) {
      cmd_bank(bank_sub, bank_path, cfg, out);
    } else if (*ablate) {
      cmd_ablate(cfg, out);
    } else if (*exportcmd) {
      with_output(export_out, out, [&](std::ostream& o) {
        const auto n = cmd_export(export_kind, export_log, threshold.value_or(cfg.sft_threshold), o, err);
        err << "exported " << n << " records\n";
      });
    } else if (*review) {
      with_output(review_out, out, [&](std::ostream& o) {
        const auto n = cmd_review(review_log, fraction.value_or(cfg.review_fraction),
                                  review_seed.value_or(cfg.review_seed), o);
        err << "sampled " << n << " episodes\n";
      });
    } else if (*show) {
      out << (show_schema ? config::schema().dump(2) : config::to_json(cfg).dump(2)) << '\n';
    }
    return kOk;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntime;
  }
}

}  // namespace skillloop::cli
