#include <algorithm>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "skillloop/cli.hpp"
#include "skillloop/common.hpp"
#include "skillloop/perturb.hpp"

namespace skillloop::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

std::vector<trace::RequestStyle> styles_of(const config::RunConfig& cfg) {
  std::vector<trace::RequestStyle> out;
  for (const auto& s : cfg.request_styles) out.push_back(trace::parse_style(s));
  return out;
}

/// Loop base styles: the configured styles minus label-like (label prompting
/// is its own evaluation mode).
std::vector<trace::RequestStyle> base_styles_of(const config::RunConfig& cfg) {
  std::vector<trace::RequestStyle> out;
  for (auto s : styles_of(cfg))
    if (s != trace::RequestStyle::label_like) out.push_back(s);
  if (out.empty()) throw ValidationError("request_styles must include at least one free-text style");
  return out;
}

loop::RoundConfig round_config(const config::RunConfig& cfg, policy::Policy& policy) {
  loop::RoundConfig rc = cfg.loop;
  rc.retrieval_k = cfg.bank.k;
  rc.base_styles = base_styles_of(cfg);
  if (rc.distill_mode == bank::DistillMode::model_backed) {
    if (cfg.policy_mode != "remote") throw ValidationError("model-backed distillation requires policy.mode = remote");
    rc.summarizer = [&policy, decoding = cfg.loop.decoding](const std::string& prompt) {
      policy::PolicyInput in;
      in.request_id = "summarize";
      in.request_text = prompt;
      in.decoding = decoding;
      in.decoding.samples = 1;
      const auto out = policy.generate(in);
      return out.raw_texts.empty() ? std::string{} : out.raw_texts.front();
    };
  }
  return rc;
}

void print_report(const loop::RoundReport& r, std::ostream& out) {
  out << "round " << r.round << ": K=" << r.bank_size << " -> " << r.bank_size_after
      << " dice=" << fixed(100.0 * r.stats.dice_mean, 2) << " worst=" << fixed(100.0 * r.stats.worst_mean, 2)
      << " std=" << fixed(100.0 * r.stats.std_group, 2) << " std_pooled=" << fixed(100.0 * r.stats.std_pooled, 2)
      << " J=" << fixed(r.stats.objective, 4) << " new=" << r.new_skill_count << " culled=" << r.culled_count << '\n';
}

}  // namespace

// ---------------- shared setup ----------------

std::vector<volume::SceneCase> load_corpus(const config::RunConfig& cfg) {
  if (!cfg.corpus_dir) return volume::synth_corpus(cfg.corpus, cfg.corpus_seed);
  const fs::path root = fs::is_directory(*cfg.corpus_dir / "cases") ? *cfg.corpus_dir / "cases" : *cfg.corpus_dir;
  if (!fs::is_directory(root)) throw IoError("corpus directory not found: " + cfg.corpus_dir->string());
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::exists(entry.path() / "case.json")) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw IoError("no cases under " + root.string());
  std::vector<volume::SceneCase> out;
  for (const auto& d : dirs) out.push_back(volume::load_case(d));
  return out;
}

bank::SkillBank load_initial_bank(const config::RunConfig& cfg) {
  if (cfg.initial_bank == "empty") {
    bank::SkillBank b;
    b.config = cfg.bank;
    return b;
  }
  if (cfg.initial_bank == "seed") return bank::seed_bank(cfg.bank);
  return bank::load_bank(cfg.initial_bank, cfg.bank);
}

std::unique_ptr<policy::Policy> make_policy(const config::RunConfig& cfg) {
  if (cfg.policy_mode == "scripted") return std::make_unique<policy::ScriptedPolicy>(cfg.scripted);
  if (cfg.policy_mode == "remote") return std::make_unique<policy::RemotePolicy>(cfg.remote);
  throw ValidationError("unknown policy mode " + cfg.policy_mode);
}

// ---------------- synth ----------------

SynthSummary cmd_synth(const config::RunConfig& cfg, const fs::path& dir, std::ostream& out) {
  const auto styles = styles_of(cfg);
  const auto corpus = volume::synth_corpus(cfg.corpus, cfg.corpus_seed);
  std::error_code ec;
  fs::create_directories(dir / "cases", ec);
  if (ec) throw IoError("cannot create " + (dir / "cases").string() + ": " + ec.message());
  SynthSummary s;
  auto requests = open_out(dir / "requests.jsonl");
  for (const auto& c : corpus) {
    volume::save_case(c, dir / "cases" / c.case_id);
    for (const auto& r : perturb::synth_requests(c, styles, derive_seed(cfg.corpus_seed, c.case_id))) {
      requests << ordered_json{{"request_id", r.request_id},
                               {"case_id", r.case_id},
                               {"text", r.text},
                               {"style", std::string(trace::to_string(r.style))},
                               {"intent_target", r.intent_target}}
                      .dump()
               << '\n';
      ++s.requests;
    }
    ++s.cases;
  }
  out << "wrote " << s.cases << " cases and " << s.requests << " requests to " << dir.string() << '\n';
  return s;
}

// ---------------- evolve ----------------

std::optional<loop::EvolutionResult> cmd_evolve(const config::RunConfig& cfg, std::optional<int> rounds, bool dry_run,
                                                std::ostream& out) {
  const int t = rounds.value_or(cfg.rounds);
  if (t < 1) throw ValidationError("rounds must be >= 1");
  auto policy = make_policy(cfg);
  const auto rc = round_config(cfg, *policy);
  rc.validate();
  if (dry_run) {
    if (cfg.corpus_dir && !fs::is_directory(*cfg.corpus_dir))
      throw IoError("corpus directory not found: " + cfg.corpus_dir->string());
    out << "config ok: " << t << " rounds, policy " << cfg.policy_mode << ", output " << cfg.output_dir.string()
        << '\n';
    return std::nullopt;
  }
  const auto corpus = load_corpus(cfg);
  const auto initial = load_initial_bank(cfg);
  fs::create_directories(cfg.output_dir);
  open_out(cfg.output_dir / "config.json") << config::to_json(cfg).dump(2) << '\n';
  auto result = loop::run_evolution(corpus, initial, *policy, rc, t, cfg.output_dir,
                                    [&](const loop::RoundReport& r) { print_report(r, out); });
  out << "final bank: K=" << result.final_bank.size() << " (" << (cfg.output_dir / "bank_final.jsonl").string()
      << ")\n";
  return result;
}

// ---------------- eval ----------------

std::string eval_csv_header() { return "mode,dice,worst_dice,std,std_pooled,groups,episodes"; }

std::string eval_csv_row(const EvalRow& r) {
  return r.mode + "," + fixed(r.dice, 2) + "," + fixed(r.worst, 2) + "," + fixed(r.std, 2) + "," +
         fixed(r.std_pooled, 2) + "," + std::to_string(r.groups) + "," + std::to_string(r.episodes);
}

std::vector<EvalRow> cmd_eval(const config::RunConfig& cfg, const std::optional<fs::path>& bank_path, bool sample_std,
                              std::ostream& out) {
  const auto corpus = load_corpus(cfg);
  auto policy = make_policy(cfg);
  bank::SkillBank b;
  b.config = cfg.bank;
  if (bank_path) b = bank::load_bank(*bank_path, cfg.bank);

  std::vector<EvalRow> rows;
  for (auto mode : {loop::PromptMode::label, loop::PromptMode::free_text}) {
    auto rc = round_config(cfg, *policy);
    rc.mode = mode;
    rc.distillation_enabled = false;
    rc.retrieval_enabled = bank_path.has_value();
    const auto rr = loop::run_round(corpus, b, *policy, rc);
    const auto gd = loop::group_dices(rr.episodes);
    const auto s = loop::compute_stats(gd, rc.lambda, sample_std);
    rows.push_back({mode == loop::PromptMode::label ? "label" : "free-text", 100.0 * s.dice_mean,
                    100.0 * s.worst_mean, 100.0 * s.std_group, 100.0 * s.std_pooled, s.groups, s.episodes});
  }

  auto csv = open_out(cfg.output_dir / "eval.csv");
  csv << eval_csv_header() << '\n';
  ordered_json j = ordered_json::array();
  out << std::left << std::setw(10) << "mode" << std::right << std::setw(8) << "Dice" << std::setw(8) << "Worst"
      << std::setw(8) << "Std" << '\n';
  for (const auto& r : rows) {
    csv << eval_csv_row(r) << '\n';
    j.push_back({{"mode", r.mode},
                 {"dice", r.dice},
                 {"worst_dice", r.worst},
                 {"std", r.std},
                 {"std_pooled", r.std_pooled},
                 {"groups", r.groups},
                 {"episodes", r.episodes}});
    out << std::left << std::setw(10) << r.mode << std::right << std::setw(8) << fixed(r.dice, 2) << std::setw(8)
        << fixed(r.worst, 2) << std::setw(8) << fixed(r.std, 2) << '\n';
  }
  open_out(cfg.output_dir / "eval.json") << j.dump(2) << '\n';
  return rows;
}

// ---------------- bank ----------------

void cmd_bank(const std::string& sub, const fs::path& bank_path, const config::RunConfig& cfg, std::ostream& out) {
  if (!fs::exists(bank_path)) throw IoError("bank file not found: " + bank_path.string());
  const auto b = bank::load_bank(bank_path, cfg.bank);

  auto gain_str = [](const std::optional<double>& g) { return g ? fixed(*g, 6) : std::string("undefined"); };

  if (sub == "inspect") {
    out << "round " << b.round << " K=" << b.size() << '\n';
    std::map<std::string, std::pair<std::size_t, std::int64_t>> per_tag;
    for (const auto& tag : skill_tag_registry()) per_tag[tag] = {0, 0};
    for (const auto& a : b.artifacts) {
      per_tag[a.tag].first += 1;
      per_tag[a.tag].second += a.meta.retrieval_count;
    }
    out << "tag,artifacts,retrievals\n";
    for (const auto& [tag, v] : per_tag) out << tag << ',' << v.first << ',' << v.second << '\n';
    std::vector<const bank::SkillArtifact*> ranked;
    for (const auto& a : b.artifacts)
      if (bank::marginal_gain(a)) ranked.push_back(&a);
    std::sort(ranked.begin(), ranked.end(), [](const auto* x, const auto* y) {
      const double gx = *bank::marginal_gain(*x);
      const double gy = *bank::marginal_gain(*y);
      return gx != gy ? gx > gy : x->skill_id < y->skill_id;
    });
    const std::size_t n = std::min<std::size_t>(5, ranked.size());
    out << "top by marginal gain:\n";
    for (std::size_t i = 0; i < n; ++i)
      out << "  " << ranked[i]->skill_id << ' ' << ranked[i]->tag << ' ' << gain_str(bank::marginal_gain(*ranked[i]))
          << '\n';
    out << "bottom by marginal gain:\n";
    for (std::size_t i = 0; i < n; ++i) {
      const auto* a = ranked[ranked.size() - 1 - i];
      out << "  " << a->skill_id << ' ' << a->tag << ' ' << gain_str(bank::marginal_gain(*a)) << '\n';
    }
  } else if (sub == "dedup") {
    auto d = b;
    d.artifacts = bank::dedup(b.artifacts, cfg.bank.dedup_threshold);
    out << "merged " << (b.size() - d.size()) << " artifacts, K=" << d.size() << '\n';
    bank::save_bank(d, bank_path);
  } else if (sub == "cull") {
    const auto c = bank::cull(b, cfg.loop.cull_min_uses, cfg.loop.cull_min_gain);
    out << "culled " << (b.size() - c.size()) << " artifacts, K=" << c.size() << '\n';
    bank::save_bank(c, bank_path);
  } else if (sub == "gains") {
    out << "skill_id,tag,gain,count_with,count_without\n";
    for (const auto& row : loop::gain_table(b))
      out << row.skill_id << ',' << row.tag << ',' << gain_str(row.gain) << ',' << row.count_with << ','
          << row.count_without << '\n';
  } else {
    throw ValidationError("unknown bank subcommand " + sub);
  }
}

// ---------------- ablate ----------------

std::string ablation_csv_header() { return "row,dice,worst_dice,std,std_pooled,bank_size,seed_digest"; }

std::string ablation_csv_row(const AblationRow& r) {
  return r.name + "," + fixed(r.dice, 2) + "," + fixed(r.worst, 2) + "," + fixed(r.std, 2) + "," +
         fixed(r.std_pooled, 2) + "," + std::to_string(r.bank_size) + "," + r.seed_digest;
}

std::vector<AblationRow> cmd_ablate(const config::RunConfig& cfg, std::ostream& out) {
  const auto corpus = load_corpus(cfg);
  struct Variant {
    const char* name;
    bool seeded;
    bool retrieval;
    bool distillation;
  };
  const Variant variants[] = {{"no-skill-baseline", false, false, false},
                              {"grounded-no-evolution", true, true, false},
                              {"full-loop", true, true, true}};
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    auto policy = make_policy(cfg);
    auto rc = round_config(cfg, *policy);
    rc.retrieval_enabled = v.retrieval;
    rc.distillation_enabled = v.distillation;
    bank::SkillBank b = v.seeded ? bank::seed_bank(cfg.bank) : bank::SkillBank{0, {}, cfg.bank};
    loop::RoundResult last;
    for (int t = 0; t < cfg.rounds; ++t) {
      last = loop::run_round(corpus, b, *policy, rc);
      b = last.new_bank;
    }
    std::string seeds;
    for (const auto& e : last.episodes) seeds += std::to_string(e.seed) + ";";
    const auto s = last.report.stats;
    rows.push_back({v.name, 100.0 * s.dice_mean, 100.0 * s.worst_mean, 100.0 * s.std_group, 100.0 * s.std_pooled,
                    b.size(), digest(seeds)});
  }

  auto csv = open_out(cfg.output_dir / "ablation.csv");
  csv << ablation_csv_header() << '\n';
  ordered_json j = ordered_json::array();
  out << std::left << std::setw(24) << "configuration" << std::right << std::setw(8) << "Dice" << std::setw(8)
      << "Worst" << std::setw(8) << "Std" << std::setw(12) << "Std(pool)" << '\n';
  for (const auto& r : rows) {
    csv << ablation_csv_row(r) << '\n';
    j.push_back({{"row", r.name},
                 {"dice", r.dice},
                 {"worst_dice", r.worst},
                 {"std", r.std},
                 {"std_pooled", r.std_pooled},
                 {"bank_size", r.bank_size},
                 {"seed_digest", r.seed_digest}});
    out << std::left << std::setw(24) << r.name << std::right << std::setw(8) << fixed(r.dice, 2) << std::setw(8)
        << fixed(r.worst, 2) << std::setw(8) << fixed(r.std, 2) << std::setw(12) << fixed(r.std_pooled, 2) << '\n';
  }
  open_out(cfg.output_dir / "ablation.json") << j.dump(2) << '\n';
  return rows;
}

// ---------------- export / review ----------------

std::size_t cmd_export(const std::string& kind, const fs::path& episode_log, double threshold, std::ostream& out,
                       std::ostream& err) {
  if (!fs::exists(episode_log)) throw IoError("episode log not found: " + episode_log.string());
  const auto episodes = loop::load_episodes(episode_log);
  std::vector<ordered_json> records;
  if (kind == "sft") {
    std::vector<policy::SftSource> src;
    for (const auto& e : episodes) src.push_back({e.episode_id, e.prompt, e.raw_output, e.reward.composite});
    records = policy::export_sft(src, threshold);
  } else if (kind == "grpo") {
    std::vector<policy::GrpoGroup> groups;
    for (const auto& e : episodes) {
      policy::GrpoGroup g{e.episode_id, e.prompt, {}, {}, {}};
      if (e.candidates.empty()) {
        g.candidates.push_back(e.raw_output);
        g.rewards.push_back(e.reward.composite);
        g.advantages.push_back(0.0);
      }
      for (const auto& c : e.candidates) {
        g.candidates.push_back(c.raw_output);
        g.rewards.push_back(c.composite);
        g.advantages.push_back(c.advantage);
      }
      groups.push_back(std::move(g));
    }
    auto exported = policy::export_grpo_groups(groups);
    records = std::move(exported.records);
    if (records.empty() && !groups.empty()) {
      err << "warning: no multi-sample groups in " << episode_log.string() << " (" << exported.warnings.size()
          << " skipped); set policy.decoding.samples >= 2\n";
    } else {
      for (const auto& w : exported.warnings) err << "warning: " << w << '\n';
    }
  } else {
    throw ValidationError("unknown export kind " + kind + " (expected sft or grpo)");
  }
  loop::write_jsonl(records, out);
  return records.size();
}

std::size_t cmd_review(const fs::path& episode_log, double fraction, std::uint64_t seed, std::ostream& out) {
  if (!fs::exists(episode_log)) throw IoError("episode log not found: " + episode_log.string());
  const auto raw = loop::read_jsonl(episode_log);
  const auto picked = loop::sample_for_review(raw.size(), fraction, seed);
  for (auto i : picked) out << raw[i].dump() << '\n';
  return picked.size();
}

}  // namespace skillloop::cli
