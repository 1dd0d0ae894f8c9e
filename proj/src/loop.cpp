#include "skillloop/loop.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "skillloop/common.hpp"
#include "skillloop/perturb.hpp"

namespace skillloop::loop {

using nlohmann::ordered_json;

void RoundConfig::validate() const {
  if (groups_per_round < 0) throw ValidationError("groups_per_round must be >= 0");
  if (variants_per_request < 1) throw ValidationError("variants_per_request must be >= 1");
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw ValidationError("top_fraction must lie in (0,1]");
  if (!(reward_floor >= 0.0 && reward_floor <= 1.0)) throw ValidationError("reward_floor must lie in [0,1]");
  if (retrieval_k < 0) throw ValidationError("retrieval_k must be >= 0");
  if (lambda < 0) throw ValidationError("lambda must be >= 0");
  if (noise.max_boundary_voxels < 0) throw ValidationError("noise.max_boundary_voxels must be >= 0");
  if (decoding.samples < 1) throw ValidationError("decoding.samples must be >= 1");
  if (cull_min_uses < 0) throw ValidationError("cull_min_uses must be >= 0");
  if (threads < 0) throw ValidationError("threads must be >= 0");
  if (distill_mode == bank::DistillMode::model_backed && distillation_enabled && !summarizer)
    throw ValidationError("model-backed distillation needs a summarizer");
  if (mode == PromptMode::free_text && base_styles.empty()) throw ValidationError("base_styles must not be empty");
  (void)weights.normalized();
}

// ---------------- JSON ----------------

namespace {

ordered_json answer_json(const CanonicalAnswer& a) {
  ordered_json j;
  j["target_id"] = a.target_id;
  if (a.laterality) j["laterality"] = std::string(to_string(*a.laterality));
  if (a.subregion) j["subregion"] = *a.subregion;
  return j;
}

CanonicalAnswer answer_from_json(const ordered_json& j) {
  CanonicalAnswer a;
  a.target_id = j.at("target_id").get<std::string>();
  if (j.contains("laterality")) {
    a.laterality = parse_laterality(j.at("laterality").get<std::string>());
    if (!a.laterality) throw ValidationError("bad laterality in episode log");
  }
  if (j.contains("subregion")) a.subregion = j.at("subregion").get<std::string>();
  return a;
}

ordered_json request_json(const trace::Request& r) {
  return ordered_json{{"request_id", r.request_id}, {"case_id", r.case_id},           {"text", r.text},
                      {"style", std::string(to_string(r.style))},   {"intent_target", r.intent_target},
                      {"ambiguity", r.ambiguity}};
}

trace::Request request_from_json(const ordered_json& j) {
  trace::Request r;
  r.request_id = j.at("request_id").get<std::string>();
  r.case_id = j.at("case_id").get<std::string>();
  r.text = j.at("text").get<std::string>();
  r.style = trace::parse_style(j.at("style").get<std::string>());
  r.intent_target = j.at("intent_target").get<std::string>();
  r.ambiguity = j.value("ambiguity", std::string{});
  return r;
}

ordered_json parsed_json(const trace::StructuredOutput& y) {
  ordered_json ev = ordered_json::array();
  for (const auto& e : y.evidence) ev.push_back({{"view", e.view_caption}, {"observation", e.observation}});
  ordered_json ra = ordered_json::array();
  for (const auto& s : y.rationale) ra.push_back({{"skill_tag", s.skill_tag}, {"text", s.text}});
  ordered_json j{{"evidence", ev}, {"rationale", ra}};
  j["answer"] = y.answer ? answer_json(*y.answer) : ordered_json(nullptr);
  return j;
}

trace::StructuredOutput parsed_from_json(const ordered_json& j) {
  trace::StructuredOutput y;
  for (const auto& e : j.at("evidence")) y.evidence.push_back({e.at("view").get<std::string>(), e.at("observation").get<std::string>()});
  for (const auto& s : j.at("rationale")) y.rationale.push_back({s.at("skill_tag").get<std::string>(), s.at("text").get<std::string>()});
  if (!j.at("answer").is_null()) y.answer = answer_from_json(j.at("answer"));
  return y;
}

ordered_json reward_json(const reward::RewardBreakdown& r) {
  return ordered_json{{"dice_term", r.dice_term},
                      {"stability_term", r.stability_term},
                      {"format_term", r.format_term},
                      {"composite", r.composite}};
}

}  // namespace

ordered_json to_json(const Episode& e) {
  ordered_json j;
  j["episode_id"] = e.episode_id;
  j["round"] = e.round;
  j["case_id"] = e.case_id;
  j["group_id"] = e.group_id;
  j["variant_index"] = e.variant_index;
  j["category"] = e.category;
  j["seed"] = e.seed;
  j["request"] = request_json(e.request);
  j["retrieved_skill_ids"] = e.retrieved_skill_ids;
  j["retrieved_tags"] = e.retrieved_tags;
  j["prompt_digest"] = e.prompt_digest;
  j["prompt"] = e.prompt;
  j["raw_output"] = e.raw_output;
  j["parsed"] = parsed_json(e.parsed);
  j["format"] = {{"compliance", e.format.compliance}, {"issues", e.format.issues}};
  j["predicted_mask_digest"] = e.predicted_mask_digest;
  j["dice"] = e.dice;
  j["reward"] = reward_json(e.reward);
  j["flags"] = {{"unresolved", e.flags.unresolved},
                {"transport_failure", e.flags.transport_failure},
                {"issues", e.flags.issues}};
  ordered_json cands = ordered_json::array();
  for (const auto& c : e.candidates) {
    cands.push_back({{"raw_output", c.raw_output},
                     {"dice", c.dice},
                     {"format", c.format},
                     {"composite", c.composite},
                     {"advantage", c.advantage}});
  }
  j["candidates"] = cands;
  return j;
}

Episode episode_from_json(const ordered_json& j) {
  try {
    Episode e;
    e.episode_id = j.at("episode_id").get<std::string>();
    e.round = j.at("round").get<int>();
    e.case_id = j.at("case_id").get<std::string>();
    e.group_id = j.at("group_id").get<std::string>();
    e.variant_index = j.at("variant_index").get<int>();
    e.category = j.at("category").get<std::string>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.request = request_from_json(j.at("request"));
    e.retrieved_skill_ids = j.at("retrieved_skill_ids").get<std::vector<std::string>>();
    e.retrieved_tags = j.value("retrieved_tags", std::vector<std::string>{});
    e.prompt_digest = j.at("prompt_digest").get<std::string>();
    e.prompt = j.at("prompt");
    e.raw_output = j.at("raw_output").get<std::string>();
    e.parsed = parsed_from_json(j.at("parsed"));
    e.format.compliance = j.at("format").at("compliance").get<double>();
    e.format.issues = j.at("format").at("issues").get<std::vector<std::string>>();
    e.predicted_mask_digest = j.at("predicted_mask_digest").get<std::string>();
    e.dice = j.at("dice").get<double>();
    const auto& r = j.at("reward");
    e.reward = {r.at("dice_term").get<double>(), r.at("stability_term").get<double>(),
                r.at("format_term").get<double>(), r.at("composite").get<double>()};
    const auto& f = j.at("flags");
    e.flags.unresolved = f.at("unresolved").get<bool>();
    e.flags.transport_failure = f.at("transport_failure").get<bool>();
    e.flags.issues = f.at("issues").get<std::vector<std::string>>();
    for (const auto& c : j.value("candidates", ordered_json::array())) {
      e.candidates.push_back({c.at("raw_output").get<std::string>(), c.at("dice").get<double>(),
                              c.at("format").get<double>(), c.at("composite").get<double>(),
                              c.at("advantage").get<double>()});
    }
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("malformed episode record: ") + ex.what());
  }
}

ordered_json to_json(const AttributionRecord& r) {
  return ordered_json{{"episode_id", r.episode_id}, {"skill_id", r.skill_id}, {"retrieved", r.retrieved},
                      {"reward", r.reward},         {"round", r.round}};
}

AttributionRecord attribution_from_json(const ordered_json& j) {
  try {
    return {j.at("episode_id").get<std::string>(), j.at("skill_id").get<std::string>(), j.at("retrieved").get<bool>(),
            j.at("reward").get<double>(), j.at("round").get<int>()};
  } catch (const nlohmann::json::exception& ex) {
    throw ValidationError(std::string("malformed attribution record: ") + ex.what());
  }
}

// ---------------- statistics ----------------

std::vector<GainRow> gain_table(const bank::SkillBank& bank) {
  std::vector<GainRow> rows;
  rows.reserve(bank.size());
  for (const auto& a : bank.artifacts) {
    rows.push_back({a.skill_id, a.tag, bank::marginal_gain(a), a.meta.count_with, a.meta.count_without});
  }
  return rows;
}

RoundStats compute_stats(std::span<const std::vector<double>> groups, double lambda, bool sample_std) {
  if (groups.empty()) throw ValidationError("compute_stats: no groups");
  RoundStats s;
  s.groups = groups.size();
  std::vector<double> pooled;
  double worst_sum = 0.0;
  double std_sum = 0.0;
  for (const auto& g : groups) {
    const auto m = reward::group_metrics(g, sample_std);
    worst_sum += m.worst;
    std_sum += m.std;
    pooled.insert(pooled.end(), g.begin(), g.end());
  }
  const auto all = reward::group_metrics(pooled, sample_std);
  s.episodes = pooled.size();
  s.dice_mean = all.mean;
  s.worst_min = all.worst;
  s.std_pooled = all.std;
  s.worst_mean = worst_sum / static_cast<double>(groups.size());
  s.std_group = std_sum / static_cast<double>(groups.size());
  s.objective = reward::objective(groups, lambda);
  return s;
}

std::vector<std::vector<double>> group_dices(std::span<const Episode> episodes) {
  std::vector<std::vector<double>> out;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& e : episodes) {
    auto [it, fresh] = index.emplace(e.group_id, out.size());
    if (fresh) out.emplace_back();
    out[it->second].push_back(e.dice);
  }
  return out;
}

// ---------------- reports ----------------

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed << v;
  return os.str();
}

ordered_json optional_number(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

}  // namespace

ordered_json to_json(const RoundReport& r) {
  ordered_json j;
  j["round"] = r.round;
  j["bank_size"] = r.bank_size;
  j["bank_size_after"] = r.bank_size_after;
  ordered_json freq = ordered_json::object();
  for (const auto& [tag, n] : r.per_tag_retrieval_frequency) freq[tag] = n;
  j["per_tag_retrieval_frequency"] = freq;
  j["total_retrievals"] = r.total_retrievals;
  j["groups"] = r.stats.groups;
  j["episodes"] = r.stats.episodes;
  j["dice_mean"] = r.stats.dice_mean;
  j["worst_mean"] = r.stats.worst_mean;
  j["worst_min"] = r.stats.worst_min;
  j["std_group"] = r.stats.std_group;
  j["std_pooled"] = r.stats.std_pooled;
  j["objective"] = r.stats.objective;
  j["selected"] = r.selected;
  j["new_skills"] = r.new_skill_count;
  j["merged"] = r.merged_count;
  j["culled"] = r.culled_count;
  j["unresolved"] = r.unresolved;
  j["transport_failures"] = r.transport_failures;
  ordered_json gains = ordered_json::array();
  for (const auto& g : r.marginal_gains) {
    gains.push_back({{"skill_id", g.skill_id},
                     {"tag", g.tag},
                     {"gain", optional_number(g.gain)},
                     {"count_with", g.count_with},
                     {"count_without", g.count_without}});
  }
  j["marginal_gains"] = gains;
  return j;
}

std::string report_csv_header() {
  return "round,bank_size,bank_size_after,groups,episodes,dice_mean,worst_mean,worst_min,std_group,std_pooled,"
         "objective,selected,new_skills,merged,culled,unresolved,transport_failures,total_retrievals";
}

std::string report_csv_row(const RoundReport& r) {
  std::ostringstream os;
  os << r.round << ',' << r.bank_size << ',' << r.bank_size_after << ',' << r.stats.groups << ',' << r.stats.episodes
     << ',' << fmt(r.stats.dice_mean) << ',' << fmt(r.stats.worst_mean) << ',' << fmt(r.stats.worst_min) << ','
     << fmt(r.stats.std_group) << ',' << fmt(r.stats.std_pooled) << ',' << fmt(r.stats.objective) << ','
     << r.selected << ',' << r.new_skill_count << ',' << r.merged_count << ',' << r.culled_count << ','
     << r.unresolved << ',' << r.transport_failures << ',' << r.total_retrievals;
  return os.str();
}

// ---------------- attribution, selection, sampling ----------------

std::vector<AttributionRecord> attribute_skill_rewards(const Episode& episode, const bank::SkillBank& snapshot) {
  std::vector<AttributionRecord> out;
  out.reserve(snapshot.size());
  for (const auto& a : snapshot.artifacts) {
    const bool used = std::find(episode.retrieved_skill_ids.begin(), episode.retrieved_skill_ids.end(), a.skill_id) !=
                      episode.retrieved_skill_ids.end();
    out.push_back({episode.episode_id, a.skill_id, used, episode.reward.composite, episode.round});
  }
  return out;
}

void apply_attribution(bank::SkillBank& bank, std::span<const AttributionRecord> records) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < bank.artifacts.size(); ++i) index.emplace(bank.artifacts[i].skill_id, i);
  for (const auto& r : records) {
    auto it = index.find(r.skill_id);
    if (it == index.end()) throw ValidationError("attribution names unknown skill " + r.skill_id);
    auto& m = bank.artifacts[it->second].meta;
    if (r.retrieved) {
      m.retrieval_count += 1;
      m.sum_reward_with += r.reward;
      m.count_with += 1;
    } else {
      m.sum_reward_without += r.reward;
      m.count_without += 1;
    }
  }
}

std::vector<std::size_t> select_top(std::span<const Episode> episodes, double top_fraction, double reward_floor) {
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw ValidationError("top_fraction must lie in (0,1]");
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    if (episodes[i].reward.composite >= reward_floor) eligible.push_back(i);
  }
  std::sort(eligible.begin(), eligible.end(), [&](std::size_t a, std::size_t b) {
    if (episodes[a].reward.composite != episodes[b].reward.composite)
      return episodes[a].reward.composite > episodes[b].reward.composite;
    return episodes[a].episode_id < episodes[b].episode_id;
  });
  const auto keep = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(eligible.size()) - 1e-9));
  eligible.resize(std::min(keep, eligible.size()));
  return eligible;
}

std::vector<std::size_t> sample_for_review(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("review fraction must lie in (0,1]");
  const auto k = std::min(n, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---------------- the round ----------------

namespace {

struct Slot {
  const volume::SceneCase* scene = nullptr;
  std::size_t case_index = 0;
  std::size_t group = 0;
  int variant = 0;
  std::string category;
  trace::Request request;
  std::uint64_t seed = 0;
};

std::string pad(std::size_t v, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << v;
  return os.str();
}

std::vector<Slot> plan_round(std::span<const volume::SceneCase> corpus, const RoundConfig& config, int round,
                             std::uint64_t round_seed) {
  const std::size_t n_groups =
      config.groups_per_round > 0 ? static_cast<std::size_t>(config.groups_per_round) : corpus.size();
  const auto& cats = perturb::all_categories();
  const int extra = config.variants_per_request - 1;
  const int per_cat = extra > 0 ? (extra + static_cast<int>(cats.size()) - 1) / static_cast<int>(cats.size()) : 0;

  std::vector<Slot> slots;
  for (std::size_t g = 0; g < n_groups; ++g) {
    const std::size_t ci = g % corpus.size();
    const auto& scene = corpus[ci];
    const std::uint64_t gseed = derive_seed(round_seed, scene.case_id + "#" + std::to_string(g));
    Rng rng(gseed);
    std::vector<std::string> ids;
    for (const auto& [id, t] : scene.targets) ids.push_back(id);
    const std::string target = rng.pick(ids);
    const std::string group_id = "r" + pad(static_cast<std::size_t>(round), 3) + "-g" + pad(g, 4);

    auto add = [&](int v, std::string category, trace::Request req) {
      Slot s;
      s.scene = &scene;
      s.case_index = ci;
      s.group = g;
      s.variant = v;
      s.category = std::move(category);
      s.request = std::move(req);
      s.request.request_id = group_id + "-v" + std::to_string(v) + ":" + s.request.request_id;
      s.seed = derive_seed(round_seed, scene.case_id + "/" + std::to_string(g) + "/" + std::to_string(v));
      slots.push_back(std::move(s));
    };

    if (config.mode == PromptMode::label) {
      const trace::RequestStyle style = trace::RequestStyle::label_like;
      auto reqs = perturb::synth_requests(scene, std::span<const trace::RequestStyle>(&style, 1), gseed);
      const auto it = std::find_if(reqs.begin(), reqs.end(), [&](const auto& r) { return r.intent_target == target; });
      for (int v = 0; v < config.variants_per_request; ++v) add(v, "label", *it);
      continue;
    }

    auto reqs = perturb::synth_requests(scene, config.base_styles, derive_seed(gseed, "requests"));
    std::vector<trace::Request> mine;
    for (auto& r : reqs)
      if (r.intent_target == target) mine.push_back(std::move(r));
    const trace::Request base = rng.pick(mine);
    add(0, "base", base);
    if (extra <= 0) continue;
    const auto grp = perturb::generate_variants(base, scene, cats, per_cat, derive_seed(gseed, "variants"));
    int taken = 0;
    for (int i = 0; i < per_cat && taken < extra; ++i) {
      for (std::size_t c = 0; c < cats.size() && taken < extra; ++c) {
        const std::size_t at = c * static_cast<std::size_t>(per_cat) + static_cast<std::size_t>(i);
        ++taken;
        add(taken, std::string(perturb::to_string(grp.category_per_variant[at])), grp.variants[at]);
      }
    }
  }
  return slots;
}

struct Outcome {
  std::vector<std::string> raw;
  std::vector<trace::ParseResult> parsed;
  std::vector<double> dice;
  std::vector<std::string> mask_digest;
  std::vector<bool> unresolved;
  std::vector<std::vector<std::string>> exec_issues;
  bool transport_failure = false;
  std::string transport_message;
};

template <typename F>
void parallel_for(std::size_t n, int threads, F&& body) {
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                    : std::max<std::size_t>(1, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next.store(n);
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

RoundResult run_round(std::span<const volume::SceneCase> corpus, const bank::SkillBank& bank, policy::Policy& policy,
                      const RoundConfig& config) {
  config.validate();
  if (corpus.empty()) throw ValidationError("corpus is empty");
  for (const auto& a : bank.artifacts) {
    if (static_cast<int>(a.embedding.size()) != bank.config.embedding_dim)
      throw ValidationError("bank artifact " + a.skill_id + " has embedding dim " + std::to_string(a.embedding.size()) +
                            ", bank expects " + std::to_string(bank.config.embedding_dim));
  }
  for (const auto& c : corpus) c.validate();

  const int round = bank.round;
  const std::uint64_t round_seed = derive_seed(derive_seed(config.seed, "round"), static_cast<std::uint64_t>(round));
  const auto slots = plan_round(corpus, config, round, round_seed);

  std::vector<trace::Request> requests;
  requests.reserve(slots.size());
  for (const auto& s : slots) requests.push_back(s.request);
  policy.prepare(requests, corpus);

  std::vector<std::vector<volume::View>> views(corpus.size());
  std::vector<std::vector<std::string>> vocab(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    views[i] = volume::render_views(corpus[i].volume);
    vocab[i] = trace::target_vocabulary(corpus[i]);
  }

  const auto weights = config.weights.normalized();
  std::vector<Episode> episodes(slots.size());
  std::vector<Outcome> outcomes(slots.size());

  parallel_for(slots.size(), config.threads, [&](std::size_t i) {
    const Slot& s = slots[i];
    Episode& e = episodes[i];
    Outcome& o = outcomes[i];
    e.round = round;
    e.case_id = s.scene->case_id;
    e.group_id = "r" + pad(static_cast<std::size_t>(round), 3) + "-g" + pad(s.group, 4);
    e.episode_id = e.group_id + "-v" + std::to_string(s.variant);
    e.variant_index = s.variant;
    e.category = s.category;
    e.seed = s.seed;
    e.request = s.request;

    const auto& case_views = views[s.case_index];
    std::vector<std::string> captions;
    for (const auto& v : case_views) captions.push_back(v.caption);

    std::vector<bank::SkillArtifact> skills;
    if (config.retrieval_enabled && config.retrieval_k > 0 && !bank.artifacts.empty())
      skills = bank::retrieve(bank, s.request.text, captions, config.retrieval_k);
    for (const auto& a : skills) {
      e.retrieved_skill_ids.push_back(a.skill_id);
      e.retrieved_tags.push_back(a.tag);
    }

    policy::PolicyInput input;
    input.request_id = s.request.request_id;
    input.view_captions = captions;
    input.views = case_views;
    input.include_images = config.include_images;
    input.request_text = s.request.text;
    input.skills = std::move(skills);
    input.decoding = config.decoding;
    input.decoding.seed = s.seed;
    e.prompt = policy::messages_to_json(policy::build_prompt(input));
    e.prompt_digest = digest(e.prompt.dump());

    try {
      o.raw = policy.generate(input).raw_texts;
      if (o.raw.empty()) throw policy::TransportError(policy::TransportError::Kind::protocol, 0, 1, "no output");
    } catch (const policy::TransportError& ex) {
      o.transport_failure = true;
      o.transport_message = ex.what();
      return;
    }

    trace::FormatContext ctx;
    ctx.target_vocabulary = vocab[s.case_index];
    const auto& gt = s.scene->targets.at(s.request.intent_target).mask;
    for (std::size_t c = 0; c < o.raw.size(); ++c) {
      auto parsed = trace::parse_structured_output(o.raw[c], ctx);
      volume::Execution ex;
      if (parsed.output.answer) {
        ex = volume::execute_segmentation(*s.scene, *parsed.output.answer, config.noise,
                                          derive_seed(s.seed, static_cast<std::uint64_t>(c)));
      } else {
        ex.mask = volume::Mask::empty(s.scene->volume.dims);
        ex.unresolved = true;
        ex.issues.push_back("NO_ANSWER");
      }
      o.dice.push_back(volume::dice(ex.mask, gt));
      o.mask_digest.push_back(ex.mask.digest());
      o.unresolved.push_back(ex.unresolved);
      o.exec_issues.push_back(std::move(ex.issues));
      o.parsed.push_back(std::move(parsed));
    }
  });

  // Pick the reported candidate per episode, then reward per group.
  std::vector<std::size_t> chosen(slots.size(), 0);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const Outcome& o = outcomes[i];
    Episode& e = episodes[i];
    if (o.transport_failure) {
      e.flags.transport_failure = true;
      e.flags.unresolved = true;
      e.flags.issues.push_back("TRANSPORT_FAILURE: " + o.transport_message);
      e.format.issues.push_back(std::string(trace::issue::kMissingSection));
      e.predicted_mask_digest = volume::Mask::empty(slots[i].scene->volume.dims).digest();
      continue;
    }
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t c = 0; c < o.raw.size(); ++c) {
      const double score = weights.w_dice * o.dice[c] + weights.w_fmt * o.parsed[c].report.compliance;
      if (score > best_score) {
        best_score = score;
        best = c;
      }
    }
    chosen[i] = best;
    e.raw_output = o.raw[best];
    e.parsed = o.parsed[best].output;
    e.format = o.parsed[best].report;
    e.dice = o.dice[best];
    e.predicted_mask_digest = o.mask_digest[best];
    e.flags.unresolved = o.unresolved[best];
    e.flags.issues = o.exec_issues[best];
  }

  std::size_t g_begin = 0;
  while (g_begin < episodes.size()) {
    std::size_t g_end = g_begin;
    while (g_end < episodes.size() && episodes[g_end].group_id == episodes[g_begin].group_id) ++g_end;
    std::vector<double> dices;
    for (std::size_t i = g_begin; i < g_end; ++i) dices.push_back(episodes[i].dice);
    const double stab = reward::stability_term(dices);
    for (std::size_t i = g_begin; i < g_end; ++i) {
      Episode& e = episodes[i];
      const Outcome& o = outcomes[i];
      if (o.transport_failure) {
        e.reward = reward::RewardBreakdown{};
        continue;
      }
      e.reward = reward::composite_reward(e.dice, stab, e.format.compliance, config.weights);
      if (o.raw.size() > 1) {
        std::vector<double> comps;
        for (std::size_t c = 0; c < o.raw.size(); ++c)
          comps.push_back(reward::composite_reward(o.dice[c], stab, o.parsed[c].report.compliance, config.weights)
                              .composite);
        const auto adv = reward::grpo_advantages(comps);
        for (std::size_t c = 0; c < o.raw.size(); ++c)
          e.candidates.push_back({o.raw[c], o.dice[c], o.parsed[c].report.compliance, comps[c], adv[c]});
      }
    }
    g_begin = g_end;
  }

  RoundResult result;
  RoundReport& rep = result.report;
  rep.round = round;
  rep.bank_size = bank.size();
  for (const auto& tag : skill_tag_registry()) rep.per_tag_retrieval_frequency[tag] = 0;
  for (const auto& e : episodes) {
    for (const auto& tag : e.retrieved_tags) {
      rep.per_tag_retrieval_frequency[tag] += 1;
      rep.total_retrievals += 1;
    }
    if (e.flags.unresolved) rep.unresolved += 1;
    if (e.flags.transport_failure) rep.transport_failures += 1;
  }
  const auto gd = group_dices(episodes);
  rep.stats = compute_stats(gd, config.lambda);

  bank::SkillBank counted = bank;
  result.attribution.reserve(episodes.size() * bank.size());
  for (const auto& e : episodes) {
    auto recs = attribute_skill_rewards(e, bank);
    result.attribution.insert(result.attribution.end(), recs.begin(), recs.end());
  }
  apply_attribution(counted, result.attribution);

  std::vector<bank::SkillArtifact> fresh;
  if (config.distillation_enabled) {
    const auto top = select_top(episodes, config.top_fraction, config.reward_floor);
    rep.selected = top.size();
    std::vector<bank::DistillSource> sources;
    for (auto i : top) {
      const auto& e = episodes[i];
      sources.push_back({e.episode_id, e.request.text, e.parsed.rationale, e.parsed.answer});
    }
    fresh = bank::distill(sources, round, config.distill_mode, counted.config, config.summarizer);
  }
  rep.new_skill_count = fresh.size();
  const std::size_t combined = counted.size() + fresh.size();
  result.new_bank = bank::update_bank(counted, std::move(fresh));
  rep.merged_count = combined - result.new_bank.size();
  if (config.cull_enabled) {
    const std::size_t before = result.new_bank.size();
    result.new_bank = bank::cull(result.new_bank, config.cull_min_uses, config.cull_min_gain);
    rep.culled_count = before - result.new_bank.size();
  }
  rep.bank_size_after = result.new_bank.size();
  rep.marginal_gains = gain_table(result.new_bank);
  result.episodes = std::move(episodes);
  return result;
}

// ---------------- JSONL + evolution ----------------

void write_jsonl(std::span<const ordered_json> records, std::ostream& out) {
  for (const auto& r : records) out << r.dump() << '\n';
}

std::vector<ordered_json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<ordered_json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(ordered_json::parse(line));
    } catch (const nlohmann::json::parse_error& ex) {
      throw ValidationError(path.string() + " line " + std::to_string(n) + ": " + ex.what());
    }
  }
  return out;
}

std::vector<Episode> load_episodes(const std::filesystem::path& path) {
  std::vector<Episode> out;
  for (const auto& j : read_jsonl(path)) out.push_back(episode_from_json(j));
  return out;
}

std::vector<AttributionRecord> load_attribution(const std::filesystem::path& path) {
  std::vector<AttributionRecord> out;
  for (const auto& j : read_jsonl(path)) out.push_back(attribution_from_json(j));
  return out;
}

namespace {

std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

}  // namespace

EvolutionResult run_evolution(std::span<const volume::SceneCase> corpus, const bank::SkillBank& initial,
                              policy::Policy& policy, const RoundConfig& config, int rounds,
                              const std::optional<std::filesystem::path>& out_dir,
                              const std::function<void(const RoundReport&)>& on_round) {
  if (rounds < 1) throw ValidationError("rounds must be >= 1");
  config.validate();
  EvolutionResult result;
  result.final_bank = initial;
  std::optional<std::ofstream> csv;
  ordered_json all_reports = ordered_json::array();
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    bank::save_bank(initial, *out_dir / "bank_initial.jsonl");
    csv = open_out(*out_dir / "reports.csv");
    *csv << report_csv_header() << '\n';
  }
  for (int t = 0; t < rounds; ++t) {
    auto rr = run_round(corpus, result.final_bank, policy, config);
    if (out_dir) {
      const auto dir = *out_dir / ("round_" + pad(static_cast<std::size_t>(rr.report.round), 3));
      std::filesystem::create_directories(dir);
      {
        auto out = open_out(dir / "episodes.jsonl");
        for (const auto& e : rr.episodes) out << to_json(e).dump() << '\n';
      }
      {
        auto out = open_out(dir / "attribution.jsonl");
        for (const auto& a : rr.attribution) out << to_json(a).dump() << '\n';
      }
      bank::save_bank(rr.new_bank, dir / "bank.jsonl");
      open_out(dir / "report.json") << to_json(rr.report).dump(2) << '\n';
      *csv << report_csv_row(rr.report) << '\n';
      csv->flush();
      all_reports.push_back(to_json(rr.report));
    }
    if (on_round) on_round(rr.report);
    result.reports.push_back(rr.report);
    result.final_bank = std::move(rr.new_bank);
  }
  if (out_dir) {
    open_out(*out_dir / "reports.json") << all_reports.dump(2) << '\n';
    bank::save_bank(result.final_bank, *out_dir / "bank_final.jsonl");
  }
  return result;
}

}  // namespace skillloop::loop
