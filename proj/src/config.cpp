#include "skillloop/config.hpp"

#include <cmath>
#include <fstream>

#include "config_schema_resource.hpp"
#include "skillloop/common.hpp"

namespace skillloop::config {

using nlohmann::json;
using nlohmann::ordered_json;

const json& schema() {
  static const json kSchema = json::parse(resources::kConfigSchemaJson);
  return kSchema;
}

namespace {

bool has_type(const json& v, const std::string& t) {
  if (t == "object") return v.is_object();
  if (t == "array") return v.is_array();
  if (t == "string") return v.is_string();
  if (t == "boolean") return v.is_boolean();
  if (t == "null") return v.is_null();
  if (t == "integer") return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
  if (t == "number") return v.is_number();
  return false;
}

void check(const json& v, const json& s, const std::string& at, std::vector<std::string>& out) {
  const std::string where = at.empty() ? "/" : at;
  if (s.contains("type")) {
    const auto& t = s["type"];
    bool ok = false;
    if (t.is_array()) {
      for (const auto& x : t) ok = ok || has_type(v, x.get<std::string>());
    } else {
      ok = has_type(v, t.get<std::string>());
    }
    if (!ok) {
      out.push_back(where + ": expected type " + t.dump());
      return;
    }
  }
  if (s.contains("enum")) {
    bool found = false;
    for (const auto& e : s["enum"]) found = found || e == v;
    if (!found) out.push_back(where + ": value " + v.dump() + " not in " + s["enum"].dump());
  }
  if (v.is_number()) {
    const double x = v.get<double>();
    if (s.contains("minimum") && x < s["minimum"].get<double>())
      out.push_back(where + ": must be >= " + s["minimum"].dump());
    if (s.contains("maximum") && x > s["maximum"].get<double>())
      out.push_back(where + ": must be <= " + s["maximum"].dump());
    if (s.contains("exclusiveMinimum") && x <= s["exclusiveMinimum"].get<double>())
      out.push_back(where + ": must be > " + s["exclusiveMinimum"].dump());
  }
  if (v.is_string() && s.contains("minLength") && v.get<std::string>().size() < s["minLength"].get<std::size_t>())
    out.push_back(where + ": shorter than " + s["minLength"].dump());
  if (v.is_array()) {
    if (s.contains("minItems") && v.size() < s["minItems"].get<std::size_t>())
      out.push_back(where + ": fewer than " + s["minItems"].dump() + " items");
    if (s.contains("maxItems") && v.size() > s["maxItems"].get<std::size_t>())
      out.push_back(where + ": more than " + s["maxItems"].dump() + " items");
    if (s.contains("items"))
      for (std::size_t i = 0; i < v.size(); ++i) check(v[i], s["items"], at + "/" + std::to_string(i), out);
  }
  if (v.is_object()) {
    const json props = s.value("properties", json::object());
    for (const auto& [key, child] : v.items()) {
      if (props.contains(key)) {
        check(child, props[key], at + "/" + key, out);
      } else if (s.contains("additionalProperties") && s["additionalProperties"] == false) {
        out.push_back(at + "/" + key + ": unknown key");
      }
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& into) {
  if (obj.contains(key)) into = obj.at(key).get<T>();
}

json section(const json& doc, const char* key) { return doc.contains(key) ? doc.at(key) : json::object(); }

}  // namespace

std::vector<std::string> validate_against(const json& document, const json& s) {
  std::vector<std::string> out;
  check(document, s, "", out);
  return out;
}

RunConfig parse_run_config(const json& doc) {
  const auto problems = validate_against(doc, schema());
  if (!problems.empty()) throw ValidationError("invalid config: " + join(problems, "; "));

  RunConfig c;
  if (doc.contains("seed")) c.loop.seed = doc.at("seed").get<std::uint64_t>();

  const json corpus = section(doc, "corpus");
  if (corpus.contains("dir") && !corpus.at("dir").is_null()) c.corpus_dir = corpus.at("dir").get<std::string>();
  read(corpus, "seed", c.corpus_seed);
  read(corpus, "cases", c.corpus.cases);
  if (corpus.contains("dims")) {
    const auto& d = corpus.at("dims");
    c.corpus.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
  }
  if (corpus.contains("spacing")) {
    const auto& s = corpus.at("spacing");
    c.corpus.spacing = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
  }
  read(corpus, "laterality", c.corpus.laterality);
  read(corpus, "subregions", c.corpus.subregions);
  read(corpus, "lesions_per_side", c.corpus.lesions_per_side);
  read(corpus, "min_radius", c.corpus.min_radius);
  read(corpus, "max_radius", c.corpus.max_radius);
  read(corpus, "request_styles", c.request_styles);
  if (c.corpus.min_radius > c.corpus.max_radius) throw ValidationError("invalid config: /corpus: min_radius > max_radius");

  const json pol = section(doc, "policy");
  read(pol, "mode", c.policy_mode);
  read(pol, "include_images", c.loop.include_images);
  const json sc = section(pol, "scripted");
  read(sc, "p_err", c.scripted.p_err);
  read(sc, "f_skill", c.scripted.f_skill);
  read(sc, "p_fmt", c.scripted.p_fmt);
  const json rm = section(pol, "remote");
  read(rm, "base_url", c.remote.base_url);
  read(rm, "path", c.remote.path);
  read(rm, "model", c.remote.model);
  read(rm, "timeout_ms", c.remote.timeout_ms);
  read(rm, "retries", c.remote.retries);
  read(rm, "backoff_ms", c.remote.backoff_ms);
  read(rm, "max_in_flight", c.remote.max_in_flight);
  read(rm, "batch_samples", c.remote.batch_samples);
  read(rm, "token_env", c.remote.token_env);
  const json dec = section(pol, "decoding");
  read(dec, "temperature", c.loop.decoding.temperature);
  read(dec, "max_tokens", c.loop.decoding.max_tokens);
  read(dec, "samples", c.loop.decoding.samples);

  const json rw = section(doc, "reward");
  const json w = section(rw, "weights");
  read(w, "dice", c.loop.weights.w_dice);
  read(w, "stability", c.loop.weights.w_stab);
  read(w, "format", c.loop.weights.w_fmt);
  read(rw, "lambda", c.loop.lambda);

  const json lp = section(doc, "loop");
  read(lp, "rounds", c.rounds);
  read(lp, "groups_per_round", c.loop.groups_per_round);
  read(lp, "variants_per_request", c.loop.variants_per_request);
  read(lp, "top_fraction", c.loop.top_fraction);
  read(lp, "reward_floor", c.loop.reward_floor);
  read(lp, "retrieval", c.loop.retrieval_enabled);
  read(lp, "distillation", c.loop.distillation_enabled);
  if (lp.contains("distill_mode"))
    c.loop.distill_mode =
        lp.at("distill_mode") == "heuristic" ? bank::DistillMode::heuristic : bank::DistillMode::model_backed;
  read(lp, "threads", c.loop.threads);
  read(section(lp, "noise"), "max_boundary_voxels", c.loop.noise.max_boundary_voxels);

  const json bk = section(doc, "bank");
  read(bk, "initial", c.initial_bank);
  read(bk, "embedding_dim", c.bank.embedding_dim);
  read(bk, "k", c.bank.k);
  read(bk, "sim_threshold", c.bank.sim_threshold);
  read(bk, "dedup_threshold", c.bank.dedup_threshold);
  const json cull = section(bk, "cull");
  read(cull, "enabled", c.loop.cull_enabled);
  read(cull, "min_uses", c.loop.cull_min_uses);
  read(cull, "min_gain", c.loop.cull_min_gain);
  c.loop.retrieval_k = c.bank.k;

  const json out = section(doc, "output");
  if (out.contains("dir")) c.output_dir = out.at("dir").get<std::string>();
  const json rv = section(doc, "review");
  read(rv, "fraction", c.review_fraction);
  read(rv, "seed", c.review_seed);
  read(section(doc, "export"), "sft_threshold", c.sft_threshold);

  c.loop.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& ex) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + ex.what());
  }
  return parse_run_config(doc);
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.loop.seed;
  j["corpus"] = {
      {"dir", c.corpus_dir ? ordered_json(c.corpus_dir->string()) : ordered_json(nullptr)},
      {"seed", c.corpus_seed},
      {"cases", c.corpus.cases},
      {"dims", {c.corpus.dims.depth, c.corpus.dims.height, c.corpus.dims.width}},
      {"spacing", {c.corpus.spacing.dz, c.corpus.spacing.dy, c.corpus.spacing.dx}},
      {"laterality", c.corpus.laterality},
      {"subregions", c.corpus.subregions},
      {"lesions_per_side", c.corpus.lesions_per_side},
      {"min_radius", c.corpus.min_radius},
      {"max_radius", c.corpus.max_radius},
      {"request_styles", c.request_styles}};
  j["policy"] = {{"mode", c.policy_mode},
                 {"include_images", c.loop.include_images},
                 {"scripted", {{"p_err", c.scripted.p_err}, {"f_skill", c.scripted.f_skill}, {"p_fmt", c.scripted.p_fmt}}},
                 {"remote",
                  {{"base_url", c.remote.base_url},
                   {"path", c.remote.path},
                   {"model", c.remote.model},
                   {"timeout_ms", c.remote.timeout_ms},
                   {"retries", c.remote.retries},
                   {"backoff_ms", c.remote.backoff_ms},
                   {"max_in_flight", c.remote.max_in_flight},
                   {"batch_samples", c.remote.batch_samples},
                   {"token_env", c.remote.token_env}}},
                 {"decoding",
                  {{"temperature", c.loop.decoding.temperature},
                   {"max_tokens", c.loop.decoding.max_tokens},
                   {"samples", c.loop.decoding.samples}}}};
  j["reward"] = {{"weights",
                  {{"dice", c.loop.weights.w_dice}, {"stability", c.loop.weights.w_stab}, {"format", c.loop.weights.w_fmt}}},
                 {"lambda", c.loop.lambda}};
  j["loop"] = {{"rounds", c.rounds},
               {"groups_per_round", c.loop.groups_per_round},
               {"variants_per_request", c.loop.variants_per_request},
               {"top_fraction", c.loop.top_fraction},
               {"reward_floor", c.loop.reward_floor},
               {"retrieval", c.loop.retrieval_enabled},
               {"distillation", c.loop.distillation_enabled},
               {"distill_mode", c.loop.distill_mode == bank::DistillMode::heuristic ? "heuristic" : "model-backed"},
               {"threads", c.loop.threads},
               {"noise", {{"max_boundary_voxels", c.loop.noise.max_boundary_voxels}}}};
  j["bank"] = {{"initial", c.initial_bank},
               {"embedding_dim", c.bank.embedding_dim},
               {"k", c.bank.k},
               {"sim_threshold", c.bank.sim_threshold},
               {"dedup_threshold", c.bank.dedup_threshold},
               {"cull", {{"enabled", c.loop.cull_enabled}, {"min_uses", c.loop.cull_min_uses}, {"min_gain", c.loop.cull_min_gain}}}};
  j["output"] = {{"dir", c.output_dir.string()}};
  j["review"] = {{"fraction", c.review_fraction}, {"seed", c.review_seed}};
  j["export"] = {{"sft_threshold", c.sft_threshold}};
  return j;
}

}  // namespace skillloop::config
