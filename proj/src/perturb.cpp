#include "skillloop/perturb.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "templates_resource.hpp"

namespace skillloop::perturb {

using trace::Request;
using volume::SceneCase;
using volume::TargetSpec;

std::string_view to_string(Category c) {
  switch (c) {
    case Category::typo_noise: return "typo-noise";
    case Category::spatial_specifier: return "spatial-specifier";
    case Category::clinical_paraphrase: return "clinical-paraphrase";
  }
  return "typo-noise";
}

Category parse_category(std::string_view s) {
  for (auto c : all_categories())
    if (to_string(c) == s) return c;
  throw ValidationError("unknown perturbation category '" + std::string(s) + "'");
}

const std::vector<Category>& all_categories() {
  static const std::vector<Category> kAll = {Category::typo_noise, Category::spatial_specifier,
                                             Category::clinical_paraphrase};
  return kAll;
}

TemplateTable TemplateTable::from_json(const nlohmann::json& j) {
  TemplateTable t;
  try {
    t.styles = j.at("styles").get<std::map<std::string, std::vector<std::string>>>();
    const auto& sp = j.at("spatial");
    t.spatial_laterality = sp.at("laterality").get<std::vector<std::string>>();
    t.spatial_subregion = sp.at("subregion").get<std::vector<std::string>>();
    t.spatial_none = sp.at("none").get<std::vector<std::string>>();
    t.paraphrase = j.at("paraphrase").get<std::map<std::string, std::vector<std::string>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("template table: ") + e.what());
  }
  for (const auto& [style, patterns] : t.styles) {
    trace::parse_style(style);
    if (patterns.empty()) throw ValidationError("template table: no patterns for style " + style);
  }
  if (t.spatial_laterality.empty() || t.spatial_subregion.empty() || t.spatial_none.empty())
    throw ValidationError("template table: spatial pattern lists must be non-empty");
  return t;
}

const TemplateTable& TemplateTable::builtin() {
  static const TemplateTable kTable = from_json(nlohmann::json::parse(resources::kTemplatesJson));
  return kTable;
}

namespace {

struct TargetPhrase {
  const TargetSpec* target = nullptr;
  const TargetSpec* parent = nullptr;
  std::string noun_class;   // id root, e.g. "lesion"
  std::string side;         // "left" / "right" or empty
  std::string subregion;    // qualifier such as "superior", or empty
};

TargetPhrase describe(const SceneCase& scene, const std::string& target_id) {
  TargetPhrase p;
  p.target = &scene.targets.at(target_id);
  p.parent = scene.parent_of(target_id);
  p.noun_class = target_id.substr(0, target_id.find('_'));
  if (p.target->laterality && *p.target->laterality != Laterality::bilateral)
    p.side = std::string(to_string(*p.target->laterality));
  if (p.parent && p.side.empty()) {
    const std::string prefix = p.parent->target_id + "_";
    p.subregion = target_id.rfind(prefix, 0) == 0 ? target_id.substr(prefix.size()) : target_id;
  }
  return p;
}

std::string pick_name(Rng& rng, const TargetSpec& t) {
  if (t.synonyms.empty()) {
    std::string name = t.target_id;
    std::replace(name.begin(), name.end(), '_', ' ');
    return name;
  }
  return rng.pick(t.synonyms);
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
}

std::string fill(std::string pattern, const std::string& target, const std::string& side, const std::string& subregion,
                 const std::string& id) {
  replace_all(pattern, "{TARGET}", target);
  replace_all(pattern, "{LATERALITY}", side);
  replace_all(pattern, "{SUBREGION}", subregion);
  replace_all(pattern, "{ID}", id);
  std::string out = collapse_whitespace(pattern);
  replace_all(out, " ,", ",");
  replace_all(out, " .", ".");
  return out;
}

bool is_ascii_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

struct Span {
  std::size_t begin;
  std::size_t length;
};

std::vector<Span> editable_spans(const std::string& text, const std::set<std::string>& protect) {
  std::vector<Span> spans;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!is_ascii_alpha(text[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < text.size() && is_ascii_alpha(text[j])) ++j;
    // a letter run glued to digits or UTF-8 bytes is part of a larger token
    const bool glued = (i > 0 && (std::isalnum(static_cast<unsigned char>(text[i - 1])) ||
                                  static_cast<unsigned char>(text[i - 1]) >= 0x80)) ||
                       (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) ||
                                            static_cast<unsigned char>(text[j]) >= 0x80));
    if (!glued && j - i >= 3 && !protect.contains(to_lower(std::string_view(text).substr(i, j - i))))
      spans.push_back({i, j - i});
    i = j;
  }
  return spans;
}

std::string typo(const std::string& text, const std::set<std::string>& protect, int budget, Rng& rng) {
  std::string out = text;
  if (budget <= 0) return out;
  int remaining = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(budget)));
  while (remaining > 0) {
    const auto spans = editable_spans(out, protect);
    if (spans.empty()) break;
    const Span s = rng.pick(spans);
    // adjacent swap costs 2 Levenshtein edits, a drop costs 1
    const bool swap = remaining >= 2 && rng.bernoulli(0.5);
    if (swap) {
      const std::size_t pos = s.begin + static_cast<std::size_t>(rng.below(s.length - 1));
      std::swap(out[pos], out[pos + 1]);
      remaining -= 2;
    } else {
      const std::size_t pos = s.begin + static_cast<std::size_t>(rng.below(s.length));
      out.erase(pos, 1);
      remaining -= 1;
    }
  }
  return out;
}

std::string paraphrase(const TemplateTable& t, const TargetPhrase& p, Rng& rng) {
  auto it = t.paraphrase.find(p.noun_class);
  if (it == t.paraphrase.end() || it->second.empty())
    return fill(rng.pick(t.spatial_none), pick_name(rng, *p.target), p.side, p.subregion, p.target->target_id);
  return fill(rng.pick(it->second), pick_name(rng, *p.target), p.side, p.subregion, p.target->target_id);
}

std::string spatial(const TemplateTable& t, const TargetPhrase& p, Rng& rng) {
  const TargetSpec& anchor = p.parent ? *p.parent : *p.target;
  if (!p.side.empty()) return fill(rng.pick(t.spatial_laterality), pick_name(rng, anchor), p.side, "", p.target->target_id);
  if (!p.subregion.empty())
    return fill(rng.pick(t.spatial_subregion), pick_name(rng, anchor), "", p.subregion, p.target->target_id);
  return fill(rng.pick(t.spatial_none), pick_name(rng, *p.target), "", "", p.target->target_id);
}

}  // namespace

std::vector<std::string> protected_tokens(const SceneCase& scene) {
  std::set<std::string> out = {"left", "right", "bilateral"};
  for (const auto& name : trace::target_vocabulary(scene))
    for (auto& tok : tokenize(name)) out.insert(std::move(tok));
  return {out.begin(), out.end()};
}

std::string classify_ambiguity(const SceneCase& scene, const Request& request, std::optional<Category> category) {
  if (request.text == request.intent_target) return "";
  const TargetPhrase p = describe(scene, request.intent_target);
  if (!p.side.empty()) return std::string(tags::kSpatialRelation);
  if (!p.subregion.empty()) return std::string(tags::kSubregionResolution);
  if (category == Category::clinical_paraphrase) return std::string(tags::kAnatomicalLocalization);
  return std::string(tags::kSynonymNormalization);
}

RephrasingGroup generate_variants(const Request& base, const SceneCase& scene, std::span<const Category> categories,
                                  int n_per_category, std::uint64_t seed, const VariantOptions& options) {
  if (categories.empty()) throw ValidationError("generate_variants: empty category list");
  if (n_per_category < 1) throw ValidationError("generate_variants: n_per_category must be >= 1");
  if (!scene.targets.contains(base.intent_target))
    throw ValidationError("generate_variants: intent target '" + base.intent_target + "' not in case " + scene.case_id);
  const TemplateTable& table = options.templates ? *options.templates : TemplateTable::builtin();
  const auto prot_list = protected_tokens(scene);
  const std::set<std::string> protect(prot_list.begin(), prot_list.end());
  const TargetPhrase phrase = describe(scene, base.intent_target);

  RephrasingGroup group;
  group.base = base;
  Rng rng(derive_seed(seed, base.request_id));
  for (auto cat : categories) {
    for (int i = 0; i < n_per_category; ++i) {
      Request v = base;
      v.request_id = base.request_id + "~" + std::string(to_string(cat)) + "#" + std::to_string(i);
      switch (cat) {
        case Category::typo_noise: v.text = typo(base.text, protect, options.typo_budget, rng); break;
        case Category::spatial_specifier: v.text = spatial(table, phrase, rng); break;
        case Category::clinical_paraphrase: v.text = paraphrase(table, phrase, rng); break;
      }
      v.ambiguity = classify_ambiguity(scene, v, cat);
      group.variants.push_back(std::move(v));
      group.category_per_variant.push_back(cat);
    }
  }
  return group;
}

std::vector<Request> synth_requests(const SceneCase& scene, std::span<const trace::RequestStyle> styles,
                                    std::uint64_t seed, const TemplateTable& templates) {
  if (scene.targets.empty()) throw ValidationError("synth_requests: case " + scene.case_id + " has no targets");
  std::vector<Request> out;
  Rng rng(derive_seed(seed, scene.case_id));
  for (const auto& [id, target] : scene.targets) {
    for (auto style : styles) {
      const std::string style_name(trace::to_string(style));
      auto it = templates.styles.find(style_name);
      if (it == templates.styles.end()) throw ValidationError("synth_requests: no templates for style " + style_name);
      Request r;
      r.request_id = scene.case_id + ":" + id + ":" + style_name;
      r.case_id = scene.case_id;
      r.style = style;
      r.intent_target = id;
      r.text = style == trace::RequestStyle::label_like ? id : fill(rng.pick(it->second), pick_name(rng, target), "", "", id);
      r.ambiguity = classify_ambiguity(scene, r, std::nullopt);
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<Request> synth_requests(const SceneCase& scene, const std::vector<std::string>& styles, std::uint64_t seed,
                                    const TemplateTable& templates) {
  std::vector<trace::RequestStyle> parsed;
  for (const auto& s : styles) parsed.push_back(trace::parse_style(s));
  return synth_requests(scene, parsed, seed, templates);
}

}  // namespace skillloop::perturb
