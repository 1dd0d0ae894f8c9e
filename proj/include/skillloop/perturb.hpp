#pragma once

// Request synthesis and clinically equivalent rephrasing sets.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillloop/trace.hpp"
#include "skillloop/volume.hpp"

namespace skillloop::perturb {

enum class Category { typo_noise, spatial_specifier, clinical_paraphrase };

std::string_view to_string(Category c);
Category parse_category(std::string_view s);
const std::vector<Category>& all_categories();

/// Pattern tables with {TARGET}, {LATERALITY}, {SUBREGION} and {ID}
/// placeholders. The built-in table is compiled from resources/templates.json.
struct TemplateTable {
  std::map<std::string, std::vector<std::string>> styles;
  std::vector<std::string> spatial_laterality;
  std::vector<std::string> spatial_subregion;
  std::vector<std::string> spatial_none;
  std::map<std::string, std::vector<std::string>> paraphrase;  // keyed by target class ("lesion", ...)

  static TemplateTable from_json(const nlohmann::json& j);
  static const TemplateTable& builtin();
};

struct RephrasingGroup {
  trace::Request base;
  std::vector<trace::Request> variants;
  std::vector<Category> category_per_variant;
};

struct VariantOptions {
  int typo_budget = 3;  // max Levenshtein distance of a typo variant from its base
  const TemplateTable* templates = nullptr;
};

/// Tokens typo noise must never modify: every token of every target id and
/// synonym in the case plus the laterality words.
std::vector<std::string> protected_tokens(const volume::SceneCase& scene);

/// Ambiguity class (a skill tag, or empty for exact labels) of a phrasing.
std::string classify_ambiguity(const volume::SceneCase& scene, const trace::Request& request,
                               std::optional<Category> category);

/// n_per_category variants per category, in category order. Deterministic
/// per seed; every variant keeps base.intent_target.
RephrasingGroup generate_variants(const trace::Request& base, const volume::SceneCase& scene,
                                  std::span<const Category> categories, int n_per_category, std::uint64_t seed,
                                  const VariantOptions& options = {});

/// One request per (target, style), targets in id order.
std::vector<trace::Request> synth_requests(const volume::SceneCase& scene, std::span<const trace::RequestStyle> styles,
                                           std::uint64_t seed, const TemplateTable& templates = TemplateTable::builtin());
/// Same, with style names; throws ValidationError on an unknown style.
std::vector<trace::Request> synth_requests(const volume::SceneCase& scene, const std::vector<std::string>& styles,
                                           std::uint64_t seed, const TemplateTable& templates = TemplateTable::builtin());

}  // namespace skillloop::perturb
