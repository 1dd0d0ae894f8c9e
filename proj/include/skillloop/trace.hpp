#pragma once

// Structured output y = (evidence, rationale, answer): the tagged-section wire
// format exchanged with the policy, its parser, serializer and the format
// compliance rubric.
//
//   <evidence>
//   [view:axial MIP] bright focus left of midline
//   </evidence>
//   <rationale>
//   [skill:spatial-relation] "left" restricts the target to x below the midline
//   </rationale>
//   <answer>
//   schema: 1
//   target: lesion
//   laterality: left
//   </answer>
//
// The full grammar is documented in docs/trace-format.md.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "skillloop/common.hpp"
#include "skillloop/volume.hpp"

namespace skillloop::trace {

inline constexpr int kAnswerSchemaVersion = 1;

enum class RequestStyle { radiology_note, referral, consult_question, label_like };

std::string_view to_string(RequestStyle s);
/// Throws ValidationError on an unknown style name.
RequestStyle parse_style(std::string_view s);

struct Request {
  std::string request_id;
  std::string case_id;
  std::string text;
  RequestStyle style = RequestStyle::label_like;
  /// Hidden canonical target; evaluation-only, never sent to the policy.
  std::string intent_target;
  /// Skill tag needed to disambiguate this phrasing; empty for exact labels.
  /// Evaluation-only metadata like intent_target.
  std::string ambiguity;

  bool operator==(const Request&) const = default;
};

struct EvidenceItem {
  std::string view_caption;  // empty when the observation cites no view
  std::string observation;
  bool operator==(const EvidenceItem&) const = default;
};

struct RationaleStep {
  std::string skill_tag;
  std::string text;
  bool operator==(const RationaleStep&) const = default;
};

struct StructuredOutput {
  std::vector<EvidenceItem> evidence;
  std::vector<RationaleStep> rationale;
  std::optional<CanonicalAnswer> answer;
  bool operator==(const StructuredOutput&) const = default;
};

/// Machine-readable format defects.
namespace issue {
inline constexpr std::string_view kMissingSection = "MISSING_SECTION";
inline constexpr std::string_view kOutOfOrder = "OUT_OF_ORDER";
inline constexpr std::string_view kUnparseableAnswer = "UNPARSEABLE_ANSWER";
inline constexpr std::string_view kUnknownSkillTag = "UNKNOWN_SKILL_TAG";
inline constexpr std::string_view kEmptyEvidence = "EMPTY_EVIDENCE";
inline constexpr std::string_view kUnknownView = "UNKNOWN_VIEW";
inline constexpr std::string_view kEmptyRationale = "EMPTY_RATIONALE";
inline constexpr std::string_view kMalformedStep = "MALFORMED_STEP";
inline constexpr std::string_view kUnknownTarget = "UNKNOWN_TARGET";
}  // namespace issue

struct FormatReport {
  double compliance = 0.0;
  std::vector<std::string> issues;
};

/// What the rubric checks names against. An unset vocabulary skips the
/// target check (counted as passing).
struct FormatContext {
  std::vector<std::string> skill_tags = skill_tag_registry();
  std::vector<std::string> view_captions = volume::standard_captions();
  std::optional<std::vector<std::string>> target_vocabulary;
};

struct ParseResult {
  StructuredOutput output;
  FormatReport report;
};

/// Never throws; every defect becomes an issue code.
ParseResult parse_structured_output(std::string_view raw, const FormatContext& context = {});

/// Canonical normal form. Texts are emitted on single lines (embedded
/// newlines are folded to spaces).
std::string serialize_structured_output(const StructuredOutput& y);

/// compliance = 0.25 * sections present and ordered
///            + 0.25 * evidence non-empty and every item cites a known view
///            + 0.25 * rationale non-empty and every step tag is registered
///            + 0.25 * answer parses and its target is in the vocabulary
FormatReport score_format(std::string_view raw, const FormatContext& context);
FormatReport score_format(std::string_view raw, const std::vector<std::string>& known_skill_tags,
                          const std::vector<std::string>& target_vocabulary);

/// Empty iff the answer resolves in the case's target table.
std::vector<std::string> validate_answer(const CanonicalAnswer& answer, const volume::SceneCase& scene);

/// All target ids and synonyms of a case.
std::vector<std::string> target_vocabulary(const volume::SceneCase& scene);

}  // namespace skillloop::trace
