#include "skillloop/trace.hpp"

#include <algorithm>
#include <array>

namespace skillloop::trace {

std::string_view to_string(RequestStyle s) {
  switch (s) {
    case RequestStyle::radiology_note: return "radiology-note";
    case RequestStyle::referral: return "referral";
    case RequestStyle::consult_question: return "consult-question";
    case RequestStyle::label_like: return "label-like";
  }
  return "label-like";
}

RequestStyle parse_style(std::string_view s) {
  for (auto st : {RequestStyle::radiology_note, RequestStyle::referral, RequestStyle::consult_question,
                  RequestStyle::label_like})
    if (to_string(st) == s) return st;
  throw ValidationError("unknown request style '" + std::string(s) + "'");
}

namespace {

constexpr std::array<std::string_view, 3> kSections = {"evidence", "rationale", "answer"};

struct Section {
  bool present = false;
  std::size_t open = 0;       // position of '<name>'
  std::size_t body_begin = 0;
  std::size_t body_end = 0;   // position of '</name>'
  std::size_t close_end = 0;  // one past '</name>'
};

struct Scan {
  std::array<Section, 3> sections;
  bool out_of_order = false;
};

Scan scan_sections(std::string_view raw) {
  const std::string lower = to_lower(raw);
  Scan scan;
  for (std::size_t i = 0; i < kSections.size(); ++i) {
    const std::string open_tag = "<" + std::string(kSections[i]) + ">";
    const std::string close_tag = "</" + std::string(kSections[i]) + ">";
    const auto open = lower.find(open_tag);
    if (open == std::string::npos) continue;
    const auto close = lower.find(close_tag, open + open_tag.size());
    if (close == std::string::npos) continue;
    Section& s = scan.sections[i];
    s.present = true;
    s.open = open;
    s.body_begin = open + open_tag.size();
    s.body_end = close;
    s.close_end = close + close_tag.size();
    if (lower.find(open_tag, open + 1) != std::string::npos) scan.out_of_order = true;
  }
  const Section* prev = nullptr;
  for (const auto& s : scan.sections) {
    if (!s.present) continue;
    if (prev && prev->close_end > s.open) scan.out_of_order = true;
    prev = &s;
  }
  return scan;
}

std::vector<std::string> body_lines(std::string_view raw, const Section& s) {
  std::vector<std::string> lines;
  std::string_view body = raw.substr(s.body_begin, s.body_end - s.body_begin);
  std::size_t pos = 0;
  while (pos <= body.size()) {
    auto nl = body.find('\n', pos);
    if (nl == std::string_view::npos) nl = body.size();
    std::string line = trim(body.substr(pos, nl - pos));
    if (!line.empty()) lines.push_back(std::move(line));
    pos = nl + 1;
  }
  return lines;
}

/// Matches "[prefix:VALUE] rest" case-insensitively on the prefix.
bool split_bracketed(const std::string& line, std::string_view prefix, std::string& value, std::string& rest) {
  if (line.size() < prefix.size() + 2 || line[0] != '[') return false;
  if (!iequals(std::string_view(line).substr(1, prefix.size()), prefix)) return false;
  const auto close = line.find(']', prefix.size() + 1);
  if (close == std::string::npos) return false;
  value = trim(std::string_view(line).substr(prefix.size() + 1, close - prefix.size() - 1));
  rest = trim(std::string_view(line).substr(close + 1));
  return true;
}

std::optional<CanonicalAnswer> parse_answer(const std::vector<std::string>& lines) {
  CanonicalAnswer a;
  bool has_target = false, has_lat = false, has_sub = false, has_schema = false;
  for (const auto& line : lines) {
    const auto colon = line.find(':');
    if (colon == std::string::npos) return std::nullopt;
    const std::string key = to_lower(trim(std::string_view(line).substr(0, colon)));
    const std::string value = trim(std::string_view(line).substr(colon + 1));
    if (key == "schema") {
      if (has_schema || value != std::to_string(kAnswerSchemaVersion)) return std::nullopt;
      has_schema = true;
    } else if (key == "target") {
      if (has_target || value.empty()) return std::nullopt;
      a.target_id = value;
      has_target = true;
    } else if (key == "laterality") {
      if (has_lat) return std::nullopt;
      a.laterality = parse_laterality(value);
      if (!a.laterality) return std::nullopt;
      has_lat = true;
    } else if (key == "subregion") {
      if (has_sub || value.empty()) return std::nullopt;
      a.subregion = value;
      has_sub = true;
    } else {
      return std::nullopt;
    }
  }
  if (!has_target) return std::nullopt;
  return a;
}

bool contains_ci(const std::vector<std::string>& haystack, std::string_view needle) {
  return std::any_of(haystack.begin(), haystack.end(), [&](const std::string& s) { return iequals(s, needle); });
}

void add_issue(std::vector<std::string>& issues, std::string_view code) { issues.emplace_back(code); }

std::string single_line(std::string_view s) {
  std::string out(s);
  for (auto& c : out)
    if (c == '\n' || c == '\r') c = ' ';
  return out;
}

}  // namespace

ParseResult parse_structured_output(std::string_view raw, const FormatContext& context) {
  ParseResult result;
  auto& out = result.output;
  auto& issues = result.report.issues;
  const Scan scan = scan_sections(raw);

  bool structure_ok = true;
  for (const auto& s : scan.sections) {
    if (!s.present) {
      add_issue(issues, issue::kMissingSection);
      structure_ok = false;
    }
  }
  if (scan.out_of_order) {
    add_issue(issues, issue::kOutOfOrder);
    structure_ok = false;
  }

  bool evidence_ok = false;
  if (const auto& s = scan.sections[0]; s.present) {
    bool all_cited = true;
    for (const auto& line : body_lines(raw, s)) {
      EvidenceItem item;
      std::string caption, rest;
      if (split_bracketed(line, "view:", caption, rest)) {
        item.view_caption = caption;
        item.observation = rest;
      } else {
        item.observation = line;
      }
      if (item.view_caption.empty() || !contains_ci(context.view_captions, item.view_caption)) all_cited = false;
      out.evidence.push_back(std::move(item));
    }
    if (out.evidence.empty()) {
      add_issue(issues, issue::kEmptyEvidence);
    } else if (!all_cited) {
      add_issue(issues, issue::kUnknownView);
    } else {
      evidence_ok = true;
    }
  }

  bool rationale_ok = false;
  if (const auto& s = scan.sections[1]; s.present) {
    bool malformed = false, unknown = false;
    for (const auto& line : body_lines(raw, s)) {
      std::string tag, rest;
      if (!split_bracketed(line, "skill:", tag, rest) || tag.empty()) {
        malformed = true;
        continue;
      }
      tag = to_lower(tag);
      if (!contains_ci(context.skill_tags, tag)) unknown = true;
      out.rationale.push_back({std::move(tag), std::move(rest)});
    }
    if (malformed) add_issue(issues, issue::kMalformedStep);
    if (unknown) add_issue(issues, issue::kUnknownSkillTag);
    if (out.rationale.empty() && !malformed) add_issue(issues, issue::kEmptyRationale);
    rationale_ok = !malformed && !unknown && !out.rationale.empty();
  }

  bool answer_ok = false;
  if (const auto& s = scan.sections[2]; s.present) {
    out.answer = parse_answer(body_lines(raw, s));
    if (!out.answer) {
      add_issue(issues, issue::kUnparseableAnswer);
    } else if (context.target_vocabulary && !contains_ci(*context.target_vocabulary, out.answer->target_id)) {
      add_issue(issues, issue::kUnknownTarget);
    } else {
      answer_ok = true;
    }
  }

  result.report.compliance = 0.25 * structure_ok + 0.25 * evidence_ok + 0.25 * rationale_ok + 0.25 * answer_ok;
  return result;
}

std::string serialize_structured_output(const StructuredOutput& y) {
  std::string out = "<evidence>\n";
  for (const auto& e : y.evidence) {
    if (!e.view_caption.empty()) out += "[view:" + single_line(e.view_caption) + "] ";
    out += single_line(e.observation) + "\n";
  }
  out += "</evidence>\n<rationale>\n";
  for (const auto& r : y.rationale) out += "[skill:" + single_line(r.skill_tag) + "] " + single_line(r.text) + "\n";
  out += "</rationale>\n";
  if (y.answer) {
    out += "<answer>\nschema: " + std::to_string(kAnswerSchemaVersion) + "\n";
    out += "target: " + single_line(y.answer->target_id) + "\n";
    if (y.answer->laterality) out += "laterality: " + std::string(to_string(*y.answer->laterality)) + "\n";
    if (y.answer->subregion) out += "subregion: " + single_line(*y.answer->subregion) + "\n";
    out += "</answer>\n";
  }
  return out;
}

FormatReport score_format(std::string_view raw, const FormatContext& context) {
  return parse_structured_output(raw, context).report;
}

FormatReport score_format(std::string_view raw, const std::vector<std::string>& known_skill_tags,
                          const std::vector<std::string>& target_vocabulary) {
  FormatContext ctx;
  ctx.skill_tags = known_skill_tags;
  ctx.target_vocabulary = target_vocabulary;
  return score_format(raw, ctx);
}

std::vector<std::string> validate_answer(const CanonicalAnswer& answer, const volume::SceneCase& scene) {
  if (trim(answer.target_id).empty()) return {"UNRESOLVED_TARGET"};
  return volume::resolve_answer(scene, answer).issues;
}

std::vector<std::string> target_vocabulary(const volume::SceneCase& scene) {
  std::vector<std::string> vocab;
  for (const auto& [id, t] : scene.targets) {
    vocab.push_back(id);
    vocab.insert(vocab.end(), t.synonyms.begin(), t.synonyms.end());
  }
  return vocab;
}

}  // namespace skillloop::trace
