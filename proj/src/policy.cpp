#include "skillloop/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <zlib.h>

namespace skillloop::policy {

using ojson = nlohmann::ordered_json;

// ---------------- prompt assembly ----------------

std::vector<Message> build_prompt(const PolicyInput& input) {
  std::ostringstream sys;
  sys << "You resolve free-text segmentation requests against rendered views of a 3D scan.\n"
      << "Reply with exactly three tagged sections, in this order:\n"
      << "<evidence> one line per observation: [view:<caption>] <observation> </evidence>\n"
      << "<rationale> one line per step: [skill:<tag>] <reasoning step> </rationale>\n"
      << "<answer> key-value lines: schema: 1, target: <target id>, optional laterality: left|right|bilateral, "
         "optional subregion: <name> </answer>\n"
      << "Skill tags: " << join(skill_tag_registry(), ", ") << ".\n";
  if (!input.skills.empty()) {
    sys << "\nReusable skills:\n";
    for (std::size_t i = 0; i < input.skills.size(); ++i)
      sys << (i + 1) << ". [" << input.skills[i].tag << "] " << input.skills[i].content << "\n";
  }

  std::ostringstream user;
  user << "Views: " << join(input.view_captions, "; ") << "\n";
  user << "Request: " << input.request_text;

  Message user_msg{"user", user.str(), {}};
  if (input.include_images)
    for (const auto& v : input.views) user_msg.image_data_urls.push_back(view_data_url(v));
  return {Message{"system", sys.str(), {}}, std::move(user_msg)};
}

ojson messages_to_json(const std::vector<Message>& messages) {
  ojson arr = ojson::array();
  for (const auto& m : messages) {
    ojson jm;
    jm["role"] = m.role;
    if (m.image_data_urls.empty()) {
      jm["content"] = m.content;
    } else {
      ojson parts = ojson::array();
      parts.push_back({{"type", "text"}, {"text", m.content}});
      for (const auto& url : m.image_data_urls) parts.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
      jm["content"] = std::move(parts);
    }
    arr.push_back(std::move(jm));
  }
  return arr;
}

std::string base64_encode(std::string_view bytes) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const auto n = (static_cast<unsigned char>(bytes[i]) << 16) | (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                   static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i < bytes.size()) {
    auto n = static_cast<unsigned char>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) n |= static_cast<unsigned char>(bytes[i + 1]) << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

namespace {

void put_u32(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xFF));
  s.push_back(static_cast<char>((v >> 16) & 0xFF));
  s.push_back(static_cast<char>((v >> 8) & 0xFF));
  s.push_back(static_cast<char>(v & 0xFF));
}

void put_chunk(std::string& png, std::string_view type, const std::string& data) {
  put_u32(png, static_cast<std::uint32_t>(data.size()));
  std::string body(type);
  body += data;
  png += body;
  put_u32(png, static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

std::string encode_png(const volume::View& view) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>(view.rows) * (static_cast<std::size_t>(view.cols) + 1));
  for (int r = 0; r < view.rows; ++r) {
    raw.push_back(0);  // filter: none
    for (int c = 0; c < view.cols; ++c)
      raw.push_back(static_cast<char>(std::lround(std::clamp(static_cast<double>(view.at(r, c)), 0.0, 1.0) * 255.0)));
  }
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &len, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), Z_BEST_COMPRESSION) != Z_OK)
    throw Error("png: zlib compression failed");
  compressed.resize(len);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(view.cols));
  put_u32(ihdr, static_cast<std::uint32_t>(view.rows));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit grayscale, deflate, no filter, no interlace
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", compressed);
  put_chunk(png, "IEND", "");
  return png;
}

}  // namespace

std::string view_data_url(const volume::View& view) {
  return "data:image/png;base64," + base64_encode(encode_png(view));
}

// ---------------- scripted simulator ----------------

AnswerKey make_answer_key(const volume::SceneCase& scene, const trace::Request& request) {
  const auto it = scene.targets.find(request.intent_target);
  if (it == scene.targets.end())
    throw ValidationError("answer key: intent target '" + request.intent_target + "' not in case " + scene.case_id);
  const volume::TargetSpec& t = it->second;
  const volume::TargetSpec* parent = scene.parent_of(t.target_id);
  AnswerKey key;
  key.ambiguity = request.ambiguity;
  key.target_class = t.target_id.substr(0, t.target_id.find('_'));

  const bool sided = t.laterality && *t.laterality != Laterality::bilateral;
  if (sided && parent) {
    const Laterality other = *t.laterality == Laterality::left ? Laterality::right : Laterality::left;
    key.correct = {parent->target_id, t.laterality, std::nullopt};
    key.wrong = {{parent->target_id, other, std::nullopt}, {parent->target_id, std::nullopt, std::nullopt}};
  } else if (parent) {
    const std::string prefix = parent->target_id + "_";
    auto qualifier = [&](const std::string& id) { return id.rfind(prefix, 0) == 0 ? id.substr(prefix.size()) : id; };
    key.correct = {parent->target_id, std::nullopt, qualifier(t.target_id)};
    for (const auto& sib : parent->subregion_ids)
      if (sib != t.target_id) key.wrong.push_back({parent->target_id, std::nullopt, qualifier(sib)});
    key.wrong.push_back({parent->target_id, std::nullopt, std::nullopt});
  } else {
    key.correct = {t.target_id, std::nullopt, std::nullopt};
    for (const auto& [id, other] : scene.targets)
      if (id != t.target_id && !scene.parent_of(id)) key.wrong.push_back({id, std::nullopt, std::nullopt});
  }
  if (key.wrong.empty()) key.wrong.push_back({"unspecified structure", std::nullopt, std::nullopt});
  return key;
}

ScriptedPolicy::ScriptedPolicy(ScriptedConfig config) : config_(config) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(config_.p_err) || !in_unit(config_.f_skill) || !in_unit(config_.p_fmt))
    throw ValidationError("scripted policy: p_err, f_skill and p_fmt must lie in [0,1]");
}

void ScriptedPolicy::prepare(std::span<const trace::Request> requests, std::span<const volume::SceneCase> corpus) {
  std::map<std::string, const volume::SceneCase*> by_id;
  for (const auto& c : corpus) by_id[c.case_id] = &c;
  table_.clear();
  for (const auto& r : requests) {
    auto it = by_id.find(r.case_id);
    if (it == by_id.end()) throw ValidationError("scripted policy: request " + r.request_id + " names unknown case");
    table_[r.request_id] = make_answer_key(*it->second, r);
  }
}

void ScriptedPolicy::add_answer(const std::string& request_id, AnswerKey key) { table_[request_id] = std::move(key); }

double ScriptedPolicy::error_rate(const AnswerKey& key, std::span<const bank::SkillArtifact> skills) const {
  if (key.ambiguity.empty()) return 0.0;
  const auto matching = std::count_if(skills.begin(), skills.end(),
                                      [&](const bank::SkillArtifact& s) { return s.tag == key.ambiguity; });
  return config_.p_err * std::pow(config_.f_skill, static_cast<double>(matching));
}

namespace {

std::string step_text(const std::string& tag, const AnswerKey& key, const CanonicalAnswer& a) {
  if (tag == tags::kSpatialRelation) {
    const std::string side(a.laterality ? to_string(*a.laterality) : "bilateral");
    return "axial MIP: request says " + side + ", keep " + side + " " + key.target_class;
  }
  if (tag == tags::kSubregionResolution) {
    const std::string part = a.subregion.value_or("whole");
    return "coronal MIP: request says " + part + ", keep " + part + " " + key.target_class;
  }
  if (tag == tags::kSynonymNormalization) return "axial MIP: request wording names " + key.target_class;
  return "coronal MIP: bright " + key.target_class + " matches described finding";
}

}  // namespace

std::string ScriptedPolicy::render(const AnswerKey& key, const CanonicalAnswer& answer, Rng& rng) const {
  trace::StructuredOutput y;
  std::string where = "near the midline";
  if (answer.laterality == Laterality::left) where = "left of the midline";
  if (answer.laterality == Laterality::right) where = "right of the midline";
  if (answer.subregion) where = "in the " + *answer.subregion + " part";
  y.evidence.push_back({"axial MIP", "high-intensity " + key.target_class + " " + where});
  y.evidence.push_back({"coronal MIP", key.target_class + " outline visible " + where});
  const std::string tag = key.ambiguity.empty() ? std::string(tags::kAnatomicalLocalization) : key.ambiguity;
  y.rationale.push_back({tag, step_text(tag, key, answer)});
  y.answer = answer;

  if (rng.bernoulli(config_.p_fmt)) {
    switch (rng.below(3)) {
      case 0: y.answer.reset(); break;
      case 1: y.rationale.front().skill_tag = "guesswork"; break;
      default: y.evidence.front().view_caption.clear(); break;
    }
  }
  return trace::serialize_structured_output(y);
}

PolicyOutput ScriptedPolicy::generate(const PolicyInput& input) {
  const auto it = table_.find(input.request_id);
  if (it == table_.end()) throw ValidationError("scripted policy: no answer-table entry for " + input.request_id);
  const AnswerKey& key = it->second;
  const double p = error_rate(key, input.skills);

  PolicyOutput out;
  out.provider = name();
  const int n = std::max(1, input.decoding.samples);
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(input.decoding.seed, static_cast<std::uint64_t>(i)));
    const bool wrong = rng.uniform() < p;
    const CanonicalAnswer& answer = wrong ? rng.pick(key.wrong) : key.correct;
    out.raw_texts.push_back(render(key, answer, rng));
  }
  return out;
}

// ---------------- remote service ----------------

RemotePolicy::RemotePolicy(RemoteConfig config)
    : config_(std::move(config)),
      in_flight_(std::make_unique<std::counting_semaphore<>>(std::max(1, config_.max_in_flight))) {
  if (config_.base_url.empty()) throw ValidationError("remote policy: base_url is empty");
  if (config_.retries < 0 || config_.timeout_ms <= 0) throw ValidationError("remote policy: bad retry/timeout settings");
}

ojson RemotePolicy::request_body(const PolicyInput& input, int n) const {
  ojson body;
  body["model"] = config_.model;
  body["messages"] = messages_to_json(build_prompt(input));
  body["n"] = n;
  body["temperature"] = input.decoding.temperature;
  body["max_tokens"] = input.decoding.max_tokens;
  return body;
}

std::vector<std::string> RemotePolicy::call(const ojson& body, int n) {
  httplib::Headers headers;
  if (const char* token = std::getenv(config_.token_env.c_str()); token && *token)
    headers.emplace("Authorization", std::string("Bearer ") + token);
  const std::string payload = body.dump();
  const auto timeout = std::chrono::milliseconds(config_.timeout_ms);

  int attempts = 0;
  int delay_ms = config_.backoff_ms;
  std::optional<TransportError> last;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    if (attempt > 0 && delay_ms > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      delay_ms *= 2;
    }
    ++attempts;
    httplib::Result res;
    {
      in_flight_->acquire();
      struct Release {
        std::counting_semaphore<>* s;
        ~Release() { s->release(); }
      } release{in_flight_.get()};
      httplib::Client client(config_.base_url);
      client.set_connection_timeout(timeout);
      client.set_read_timeout(timeout);
      client.set_write_timeout(timeout);
      res = client.Post(config_.path, headers, payload, "application/json");
    }
    if (!res) {
      const auto err = res.error();
      const bool timed_out = err == httplib::Error::Read || err == httplib::Error::ConnectionTimeout;
      last.emplace(timed_out ? TransportError::Kind::timeout : TransportError::Kind::transport, 0, attempts,
                   "remote policy: " + httplib::to_string(err));
      continue;
    }
    if (res->status < 200 || res->status >= 300) {
      last.emplace(TransportError::Kind::status, res->status, attempts,
                   "remote policy: HTTP " + std::to_string(res->status));
      if (res->status == 429 || res->status >= 500) continue;
      throw *last;
    }
    try {
      const auto reply = nlohmann::json::parse(res->body);
      std::vector<std::string> texts;
      for (const auto& choice : reply.at("choices")) {
        const auto& content = choice.at("message").at("content");
        texts.push_back(content.is_string() ? content.get<std::string>() : content.dump());
      }
      if (texts.empty()) throw TransportError(TransportError::Kind::protocol, res->status, attempts, "remote policy: no choices");
      if (static_cast<int>(texts.size()) > n) texts.resize(static_cast<std::size_t>(n));
      return texts;
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(TransportError::Kind::protocol, res->status, attempts,
                           std::string("remote policy: malformed response: ") + e.what());
    }
  }
  throw *last;
}

PolicyOutput RemotePolicy::generate(const PolicyInput& input) {
  const auto start = std::chrono::steady_clock::now();
  const int n = std::max(1, input.decoding.samples);
  PolicyOutput out;
  out.provider = name();
  if (config_.batch_samples && n > 1) out.raw_texts = call(request_body(input, n), n);
  while (static_cast<int>(out.raw_texts.size()) < n) {
    auto more = call(request_body(input, 1), 1);
    out.raw_texts.push_back(std::move(more.front()));
  }
  out.latency_ms =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start).count();
  return out;
}

// ---------------- training-data export ----------------

std::vector<ojson> export_sft(std::span<const SftSource> episodes, double threshold) {
  std::vector<ojson> out;
  for (const auto& ep : episodes) {
    if (ep.reward < threshold) continue;
    const auto parsed = trace::parse_structured_output(ep.raw_output);
    if (parsed.report.compliance < 1.0) continue;
    ojson rec;
    rec["episode_id"] = ep.episode_id;
    rec["messages"] = ep.prompt;
    rec["completion"] = trace::serialize_structured_output(parsed.output);
    rec["reward"] = ep.reward;
    out.push_back(std::move(rec));
  }
  return out;
}

GrpoExport export_grpo_groups(std::span<const GrpoGroup> groups) {
  GrpoExport out;
  for (const auto& g : groups) {
    if (g.candidates.size() < 2) {
      out.warnings.push_back("skipped group " + g.episode_id + ": fewer than 2 candidates");
      continue;
    }
    if (g.rewards.size() != g.candidates.size() || g.advantages.size() != g.candidates.size()) {
      out.warnings.push_back("skipped group " + g.episode_id + ": reward/advantage count mismatch");
      continue;
    }
    ojson rec;
    rec["episode_id"] = g.episode_id;
    rec["messages"] = g.prompt;
    rec["candidates"] = g.candidates;
    rec["rewards"] = g.rewards;
    rec["advantages"] = g.advantages;
    out.records.push_back(std::move(rec));
  }
  return out;
}

}  // namespace skillloop::policy
