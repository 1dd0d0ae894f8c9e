#pragma once

// The policy: rendered views + request + retrieved skills -> raw structured
// output text. Two providers: a remote chat-completion service and a seeded
// scripted simulator whose error rate drops with matching in-context skills.

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "skillloop/common.hpp"
#include "skillloop/skill_bank.hpp"
#include "skillloop/trace.hpp"
#include "skillloop/volume.hpp"

namespace skillloop::policy {

struct Decoding {
  double temperature = 0.7;
  int max_tokens = 512;
  int samples = 1;  // n candidates per input
  std::uint64_t seed = 0;
};

struct PolicyInput {
  std::string request_id;
  std::vector<std::string> view_captions;
  std::span<const volume::View> views;  // sent as images only when include_images
  bool include_images = false;
  std::string request_text;
  std::vector<bank::SkillArtifact> skills;  // retrieval rank order
  Decoding decoding;
};

struct PolicyOutput {
  std::vector<std::string> raw_texts;
  std::int64_t latency_ms = 0;
  std::string provider;
};

struct Message {
  std::string role;
  std::string content;
  std::vector<std::string> image_data_urls;

  bool operator==(const Message&) const = default;
};

/// Deterministic assembly: a system message with the output grammar and the
/// skills under a "Reusable skills" heading (omitted when there are none),
/// then one user message with view captions and the request.
std::vector<Message> build_prompt(const PolicyInput& input);
/// Chat-completion `messages` array; images become image_url content parts.
nlohmann::ordered_json messages_to_json(const std::vector<Message>& messages);

/// Grayscale 8-bit PNG of a view, base64 data URL.
std::string view_data_url(const volume::View& view);
std::string base64_encode(std::string_view bytes);

struct TransportError : public Error {
  enum class Kind { transport, timeout, status, protocol };
  TransportError(Kind kind, int status, int attempts, const std::string& message)
      : Error(message), kind(kind), status(status), attempts(attempts) {}
  Kind kind;
  int status;    // HTTP status, 0 when none was received
  int attempts;  // requests issued before giving up
};

class Policy {
 public:
  virtual ~Policy() = default;
  /// Called once per round, single-threaded, before any generate call.
  virtual void prepare(std::span<const trace::Request> requests, std::span<const volume::SceneCase> corpus) {
    (void)requests;
    (void)corpus;
  }
  /// Must be safe to call concurrently.
  virtual PolicyOutput generate(const PolicyInput& input) = 0;
  virtual std::string name() const = 0;
};

// ---------------- scripted simulator ----------------

struct ScriptedConfig {
  double p_err = 0.4;   // base probability of a wrong-synonym / wrong-laterality answer
  double f_skill = 0.3; // multiplicative reduction per in-context skill matching the ambiguity class
  double p_fmt = 0.0;   // probability of a format defect
};

/// The simulator's answer table entry for one request.
struct AnswerKey {
  CanonicalAnswer correct;
  std::vector<CanonicalAnswer> wrong;
  std::string ambiguity;
  std::string target_class;
};

/// Builds the answer key for a request from the case's target table.
AnswerKey make_answer_key(const volume::SceneCase& scene, const trace::Request& request);

class ScriptedPolicy final : public Policy {
 public:
  explicit ScriptedPolicy(ScriptedConfig config = {});

  void prepare(std::span<const trace::Request> requests, std::span<const volume::SceneCase> corpus) override;
  void add_answer(const std::string& request_id, AnswerKey key);
  /// Reads only the answer table, so concurrent calls are safe after prepare().
  PolicyOutput generate(const PolicyInput& input) override;
  std::string name() const override { return "scripted"; }

  /// p_err * f_skill^(matching skills); 0 for requests without ambiguity.
  double error_rate(const AnswerKey& key, std::span<const bank::SkillArtifact> skills) const;

 private:
  std::string render(const AnswerKey& key, const CanonicalAnswer& answer, Rng& rng) const;

  ScriptedConfig config_;
  std::map<std::string, AnswerKey> table_;
};

// ---------------- remote service ----------------

struct RemoteConfig {
  std::string base_url = "http://127.0.0.1:8000";
  std::string path = "/v1/chat/completions";
  std::string model = "default";
  int timeout_ms = 30000;
  int retries = 2;          // extra attempts after the first
  int backoff_ms = 200;     // doubled per retry
  int max_in_flight = 4;
  bool batch_samples = true;  // send n in one request
  std::string token_env = "SKILLLOOP_API_TOKEN";
};

class RemotePolicy final : public Policy {
 public:
  explicit RemotePolicy(RemoteConfig config);
  PolicyOutput generate(const PolicyInput& input) override;
  std::string name() const override { return "remote:" + config_.model; }

  /// Request body for one call.
  nlohmann::ordered_json request_body(const PolicyInput& input, int n) const;

 private:
  std::vector<std::string> call(const nlohmann::ordered_json& body, int n);

  RemoteConfig config_;
  std::unique_ptr<std::counting_semaphore<>> in_flight_;
};

// ---------------- training-data export ----------------

struct SftSource {
  std::string episode_id;
  nlohmann::ordered_json prompt;  // messages array
  std::string raw_output;
  double reward = 0.0;
};

/// One record {episode_id, messages, completion, reward} per episode with
/// reward >= threshold whose output parses with full compliance; the
/// completion is the serialized normal form of the parse.
std::vector<nlohmann::ordered_json> export_sft(std::span<const SftSource> episodes, double threshold);

struct GrpoGroup {
  std::string episode_id;
  nlohmann::ordered_json prompt;
  std::vector<std::string> candidates;
  std::vector<double> rewards;
  std::vector<double> advantages;
};

struct GrpoExport {
  std::vector<nlohmann::ordered_json> records;
  std::vector<std::string> warnings;
};

/// Groups with fewer than two candidates are skipped with a warning.
GrpoExport export_grpo_groups(std::span<const GrpoGroup> groups);

}  // namespace skillloop::policy
