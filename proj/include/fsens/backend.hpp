#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsens/format_grammar.hpp"

namespace fsens {

enum class RequestMode { ranking, greedy };

std::string_view to_string(RequestMode m);

/// Bookkeeping that travels with a request. Real backends ignore it; the
/// synthetic backend uses the gold label and format fingerprint as its
/// ground truth.
struct RequestContext {
  std::string gold_label;
  std::string format_fingerprint;
  std::string instance_uid;
};

struct BackendRequest {
  RenderedPrompt prompt;
  std::vector<std::string> candidates;  // ranking
  std::optional<int> max_new_tokens;    // greedy
  std::string backend_tag;
  bool length_normalize = false;
  RequestContext context;

  RequestMode mode() const { return max_new_tokens ? RequestMode::greedy : RequestMode::ranking; }

  /// Throws unless exactly one of candidates / max_new_tokens is present.
  void validate() const;
};

/// Content hash over prompt text, candidates, mode, tag, decode parameters
/// and context. `tag_override` lets a replay backend look up responses that
/// were recorded under another tag.
std::string request_hash(const BackendRequest& request,
                         const std::optional<std::string>& tag_override = std::nullopt);

struct Usage {
  std::int64_t prompt_tokens = 0;
  std::int64_t completion_tokens = 0;

  bool operator==(const Usage&) const = default;
};

struct BackendResponse {
  std::vector<double> option_logprobs;
  std::optional<std::string> generated_text;
  Usage usage;
  double latency_ms = 0.0;

  /// Equality ignores latency.
  bool operator==(const BackendResponse& o) const {
    return option_logprobs == o.option_logprobs && generated_text == o.generated_text && usage == o.usage;
  }
};

nlohmann::json response_to_json(const BackendResponse& r);
BackendResponse response_from_json(const nlohmann::json& j);

struct Capabilities {
  bool ranking = true;
  bool greedy = true;
};

/// Inference surface. Implementations must accept concurrent calls.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual std::string tag() const = 0;
  virtual Capabilities capabilities() const = 0;

  /// Total log-probability of each candidate continuation.
  virtual BackendResponse score_options(const BackendRequest& request) = 0;

  /// Deterministic decode; raw text.
  virtual BackendResponse generate_greedy(const BackendRequest& request) = 0;

  /// Dispatches on request.mode().
  BackendResponse call(const BackendRequest& request);

  /// Short JSON description written into run metadata.
  virtual nlohmann::json describe() const { return {{"tag", tag()}}; }
};

using BackendPtr = std::shared_ptr<Backend>;

/// Test backend with a known contextual bias.
///
/// For candidate j the logit is bias[class(j)] * scale(format) + signal *
/// [candidate j is the gold label] + noise * N(0,1), and option_logprobs are
/// the log-softmax of those logits. class(j) is the candidate's position in
/// `class_names` when set, else j. Noise is seeded by (seed, prompt text,
/// candidate string), so responses are pure functions of the request and
/// follow candidates under permutation.
struct SyntheticBiasConfig {
  std::string tag = "synthetic";
  std::vector<double> bias;
  double signal = 1.0;
  double noise = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;
  /// Per-format bias multiplier keyed by format fingerprint; default 1.
  std::map<std::string, double> format_bias_scale;
  /// Greedy mode emits the gold label verbatim when set, otherwise the
  /// prompt's answer surface form with the largest logit.
  bool greedy_emits_gold = false;
};

class SyntheticBiasBackend final : public Backend {
 public:
  explicit SyntheticBiasBackend(SyntheticBiasConfig config);

  std::string tag() const override { return config_.tag; }
  Capabilities capabilities() const override { return {}; }
  BackendResponse score_options(const BackendRequest& request) override;
  BackendResponse generate_greedy(const BackendRequest& request) override;
  nlohmann::json describe() const override;

  const SyntheticBiasConfig& config() const { return config_; }
  void set_format_bias_scale(std::map<std::string, double> scale) { config_.format_bias_scale = std::move(scale); }

 private:
  std::vector<double> logits(const BackendRequest& request) const;

  SyntheticBiasConfig config_;
};

/// Replays responses recorded in a cache-format JSONL file. Requests are
/// looked up by request_hash computed under `source_tag` (default: own tag).
/// A missing entry is a transport error.
class ScriptedBackend final : public Backend {
 public:
  ScriptedBackend(std::string tag, const std::filesystem::path& fixture,
                  std::optional<std::string> source_tag = std::nullopt, Capabilities caps = {});

  std::string tag() const override { return tag_; }
  Capabilities capabilities() const override { return caps_; }
  BackendResponse score_options(const BackendRequest& request) override;
  BackendResponse generate_greedy(const BackendRequest& request) override;
  nlohmann::json describe() const override;

  std::size_t size() const { return responses_.size(); }

 private:
  BackendResponse lookup(const BackendRequest& request) const;

  std::string tag_;
  std::optional<std::string> source_tag_;
  Capabilities caps_;
  std::unordered_map<std::string, BackendResponse> responses_;
};

/// OpenAI-compatible endpoint.
///
/// Ranking posts to {base}/completions with echo=true, max_tokens=0 and
/// logprobs, and sums the token log-probabilities whose text offset lies in
/// the candidate continuation. Greedy posts to {base}/chat/completions (chat
/// mode) or {base}/completions (completion mode) with temperature 0.
struct HttpBackendConfig {
  std::string tag = "http";
  std::string base_url;  // e.g. http://127.0.0.1:8000/v1
  std::string model;
  std::string api_key_env;  // environment variable name; empty = no auth
  bool supports_logprobs = true;
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::seconds timeout{60};
};

class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config);

  std::string tag() const override { return config_.tag; }
  Capabilities capabilities() const override { return {config_.supports_logprobs, true}; }
  BackendResponse score_options(const BackendRequest& request) override;
  BackendResponse generate_greedy(const BackendRequest& request) override;
  nlohmann::json describe() const override;

 private:
  nlohmann::json post(const std::string& path, const nlohmann::json& body) const;

  HttpBackendConfig config_;
  std::string scheme_host_port_;
  std::string path_prefix_;
};

/// Append-only response cache in front of another backend.
///
/// File format: one JSON object per line, {request_hash, response,
/// timestamp}. Lines that fail to parse (e.g. a torn final write) are
/// skipped with a warning and recomputed on demand.
class CachedBackend final : public Backend {
 public:
  CachedBackend(BackendPtr inner, const std::filesystem::path& cache_path);

  std::string tag() const override { return inner_->tag(); }
  Capabilities capabilities() const override { return inner_->capabilities(); }
  BackendResponse score_options(const BackendRequest& request) override;
  BackendResponse generate_greedy(const BackendRequest& request) override;
  nlohmann::json describe() const override { return inner_->describe(); }

  std::size_t hits() const { return hits_.load(); }
  std::size_t misses() const { return misses_.load(); }
  std::size_t skipped_lines() const { return skipped_; }
  std::size_t size() const;

 private:
  BackendResponse through(const BackendRequest& request);

  BackendPtr inner_;
  std::filesystem::path path_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, BackendResponse> entries_;
  std::ofstream out_;
  std::size_t skipped_ = 0;
  std::atomic<std::size_t> hits_{0};
  std::atomic<std::size_t> misses_{0};
};

/// Reads a cache-format JSONL file into hash -> response.
std::unordered_map<std::string, BackendResponse> read_response_log(const std::filesystem::path& path,
                                                                   std::size_t* skipped = nullptr);

/// Builds a backend from a config object ({"tag", "kind": synthetic|scripted|http, ...}).
BackendPtr make_backend(const nlohmann::json& spec, const std::filesystem::path& base_dir = {});

/// Wraps with_cache semantics.
BackendPtr with_cache(BackendPtr backend, const std::filesystem::path& cache_path);

}  // namespace fsens
