#include "fsens/backend.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <thread>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>
#include <spdlog/spdlog.h>

#include "fsens/error.hpp"
#include "fsens/hash.hpp"
#include "fsens/kernels.hpp"
#include "fsens/rng.hpp"

namespace fsens {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::int64_t whitespace_tokens(std::string_view s) {
  std::int64_t n = 0;
  bool in_token = false;
  for (unsigned char c : s) {
    const bool space = std::isspace(c) != 0;
    if (!space && !in_token) ++n;
    in_token = !space;
  }
  return n;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out;
  out.reserve(logits.size());
  for (double l : logits) out.push_back(l - lz);
  return out;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void require_capability(const Backend& b, RequestMode mode) {
  const auto caps = b.capabilities();
  if (mode == RequestMode::ranking && !caps.ranking) {
    throw Error(ErrorKind::capability, "backend " + b.tag() + " cannot score options (no log-probability access)");
  }
  if (mode == RequestMode::greedy && !caps.greedy) {
    throw Error(ErrorKind::capability, "backend " + b.tag() + " cannot generate text");
  }
}

}  // namespace

std::string_view to_string(RequestMode m) { return m == RequestMode::greedy ? "greedy" : "ranking"; }

void BackendRequest::validate() const {
  const bool has_candidates = !candidates.empty();
  if (has_candidates == max_new_tokens.has_value()) {
    throw Error(ErrorKind::validation, "backend request needs exactly one of candidates / max_new_tokens");
  }
  if (max_new_tokens && *max_new_tokens < 1) throw Error(ErrorKind::validation, "max_new_tokens must be >= 1");
}

std::string request_hash(const BackendRequest& r, const std::optional<std::string>& tag_override) {
  const nlohmann::json canonical = {
      {"tag", tag_override ? *tag_override : r.backend_tag},
      {"mode", std::string(to_string(r.mode()))},
      {"render", std::string(to_string(r.prompt.mode))},
      {"text", r.prompt.text},
      {"system", r.prompt.system_text},
      {"user", r.prompt.user_text},
      {"candidates", r.candidates},
      {"max_new_tokens", r.max_new_tokens ? nlohmann::json(*r.max_new_tokens) : nlohmann::json(nullptr)},
      {"length_normalize", r.length_normalize},
      {"gold", r.context.gold_label},
      {"format", r.context.format_fingerprint},
  };
  return sha256_hex(canonical.dump());
}

nlohmann::json response_to_json(const BackendResponse& r) {
  return {
      {"option_logprobs", r.option_logprobs},
      {"generated_text", r.generated_text ? nlohmann::json(*r.generated_text) : nlohmann::json(nullptr)},
      {"usage", {{"prompt_tokens", r.usage.prompt_tokens}, {"completion_tokens", r.usage.completion_tokens}}},
      {"latency_ms", r.latency_ms},
  };
}

BackendResponse response_from_json(const nlohmann::json& j) {
  BackendResponse r;
  r.option_logprobs = j.at("option_logprobs").get<std::vector<double>>();
  if (j.contains("generated_text") && !j.at("generated_text").is_null()) {
    r.generated_text = j.at("generated_text").get<std::string>();
  }
  if (j.contains("usage")) {
    r.usage.prompt_tokens = j.at("usage").value("prompt_tokens", std::int64_t{0});
    r.usage.completion_tokens = j.at("usage").value("completion_tokens", std::int64_t{0});
  }
  r.latency_ms = j.value("latency_ms", 0.0);
  return r;
}

BackendResponse Backend::call(const BackendRequest& request) {
  return request.mode() == RequestMode::greedy ? generate_greedy(request) : score_options(request);
}

// ---------------------------------------------------------------------------

SyntheticBiasBackend::SyntheticBiasBackend(SyntheticBiasConfig config) : config_(std::move(config)) {
  if (config_.noise < 0.0) throw Error(ErrorKind::config, "synthetic backend: noise scale must be >= 0");
}

std::vector<double> SyntheticBiasBackend::logits(const BackendRequest& request) const {
  double scale = 1.0;
  if (auto it = config_.format_bias_scale.find(request.context.format_fingerprint);
      it != config_.format_bias_scale.end()) {
    scale = it->second;
  }
  const std::string prompt_key = request.prompt.text + '\x1f' + request.prompt.system_text + '\x1f' +
                                 request.prompt.user_text + '\x1f';
  const auto prompt_seed = derive_seed(config_.seed, prompt_key);

  std::vector<double> out;
  out.reserve(request.candidates.size());
  for (std::size_t j = 0; j < request.candidates.size(); ++j) {
    const auto& cand = request.candidates[j];
    std::size_t cls = j;
    if (!config_.class_names.empty()) {
      const auto it = std::find(config_.class_names.begin(), config_.class_names.end(), cand);
      cls = it == config_.class_names.end() ? config_.class_names.size() : static_cast<std::size_t>(it - config_.class_names.begin());
    }
    double logit = cls < config_.bias.size() ? config_.bias[cls] * scale : 0.0;
    if (cand == request.context.gold_label) logit += config_.signal;
    if (config_.noise > 0.0) {
      Rng rng(derive_seed(prompt_seed, cand));
      logit += config_.noise * rng.normal();
    }
    out.push_back(logit);
  }
  return out;
}

BackendResponse SyntheticBiasBackend::score_options(const BackendRequest& request) {
  const auto start = Clock::now();
  if (request.candidates.empty()) throw Error(ErrorKind::validation, "score_options: no candidates");
  BackendResponse r;
  r.option_logprobs = log_softmax(logits(request));
  r.usage.prompt_tokens = whitespace_tokens(request.prompt.body()) + whitespace_tokens(request.prompt.system_text);
  r.latency_ms = elapsed_ms(start);
  return r;
}

BackendResponse SyntheticBiasBackend::generate_greedy(const BackendRequest& request) {
  const auto start = Clock::now();
  BackendResponse r;
  if (config_.greedy_emits_gold) {
    r.generated_text = request.context.gold_label;
  } else {
    BackendRequest ranking = request;
    ranking.candidates = request.prompt.answer_surface_forms;
    ranking.max_new_tokens.reset();
    if (ranking.candidates.empty()) throw Error(ErrorKind::validation, "synthetic greedy: prompt has no answer forms");
    const auto l = logits(ranking);
    r.generated_text = ranking.candidates[argmax(l)];
  }
  r.usage.prompt_tokens = whitespace_tokens(request.prompt.body()) + whitespace_tokens(request.prompt.system_text);
  r.usage.completion_tokens = whitespace_tokens(*r.generated_text);
  r.latency_ms = elapsed_ms(start);
  return r;
}

nlohmann::json SyntheticBiasBackend::describe() const {
  return {{"tag", config_.tag},         {"kind", "synthetic"}, {"bias", config_.bias},
          {"signal", config_.signal},   {"noise", config_.noise}, {"seed", config_.seed},
          {"class_names", config_.class_names}, {"greedy_emits_gold", config_.greedy_emits_gold}};
}

// ---------------------------------------------------------------------------

std::unordered_map<std::string, BackendResponse> read_response_log(const std::filesystem::path& path,
                                                                   std::size_t* skipped) {
  std::unordered_map<std::string, BackendResponse> out;
  std::size_t bad = 0;
  std::ifstream in(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.emplace(j.at("request_hash").get<std::string>(), response_from_json(j.at("response")));
    } catch (const std::exception& e) {
      ++bad;
      spdlog::warn("{}:{}: skipping unreadable cache entry ({})", path.string(), lineno, e.what());
    }
  }
  if (skipped) *skipped = bad;
  return out;
}

ScriptedBackend::ScriptedBackend(std::string tag, const std::filesystem::path& fixture,
                                 std::optional<std::string> source_tag, Capabilities caps)
    : tag_(std::move(tag)), source_tag_(std::move(source_tag)), caps_(caps) {
  if (!std::filesystem::exists(fixture)) throw Error(ErrorKind::io, "scripted backend: fixture " + fixture.string() + " not found");
  responses_ = read_response_log(fixture);
}

BackendResponse ScriptedBackend::lookup(const BackendRequest& request) const {
  require_capability(*this, request.mode());
  const auto h = request_hash(request, source_tag_ ? source_tag_ : std::optional<std::string>(tag_));
  const auto it = responses_.find(h);
  if (it == responses_.end()) {
    throw Error(ErrorKind::transport, "scripted backend " + tag_ + ": no recorded response for request " + h.substr(0, 16));
  }
  return it->second;
}

BackendResponse ScriptedBackend::score_options(const BackendRequest& request) { return lookup(request); }
BackendResponse ScriptedBackend::generate_greedy(const BackendRequest& request) { return lookup(request); }

nlohmann::json ScriptedBackend::describe() const {
  return {{"tag", tag_}, {"kind", "scripted"}, {"responses", responses_.size()},
          {"source_tag", source_tag_ ? nlohmann::json(*source_tag_) : nlohmann::json(nullptr)}};
}

// ---------------------------------------------------------------------------

HttpBackend::HttpBackend(HttpBackendConfig config) : config_(std::move(config)) {
  const auto& url = config_.base_url;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorKind::config, "http backend: base_url needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
  if (config_.max_attempts < 1) config_.max_attempts = 1;
}

nlohmann::json HttpBackend::post(const std::string& path, const nlohmann::json& body) const {
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(config_.timeout);
  client.set_read_timeout(config_.timeout);
  client.set_write_timeout(config_.timeout);
  httplib::Headers headers;
  if (!config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr) throw Error(ErrorKind::config, "http backend: environment variable " + config_.api_key_env + " is not set");
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  std::string last_error;
  auto backoff = config_.initial_backoff;
  for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
    auto res = client.Post(path_prefix_ + path, headers, body.dump(), "application/json");
    if (res && res->status == 200) {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorKind::transport, "http backend " + config_.tag + ": response is not JSON: " + e.what());
      }
    }
    const bool retryable = !res || res->status == 429 || res->status >= 500;
    last_error = res ? "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200)
                     : "connection error: " + httplib::to_string(res.error());
    if (!retryable) break;
    if (attempt < config_.max_attempts) {
      spdlog::warn("http backend {}: attempt {} failed ({}); retrying", config_.tag, attempt, last_error);
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw Error(ErrorKind::transport, "http backend " + config_.tag + " " + path + ": " + last_error);
}

BackendResponse HttpBackend::score_options(const BackendRequest& request) {
  require_capability(*this, RequestMode::ranking);
  if (request.candidates.empty()) throw Error(ErrorKind::validation, "score_options: no candidates");
  const auto start = Clock::now();
  const std::string prompt = request.prompt.mode == RenderMode::completion
                                 ? request.prompt.text
                                 : request.prompt.system_text + "\n\n" + request.prompt.user_text;
  BackendResponse r;
  for (const auto& cand : request.candidates) {
    const nlohmann::json body = {{"model", config_.model}, {"prompt", prompt + cand}, {"max_tokens", 0},
                                 {"echo", true},           {"logprobs", 1},          {"temperature", 0}};
    const auto reply = post("/completions", body);
    try {
      const auto& lp = reply.at("choices").at(0).at("logprobs");
      const auto& tokens = lp.at("tokens");
      const auto& token_lp = lp.at("token_logprobs");
      const auto& offsets = lp.at("text_offset");
      double total = 0.0;
      std::size_t counted = 0;
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto offset = offsets.at(i).get<std::size_t>();
        const auto len = tokens.at(i).get<std::string>().size();
        if (offset + len <= prompt.size() || token_lp.at(i).is_null()) continue;
        total += token_lp.at(i).get<double>();
        ++counted;
      }
      if (counted == 0) throw Error(ErrorKind::transport, "http backend " + config_.tag + ": no candidate tokens echoed");
      if (request.length_normalize) total /= static_cast<double>(counted);
      if (!std::isfinite(total)) throw Error(ErrorKind::numeric, "http backend " + config_.tag + ": non-finite logprob");
      r.option_logprobs.push_back(total);
      if (reply.contains("usage")) r.usage.prompt_tokens += reply["usage"].value("prompt_tokens", std::int64_t{0});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::transport, "http backend " + config_.tag + ": unexpected completions payload: " + e.what());
    }
  }
  r.latency_ms = elapsed_ms(start);
  return r;
}

BackendResponse HttpBackend::generate_greedy(const BackendRequest& request) {
  if (!request.max_new_tokens) throw Error(ErrorKind::validation, "generate_greedy: max_new_tokens missing");
  const auto start = Clock::now();
  BackendResponse r;
  nlohmann::json reply;
  try {
    if (request.prompt.mode == RenderMode::chat) {
      const nlohmann::json body = {
          {"model", config_.model},
          {"messages",
           {{{"role", "system"}, {"content", request.prompt.system_text}},
            {{"role", "user"}, {"content", request.prompt.user_text}}}},
          {"temperature", 0},
          {"max_tokens", *request.max_new_tokens}};
      reply = post("/chat/completions", body);
      r.generated_text = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } else {
      const nlohmann::json body = {{"model", config_.model},
                                   {"prompt", request.prompt.text},
                                   {"temperature", 0},
                                   {"max_tokens", *request.max_new_tokens}};
      reply = post("/completions", body);
      r.generated_text = reply.at("choices").at(0).at("text").get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::transport, "http backend " + config_.tag + ": unexpected payload: " + e.what());
  }
  if (reply.contains("usage")) {
    r.usage.prompt_tokens = reply["usage"].value("prompt_tokens", std::int64_t{0});
    r.usage.completion_tokens = reply["usage"].value("completion_tokens", std::int64_t{0});
  }
  r.latency_ms = elapsed_ms(start);
  return r;
}

nlohmann::json HttpBackend::describe() const {
  return {{"tag", config_.tag},
          {"kind", "http"},
          {"base_url", config_.base_url},
          {"model", config_.model},
          {"supports_logprobs", config_.supports_logprobs},
          {"option_scoring", "sum of candidate token logprobs unless the request asks for length normalization"}};
}

// ---------------------------------------------------------------------------

CachedBackend::CachedBackend(BackendPtr inner, const std::filesystem::path& cache_path)
    : inner_(std::move(inner)), path_(cache_path) {
  if (!inner_) throw Error(ErrorKind::config, "cache: no backend to wrap");
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  bool needs_newline = false;
  if (std::filesystem::exists(path_)) {
    entries_ = read_response_log(path_, &skipped_);
    std::ifstream tail(path_, std::ios::binary | std::ios::ate);
    if (tail.tellg() > 0) {
      tail.seekg(-1, std::ios::end);
      needs_newline = tail.get() != '\n';
    }
  }
  out_.open(path_, std::ios::app | std::ios::binary);
  if (!out_) throw Error(ErrorKind::io, "cache: cannot open " + path_.string() + " for appending");
  // A torn final line must not swallow the next record.
  if (needs_newline) out_ << '\n' << std::flush;
}

std::size_t CachedBackend::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

BackendResponse CachedBackend::through(const BackendRequest& request) {
  const auto h = request_hash(request);
  {
    std::shared_lock lock(mutex_);
    if (auto it = entries_.find(h); it != entries_.end()) {
      ++hits_;
      return it->second;
    }
  }
  ++misses_;
  BackendResponse r = inner_->call(request);
  std::unique_lock lock(mutex_);
  if (entries_.emplace(h, r).second) {
    const nlohmann::json line = {{"request_hash", h}, {"response", response_to_json(r)}, {"timestamp", utc_timestamp()}};
    out_ << line.dump() << '\n' << std::flush;
  }
  return r;
}

BackendResponse CachedBackend::score_options(const BackendRequest& request) { return through(request); }
BackendResponse CachedBackend::generate_greedy(const BackendRequest& request) { return through(request); }

BackendPtr with_cache(BackendPtr backend, const std::filesystem::path& cache_path) {
  return std::make_shared<CachedBackend>(std::move(backend), cache_path);
}

BackendPtr make_backend(const nlohmann::json& spec, const std::filesystem::path& base_dir) {
  if (!spec.is_object() || !spec.contains("tag") || !spec.contains("kind")) {
    throw Error(ErrorKind::config, "backend spec needs 'tag' and 'kind'");
  }
  const auto tag = spec.at("tag").get<std::string>();
  const auto kind = spec.at("kind").get<std::string>();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  try {
    if (kind == "synthetic") {
      SyntheticBiasConfig c;
      c.tag = tag;
      c.bias = spec.value("bias", std::vector<double>{});
      c.signal = spec.value("signal", 1.0);
      c.noise = spec.value("noise", 0.0);
      if (!spec.contains("seed")) throw Error(ErrorKind::config, "synthetic backend " + tag + " needs an explicit 'seed'");
      c.seed = spec.at("seed").get<std::uint64_t>();
      c.class_names = spec.value("class_names", std::vector<std::string>{});
      c.greedy_emits_gold = spec.value("greedy_emits_gold", false);
      return std::make_shared<SyntheticBiasBackend>(std::move(c));
    }
    if (kind == "scripted") {
      Capabilities caps;
      caps.ranking = spec.value("ranking", true);
      std::optional<std::string> source;
      if (spec.contains("source_tag")) source = spec.at("source_tag").get<std::string>();
      return std::make_shared<ScriptedBackend>(tag, resolve(spec.at("fixture").get<std::string>()), source, caps);
    }
    if (kind == "http") {
      HttpBackendConfig c;
      c.tag = tag;
      c.base_url = spec.at("base_url").get<std::string>();
      c.model = spec.value("model", std::string{});
      c.api_key_env = spec.value("api_key_env", std::string{});
      c.supports_logprobs = spec.value("supports_logprobs", true);
      c.max_attempts = spec.value("max_attempts", 3);
      c.initial_backoff = std::chrono::milliseconds(spec.value("backoff_ms", 500));
      c.timeout = std::chrono::seconds(spec.value("timeout_s", 60));
      return std::make_shared<HttpBackend>(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, "backend " + tag + ": " + e.what());
  }
  throw Error(ErrorKind::config, "backend " + tag + ": unknown kind '" + kind + "' (expected synthetic|scripted|http)");
}

}  // namespace fsens
