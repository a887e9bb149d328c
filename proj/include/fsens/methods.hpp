#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsens/backend.hpp"
#include "fsens/format_grammar.hpp"
#include "fsens/kernels.hpp"
#include "fsens/records.hpp"

namespace fsens {

enum class Method {
  few_shot_ranking,
  few_shot_greedy,
  batch_calibration,
  template_ensemble_avg,
  template_ensemble_vote,
  sensitivity_aware,
};

std::string_view to_string(Method m);
Method parse_method(std::string_view name);

/// Methods that need option log-probabilities from the backend.
bool requires_ranking(Method m, RequestMode mode);

struct MethodPrediction {
  Method method = Method::few_shot_ranking;
  std::optional<std::size_t> chosen_index;  // nullopt = abstain
  std::optional<std::vector<double>> per_option_scores;
  nlohmann::json diagnostics = nlohmann::json::object();
};

struct PerturbationConfig {
  double substitution_rate = 0.15;
  std::size_t n_perturbations = 5;
  std::vector<std::string> token_pool;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Reads one word per line.
std::vector<std::string> load_token_pool(const std::filesystem::path& path);

MethodPrediction predict_ranking(std::span<const double> option_logprobs);

/// Lowercase, trimmed, trailing . , ; : stripped, wrapping quotes stripped.
std::string normalize_answer(std::string_view text);

/// Exact match of the normalized text against option contents, then against
/// option labels (rendered labels like "A)" and their bare item "A").
MethodPrediction predict_greedy(std::string_view generated_text, std::span<const std::string> options,
                                std::span<const std::string> option_labels = {});

/// Subtracts each class's batch-mean log-probability before the argmax.
/// `chunk` > 0 calibrates successive chunks of rows with the running mean
/// over all rows seen through the end of the chunk.
std::vector<MethodPrediction> batch_calibrate(const Matrix& batch_logprobs, std::size_t chunk = 0);

Matrix softmax_over_options(const Matrix& option_logprobs);

/// Argmax of column means of an N x C matrix of option probabilities.
MethodPrediction template_ensemble_avg(const Matrix& per_format_option_probs);

/// Modal member vote; ties to the lowest index. Abstaining members (nullopt)
/// do not vote; if all abstain the ensemble abstains.
MethodPrediction template_ensemble_vote(std::span<const std::optional<std::size_t>> per_format_predictions);
MethodPrediction template_ensemble_vote(std::span<const std::size_t> per_format_predictions);

struct Perturbation {
  std::string text;
  std::vector<std::size_t> replaced_positions;  // whitespace-token indices
};

/// Replaces max(1, round(rate * tokens)) whitespace tokens with pool words,
/// keeping the original whitespace. Deterministic per (config.seed, draw).
Perturbation perturb_tokens_detailed(std::string_view text, const PerturbationConfig& config,
                                     std::uint64_t draw);
std::string perturb_tokens(std::string_view text, const PerturbationConfig& config, std::uint64_t draw);

/// argmax_y alpha * P(y|x) - (1 - alpha) * s_y.
MethodPrediction sad_combine(std::span<const double> clean_probs, std::span<const double> sensitivity,
                             double alpha);

/// Per-option population variance over rows of a perturbation x C matrix.
std::vector<double> option_sensitivity(const Matrix& perturbed_probs);

/// Scores the clean prompt and n_perturbations prompts rendered from
/// perturbed instance inputs, then applies sad_combine.
/// `render_with_input` renders the full prompt with the given instance input.
MethodPrediction sad_predict(const std::function<BackendRequest(const std::string& input)>& render_with_input,
                             const std::string& clean_input, Backend& backend, double alpha,
                             const PerturbationConfig& config);

struct MethodConfig {
  Method method = Method::few_shot_ranking;
  std::size_t ensemble_size = 5;
  double alpha = 0.7;
  PerturbationConfig perturbation;
  std::size_t batch_size = 0;  // 0 = whole evaluation subset
  int max_new_tokens = 16;
  bool length_normalize = false;

  nlohmann::json to_json() const;  // without the token pool
};

/// Everything run_method needs about one task under one scenario.
struct MethodContext {
  const Task* task = nullptr;
  std::span<const Instance> demonstrations;
  const FormatComponentCatalog* catalog = nullptr;
  RenderMode render_mode = RenderMode::completion;
  RequestMode mode = RequestMode::ranking;
  std::string scenario = "none";
  std::uint64_t seed = 0;
  std::size_t concurrency = 1;
};

/// Ensemble members for evaluation format f: f first, then size-1 distinct
/// formats sampled from the rest of the universe with a seed derived from
/// (task id, fingerprint of f).
std::vector<FormatSpec> ensemble_formats(const FormatComponentCatalog& catalog, const Task& task,
                                         const FormatSpec& f, std::size_t size, std::uint64_t seed);

/// Builds the request for one instance under one format.
BackendRequest make_request(const MethodContext& ctx, const Instance& instance, const FormatSpec& spec,
                            std::string_view input, RequestMode mode, const MethodConfig& config,
                            const std::string& backend_tag);

/// One EvalRecord per (instance, format), in format-major, instance order.
/// Throws for capability mismatches; backend errors propagate.
std::vector<EvalRecord> run_method(const MethodConfig& config, const MethodContext& ctx,
                                   std::span<const Instance> instances, std::span<const FormatSpec> formats,
                                   Backend& backend);

/// Predictions for a set of instances under one evaluation format. Entries
/// for instances whose backend calls failed hold the error message.
struct GroupOutcome {
  std::vector<std::optional<MethodPrediction>> predictions;
  std::vector<std::string> errors;
};

GroupOutcome predict_group(const MethodConfig& config, const MethodContext& ctx,
                           std::span<const Instance> instances, const FormatSpec& format, Backend& backend);

EvalRecord make_record(const MethodConfig& config, const MethodContext& ctx, const Instance& instance,
                       const FormatSpec& format, const MethodPrediction& prediction, const std::string& model);

}  // namespace fsens
