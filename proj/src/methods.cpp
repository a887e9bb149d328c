#include "fsens/methods.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <thread>

#include "fsens/error.hpp"
#include "fsens/rng.hpp"

namespace fsens {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool is_quote(char c) { return c == '"' || c == '\'' || c == '`'; }

std::string bare_item(std::string_view label) {
  std::string out;
  for (char c : label) {
    if (std::isalnum(static_cast<unsigned char>(c))) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. fn must not throw.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> workers;
  workers.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
}

void check_finite(std::span<const double> v, std::string_view what) {
  if (v.empty()) throw Error(ErrorKind::numeric, std::string(what) + ": empty score vector");
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorKind::numeric, std::string(what) + ": non-finite score");
  }
}

}  // namespace

std::string_view to_string(Method m) {
  switch (m) {
    case Method::few_shot_ranking: return "few_shot_ranking";
    case Method::few_shot_greedy: return "few_shot_greedy";
    case Method::batch_calibration: return "batch_calibration";
    case Method::template_ensemble_avg: return "template_ensemble_avg";
    case Method::template_ensemble_vote: return "template_ensemble_vote";
    case Method::sensitivity_aware: return "sensitivity_aware";
  }
  return "few_shot_ranking";
}

Method parse_method(std::string_view name) {
  for (auto m : {Method::few_shot_ranking, Method::few_shot_greedy, Method::batch_calibration,
                 Method::template_ensemble_avg, Method::template_ensemble_vote, Method::sensitivity_aware}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::config, "unknown method '" + std::string(name) + "'");
}

bool requires_ranking(Method m, RequestMode mode) {
  switch (m) {
    case Method::few_shot_greedy: return false;
    case Method::template_ensemble_vote: return mode == RequestMode::ranking;
    default: return true;
  }
}

void PerturbationConfig::validate() const {
  if (!(substitution_rate > 0.0 && substitution_rate < 1.0)) {
    throw Error(ErrorKind::config, "perturbation: substitution_rate must be in (0, 1)");
  }
  if (n_perturbations < 1) throw Error(ErrorKind::config, "perturbation: n_perturbations must be >= 1");
  if (token_pool.empty()) throw Error(ErrorKind::config, "perturbation: token pool is empty");
}

std::vector<std::string> load_token_pool(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open token pool " + path.string());
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    const auto w = trim(line);
    if (!w.empty()) words.emplace_back(w);
  }
  return words;
}

MethodPrediction predict_ranking(std::span<const double> option_logprobs) {
  check_finite(option_logprobs, "predict_ranking");
  MethodPrediction p;
  p.method = Method::few_shot_ranking;
  p.chosen_index = argmax(option_logprobs);
  p.per_option_scores = std::vector<double>(option_logprobs.begin(), option_logprobs.end());
  return p;
}

std::string normalize_answer(std::string_view text) {
  std::string s(trim(text));
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  // Peel trailing punctuation and wrapping quotes until nothing changes, so
  // both "'yes'." and "\"yes.\"" reduce to yes.
  for (bool changed = true; changed;) {
    changed = false;
    std::string_view v = trim(s);
    while (!v.empty() && (v.back() == '.' || v.back() == ',' || v.back() == ';' || v.back() == ':')) {
      v.remove_suffix(1);
      changed = true;
    }
    v = trim(v);
    if (v.size() >= 2 && is_quote(v.front()) && v.front() == v.back()) {
      v = trim(v.substr(1, v.size() - 2));
      changed = true;
    }
    s = std::string(v);
  }
  return s;
}

MethodPrediction predict_greedy(std::string_view generated_text, std::span<const std::string> options,
                                std::span<const std::string> option_labels) {
  if (options.empty()) throw Error(ErrorKind::validation, "predict_greedy: no options");
  MethodPrediction p;
  p.method = Method::few_shot_greedy;
  const auto norm = normalize_answer(generated_text);
  p.diagnostics["normalized"] = norm;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (normalize_answer(options[i]) == norm) {
      p.chosen_index = i;
      return p;
    }
  }
  for (std::size_t i = 0; i < option_labels.size() && i < options.size(); ++i) {
    if (!norm.empty() && (normalize_answer(option_labels[i]) == norm || bare_item(option_labels[i]) == norm)) {
      p.chosen_index = i;
      p.diagnostics["matched"] = "label";
      return p;
    }
  }
  p.diagnostics["abstain"] = true;
  return p;
}

std::vector<MethodPrediction> batch_calibrate(const Matrix& batch_logprobs, std::size_t chunk) {
  const std::size_t rows = batch_logprobs.rows();
  const std::size_t cols = batch_logprobs.cols();
  if (rows == 0 || cols == 0) throw Error(ErrorKind::shape, "batch_calibrate: empty batch");
  check_finite(batch_logprobs.data(), "batch_calibrate");

  std::vector<MethodPrediction> out(rows);
  auto emit = [&](std::size_t lo, std::size_t hi, const std::vector<double>& means) {
    Matrix part(hi - lo, cols);
    for (std::size_t r = lo; r < hi; ++r) std::copy_n(batch_logprobs.row(r).begin(), cols, part.row(r - lo).begin());
    const auto chosen = kernels::offset_argmax(part, means);
    for (std::size_t r = lo; r < hi; ++r) {
      auto& p = out[r];
      p.method = Method::batch_calibration;
      p.chosen_index = chosen[r - lo];
      std::vector<double> adjusted(cols);
      for (std::size_t c = 0; c < cols; ++c) adjusted[c] = batch_logprobs(r, c) - means[c];
      p.per_option_scores = std::move(adjusted);
      p.diagnostics["bias"] = means;
    }
  };

  if (chunk == 0 || chunk >= rows) {
    emit(0, rows, kernels::column_means(batch_logprobs));
    return out;
  }
  std::vector<double> sums(cols, 0.0);
  for (std::size_t lo = 0; lo < rows; lo += chunk) {
    const std::size_t hi = std::min(rows, lo + chunk);
    for (std::size_t r = lo; r < hi; ++r) {
      for (std::size_t c = 0; c < cols; ++c) sums[c] += batch_logprobs(r, c);
    }
    std::vector<double> means(cols);
    for (std::size_t c = 0; c < cols; ++c) means[c] = sums[c] / static_cast<double>(hi);
    emit(lo, hi, means);
  }
  return out;
}

Matrix softmax_over_options(const Matrix& option_logprobs) {
  check_finite(option_logprobs.data(), "softmax_over_options");
  return kernels::softmax_rows(option_logprobs);
}

MethodPrediction template_ensemble_avg(const Matrix& probs) {
  if (probs.rows() == 0 || probs.cols() == 0) throw Error(ErrorKind::shape, "template_ensemble_avg: empty ensemble");
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    double total = 0.0;
    for (double v : probs.row(r)) total += v;
    if (std::abs(total - 1.0) > 1e-6) {
      throw Error(ErrorKind::numeric, "template_ensemble_avg: member " + std::to_string(r) +
                                          " probabilities sum to " + std::to_string(total));
    }
  }
  MethodPrediction p;
  p.method = Method::template_ensemble_avg;
  const auto mean = kernels::serial::column_means(probs);
  p.chosen_index = argmax(mean);
  p.per_option_scores = mean;
  p.diagnostics["mean_probs"] = mean;
  p.diagnostics["members"] = probs.rows();
  return p;
}

MethodPrediction template_ensemble_vote(std::span<const std::optional<std::size_t>> votes) {
  if (votes.empty()) throw Error(ErrorKind::shape, "template_ensemble_vote: empty ensemble");
  std::size_t classes = 0;
  for (const auto& v : votes) {
    if (v) classes = std::max(classes, *v + 1);
  }
  MethodPrediction p;
  p.method = Method::template_ensemble_vote;
  std::vector<double> counts(classes, 0.0);
  std::size_t abstained = 0;
  for (const auto& v : votes) {
    if (v) {
      counts[*v] += 1.0;
    } else {
      ++abstained;
    }
  }
  p.diagnostics["votes"] = counts;
  p.diagnostics["abstained"] = abstained;
  if (classes > 0) p.chosen_index = argmax(counts);
  return p;
}

MethodPrediction template_ensemble_vote(std::span<const std::size_t> votes) {
  std::vector<std::optional<std::size_t>> v(votes.begin(), votes.end());
  return template_ensemble_vote(std::span<const std::optional<std::size_t>>(v));
}

Perturbation perturb_tokens_detailed(std::string_view text, const PerturbationConfig& config, std::uint64_t draw) {
  config.validate();
  struct Span {
    std::size_t begin, end;
  };
  std::vector<Span> tokens;
  for (std::size_t i = 0; i < text.size();) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i >= text.size()) break;
    const std::size_t b = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    tokens.push_back({b, i});
  }
  if (tokens.empty()) throw Error(ErrorKind::validation, "perturb_tokens: text has no tokens");

  const auto n = tokens.size();
  auto count = static_cast<std::size_t>(std::lround(config.substitution_rate * static_cast<double>(n)));
  count = std::clamp<std::size_t>(count, 1, n);

  Rng rng(derive_seed(config.seed, "perturb:" + std::to_string(draw)));
  Perturbation out;
  for (auto pos : sample_without_replacement(n, count, rng)) out.replaced_positions.push_back(static_cast<std::size_t>(pos));
  std::sort(out.replaced_positions.begin(), out.replaced_positions.end());

  std::size_t cursor = 0;
  std::size_t next = 0;
  for (std::size_t t = 0; t < n; ++t) {
    out.text.append(text.substr(cursor, tokens[t].begin - cursor));
    if (next < out.replaced_positions.size() && out.replaced_positions[next] == t) {
      out.text += config.token_pool[rng.below(config.token_pool.size())];
      ++next;
    } else {
      out.text.append(text.substr(tokens[t].begin, tokens[t].end - tokens[t].begin));
    }
    cursor = tokens[t].end;
  }
  out.text.append(text.substr(cursor));
  return out;
}

std::string perturb_tokens(std::string_view text, const PerturbationConfig& config, std::uint64_t draw) {
  return perturb_tokens_detailed(text, config, draw).text;
}

MethodPrediction sad_combine(std::span<const double> clean_probs, std::span<const double> sensitivity, double alpha) {
  if (clean_probs.size() != sensitivity.size() || clean_probs.empty()) {
    throw Error(ErrorKind::shape, "sad_combine: probability and sensitivity vectors differ in length");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::config, "sad_combine: alpha must be in [0, 1]");
  std::vector<double> score(clean_probs.size());
  for (std::size_t i = 0; i < score.size(); ++i) score[i] = alpha * clean_probs[i] - (1.0 - alpha) * sensitivity[i];
  MethodPrediction p;
  p.method = Method::sensitivity_aware;
  p.chosen_index = argmax(score);
  p.per_option_scores = score;
  p.diagnostics["sensitivity"] = std::vector<double>(sensitivity.begin(), sensitivity.end());
  p.diagnostics["clean_probs"] = std::vector<double>(clean_probs.begin(), clean_probs.end());
  p.diagnostics["alpha"] = alpha;
  return p;
}

std::vector<double> option_sensitivity(const Matrix& perturbed_probs) {
  if (perturbed_probs.rows() == 0) throw Error(ErrorKind::config, "option_sensitivity: no perturbations");
  const auto mean = kernels::serial::column_means(perturbed_probs);
  std::vector<double> var(perturbed_probs.cols(), 0.0);
  for (std::size_t r = 0; r < perturbed_probs.rows(); ++r) {
    for (std::size_t c = 0; c < perturbed_probs.cols(); ++c) {
      const double d = perturbed_probs(r, c) - mean[c];
      var[c] += d * d;
    }
  }
  for (auto& v : var) v /= static_cast<double>(perturbed_probs.rows());
  return var;
}

MethodPrediction sad_predict(const std::function<BackendRequest(const std::string& input)>& render_with_input,
                             const std::string& clean_input, Backend& backend, double alpha,
                             const PerturbationConfig& config) {
  config.validate();
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::config, "sensitivity-aware decoding: alpha must be in [0, 1]");
  if (!backend.capabilities().ranking) {
    throw Error(ErrorKind::capability, "sensitivity-aware decoding needs option log-probabilities from " + backend.tag());
  }
  const auto clean = backend.score_options(render_with_input(clean_input));
  const Matrix clean_probs =
      softmax_over_options(Matrix::from_rows({clean.option_logprobs}));

  Matrix perturbed(config.n_perturbations, clean.option_logprobs.size());
  for (std::size_t d = 0; d < config.n_perturbations; ++d) {
    const auto resp = backend.score_options(render_with_input(perturb_tokens(clean_input, config, d)));
    if (resp.option_logprobs.size() != perturbed.cols()) {
      throw Error(ErrorKind::shape, "sensitivity-aware decoding: perturbed response has a different option count");
    }
    const auto probs = softmax_over_options(Matrix::from_rows({resp.option_logprobs}));
    std::copy_n(probs.row(0).begin(), perturbed.cols(), perturbed.row(d).begin());
  }
  auto p = sad_combine(clean_probs.row(0), option_sensitivity(perturbed), alpha);
  p.diagnostics["sensitivity_kind"] = "per-option population variance of option probability";
  p.diagnostics["perturbations"] = config.n_perturbations;
  return p;
}

nlohmann::json MethodConfig::to_json() const {
  nlohmann::json j = {{"name", std::string(to_string(method))}};
  switch (method) {
    case Method::template_ensemble_avg:
    case Method::template_ensemble_vote:
      j["ensemble_size"] = ensemble_size;
      break;
    case Method::sensitivity_aware:
      j["alpha"] = alpha;
      j["perturbation"] = {{"substitution_rate", perturbation.substitution_rate},
                           {"n_perturbations", perturbation.n_perturbations},
                           {"seed", perturbation.seed},
                           {"token_pool_size", perturbation.token_pool.size()}};
      break;
    case Method::batch_calibration:
      j["batch_size"] = batch_size;
      break;
    default:
      break;
  }
  if (method == Method::few_shot_greedy || method == Method::template_ensemble_vote) j["max_new_tokens"] = max_new_tokens;
  j["length_normalize"] = length_normalize;
  return j;
}

std::vector<FormatSpec> ensemble_formats(const FormatComponentCatalog& catalog, const Task& task, const FormatSpec& f,
                                         std::size_t size, std::uint64_t seed) {
  if (size == 0) throw Error(ErrorKind::config, "ensemble size must be >= 1");
  const bool with_options = task.has_options();
  const auto universe = format_universe_size(catalog, with_options);
  if (size > universe) {
    throw Error(ErrorKind::capacity, "ensemble of " + std::to_string(size) + " exceeds the " + std::to_string(universe) +
                                         "-format universe");
  }
  std::vector<FormatSpec> members{f};
  std::set<FormatSpec> seen{f};
  Rng rng(derive_seed(seed, task.id + "|" + format_fingerprint(catalog, f)));
  while (members.size() < size) {
    auto candidate = format_at(catalog, with_options, rng.below(universe));
    if (seen.insert(candidate).second) members.push_back(std::move(candidate));
  }
  return members;
}

BackendRequest make_request(const MethodContext& ctx, const Instance& instance, const FormatSpec& spec,
                            std::string_view input, RequestMode mode, const MethodConfig& config,
                            const std::string& backend_tag) {
  Instance shown = instance;
  shown.input = std::string(input);
  BackendRequest req;
  req.prompt = render(*ctx.task, shown, ctx.demonstrations, *ctx.catalog, spec, ctx.render_mode);
  if (mode == RequestMode::ranking) {
    req.candidates = req.prompt.answer_surface_forms;
  } else {
    req.max_new_tokens = config.max_new_tokens;
  }
  req.backend_tag = backend_tag;
  req.length_normalize = config.length_normalize;
  req.context.gold_label = instance.gold;
  req.context.format_fingerprint = format_fingerprint(*ctx.catalog, spec);
  req.context.instance_uid = instance.uid;
  return req;
}

GroupOutcome predict_group(const MethodConfig& config, const MethodContext& ctx, std::span<const Instance> instances,
                           const FormatSpec& format, Backend& backend) {
  if (ctx.task == nullptr || ctx.catalog == nullptr) throw Error(ErrorKind::config, "method context is incomplete");
  const Method method = config.method;
  if (requires_ranking(method, ctx.mode) && !backend.capabilities().ranking) {
    throw Error(ErrorKind::capability, std::string(to_string(method)) + " needs option log-probabilities, which backend " +
                                           backend.tag() + " does not expose");
  }
  if (ctx.mode == RequestMode::greedy && method != Method::few_shot_greedy && method != Method::template_ensemble_vote) {
    throw Error(ErrorKind::capability, std::string(to_string(method)) + " is not available in greedy mode");
  }

  const std::size_t n = instances.size();
  GroupOutcome out;
  out.predictions.resize(n);
  out.errors.resize(n);
  const auto tag = backend.tag();

  std::vector<FormatSpec> members;
  if (method == Method::template_ensemble_avg || method == Method::template_ensemble_vote) {
    members = ensemble_formats(*ctx.catalog, *ctx.task, format, config.ensemble_size, ctx.seed);
  }

  if (method == Method::batch_calibration) {
    std::vector<std::vector<double>> rows(n);
    parallel_for(n, ctx.concurrency, [&](std::size_t i) {
      try {
        const auto req = make_request(ctx, instances[i], format, instances[i].input, RequestMode::ranking, config, tag);
        rows[i] = backend.score_options(req).option_logprobs;
      } catch (const std::exception& e) {
        out.errors[i] = e.what();
      }
    });
    const auto failed = std::find_if(out.errors.begin(), out.errors.end(), [](const auto& e) { return !e.empty(); });
    if (failed != out.errors.end()) {
      for (auto& e : out.errors) {
        if (e.empty()) e = "batch incomplete: another instance in the calibration batch failed";
      }
      return out;
    }
    auto preds = batch_calibrate(Matrix::from_rows(rows), config.batch_size);
    for (std::size_t i = 0; i < n; ++i) out.predictions[i] = std::move(preds[i]);
    return out;
  }

  parallel_for(n, ctx.concurrency, [&](std::size_t i) {
    const Instance& inst = instances[i];
    try {
      switch (method) {
        case Method::few_shot_ranking: {
          const auto req = make_request(ctx, inst, format, inst.input, RequestMode::ranking, config, tag);
          out.predictions[i] = predict_ranking(backend.score_options(req).option_logprobs);
          break;
        }
        case Method::few_shot_greedy: {
          const auto req = make_request(ctx, inst, format, inst.input, RequestMode::greedy, config, tag);
          const auto resp = backend.generate_greedy(req);
          auto p = predict_greedy(resp.generated_text.value_or(""), req.prompt.answer_surface_forms,
                                  req.prompt.option_labels);
          p.diagnostics["generated"] = resp.generated_text.value_or("");
          out.predictions[i] = std::move(p);
          break;
        }
        case Method::template_ensemble_avg: {
          Matrix logprobs;
          std::vector<std::vector<double>> rows;
          for (const auto& m : members) {
            const auto req = make_request(ctx, inst, m, inst.input, RequestMode::ranking, config, tag);
            rows.push_back(backend.score_options(req).option_logprobs);
          }
          auto p = template_ensemble_avg(softmax_over_options(Matrix::from_rows(rows)));
          out.predictions[i] = std::move(p);
          break;
        }
        case Method::template_ensemble_vote: {
          std::vector<std::optional<std::size_t>> votes;
          for (const auto& m : members) {
            const auto req = make_request(ctx, inst, m, inst.input, ctx.mode, config, tag);
            if (ctx.mode == RequestMode::ranking) {
              votes.push_back(predict_ranking(backend.score_options(req).option_logprobs).chosen_index);
            } else {
              const auto resp = backend.generate_greedy(req);
              votes.push_back(predict_greedy(resp.generated_text.value_or(""), req.prompt.answer_surface_forms,
                                             req.prompt.option_labels)
                                  .chosen_index);
            }
          }
          auto p = template_ensemble_vote(std::span<const std::optional<std::size_t>>(votes));
          out.predictions[i] = std::move(p);
          break;
        }
        case Method::sensitivity_aware: {
          PerturbationConfig pc = config.perturbation;
          pc.seed = derive_seed(pc.seed, inst.uid);
          auto render_with = [&](const std::string& input) {
            return make_request(ctx, inst, format, input, RequestMode::ranking, config, tag);
          };
          out.predictions[i] = sad_predict(render_with, inst.input, backend, config.alpha, pc);
          break;
        }
        case Method::batch_calibration:
          break;
      }
    } catch (const std::exception& e) {
      out.errors[i] = e.what();
    }
  });
  return out;
}

EvalRecord make_record(const MethodConfig& config, const MethodContext& ctx, const Instance& instance,
                       const FormatSpec& format, const MethodPrediction& prediction, const std::string& model) {
  EvalRecord r;
  r.model = model;
  r.scenario = ctx.scenario;
  r.task = ctx.task->id;
  r.format_id = format.id();
  r.format_fingerprint = format_fingerprint(*ctx.catalog, format);
  r.component_count = format.non_default_count();
  r.method = std::string(to_string(config.method));
  r.mode = config.method == Method::few_shot_greedy ? "greedy"
           : config.method == Method::template_ensemble_vote ? std::string(to_string(ctx.mode))
                                                             : "ranking";
  r.uid = instance.uid;
  r.chosen = prediction.chosen_index;
  const auto gold = ctx.task->class_index(instance.gold);
  if (!gold) throw Error(ErrorKind::validation, "instance " + instance.uid + " gold label is not a task class");
  r.gold = *gold;
  r.num_classes = ctx.task->label_space().size();
  r.correct = prediction.chosen_index && *prediction.chosen_index == r.gold;
  r.diagnostics = prediction.diagnostics;
  return r;
}

std::vector<EvalRecord> run_method(const MethodConfig& config, const MethodContext& ctx,
                                   std::span<const Instance> instances, std::span<const FormatSpec> formats,
                                   Backend& backend) {
  if (formats.empty()) throw Error(ErrorKind::config, "run_method: no formats");
  std::vector<EvalRecord> records;
  records.reserve(instances.size() * formats.size());
  for (const auto& f : formats) {
    auto outcome = predict_group(config, ctx, instances, f, backend);
    for (std::size_t i = 0; i < instances.size(); ++i) {
      if (!outcome.predictions[i]) {
        throw Error(ErrorKind::transport, "run_method: " + instances[i].uid + ": " + outcome.errors[i]);
      }
      records.push_back(make_record(config, ctx, instances[i], f, *outcome.predictions[i], backend.tag()));
    }
  }
  return records;
}

}  // namespace fsens
