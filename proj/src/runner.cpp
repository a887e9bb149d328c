#include "fsens/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include <spdlog/spdlog.h>

#include "fsens/error.hpp"
#include "fsens/hash.hpp"
#include "fsens/metrics.hpp"
#include "fsens/rng.hpp"

#ifndef FSENS_DEFAULT_DATA_DIR
#define FSENS_DEFAULT_DATA_DIR "data"
#endif

namespace fsens {
namespace {

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  return p.is_absolute() || base.empty() ? p : base / p;
}

bool backend_has_ranking(const nlohmann::json& spec) {
  const auto kind = spec.value("kind", std::string{});
  if (kind == "scripted") return spec.value("ranking", true);
  if (kind == "http") return spec.value("supports_logprobs", true);
  return true;
}

std::string fixed(double v, int digits = 6) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  std::string s(buf);
  if (s == "-0.000000") s = "0.000000";
  return s;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string csv_row(std::initializer_list<std::string> fields) {
  std::string line;
  bool first = true;
  for (const auto& f : fields) {
    if (!first) line += ',';
    line += csv_field(f);
    first = false;
  }
  return line + "\n";
}

MethodConfig method_from_json(const nlohmann::json& j) {
  MethodConfig m;
  if (j.is_string()) {
    m.method = parse_method(j.get<std::string>());
    return m;
  }
  if (!j.is_object() || !j.contains("name")) throw Error(ErrorKind::config, "method entries need a 'name'");
  m.method = parse_method(j.at("name").get<std::string>());
  m.ensemble_size = j.value("ensemble_size", m.ensemble_size);
  m.alpha = j.value("alpha", m.alpha);
  m.batch_size = j.value("batch_size", m.batch_size);
  m.max_new_tokens = j.value("max_new_tokens", m.max_new_tokens);
  m.length_normalize = j.value("length_normalize", m.length_normalize);
  if (j.contains("perturbation")) {
    const auto& p = j.at("perturbation");
    m.perturbation.substitution_rate = p.value("substitution_rate", m.perturbation.substitution_rate);
    m.perturbation.n_perturbations = p.value("n_perturbations", m.perturbation.n_perturbations);
  }
  return m;
}

}  // namespace

std::string_view to_string(Scenario s) {
  switch (s) {
    case Scenario::none: return "none";
    case Scenario::imbalance: return "imbalance";
    case Scenario::compositional: return "compositional";
  }
  return "none";
}

Scenario parse_scenario(std::string_view s) {
  if (s == "none") return Scenario::none;
  if (s == "imbalance") return Scenario::imbalance;
  if (s == "compositional") return Scenario::compositional;
  throw Error(ErrorKind::config, "unknown scenario '" + std::string(s) + "' (expected none|imbalance|compositional)");
}

RunConfig RunConfig::from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  static const std::set<std::string> known{"seed",          "backends",     "task_path",   "task_ids",   "n_eval",
                                           "format_count",  "demo_count",   "methods",     "scenario",   "majority_ratio",
                                           "mode",          "render_mode",  "output_dir",  "concurrency", "catalog",
                                           "token_pool",    "cache_dir"};
  if (!doc.is_object()) throw Error(ErrorKind::config, "config must be a JSON object");
  for (const auto& [k, _] : doc.items()) {
    if (!known.contains(k)) throw Error(ErrorKind::config, "unknown config key '" + k + "'");
  }
  if (!doc.contains("seed")) throw Error(ErrorKind::validation, "config needs an explicit master 'seed'");
  RunConfig c;
  try {
    c.seed = doc.at("seed").get<std::uint64_t>();
    for (auto spec : doc.at("backends")) {
      if (spec.contains("fixture")) spec["fixture"] = resolve(spec.at("fixture").get<std::string>(), base_dir).string();
      c.backends.push_back(std::move(spec));
    }
    c.task_path = resolve(doc.at("task_path").get<std::string>(), base_dir);
    if (doc.contains("task_ids")) c.allowed_ids = doc.at("task_ids").get<std::vector<std::string>>();
    c.n_eval = doc.value("n_eval", c.n_eval);
    c.format_count = doc.value("format_count", c.format_count);
    c.demo_count = doc.value("demo_count", c.demo_count);
    if (doc.contains("methods")) {
      for (const auto& m : doc.at("methods")) c.methods.push_back(method_from_json(m));
    } else {
      c.methods.push_back(MethodConfig{});
    }
    c.scenario = parse_scenario(doc.value("scenario", std::string("none")));
    c.majority_ratio = doc.value("majority_ratio", c.majority_ratio);
    const auto mode = doc.value("mode", std::string("ranking"));
    if (mode == "ranking") {
      c.mode = RequestMode::ranking;
    } else if (mode == "greedy") {
      c.mode = RequestMode::greedy;
    } else {
      throw Error(ErrorKind::config, "unknown mode '" + mode + "' (expected ranking|greedy)");
    }
    c.render_mode = parse_render_mode(doc.value("render_mode", std::string("completion")));
    c.output_dir = resolve(doc.value("output_dir", std::string("out")), base_dir);
    c.concurrency = doc.value("concurrency", c.concurrency);
    if (doc.contains("catalog")) c.catalog_path = resolve(doc.at("catalog").get<std::string>(), base_dir);
    if (doc.contains("token_pool")) c.token_pool_path = resolve(doc.at("token_pool").get<std::string>(), base_dir);
    if (doc.contains("cache_dir")) c.cache_dir = resolve(doc.at("cache_dir").get<std::string>(), base_dir);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("config: ") + e.what());
  }

  const bool needs_pool = std::any_of(c.methods.begin(), c.methods.end(),
                                      [](const MethodConfig& m) { return m.method == Method::sensitivity_aware; });
  if (needs_pool) {
    const auto pool = load_token_pool(
        c.token_pool_path.value_or(std::filesystem::path(FSENS_DEFAULT_DATA_DIR) / "token_pool.txt"));
    for (auto& m : c.methods) {
      m.perturbation.token_pool = pool;
      m.perturbation.seed = derive_seed(c.seed, "perturbation");
    }
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(ErrorKind::io, "cannot open config " + file.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::config, "config " + file.string() + " is not valid JSON: " + e.what());
  }
  return from_json(doc, file.parent_path());
}

void RunConfig::validate() const {
  std::vector<std::string> problems;
  if (backends.empty()) problems.push_back("no backends configured");
  if (methods.empty()) problems.push_back("no methods configured");
  if (n_eval == 0) problems.push_back("n_eval must be >= 1");
  if (format_count == 0) problems.push_back("format_count must be >= 1");
  if (scenario == Scenario::compositional && format_count < 2) {
    problems.push_back("compositional scenario needs format_count >= 2");
  }
  if (concurrency == 0) problems.push_back("concurrency must be >= 1");

  std::set<std::string> seen_methods;
  for (const auto& m : methods) {
    const std::string name(to_string(m.method));
    if (!seen_methods.insert(name).second) problems.push_back("method " + name + " listed twice");
    if (mode == RequestMode::greedy && m.method != Method::few_shot_greedy &&
        m.method != Method::template_ensemble_vote) {
      problems.push_back(name + " requires ranking mode");
    }
    if ((m.method == Method::template_ensemble_avg || m.method == Method::template_ensemble_vote) &&
        m.ensemble_size == 0) {
      problems.push_back(name + ": ensemble_size must be >= 1");
    }
    if (m.method == Method::sensitivity_aware && !(m.alpha >= 0.0 && m.alpha <= 1.0)) {
      problems.push_back(name + ": alpha must be in [0, 1]");
    }
    for (const auto& b : backends) {
      if (requires_ranking(m.method, mode) && !backend_has_ranking(b)) {
        problems.push_back(name + " needs option log-probabilities, which backend " + b.value("tag", std::string("?")) +
                           " does not expose");
      }
    }
  }
  std::set<std::string> tags;
  for (const auto& b : backends) {
    const auto tag = b.value("tag", std::string{});
    if (tag.empty()) problems.push_back("backend without a tag");
    if (!tags.insert(tag).second) problems.push_back("backend tag " + tag + " used twice");
  }
  if (!problems.empty()) {
    std::string msg = "invalid run config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw Error(ErrorKind::validation, msg);
  }
}

std::size_t RunPlan::unit_count() const {
  std::size_t per_model = 0;
  for (const auto& t : tasks) per_model += t.formats.size() * t.task.instances.size() * config.methods.size();
  return per_model * models.size();
}

std::vector<std::string> RunPlan::unit_keys() const {
  std::vector<std::string> keys;
  keys.reserve(unit_count());
  const std::string scenario(to_string(config.scenario));
  for (const auto& model : models) {
    for (const auto& t : tasks) {
      for (const auto& m : config.methods) {
        const std::string method(to_string(m.method));
        for (const auto& f : t.formats) {
          for (const auto& inst : t.task.instances) {
            keys.push_back(model + "|" + scenario + "|" + t.task.id + "|" + f.id() + "|" + method + "|" + inst.uid);
          }
        }
      }
    }
  }
  return keys;
}

nlohmann::json RunPlan::to_json() const {
  nlohmann::json j;
  j["seed"] = config.seed;
  j["scenario"] = to_string(config.scenario);
  j["mode"] = to_string(config.mode);
  j["render_mode"] = to_string(config.render_mode);
  j["n_eval"] = config.n_eval;
  j["format_count"] = config.format_count;
  j["demo_count"] = config.demo_count;
  if (config.scenario == Scenario::imbalance) j["majority_ratio"] = config.majority_ratio;
  j["backends"] = config.backends;
  j["models"] = models;
  j["methods"] = nlohmann::json::array();
  for (const auto& m : config.methods) j["methods"].push_back(m.to_json());
  j["catalog"] = catalog_to_json(catalog);
  j["tasks"] = nlohmann::json::array();
  for (const auto& t : tasks) {
    nlohmann::json tj;
    tj["id"] = t.task.id;
    tj["source_hash"] = t.task.source_hash;
    tj["format_seed"] = t.format_seed;
    tj["demo_seed"] = t.demo_seed;
    tj["sample_seed"] = t.sample_seed;
    tj["eval_uids"] = nlohmann::json::array();
    for (const auto& i : t.task.instances) tj["eval_uids"].push_back(i.uid);
    tj["demonstration_uids"] = nlohmann::json::array();
    for (const auto& i : t.demonstrations) tj["demonstration_uids"].push_back(i.uid);
    tj["formats"] = nlohmann::json::array();
    for (const auto& f : t.formats) {
      tj["formats"].push_back({{"id", f.id()}, {"fingerprint", format_fingerprint(catalog, f)}});
    }
    if (!t.train_formats.empty()) {
      tj["train_formats"] = nlohmann::json::array();
      for (const auto& f : t.train_formats) tj["train_formats"].push_back(f.id());
    }
    j["tasks"].push_back(std::move(tj));
  }
  j["unit_count"] = unit_count();
  return j;
}

std::string RunPlan::fingerprint() const { return sha256_hex(to_json().dump()); }

RunPlan plan(const RunConfig& config, std::optional<std::vector<Task>> tasks) {
  config.validate();
  RunPlan p;
  p.config = config;
  p.catalog = load_catalog(config.catalog_path);
  for (const auto& b : config.backends) p.models.push_back(b.at("tag").get<std::string>());
  if (!tasks) tasks = load_tasks(config.task_path, config.allowed_ids);
  if (tasks->empty()) throw Error(ErrorKind::validation, "no tasks to evaluate");

  for (const auto& task : *tasks) {
    task.validate();
    TaskPlan tp;
    tp.sample_seed = derive_seed(config.seed, "sample|" + task.id);
    tp.demo_seed = derive_seed(config.seed, "demos|" + task.id);
    tp.format_seed = derive_seed(config.seed, "formats|" + task.id);

    Task eval = eval_subsample(task, config.n_eval, tp.sample_seed);
    std::set<std::string> eval_uids;
    for (const auto& i : eval.instances) eval_uids.insert(i.uid);
    const Task train = train_split(task, eval_uids);
    tp.demonstrations = pick_demonstrations(train, config.demo_count, tp.demo_seed);
    if (config.scenario == Scenario::imbalance) {
      eval = imbalance_downsample(eval, config.majority_ratio, derive_seed(config.seed, "imbalance|" + task.id));
    }
    tp.task = std::move(eval);

    if (config.scenario == Scenario::compositional) {
      const auto sample = sample_compositional_formats(p.catalog, task.has_options(), config.format_count, tp.format_seed);
      auto split = compositional_split(sample, derive_seed(tp.format_seed, "split"));
      tp.formats = std::move(split.test);
      tp.train_formats = std::move(split.train);
    } else {
      tp.formats = sample_formats(p.catalog, task.has_options(), config.format_count, tp.format_seed);
    }
    p.tasks.push_back(std::move(tp));
  }
  return p;
}

std::map<std::string, BackendPtr> build_backends(const RunPlan& plan) {
  std::map<std::string, BackendPtr> out;
  for (const auto& spec : plan.config.backends) {
    auto backend = make_backend(spec);
    if (spec.value("bias_schedule", std::string{}) == "linear") {
      auto synthetic = std::dynamic_pointer_cast<SyntheticBiasBackend>(backend);
      if (!synthetic) throw Error(ErrorKind::config, "bias_schedule applies to synthetic backends only");
      std::map<std::string, double> scale;
      for (const auto& t : plan.tasks) {
        const auto n = t.formats.size();
        for (std::size_t k = 0; k < n; ++k) {
          const double s = n == 1 ? 1.0 : static_cast<double>(k) / static_cast<double>(n - 1);
          scale.emplace(format_fingerprint(plan.catalog, t.formats[k]), s);
        }
      }
      synthetic->set_format_bias_scale(std::move(scale));
    }
    if (plan.config.cache_dir) {
      std::filesystem::create_directories(*plan.config.cache_dir);
      backend = with_cache(backend, *plan.config.cache_dir / (backend->tag() + ".jsonl"));
    }
    out.emplace(backend->tag(), std::move(backend));
  }
  return out;
}

std::vector<EvalRecord> read_results(const std::filesystem::path& file) {
  std::vector<EvalRecord> out;
  std::ifstream in(file);
  if (!in) return out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
      if (in.peek() == std::char_traits<char>::eof()) {
        spdlog::warn("{}: ignoring torn final line {}", file.string(), lineno);
        break;
      }
      throw Error(ErrorKind::schema, file.string() + ":" + std::to_string(lineno) + ": malformed record");
    }
    out.push_back(record_from_json(j));
  }
  return out;
}

ExecuteSummary execute(const RunPlan& plan, const std::map<std::string, BackendPtr>& backends,
                       const std::filesystem::path& results_file, const ExecuteOptions& options) {
  ExecuteSummary summary;
  summary.planned = plan.unit_count();

  std::unordered_set<std::string> done;
  if (std::filesystem::exists(results_file) && std::filesystem::file_size(results_file) > 0) {
    if (!options.resume) {
      throw Error(ErrorKind::validation, results_file.string() + " already holds results; pass --resume to continue it");
    }
    for (const auto& r : read_results(results_file)) done.insert(r.key());
  }
  for (const auto& model : plan.models) {
    if (!backends.contains(model)) throw Error(ErrorKind::config, "no backend instance for model " + model);
  }
  if (!results_file.parent_path().empty()) std::filesystem::create_directories(results_file.parent_path());

  // A torn final line from a killed run would otherwise glue onto the next record.
  bool needs_newline = false;
  if (std::filesystem::exists(results_file) && std::filesystem::file_size(results_file) > 0) {
    std::ifstream tail(results_file, std::ios::binary);
    tail.seekg(-1, std::ios::end);
    needs_newline = tail.get() != '\n';
  }
  std::ofstream results(results_file, std::ios::app | std::ios::binary);
  if (!results) throw Error(ErrorKind::io, "cannot open " + results_file.string());
  if (needs_newline) results << '\n';
  std::ofstream failures(results_file.string() + ".failures.jsonl", std::ios::trunc | std::ios::binary);

  const std::string scenario(to_string(plan.config.scenario));
  const std::uint64_t ensemble_seed = derive_seed(plan.config.seed, "ensemble");

  for (const auto& model : plan.models) {
    Backend& backend = *backends.at(model);
    for (const auto& t : plan.tasks) {
      MethodContext ctx;
      ctx.task = &t.task;
      ctx.demonstrations = t.demonstrations;
      ctx.catalog = &plan.catalog;
      ctx.render_mode = plan.config.render_mode;
      ctx.mode = plan.config.mode;
      ctx.scenario = scenario;
      ctx.seed = ensemble_seed;
      ctx.concurrency = plan.config.concurrency;

      for (const auto& m : plan.config.methods) {
        const std::string method(to_string(m.method));
        for (const auto& f : t.formats) {
          const auto& all = t.task.instances;
          auto key_of = [&](const Instance& i) {
            return model + "|" + scenario + "|" + t.task.id + "|" + f.id() + "|" + method + "|" + i.uid;
          };
          std::vector<Instance> pending;
          for (const auto& i : all) {
            if (done.contains(key_of(i))) {
              ++summary.already_done;
            } else {
              pending.push_back(i);
            }
          }
          if (pending.empty()) continue;
          // Batch calibration needs the whole batch even when part of it is done.
          const bool whole = m.method == Method::batch_calibration;
          const std::span<const Instance> run_on = whole ? std::span<const Instance>(all) : std::span<const Instance>(pending);

          const auto start = std::chrono::steady_clock::now();
          GroupOutcome outcome;
          try {
            outcome = predict_group(m, ctx, run_on, f, backend);
          } catch (const std::exception& e) {
            outcome.predictions.assign(run_on.size(), std::nullopt);
            outcome.errors.assign(run_on.size(), e.what());
          }
          const double elapsed =
              std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() /
              static_cast<double>(run_on.size());

          for (std::size_t i = 0; i < run_on.size(); ++i) {
            const auto key = key_of(run_on[i]);
            if (done.contains(key)) continue;
            if (options.max_units && summary.written >= *options.max_units) {
              summary.interrupted = true;
              results.flush();
              return summary;
            }
            if (outcome.predictions[i]) {
              auto rec = make_record(m, ctx, run_on[i], f, *outcome.predictions[i], model);
              rec.elapsed_ms = elapsed;
              results << record_to_json(rec).dump() << '\n';
              ++summary.written;
            } else {
              failures << nlohmann::json{{"key", key},      {"model", model},        {"task", t.task.id},
                                         {"method", method}, {"format_id", f.id()}, {"uid", run_on[i].uid},
                                         {"error", outcome.errors[i]}}
                              .dump()
                       << '\n';
              ++summary.failed;
            }
          }
          results.flush();
        }
      }
      if (options.log) {
        *options.log << model << " " << t.task.id << ": " << summary.written << " written, " << summary.failed
                     << " failed\n";
      }
    }
  }
  return summary;
}

namespace {

struct Cell {
  // format id -> (correct, total)
  std::map<std::string, std::pair<std::size_t, std::size_t>> formats;
  std::vector<std::size_t> gold;
  std::vector<std::optional<std::size_t>> chosen;
  std::size_t num_classes = 0;
};

using CellKey = std::tuple<std::string, std::string, std::string, std::string>;  // model, scenario, task, method

std::vector<double> accuracies(const Cell& c) {
  std::vector<double> v;
  for (const auto& [_, ct] : c.formats) v.push_back(static_cast<double>(ct.first) / static_cast<double>(ct.second));
  return v;
}

}  // namespace

ReportBundle report(std::span<const EvalRecord> records, const ReportOptions& options) {
  std::map<CellKey, Cell> cells;
  std::set<std::pair<std::string, std::string>> model_scenarios;
  for (const auto& r : records) {
    auto& c = cells[{r.model, r.scenario, r.task, r.method}];
    auto& ct = c.formats[r.format_id];
    ct.first += r.correct ? 1 : 0;
    ct.second += 1;
    c.gold.push_back(r.gold);
    c.chosen.push_back(r.chosen);
    c.num_classes = r.num_classes;
    model_scenarios.insert({r.model, r.scenario});
  }

  // Coverage: within each (model, scenario) every task must carry the same
  // method set, and every method the same format set and per-format counts.
  std::vector<std::string> gaps;
  std::map<std::pair<std::string, std::string>, std::set<std::string>> complete_tasks;
  std::map<std::pair<std::string, std::string>, std::set<std::string>> methods_of;
  for (const auto& [key, _] : cells) methods_of[{std::get<0>(key), std::get<1>(key)}].insert(std::get<3>(key));
  for (const auto& ms : model_scenarios) {
    std::set<std::string> tasks;
    for (const auto& [key, _] : cells) {
      if (std::get<0>(key) == ms.first && std::get<1>(key) == ms.second) tasks.insert(std::get<2>(key));
    }
    for (const auto& task : tasks) {
      bool ok = true;
      std::optional<std::map<std::string, std::size_t>> shape;
      for (const auto& method : methods_of[ms]) {
        const auto it = cells.find({ms.first, ms.second, task, method});
        if (it == cells.end()) {
          gaps.push_back(ms.first + "/" + ms.second + "/" + task + ": no records for " + method);
          ok = false;
          continue;
        }
        std::map<std::string, std::size_t> here;
        for (const auto& [fid, ct] : it->second.formats) here[fid] = ct.second;
        if (!shape) {
          shape = here;
        } else if (here != *shape) {
          gaps.push_back(ms.first + "/" + ms.second + "/" + task + ": " + method +
                         " covers different formats or instance counts than the other methods");
          ok = false;
        }
      }
      if (ok) complete_tasks[ms].insert(task);
    }
  }

  ReportBundle out;

  std::string aggregate_csv =
      "model,scenario,method,tasks,mean_median_accuracy,mean_std,error_bar,mean_spread,mean_mcc\n";
  std::string task_csv = "model,scenario,task,method,formats,median_accuracy,std,spread,mcc\n";
  std::string verdict_csv = "model,scenario,method,baseline,tasks,mean_spread_difference,t_statistic,p_value,verdict\n";
  std::map<std::pair<std::string, std::string>, std::array<std::size_t, 4>> wtl;  // scenario, method -> w,t,l,skipped
  std::map<std::string, std::vector<AggregateRow>> aggregates_by_ms;
  std::string md_aggregate;
  std::string md_verdicts;

  for (const auto& ms : model_scenarios) {
    const auto& tasks = complete_tasks[ms];
    SeriesTable table;
    std::map<std::string, double> mcc_sum;
    for (const auto& task : tasks) {
      for (const auto& method : methods_of[ms]) {
        const auto& c = cells.at({ms.first, ms.second, task, method});
        FormatSeries s{task, method, {}};
        for (const auto& [fid, ct] : c.formats) {
          s.values[fid] = static_cast<double>(ct.first) / static_cast<double>(ct.second);
        }
        const auto acc = accuracies(c);
        const double cell_mcc = mcc(c.gold, c.chosen, c.num_classes);
        mcc_sum[method] += cell_mcc;
        task_csv += csv_row({ms.first, ms.second, task, method, std::to_string(acc.size()), fixed(median(acc)),
                             acc.size() >= 2 ? fixed(std_over_formats(acc)) : "", fixed(spread(acc)), fixed(cell_mcc)});
        table[task][method] = std::move(s);
      }
    }
    if (tasks.empty()) continue;

    bool multi_format = true;
    for (const auto& [task, by_method] : table) {
      for (const auto& [method, s] : by_method) multi_format = multi_format && s.values.size() >= 2;
    }
    if (!multi_format) {
      gaps.push_back(ms.first + "/" + ms.second + ": some cells have fewer than 2 formats; aggregates skipped");
      continue;
    }
    const auto rows = aggregate(table);
    for (const auto& row : rows) {
      const double mean_mcc = mcc_sum[row.method] / static_cast<double>(row.tasks);
      aggregate_csv += csv_row({ms.first, ms.second, row.method, std::to_string(row.tasks), fixed(row.mean_median),
                                fixed(row.mean_std), fixed(row.error_bar), fixed(row.mean_spread), fixed(mean_mcc)});
      md_aggregate += "| " + ms.first + " | " + ms.second + " | " + row.method + " | " + fixed(row.mean_median, 4) +
                      " ± " + fixed(row.error_bar, 4) + " | " + fixed(row.mean_spread, 4) + " | " + fixed(mean_mcc, 4) +
                      " |\n";
    }
    aggregates_by_ms[ms.first + "|" + ms.second] = rows;

    if (!methods_of[ms].contains(options.baseline)) {
      gaps.push_back(ms.first + "/" + ms.second + ": baseline " + options.baseline + " missing; no verdicts");
      continue;
    }
    std::map<std::string, std::vector<double>> base;
    for (const auto& task : tasks) base[task] = table[task][options.baseline].to_vector();
    for (const auto& method : methods_of[ms]) {
      if (method == options.baseline) continue;
      std::map<std::string, std::vector<double>> other;
      for (const auto& task : tasks) other[task] = table[task][method].to_vector();
      auto& counts = wtl[{ms.second, method}];
      if (tasks.size() < 2) {
        verdict_csv += csv_row({ms.first, ms.second, method, options.baseline, std::to_string(tasks.size()), "", "", "",
                                "insufficient_tasks"});
        ++counts[3];
        continue;
      }
      const auto v = spread_diff_test(base, other, options.alpha, ms.first, method);
      verdict_csv += csv_row({ms.first, ms.second, method, options.baseline, std::to_string(v.tasks),
                              fixed(v.mean_difference), fixed(v.t_statistic), fixed(v.p_value),
                              std::string(to_string(v.verdict))});
      md_verdicts += "| " + ms.first + " | " + ms.second + " | " + method + " | " + fixed(v.mean_difference, 4) + " | " +
                     fixed(v.p_value, 4) + " | " + std::string(to_string(v.verdict)) + " |\n";
      ++counts[v.verdict == Verdict::method_wins ? 0 : v.verdict == Verdict::tie ? 1 : 2];
    }
  }

  std::string wtl_csv = "scenario,method,wins,ties,losses,untested\n";
  for (const auto& [key, c] : wtl) {
    wtl_csv += csv_row({key.first, key.second, std::to_string(c[0]), std::to_string(c[1]), std::to_string(c[2]),
                        std::to_string(c[3])});
  }

  // Rankings by MCC per scenario, pooled over formats within each cell.
  std::map<std::string, MccTable> mcc_tables;
  for (const auto& ms : model_scenarios) {
    for (const auto& task : complete_tasks[ms]) {
      for (const auto& method : methods_of[ms]) {
        const auto& c = cells.at({ms.first, ms.second, task, method});
        mcc_tables[ms.second][ms.first][task][method] = mcc(c.gold, c.chosen, c.num_classes);
      }
    }
  }
  std::map<std::string, std::vector<RankRow>> ranks;
  for (const auto& [scenario, table] : mcc_tables) {
    try {
      ranks[scenario] = rank_methods(table);
    } catch (const Error& e) {
      gaps.push_back(scenario + ": rankings skipped: " + e.what());
    }
  }
  std::string rank_csv = "scenario,method,scope,mean_rank,delta_vs_none\n";
  std::string md_ranks;
  for (const auto& [scenario, rows] : ranks) {
    std::map<std::string, double> deltas;
    if (scenario != "none" && ranks.contains("none")) deltas = rank_deltas(ranks.at("none"), rows);
    for (const auto& row : rows) {
      const auto d = deltas.contains(row.method) ? fixed(deltas.at(row.method)) : std::string{};
      rank_csv += csv_row({scenario, row.method, "all", fixed(row.mean_rank), d});
      for (const auto& [model, r] : row.per_model) rank_csv += csv_row({scenario, row.method, model, fixed(r), ""});
      md_ranks += "| " + scenario + " | " + row.method + " | " + fixed(row.mean_rank, 3) + " | " +
                  (d.empty() ? "" : fixed(deltas.at(row.method), 3)) + " |\n";
    }
  }

  std::string gvr_csv = "model,scenario,method,mode,median_accuracy,std_over_formats\n";
  for (const auto& [ms, rows] : aggregates_by_ms) {
    const auto bar = ms.find('|');
    for (const auto& row : rows) {
      if (row.method != "few_shot_ranking" && row.method != "few_shot_greedy") continue;
      gvr_csv += csv_row({ms.substr(0, bar), ms.substr(bar + 1), row.method,
                          row.method == "few_shot_greedy" ? "greedy" : "ranking", fixed(row.mean_median),
                          fixed(row.mean_std)});
    }
  }

  std::string cx_csv = "component_count,mean_spread,p5,p95,samples\n";
  for (const auto& p : spread_vs_complexity(records)) {
    cx_csv += csv_row({std::to_string(p.component_count), fixed(p.mean_spread), fixed(p.p5), fixed(p.p95),
                       std::to_string(p.samples)});
  }

  std::string md = "# Format sensitivity report\n\n";
  md += "Records: " + std::to_string(records.size()) + ". Baseline: " + options.baseline +
        ". Significance level: " + fixed(options.alpha, 3) +
        ". Standard deviation over formats uses the population divisor.\n\n";
  md += "## Aggregates\n\n| model | scenario | method | median accuracy ± 2 std | spread | MCC |\n|---|---|---|---|---|---|\n" +
        md_aggregate + "\n";
  md += "## Spread significance vs baseline\n\n| model | scenario | method | mean spread difference | p | verdict |\n"
        "|---|---|---|---|---|---|\n" +
        md_verdicts + "\n";
  md += "## MCC rankings\n\n| scenario | method | mean rank | delta vs none |\n|---|---|---|---|\n" + md_ranks + "\n";
  md += "## Gaps\n\n";
  if (gaps.empty()) {
    md += "None.\n";
  } else {
    for (const auto& g : gaps) md += "- " + g + "\n";
  }

  out["aggregate.csv"] = aggregate_csv;
  out["task_spreads.csv"] = task_csv;
  out["verdicts.csv"] = verdict_csv;
  out["wins_ties_losses.csv"] = wtl_csv;
  out["rankings.csv"] = rank_csv;
  out["greedy_vs_ranking.csv"] = gvr_csv;
  out["spread_vs_complexity.csv"] = cx_csv;
  out["report.md"] = md;
  return out;
}

void write_report(const ReportBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [name, content] : bundle) {
    std::ofstream f(dir / name, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write " + (dir / name).string());
    f << content;
  }
}

}  // namespace fsens
