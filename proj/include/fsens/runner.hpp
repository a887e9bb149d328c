#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsens/backend.hpp"
#include "fsens/format_grammar.hpp"
#include "fsens/methods.hpp"
#include "fsens/records.hpp"
#include "fsens/task_data.hpp"

namespace fsens {

enum class Scenario { none, imbalance, compositional };

std::string_view to_string(Scenario s);
Scenario parse_scenario(std::string_view s);

struct RunConfig {
  std::vector<nlohmann::json> backends;
  std::filesystem::path task_path;
  std::optional<std::vector<std::string>> allowed_ids;
  std::size_t n_eval = 1000;
  std::size_t format_count = 10;
  std::size_t demo_count = 2;
  std::uint64_t seed = 0;
  std::vector<MethodConfig> methods;
  Scenario scenario = Scenario::none;
  double majority_ratio = 0.9;
  RequestMode mode = RequestMode::ranking;
  RenderMode render_mode = RenderMode::completion;
  std::filesystem::path output_dir = "out";
  std::size_t concurrency = 4;
  std::optional<std::filesystem::path> catalog_path;
  std::optional<std::filesystem::path> token_pool_path;
  std::optional<std::filesystem::path> cache_dir;

  /// Relative paths in the document resolve against `base_dir`. A missing
  /// "seed" is a validation error.
  static RunConfig from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& file);

  /// Method/mode and method/backend compatibility; lists every offender.
  void validate() const;
};

struct TaskPlan {
  Task task;  // evaluation instances only
  std::vector<Instance> demonstrations;
  std::vector<FormatSpec> formats;        // evaluation formats
  std::vector<FormatSpec> train_formats;  // compositional scenario only
  std::uint64_t format_seed = 0;
  std::uint64_t demo_seed = 0;
  std::uint64_t sample_seed = 0;
};

struct RunPlan {
  RunConfig config;
  FormatComponentCatalog catalog;
  std::vector<std::string> models;
  std::vector<TaskPlan> tasks;

  std::size_t unit_count() const;

  /// Unit keys in execution order (model, task, method, format, instance).
  std::vector<std::string> unit_keys() const;

  nlohmann::json to_json() const;

  /// SHA-256 of to_json().
  std::string fingerprint() const;
};

/// Loads tasks from config.task_path unless `tasks` is given.
RunPlan plan(const RunConfig& config, std::optional<std::vector<Task>> tasks = std::nullopt);

/// Instantiates the configured backends (with caches when configured) and
/// applies plan-dependent settings such as synthetic bias schedules.
std::map<std::string, BackendPtr> build_backends(const RunPlan& plan);

struct ExecuteOptions {
  bool resume = false;
  std::optional<std::size_t> max_units;  // stop after writing this many records
  std::ostream* log = nullptr;
};

struct ExecuteSummary {
  std::size_t planned = 0;
  std::size_t already_done = 0;
  std::size_t written = 0;
  std::size_t failed = 0;
  bool interrupted = false;

  int exit_code() const { return failed > 0 ? 3 : 0; }
};

inline constexpr int kExitValidation = 2;
inline constexpr int kExitPartialFailure = 3;

/// Streams records to `results_file` (append-only). With resume, units whose
/// keys already appear in the file are skipped. Failures go to
/// `<results_file>.failures.jsonl`, rewritten each run.
ExecuteSummary execute(const RunPlan& plan, const std::map<std::string, BackendPtr>& backends,
                       const std::filesystem::path& results_file, const ExecuteOptions& options = {});

/// Tolerates a torn final line and unknown fields.
std::vector<EvalRecord> read_results(const std::filesystem::path& file);

struct ReportOptions {
  std::string baseline = "few_shot_ranking";
  double alpha = 0.05;
};

/// File name -> content.
using ReportBundle = std::map<std::string, std::string>;

ReportBundle report(std::span<const EvalRecord> records, const ReportOptions& options = {});
void write_report(const ReportBundle& bundle, const std::filesystem::path& dir);

}  // namespace fsens
