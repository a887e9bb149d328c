// Command-line front end: plan, run, report, catalog, split.
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "fsens/error.hpp"
#include "fsens/format_grammar.hpp"
#include "fsens/rng.hpp"
#include "fsens/runner.hpp"

namespace {

fsens::RunConfig load_config(const std::string& path, const std::optional<std::uint64_t>& seed,
                             const std::optional<std::size_t>& concurrency) {
  std::ifstream in(path);
  if (!in) throw fsens::Error(fsens::ErrorKind::io, "cannot open config " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw fsens::Error(fsens::ErrorKind::config, "config " + path + " is not valid JSON: " + e.what());
  }
  if (seed) doc["seed"] = *seed;
  if (concurrency) doc["concurrency"] = *concurrency;
  return fsens::RunConfig::from_json(doc, std::filesystem::path(path).parent_path());
}

void write_file(const std::filesystem::path& p, const std::string& content) {
  if (!p.parent_path().empty()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw fsens::Error(fsens::ErrorKind::io, "cannot write " + p.string());
  f << content;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-format sensitivity toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> concurrency;
  std::string out;
  bool resume = false;
  std::optional<std::size_t> max_units;
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  auto* plan_cmd = app.add_subcommand("plan", "Print the run plan for a config");
  plan_cmd->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  plan_cmd->add_option("--seed", seed, "Override the master seed");
  plan_cmd->add_option("--out", out, "Write the plan JSON here instead of stdout");

  auto* run_cmd = app.add_subcommand("run", "Execute a run plan");
  run_cmd->add_option("--config", config_path, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--seed", seed, "Override the master seed");
  run_cmd->add_option("--concurrency", concurrency, "Concurrent backend calls")->check(CLI::PositiveNumber);
  run_cmd->add_option("--out", out, "Output directory (default: config output_dir)");
  run_cmd->add_flag("--resume", resume, "Skip units already in the results file");
  run_cmd->add_option("--max-units", max_units, "Stop after writing this many records");

  std::vector<std::string> result_files;
  std::string baseline = "few_shot_ranking";
  double alpha = 0.05;
  auto* report_cmd = app.add_subcommand("report", "Build CSV/Markdown reports from results files");
  report_cmd->add_option("results", result_files, "Results JSONL files")->check(CLI::ExistingFile);
  report_cmd->add_option("--config", config_path, "Use <output_dir>/results.jsonl of this config");
  report_cmd->add_option("--out", out, "Report directory")->required();
  report_cmd->add_option("--baseline", baseline, "Baseline method for significance tests");
  report_cmd->add_option("--alpha", alpha, "Significance level");

  std::string catalog_path;
  auto* catalog_cmd = app.add_subcommand("catalog", "Print the format component catalog");
  catalog_cmd->add_option("--catalog", catalog_path, "Catalog JSON (default: built-in)");
  catalog_cmd->add_option("--out", out, "Write JSON here instead of stdout");

  std::size_t count = 10;
  bool with_options = false;
  std::uint64_t split_seed = 0;
  auto* split_cmd = app.add_subcommand("split", "Sample formats and split them compositionally");
  split_cmd->add_option("--seed", split_seed, "Seed")->required();
  split_cmd->add_option("--count", count, "Number of formats to sample");
  split_cmd->add_flag("--options", with_options, "Sample multiple-choice formats");
  split_cmd->add_option("--catalog", catalog_path, "Catalog JSON (default: built-in)");
  split_cmd->add_option("--out", out, "Write JSON here instead of stdout");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*plan_cmd) {
      const auto p = fsens::plan(load_config(config_path, seed, std::nullopt));
      auto j = p.to_json();
      j["fingerprint"] = p.fingerprint();
      if (out.empty()) {
        std::cout << j.dump(2) << "\n";
      } else {
        write_file(out, j.dump(2) + "\n");
      }
      std::cerr << p.unit_count() << " units, fingerprint " << p.fingerprint() << "\n";
      return 0;
    }
    if (*run_cmd) {
      const auto config = load_config(config_path, seed, concurrency);
      const auto p = fsens::plan(config);
      const std::filesystem::path dir = out.empty() ? config.output_dir : std::filesystem::path(out);
      auto plan_json = p.to_json();
      plan_json["fingerprint"] = p.fingerprint();
      write_file(dir / "plan.json", plan_json.dump(2) + "\n");
      const auto backends = fsens::build_backends(p);
      fsens::ExecuteOptions opts;
      opts.resume = resume;
      opts.max_units = max_units;
      opts.log = &std::cerr;
      const auto s = fsens::execute(p, backends, dir / "results.jsonl", opts);
      std::cout << "planned " << s.planned << ", already done " << s.already_done << ", written " << s.written
                << ", failed " << s.failed << (s.interrupted ? " (stopped early)" : "") << "\n";
      if (s.failed > 0) std::cout << "failures: " << (dir / "results.jsonl").string() << ".failures.jsonl\n";
      return s.exit_code();
    }
    if (*report_cmd) {
      if (!config_path.empty()) {
        const auto config = load_config(config_path, std::nullopt, std::nullopt);
        result_files.push_back((config.output_dir / "results.jsonl").string());
      }
      if (result_files.empty()) throw fsens::Error(fsens::ErrorKind::config, "report needs results files or --config");
      std::vector<fsens::EvalRecord> records;
      for (const auto& f : result_files) {
        auto part = fsens::read_results(f);
        records.insert(records.end(), part.begin(), part.end());
      }
      fsens::ReportOptions opts;
      opts.baseline = baseline;
      opts.alpha = alpha;
      fsens::write_report(fsens::report(records, opts), out);
      std::cout << "report written to " << out << " (" << records.size() << " records)\n";
      return 0;
    }
    const auto catalog = fsens::load_catalog(catalog_path.empty() ? std::nullopt
                                                                   : std::optional<std::filesystem::path>(catalog_path));
    if (*catalog_cmd) {
      auto j = fsens::catalog_to_json(catalog);
      j["universe_size"] = {{"without_options", fsens::format_universe_size(catalog, false)},
                            {"with_options", fsens::format_universe_size(catalog, true)}};
      if (out.empty()) {
        std::cout << j.dump(2) << "\n";
      } else {
        write_file(out, j.dump(2) + "\n");
      }
      return 0;
    }
    if (*split_cmd) {
      const auto formats = fsens::sample_compositional_formats(catalog, with_options, count, split_seed);
      const auto split = fsens::compositional_split(formats, fsens::derive_seed(split_seed, "split"));
      nlohmann::json j{{"train", nlohmann::json::array()}, {"test", nlohmann::json::array()}};
      for (const auto& f : split.train) j["train"].push_back(f.id());
      for (const auto& f : split.test) j["test"].push_back(f.id());
      if (out.empty()) {
        std::cout << j.dump(2) << "\n";
      } else {
        write_file(out, j.dump(2) + "\n");
      }
      return 0;
    }
  } catch (const fsens::Error& e) {
    std::cerr << "error (" << fsens::to_string(e.kind()) << "): " << e.what() << "\n";
    return fsens::kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
