#pragma once

#include <optional>
#include <string>

#include <nlohmann/json.hpp>

namespace fsens {

/// One evaluated (model, task, format, method, instance) cell.
struct EvalRecord {
  std::string model;
  std::string scenario = "none";
  std::string task;
  std::string format_id;
  std::string format_fingerprint;
  std::size_t component_count = 0;
  std::string method;
  std::string mode = "ranking";
  std::string uid;
  std::optional<std::size_t> chosen;  // nullopt = abstained
  std::size_t gold = 0;
  std::size_t num_classes = 0;
  bool correct = false;
  nlohmann::json diagnostics = nlohmann::json::object();
  double elapsed_ms = 0.0;

  /// (model, scenario, task, format, method, uid), joined with '|'.
  std::string key() const;
};

nlohmann::json record_to_json(const EvalRecord& r);

/// Unknown extra fields are ignored.
EvalRecord record_from_json(const nlohmann::json& j);

}  // namespace fsens
