#include "fsens/records.hpp"

#include "fsens/error.hpp"

namespace fsens {

std::string EvalRecord::key() const {
  return model + "|" + scenario + "|" + task + "|" + format_id + "|" + method + "|" + uid;
}

nlohmann::json record_to_json(const EvalRecord& r) {
  return {
      {"model", r.model},
      {"scenario", r.scenario},
      {"task", r.task},
      {"format_id", r.format_id},
      {"format_fingerprint", r.format_fingerprint},
      {"component_count", r.component_count},
      {"method", r.method},
      {"mode", r.mode},
      {"uid", r.uid},
      {"chosen", r.chosen ? nlohmann::json(*r.chosen) : nlohmann::json(nullptr)},
      {"gold", r.gold},
      {"num_classes", r.num_classes},
      {"correct", r.correct},
      {"diagnostics", r.diagnostics},
      {"elapsed_ms", r.elapsed_ms},
  };
}

EvalRecord record_from_json(const nlohmann::json& j) {
  try {
    EvalRecord r;
    r.model = j.at("model").get<std::string>();
    r.scenario = j.value("scenario", std::string("none"));
    r.task = j.at("task").get<std::string>();
    r.format_id = j.at("format_id").get<std::string>();
    r.format_fingerprint = j.value("format_fingerprint", std::string{});
    r.component_count = j.value("component_count", std::size_t{0});
    r.method = j.at("method").get<std::string>();
    r.mode = j.value("mode", std::string("ranking"));
    r.uid = j.at("uid").get<std::string>();
    if (j.contains("chosen") && !j.at("chosen").is_null()) r.chosen = j.at("chosen").get<std::size_t>();
    r.gold = j.at("gold").get<std::size_t>();
    r.num_classes = j.at("num_classes").get<std::size_t>();
    r.correct = j.at("correct").get<bool>();
    if (j.contains("diagnostics")) r.diagnostics = j.at("diagnostics");
    r.elapsed_ms = j.value("elapsed_ms", 0.0);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::schema, std::string("result record: ") + e.what());
  }
}

}  // namespace fsens
