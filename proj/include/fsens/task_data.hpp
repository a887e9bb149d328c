#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace fsens {

struct Instance {
  std::string uid;
  std::string input;
  std::string gold;

  bool operator==(const Instance&) const = default;
};

struct Descriptors {
  std::string input = "question";
  std::string output = "answer";

  bool operator==(const Descriptors&) const = default;
};

/// A classification or multiple-choice task.
///
/// When `options` is set the task is multiple-choice: options are rendered
/// into the prompt and every gold label must be one of them. Otherwise the
/// task is a classification task whose label space is the sorted set of gold
/// labels and whose formats use only the first three components.
struct Task {
  std::string id;
  std::string instruction;
  std::optional<std::vector<std::string>> options;
  std::vector<Instance> instances;
  Descriptors descriptors;
  std::string source_hash;

  bool has_options() const { return options.has_value(); }

  /// Ordered answer classes: the options, or the sorted distinct gold labels.
  std::vector<std::string> label_space() const;

  /// Index of `label` in label_space(), if present.
  std::optional<std::size_t> class_index(const std::string& label) const;

  /// Throws validation errors for empty ids/instances, empty gold labels,
  /// gold labels outside the options.
  void validate() const;

  /// Structural equality; source_hash is provenance and is ignored.
  bool operator==(const Task& o) const {
    return id == o.id && instruction == o.instruction && options == o.options && instances == o.instances &&
           descriptors == o.descriptors;
  }
};

/// The 52 evaluation task ids, in their published order.
const std::vector<std::string>& default_task_ids();

/// Parses one Natural-Instructions v2 task document. `file_stem` supplies the
/// task id (prefix up to the first underscore) and fallback instance uids.
Task task_from_json(const nlohmann::json& doc, const std::string& file_stem,
                    const std::string& source_hash = {});

/// Serializes back to the same layout; task_from_json(task_to_json(t)) == t.
nlohmann::json task_to_json(const Task& task);

/// Loads every *.json task in `path` (or the single file `path`), filtered to
/// and ordered by `allowed_ids` when given.
std::vector<Task> load_tasks(const std::filesystem::path& path,
                             const std::optional<std::vector<std::string>>& allowed_ids = std::nullopt);

void write_task(const Task& task, const std::filesystem::path& file);

/// min(n, size) instances sampled without replacement; survivors keep their
/// original relative order.
Task eval_subsample(const Task& task, std::size_t n, std::uint64_t seed);

/// Skews the label distribution so the most frequent class makes up
/// `majority_ratio` of the output and the other classes split the rest.
Task imbalance_downsample(const Task& task, double majority_ratio, std::uint64_t seed);

/// Instances whose uid is not in `eval_uids`.
Task train_split(const Task& task, const std::set<std::string>& eval_uids);

/// First `count` instances of `train` under a seeded shuffle.
std::vector<Instance> pick_demonstrations(const Task& train, std::size_t count, std::uint64_t seed);

}  // namespace fsens
