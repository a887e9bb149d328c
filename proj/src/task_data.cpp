#include "fsens/task_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "fsens/error.hpp"
#include "fsens/hash.hpp"
#include "fsens/rng.hpp"

namespace fsens {
namespace {

std::string id_from_stem(const std::string& stem) {
  const auto pos = stem.find('_');
  return pos == std::string::npos ? stem : stem.substr(0, pos);
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open task file " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Task subset(const Task& task, std::vector<std::size_t> keep) {
  std::sort(keep.begin(), keep.end());
  Task out = task;
  out.instances.clear();
  out.instances.reserve(keep.size());
  for (auto i : keep) out.instances.push_back(task.instances[i]);
  return out;
}

}  // namespace

std::vector<std::string> Task::label_space() const {
  if (options) return *options;
  std::vector<std::string> labels;
  for (const auto& inst : instances) labels.push_back(inst.gold);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

std::optional<std::size_t> Task::class_index(const std::string& label) const {
  const auto labels = label_space();
  const auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) return std::nullopt;
  return static_cast<std::size_t>(it - labels.begin());
}

void Task::validate() const {
  if (id.empty()) throw Error(ErrorKind::validation, "task id is empty");
  if (instances.empty()) throw Error(ErrorKind::validation, "task " + id + " has no instances");
  std::set<std::string> seen;
  for (const auto& inst : instances) {
    if (inst.gold.empty()) throw Error(ErrorKind::validation, "task " + id + ": instance " + inst.uid + " has an empty label");
    if (!seen.insert(inst.uid).second) {
      throw Error(ErrorKind::validation, "task " + id + ": duplicate instance uid " + inst.uid);
    }
    if (options && std::find(options->begin(), options->end(), inst.gold) == options->end()) {
      throw Error(ErrorKind::validation,
                  "task " + id + ": instance " + inst.uid + " label '" + inst.gold + "' is not one of the options");
    }
  }
}

const std::vector<std::string>& default_task_ids() {
  static const std::vector<std::string> ids = {
      "task050",  "task065",  "task069",  "task070",  "task114",  "task133",  "task155",  "task158",  "task161",
      "task162",  "task163",  "task213",  "task214",  "task220",  "task279",  "task280",  "task286",  "task296",
      "task297",  "task316",  "task317",  "task319",  "task320",  "task322",  "task323",  "task325",  "task326",
      "task327",  "task328",  "task335",  "task337",  "task385",  "task580",  "task607",  "task608",  "task609",
      "task904",  "task905",  "task1186", "task1283", "task1284", "task1297", "task1347", "task1387", "task1419",
      "task1420", "task1421", "task1423", "task1502", "task1612", "task1678", "task1724",
  };
  return ids;
}

Task task_from_json(const nlohmann::json& doc, const std::string& file_stem, const std::string& source_hash) {
  auto fail = [&](const std::string& what) { throw Error(ErrorKind::schema, "task " + file_stem + ": " + what); };
  if (!doc.is_object()) fail("document must be an object");

  Task task;
  task.id = doc.contains("Id") ? doc.at("Id").get<std::string>() : id_from_stem(file_stem);
  task.source_hash = source_hash;

  if (!doc.contains("Definition")) fail("missing 'Definition'");
  const auto& def = doc.at("Definition");
  if (def.is_string()) {
    task.instruction = def.get<std::string>();
  } else if (def.is_array()) {
    for (std::size_t i = 0; i < def.size(); ++i) {
      if (!def[i].is_string()) fail("'Definition' entries must be strings");
      if (i) task.instruction += "\n";
      task.instruction += def[i].get<std::string>();
    }
  } else {
    fail("'Definition' must be a string or list of strings");
  }

  if (doc.contains("Options")) {
    const auto& opts = doc.at("Options");
    if (!opts.is_array()) fail("'Options' must be a list of strings");
    std::vector<std::string> options;
    for (const auto& o : opts) {
      if (!o.is_string()) fail("'Options' must be a list of strings");
      options.push_back(o.get<std::string>());
    }
    task.options = std::move(options);
  }
  if (doc.contains("Descriptors")) {
    const auto& d = doc.at("Descriptors");
    if (!d.is_array() || d.size() != 2 || !d[0].is_string() || !d[1].is_string()) {
      fail("'Descriptors' must be [input descriptor, output descriptor]");
    }
    task.descriptors = {d[0].get<std::string>(), d[1].get<std::string>()};
  }

  if (!doc.contains("Instances") || !doc.at("Instances").is_array()) fail("missing 'Instances' list");
  const auto& instances = doc.at("Instances");
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& rec = instances[i];
    const std::string where = "instance #" + std::to_string(i);
    if (!rec.is_object() || !rec.contains("input") || !rec.at("input").is_string()) {
      fail(where + " is malformed (needs string 'input')");
    }
    Instance inst;
    inst.uid = rec.contains("id") && rec.at("id").is_string() ? rec.at("id").get<std::string>()
                                                              : task.id + "-" + std::to_string(i);
    inst.input = rec.at("input").get<std::string>();
    if (!rec.contains("output")) fail(where + " (" + inst.uid + ") has no 'output'");
    const auto& out = rec.at("output");
    if (out.is_string()) {
      inst.gold = out.get<std::string>();
    } else if (out.is_array() && !out.empty() && out[0].is_string()) {
      inst.gold = out[0].get<std::string>();
    } else if (out.is_array() && out.empty()) {
      throw Error(ErrorKind::validation, "task " + task.id + ": instance " + inst.uid + " has an empty label");
    } else {
      fail(where + " (" + inst.uid + ") 'output' must be a string or list of strings");
    }
    task.instances.push_back(std::move(inst));
  }
  task.validate();
  return task;
}

nlohmann::json task_to_json(const Task& task) {
  nlohmann::json doc;
  doc["Id"] = task.id;
  doc["Definition"] = nlohmann::json::array({task.instruction});
  if (task.options) doc["Options"] = *task.options;
  doc["Descriptors"] = {task.descriptors.input, task.descriptors.output};
  nlohmann::json instances = nlohmann::json::array();
  for (const auto& inst : task.instances) {
    instances.push_back({{"id", inst.uid}, {"input", inst.input}, {"output", nlohmann::json::array({inst.gold})}});
  }
  doc["Instances"] = std::move(instances);
  return doc;
}

std::vector<Task> load_tasks(const std::filesystem::path& path,
                             const std::optional<std::vector<std::string>>& allowed_ids) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  if (fs::is_regular_file(path)) {
    files.push_back(path);
  } else if (fs::is_directory(path)) {
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    throw Error(ErrorKind::io, "task source " + path.string() + " does not exist");
  }

  std::optional<std::set<std::string>> wanted;
  if (allowed_ids) wanted = std::set<std::string>(allowed_ids->begin(), allowed_ids->end());

  std::map<std::string, Task> by_id;
  std::vector<std::string> order;
  for (const auto& file : files) {
    const auto stem = file.stem().string();
    if (wanted && !wanted->count(id_from_stem(stem))) continue;
    const auto raw = read_file(file);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorKind::schema, "task file " + file.string() + " is not valid JSON: " + e.what());
    }
    Task task = task_from_json(doc, stem, sha256_hex(raw));
    if (wanted && !wanted->count(task.id)) continue;
    if (by_id.count(task.id)) throw Error(ErrorKind::validation, "duplicate task id " + task.id + " in " + path.string());
    order.push_back(task.id);
    by_id.emplace(task.id, std::move(task));
  }

  std::vector<Task> out;
  if (allowed_ids) {
    for (const auto& id : *allowed_ids) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw Error(ErrorKind::validation, "unknown task id " + id + " (not found in " + path.string() + ")");
      out.push_back(it->second);
    }
  } else {
    for (const auto& id : order) out.push_back(by_id.at(id));
  }
  return out;
}

void write_task(const Task& task, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw Error(ErrorKind::io, "cannot write task file " + file.string());
  out << task_to_json(task).dump(2) << '\n';
}

Task eval_subsample(const Task& task, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error(ErrorKind::validation, "eval_subsample: n must be at least 1");
  std::vector<std::size_t> idx(task.instances.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  idx.resize(std::min(n, idx.size()));
  return subset(task, std::move(idx));
}

Task imbalance_downsample(const Task& task, double majority_ratio, std::uint64_t seed) {
  if (!(majority_ratio > 0.0 && majority_ratio < 1.0)) {
    throw Error(ErrorKind::validation, "imbalance_downsample: majority_ratio must be in (0, 1)");
  }
  const auto labels = task.label_space();
  if (labels.size() < 2) throw Error(ErrorKind::infeasible_shift, "task " + task.id + " has fewer than 2 classes");

  std::vector<std::vector<std::size_t>> members(labels.size());
  for (std::size_t i = 0; i < task.instances.size(); ++i) {
    members[*task.class_index(task.instances[i].gold)].push_back(i);
  }
  for (std::size_t c = 0; c < labels.size(); ++c) {
    if (members[c].empty()) {
      throw Error(ErrorKind::infeasible_shift, "task " + task.id + ": class '" + labels[c] + "' has no instances");
    }
  }
  // Most frequent class; ties go to the earlier label.
  std::size_t major = 0;
  for (std::size_t c = 1; c < labels.size(); ++c) {
    if (members[c].size() > members[major].size()) major = c;
  }
  const std::size_t minor_classes = labels.size() - 1;

  // Per-class take for output size n, or nothing if infeasible.
  auto allocate = [&](std::size_t n, bool exact) -> std::optional<std::vector<std::size_t>> {
    const double share = majority_ratio * static_cast<double>(n);
    const auto m = static_cast<std::size_t>(std::floor(share + 1e-9));
    if (exact && std::abs(share - static_cast<double>(m)) > 1e-9) return std::nullopt;
    if (m > members[major].size() || m >= n) return std::nullopt;
    const double frac = static_cast<double>(m) / static_cast<double>(n);
    if (frac < 0.88 - 1e-12 || frac > 0.92 + 1e-12) return std::nullopt;
    const std::size_t rest = n - m;
    const std::size_t base = rest / minor_classes;
    std::size_t leftover = rest % minor_classes;
    std::vector<std::size_t> take(labels.size(), 0);
    take[major] = m;
    for (std::size_t c = 0; c < labels.size(); ++c) {
      if (c == major) continue;
      if (members[c].size() < base) return std::nullopt;
      take[c] = base;
    }
    for (std::size_t c = 0; c < labels.size() && leftover > 0; ++c) {
      if (c == major || members[c].size() < base + 1) continue;
      ++take[c];
      --leftover;
    }
    if (leftover > 0) return std::nullopt;
    return take;
  };

  std::optional<std::vector<std::size_t>> take;
  for (bool exact : {true, false}) {
    for (std::size_t n = task.instances.size(); n >= 10 && !take; --n) take = allocate(n, exact);
    if (take) break;
  }
  if (!take) {
    throw Error(ErrorKind::infeasible_shift, "task " + task.id + ": cannot build a " +
                                                 std::to_string(majority_ratio) + " majority split of at least 10 instances");
  }

  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    auto pool = members[c];
    Rng rng(derive_seed(seed, labels[c]));
    rng.shuffle(std::span<std::size_t>(pool));
    keep.insert(keep.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>((*take)[c]));
  }
  return subset(task, std::move(keep));
}

Task train_split(const Task& task, const std::set<std::string>& eval_uids) {
  std::set<std::string> known;
  for (const auto& inst : task.instances) known.insert(inst.uid);
  for (const auto& uid : eval_uids) {
    if (!known.count(uid)) throw Error(ErrorKind::validation, "train_split: uid " + uid + " is not in task " + task.id);
  }
  Task out = task;
  out.instances.clear();
  for (const auto& inst : task.instances) {
    if (!eval_uids.count(inst.uid)) out.instances.push_back(inst);
  }
  if (out.instances.empty()) {
    throw Error(ErrorKind::insufficient_data, "task " + task.id + ": no instances left outside the evaluation set");
  }
  return out;
}

std::vector<Instance> pick_demonstrations(const Task& train, std::size_t count, std::uint64_t seed) {
  if (count > train.instances.size()) {
    throw Error(ErrorKind::insufficient_data, "task " + train.id + ": need " + std::to_string(count) +
                                                  " demonstrations, have " + std::to_string(train.instances.size()));
  }
  std::vector<std::size_t> idx(train.instances.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(idx));
  std::vector<Instance> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(train.instances[idx[i]]);
  return out;
}

}  // namespace fsens
