#include <doctest.h>

#include <fstream>
#include <sstream>

#include "fsens/error.hpp"
#include "fsens/rng.hpp"
#include "fsens/runner.hpp"
#include "support.hpp"

using namespace fsens;
using fsens::testing::TempDir;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::undefined;
}

std::string error_text(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

MethodConfig method(Method m) {
  MethodConfig c;
  c.method = m;
  return c;
}

nlohmann::json synthetic_spec(const std::string& tag = "syn") {
  return {{"tag", tag}, {"kind", "synthetic"}, {"seed", 7}, {"signal", 1.0}, {"bias", {1.0, 0.0}}, {"noise", 0.5}};
}

RunConfig small_config(std::size_t n_eval, std::size_t formats, std::vector<Method> methods) {
  RunConfig c;
  c.backends = {synthetic_spec()};
  c.n_eval = n_eval;
  c.format_count = formats;
  c.seed = 11;
  c.concurrency = 3;
  for (auto m : methods) c.methods.push_back(method(m));
  return c;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) {
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::multiset<std::string> keys_of(const std::vector<EvalRecord>& rs) {
  std::multiset<std::string> out;
  for (const auto& r : rs) out.insert(r.key());
  return out;
}

/// Throws for one (instance, format) pair.
class FailOnce final : public Backend {
 public:
  FailOnce(BackendPtr inner, std::string uid, std::string fingerprint)
      : inner_(std::move(inner)), uid_(std::move(uid)), fp_(std::move(fingerprint)) {}
  std::string tag() const override { return inner_->tag(); }
  Capabilities capabilities() const override { return inner_->capabilities(); }
  BackendResponse score_options(const BackendRequest& r) override {
    if (r.context.instance_uid == uid_ && r.context.format_fingerprint == fp_) {
      throw Error(ErrorKind::transport, "simulated outage");
    }
    return inner_->score_options(r);
  }
  BackendResponse generate_greedy(const BackendRequest& r) override { return inner_->generate_greedy(r); }

 private:
  BackendPtr inner_;
  std::string uid_, fp_;
};

}  // namespace

TEST_CASE("config parsing") {
  const nlohmann::json doc = {
      {"seed", 5},
      {"backends", {synthetic_spec()}},
      {"task_path", "tasks"},
      {"methods", {"few_shot_ranking", {{"name", "sensitivity_aware"}, {"alpha", 0.5}}}},
      {"scenario", "imbalance"},
  };
  const auto c = RunConfig::from_json(doc, "/base");
  CHECK(c.seed == 5);
  CHECK(c.task_path == std::filesystem::path("/base/tasks"));
  REQUIRE(c.methods.size() == 2);
  CHECK(c.methods[1].alpha == 0.5);
  CHECK(c.scenario == Scenario::imbalance);

  auto no_seed = doc;
  no_seed.erase("seed");
  CHECK(kind_of([&] { RunConfig::from_json(no_seed); }) == ErrorKind::validation);
  auto typo = doc;
  typo["n_evals"] = 3;
  CHECK(kind_of([&] { RunConfig::from_json(typo); }) == ErrorKind::config);
}

TEST_CASE("validation lists every offender") {
  auto c = small_config(10, 2, {Method::batch_calibration, Method::sensitivity_aware, Method::few_shot_greedy});
  c.mode = RequestMode::greedy;
  const auto msg = error_text([&] { c.validate(); });
  CHECK(msg.find("batch_calibration") != std::string::npos);
  CHECK(msg.find("sensitivity_aware") != std::string::npos);
  CHECK(msg.find("few_shot_greedy") == std::string::npos);
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::validation);

  auto chat_only = small_config(10, 2, {Method::template_ensemble_avg});
  chat_only.backends = {{{"tag", "c"}, {"kind", "http"}, {"base_url", "http://x"}, {"supports_logprobs", false}}};
  CHECK(error_text([&] { chat_only.validate(); }).find("template_ensemble_avg") != std::string::npos);
}

TEST_CASE("plan cardinality and determinism") {
  const std::vector<Task> tasks{fsens::testing::binary_task("task601", 60), fsens::testing::binary_task("task602", 60)};
  const auto c = small_config(100, 10, {Method::few_shot_ranking, Method::batch_calibration,
                                        Method::template_ensemble_vote});
  const auto p = plan(c, tasks);
  CHECK(p.unit_count() == 6000);
  const auto keys = p.unit_keys();
  CHECK(keys.size() == 6000);
  CHECK(std::set<std::string>(keys.begin(), keys.end()).size() == 6000);
  CHECK(plan(c, tasks).fingerprint() == p.fingerprint());
  CHECK(p.fingerprint().size() == 64);

  auto other = c;
  other.seed = 12;
  CHECK(plan(other, tasks).fingerprint() != p.fingerprint());

  for (const auto& t : p.tasks) {
    std::set<std::string> eval;
    for (const auto& i : t.task.instances) eval.insert(i.uid);
    for (const auto& d : t.demonstrations) CHECK_FALSE(eval.contains(d.uid));
    CHECK(t.demonstrations.size() == 2);
  }
}

TEST_CASE("compositional plans evaluate only the test side") {
  const std::vector<Task> tasks{fsens::testing::choice_task("task603", 40, {"a", "b", "c"}),
                                fsens::testing::binary_task("task604", 20)};
  auto c = small_config(20, 10, {Method::few_shot_ranking});
  c.scenario = Scenario::compositional;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    c.seed = seed;
    const auto p = plan(c, tasks);
    for (const auto& t : p.tasks) {
      CHECK(fsens::testing::ref_split_ok(t.train_formats, t.formats));
      CHECK(t.formats.size() + t.train_formats.size() == 10);
    }
  }
}

TEST_CASE("imbalance plans downsample the evaluation set") {
  const std::vector<Task> tasks{fsens::testing::binary_task("task605", 200)};
  auto c = small_config(300, 2, {Method::few_shot_ranking});
  c.scenario = Scenario::imbalance;
  const auto p = plan(c, tasks);
  std::map<std::string, std::size_t> counts;
  for (const auto& i : p.tasks[0].task.instances) ++counts[i.gold];
  const double major = static_cast<double>(std::max(counts["negative"], counts["positive"]));
  const double frac = major / static_cast<double>(p.tasks[0].task.instances.size());
  CHECK(frac >= 0.88);
  CHECK(frac <= 0.92);
}

TEST_CASE("execute: record through a cache, replay through a scripted backend") {
  TempDir dir("exec");
  const std::vector<Task> tasks{fsens::testing::binary_task("task606", 30)};

  auto rec_cfg = small_config(50, 2, {Method::few_shot_ranking});
  rec_cfg.cache_dir = dir / "cache";
  const auto rec_plan = plan(rec_cfg, tasks);
  REQUIRE(rec_plan.unit_count() == 100);
  const auto rec_summary = execute(rec_plan, build_backends(rec_plan), dir / "recorded.jsonl");
  CHECK(rec_summary.written == 100);
  CHECK(rec_summary.exit_code() == 0);

  auto cfg = small_config(50, 2, {Method::few_shot_ranking});
  cfg.backends = {{{"tag", "replay"}, {"kind", "scripted"}, {"fixture", (dir / "cache" / "syn.jsonl").string()},
                   {"source_tag", "syn"}}};
  const auto p = plan(cfg, tasks);
  const auto backends = build_backends(p);

  const auto full = execute(p, backends, dir / "full.jsonl");
  CHECK(full.planned == 100);
  CHECK(full.written == 100);
  CHECK(full.failed == 0);
  CHECK(full.exit_code() == 0);
  const auto full_records = read_results(dir / "full.jsonl");
  CHECK(keys_of(full_records).size() == 100);
  const auto planned_keys = p.unit_keys();
  CHECK(std::set<std::string>(planned_keys.begin(), planned_keys.end()) ==
        [&] {
          std::set<std::string> s;
          for (const auto& r : full_records) s.insert(r.key());
          return s;
        }());
  // Replayed choices equal the recorded ones.
  const auto recorded = read_results(dir / "recorded.jsonl");
  std::map<std::string, std::optional<std::size_t>> by_uid_fmt;
  for (const auto& r : recorded) by_uid_fmt[r.uid + r.format_id] = r.chosen;
  for (const auto& r : full_records) CHECK(by_uid_fmt.at(r.uid + r.format_id) == r.chosen);

  SUBCASE("interrupt after 50 units, then resume") {
    ExecuteOptions first;
    first.max_units = 50;
    const auto a = execute(p, backends, dir / "resumed.jsonl", first);
    CHECK(a.written == 50);
    CHECK(a.interrupted);
    const auto after_first = keys_of(read_results(dir / "resumed.jsonl"));
    CHECK(after_first.size() == 50);

    CHECK(kind_of([&] { execute(p, backends, dir / "resumed.jsonl"); }) == ErrorKind::validation);

    ExecuteOptions again;
    again.resume = true;
    const auto b = execute(p, backends, dir / "resumed.jsonl", again);
    CHECK(b.already_done == 50);
    CHECK(b.written == 50);
    const auto final_records = read_results(dir / "resumed.jsonl");
    const auto final_keys = keys_of(final_records);
    CHECK(final_keys.size() == 100);
    CHECK(std::set<std::string>(final_keys.begin(), final_keys.end()).size() == 100);
    for (const auto& k : after_first) CHECK(final_keys.count(k) == 1);
    CHECK(final_keys == keys_of(full_records));

    // A third resume has nothing left to do.
    const auto c = execute(p, backends, dir / "resumed.jsonl", again);
    CHECK(c.written == 0);
    CHECK(c.already_done == 100);
  }

  SUBCASE("one failing prompt") {
    const auto& t = p.tasks[0];
    const auto fp = format_fingerprint(p.catalog, t.formats[1]);
    auto failing = std::map<std::string, BackendPtr>{
        {"replay", std::make_shared<FailOnce>(backends.at("replay"), t.task.instances[7].uid, fp)}};
    const auto s = execute(p, failing, dir / "failing.jsonl");
    CHECK(s.written == 99);
    CHECK(s.failed == 1);
    CHECK(s.exit_code() == kExitPartialFailure);
    CHECK(lines_of(dir / "failing.jsonl").size() == 99);
    const auto failures = lines_of(dir / "failing.jsonl.failures.jsonl");
    REQUIRE(failures.size() == 1);
    CHECK(failures[0].find(t.task.instances[7].uid) != std::string::npos);
    CHECK(s.written + s.failed == s.planned);
  }
}

TEST_CASE("results reader tolerates a torn last line and extra fields") {
  TempDir dir("read");
  EvalRecord r;
  r.model = "m";
  r.task = "t";
  r.format_id = "f0.0.0";
  r.method = "few_shot_ranking";
  r.uid = "t-0";
  r.chosen = 1;
  r.gold = 1;
  r.num_classes = 2;
  r.correct = true;
  auto j = record_to_json(r);
  j["future_field"] = {1, 2};
  std::ofstream(dir / "r.jsonl") << j.dump() << "\n" << R"({"model": "m", "ta)";
  const auto rs = read_results(dir / "r.jsonl");
  REQUIRE(rs.size() == 1);
  CHECK(rs[0].key() == r.key());
  CHECK(rs[0].chosen == 1u);
}

namespace {

std::vector<EvalRecord> fixture_records(std::uint64_t seed, std::size_t tasks, std::size_t formats,
                                        const std::vector<std::string>& methods) {
  Rng rng(seed);
  std::vector<EvalRecord> out;
  for (std::size_t t = 0; t < tasks; ++t) {
    for (const auto& m : methods) {
      for (std::size_t f = 0; f < formats; ++f) {
        for (std::size_t i = 0; i < 20; ++i) {
          EvalRecord r;
          r.model = "model";
          r.task = "task" + std::to_string(t);
          r.format_id = "f" + std::to_string(f) + ".1.2";
          r.format_fingerprint = "fp" + std::to_string(f);
          r.component_count = f % 3;
          r.method = m;
          r.uid = r.task + "-" + std::to_string(i);
          r.gold = i % 2;
          r.num_classes = 2;
          r.chosen = rng.uniform() < 0.7 ? r.gold : 1 - r.gold;
          r.correct = r.chosen == r.gold;
          out.push_back(r);
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("report is byte-stable and complete") {
  const auto rs = fixture_records(1, 4, 5, {"few_shot_ranking", "batch_calibration"});
  const auto a = report(rs);
  const auto b = report(rs);
  CHECK(a == b);
  for (const auto* name : {"aggregate.csv", "task_spreads.csv", "verdicts.csv", "wins_ties_losses.csv", "rankings.csv",
                           "greedy_vs_ranking.csv", "spread_vs_complexity.csv", "report.md"}) {
    CHECK(a.contains(name));
  }
  // Record order does not matter.
  auto shuffled = rs;
  Rng rng(2);
  rng.shuffle(std::span<EvalRecord>(shuffled));
  CHECK(report(shuffled) == a);

  TempDir dir("report");
  write_report(a, dir.path());
  write_report(b, dir / "again");
  for (const auto& [name, content] : a) {
    CHECK(slurp(dir / name) == content);
    CHECK(slurp(dir / "again" / name) == content);
  }
  CHECK(a.at("report.md").find("## Gaps\n\nNone.") != std::string::npos);
}

TEST_CASE("identical methods tie everywhere") {
  auto rs = fixture_records(3, 5, 4, {"few_shot_ranking"});
  const auto n = rs.size();
  for (std::size_t i = 0; i < n; ++i) {
    auto copy = rs[i];
    copy.method = "template_ensemble_vote";
    rs.push_back(copy);
  }
  const auto bundle = report(rs);
  const auto& v = bundle.at("verdicts.csv");
  CHECK(v.find("template_ensemble_vote") != std::string::npos);
  CHECK(v.find(",tie\n") != std::string::npos);
  CHECK(v.find("method_wins") == std::string::npos);
  CHECK(v.find("baseline_wins") == std::string::npos);
  CHECK(bundle.at("wins_ties_losses.csv").find("template_ensemble_vote,0,1,0") != std::string::npos);
}

TEST_CASE("partial coverage produces a gaps section instead of failing") {
  auto rs = fixture_records(4, 3, 4, {"few_shot_ranking", "batch_calibration"});
  std::erase_if(rs, [](const EvalRecord& r) { return r.task == "task1" && r.method == "batch_calibration"; });
  const auto bundle = report(rs);
  const auto& md = bundle.at("report.md");
  const auto gaps = md.find("## Gaps");
  REQUIRE(gaps != std::string::npos);
  CHECK(md.find("task1: no records for batch_calibration", gaps) != std::string::npos);
}
