// Shared fixtures and independent reference computations for the test
// binaries. The references deliberately avoid the library's own helpers.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <unistd.h>

#include "fsens/backend.hpp"
#include "fsens/format_grammar.hpp"
#include "fsens/task_data.hpp"

namespace fsens::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& stem) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("fsens_" + stem + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Two-class classification task with `per_class` instances per label,
/// interleaved so both classes appear throughout.
inline Task binary_task(const std::string& id, std::size_t per_class,
                        std::vector<std::string> labels = {"negative", "positive"}) {
  Task t;
  t.id = id;
  t.instruction = "Decide whether the review is positive or negative.";
  for (std::size_t i = 0; i < per_class * labels.size(); ++i) {
    Instance inst;
    inst.uid = id + "-" + std::to_string(i);
    inst.input = "review number " + std::to_string(i) + " says the product was " +
                 (i % 2 == 0 ? "fine overall but shipping took a while" : "a mixed bag with some good parts");
    inst.gold = labels[i % labels.size()];
    t.instances.push_back(inst);
  }
  return t;
}

/// Multiple-choice task whose gold answers cycle through the options.
inline Task choice_task(const std::string& id, std::size_t n, std::vector<std::string> options) {
  Task t;
  t.id = id;
  t.instruction = "Pick the best answer.";
  t.options = options;
  for (std::size_t i = 0; i < n; ++i) {
    t.instances.push_back({id + "-" + std::to_string(i), "question " + std::to_string(i) + " about things",
                           options[i % options.size()]});
  }
  return t;
}

/// Multi-class task with explicit per-class counts; labels c0, c1, ...
inline Task counted_task(const std::string& id, const std::vector<std::size_t>& counts) {
  Task t;
  t.id = id;
  t.instruction = "Classify.";
  std::size_t uid = 0;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    for (std::size_t i = 0; i < counts[c]; ++i) {
      t.instances.push_back({id + "-" + std::to_string(uid), "text " + std::to_string(uid), "c" + std::to_string(c)});
      ++uid;
    }
  }
  return t;
}

/// Backend wrapper that counts calls.
class CountingBackend final : public Backend {
 public:
  explicit CountingBackend(BackendPtr inner) : inner_(std::move(inner)) {}
  std::string tag() const override { return inner_->tag(); }
  Capabilities capabilities() const override { return inner_->capabilities(); }
  BackendResponse score_options(const BackendRequest& r) override {
    ++calls;
    return inner_->score_options(r);
  }
  BackendResponse generate_greedy(const BackendRequest& r) override {
    ++calls;
    return inner_->generate_greedy(r);
  }
  std::atomic<std::size_t> calls{0};

 private:
  BackendPtr inner_;
};

// ---------------------------------------------------------------------------
// Reference computations.

/// MCC as the correlation of one-hot indicator matrices:
/// cov(X, Y) / sqrt(cov(X, X) cov(Y, Y)) with cov summed over columns.
inline double ref_mcc(const std::vector<int>& gold, const std::vector<int>& pred, int classes) {
  const auto n = static_cast<double>(gold.size());
  std::vector<double> gx(static_cast<std::size_t>(classes), 0.0), py(static_cast<std::size_t>(classes), 0.0);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    gx[static_cast<std::size_t>(gold[i])] += 1.0 / n;
    py[static_cast<std::size_t>(pred[i])] += 1.0 / n;
  }
  double cxy = 0.0, cxx = 0.0, cyy = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    for (int k = 0; k < classes; ++k) {
      const double x = (gold[i] == k ? 1.0 : 0.0) - gx[static_cast<std::size_t>(k)];
      const double y = (pred[i] == k ? 1.0 : 0.0) - py[static_cast<std::size_t>(k)];
      cxy += x * y;
      cxx += x * x;
      cyy += y * y;
    }
  }
  if (cxx <= 0.0 || cyy <= 0.0) return 0.0;
  return cxy / std::sqrt(cxx * cyy);
}

/// Two-sided p value of a t statistic by Simpson integration of the density.
inline double ref_t_pvalue(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1.0) / 2.0) - std::lgamma(df / 2.0)) / std::sqrt(df * M_PI);
  auto f = [&](double x) { return c * std::pow(1.0 + x * x / df, -(df + 1.0) / 2.0); };
  const double a = std::abs(t);
  const int n = 200000;
  const double h = a / n;
  double s = f(0.0) + f(a);
  for (int i = 1; i < n; ++i) s += f(i * h) * (i % 2 == 1 ? 4.0 : 2.0);
  const double central = s * h / 3.0;
  return 1.0 - 2.0 * central;
}

/// Sample mean and sample standard deviation, two-pass.
inline std::pair<double, double> ref_mean_sd(const std::vector<double>& v) {
  long double m = 0;
  for (double x : v) m += x;
  m /= static_cast<long double>(v.size());
  long double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {static_cast<double>(m), static_cast<double>(std::sqrt(ss / static_cast<long double>(v.size() - 1)))};
}

/// Population standard deviation, two-pass in long double.
inline double ref_pop_std(const std::vector<double>& v) {
  long double m = 0;
  for (double x : v) m += x;
  m /= static_cast<long double>(v.size());
  long double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return static_cast<double>(std::sqrt(ss / static_cast<long double>(v.size())));
}

/// Batch calibration recomputed in long double: column means, then argmax of
/// the shifted row with the first maximum winning.
inline std::vector<std::size_t> ref_batch_calibrate(const std::vector<std::vector<double>>& rows) {
  const std::size_t cols = rows.front().size();
  std::vector<long double> mean(cols, 0);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < cols; ++c) mean[c] += r[c];
  }
  for (auto& m : mean) m /= static_cast<long double>(rows.size());
  std::vector<std::size_t> out;
  for (const auto& r : rows) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (r[c] - mean[c] > r[best] - mean[best]) best = c;
    }
    out.push_back(best);
  }
  return out;
}

/// Average rank of each method within one cell: 1 + #strictly better +
/// (#equal others) / 2.
inline std::map<std::string, double> ref_cell_ranks(const std::map<std::string, double>& mcc) {
  std::map<std::string, double> out;
  for (const auto& [m, v] : mcc) {
    double better = 0, equal = 0;
    for (const auto& [o, w] : mcc) {
      if (o == m) continue;
      if (w > v) better += 1;
      if (w == v) equal += 1;
    }
    out[m] = 1.0 + better + equal / 2.0;
  }
  return out;
}

/// Checks the compositional split postconditions directly.
inline bool ref_split_ok(const std::vector<FormatSpec>& train, const std::vector<FormatSpec>& test) {
  if (train.empty() || test.empty()) return false;
  std::set<std::vector<std::size_t>> train_tuples;
  std::vector<std::set<std::size_t>> seen;
  for (const auto& f : train) {
    const auto idx = f.indices();
    train_tuples.insert(idx);
    if (seen.size() < idx.size()) seen.resize(idx.size());
    for (std::size_t c = 0; c < idx.size(); ++c) seen[c].insert(idx[c]);
  }
  for (const auto& f : test) {
    const auto idx = f.indices();
    if (train_tuples.contains(idx)) return false;
    for (std::size_t c = 0; c < idx.size(); ++c) {
      if (c >= seen.size() || !seen[c].contains(idx[c])) return false;
    }
  }
  return true;
}

}  // namespace fsens::testing
