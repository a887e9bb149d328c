#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fsens/records.hpp"

namespace fsens {

/// Per-format metric values for one (task, method).
struct FormatSeries {
  std::string task;
  std::string method;
  std::map<std::string, double> values;  // format id -> value

  std::vector<double> to_vector() const;
};

/// correct / total; abstentions are incorrect. Requires >= 1 record.
double accuracy(std::span<const EvalRecord> records);

double spread(std::span<const double> values);
double spread(const FormatSeries& series);

/// Population standard deviation; needs >= 2 values.
double std_over_formats(std::span<const double> values);
double std_over_formats(const FormatSeries& series);

/// Mean of the two central values for even lengths.
double median(std::span<const double> values);

/// Linear-interpolated percentile, q in [0, 100].
double percentile(std::span<const double> values, double q);

/// Multiclass MCC (R_K) from the full confusion matrix. Abstentions count as
/// an extra predicted class. Returns 0 when a denominator factor is 0.
double mcc(std::span<const std::size_t> gold, std::span<const std::optional<std::size_t>> predicted,
           std::size_t num_classes);
double mcc(std::span<const EvalRecord> records);

/// Task -> method -> per-format values.
using SeriesTable = std::map<std::string, std::map<std::string, FormatSeries>>;

struct AggregateRow {
  std::string method;
  double mean_median = 0.0;  // mean over tasks of per-task median over formats
  double mean_std = 0.0;     // mean over tasks of per-task std over formats
  double error_bar = 0.0;    // 2 * mean_std
  double mean_spread = 0.0;
  std::size_t tasks = 0;
};

/// Throws a coverage error when tasks disagree on the method set.
std::vector<AggregateRow> aggregate(const SeriesTable& table);

enum class Verdict { method_wins, tie, baseline_wins };
std::string_view to_string(Verdict v);

struct TTestResult {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation
  double t = 0.0;
  double p = 1.0;
  double df = 0.0;
};

/// Two-sided one-sample Student t-test against mean 0. Zero variance gives
/// p = 0 (nonzero mean) or p = 1 (zero mean).
TTestResult one_sample_t_test(std::span<const double> values);

struct SignificanceVerdict {
  std::string model;
  std::string method;
  double mean_difference = 0.0;
  double t_statistic = 0.0;
  double p_value = 1.0;
  std::size_t tasks = 0;
  Verdict verdict = Verdict::tie;
};

/// d_t = spread(baseline)_t - spread(method)_t for each task, tested against
/// zero. Task sets must match exactly and hold >= 2 tasks.
SignificanceVerdict spread_diff_test(const std::map<std::string, std::vector<double>>& baseline,
                                     const std::map<std::string, std::vector<double>>& method,
                                     double alpha = 0.05, std::string model = {}, std::string method_tag = {});

/// model -> task -> method -> MCC.
using MccTable = std::map<std::string, std::map<std::string, std::map<std::string, double>>>;

struct RankRow {
  std::string method;
  double mean_rank = 0.0;                   // joint mean over (model, task) cells
  std::map<std::string, double> per_model;  // model -> mean rank over tasks
};

/// Ranks methods by MCC within each (model, task) cell (1 = best, average
/// ranks for ties) and averages. Rows are ordered by method name.
std::vector<RankRow> rank_methods(const MccTable& table);

/// shifted.mean_rank - baseline.mean_rank per method present in both.
std::map<std::string, double> rank_deltas(std::span<const RankRow> baseline, std::span<const RankRow> shifted);

struct ComplexityPoint {
  std::size_t component_count = 0;
  double mean_spread = 0.0;
  double p5 = 0.0;
  double p95 = 0.0;
  std::size_t samples = 0;
};

/// (component count, spread) samples -> mean and 5th/95th percentile per count.
std::vector<ComplexityPoint> complexity_curve(std::span<const std::pair<std::size_t, double>> samples);

/// Groups records by (model, scenario, method, task, component count), takes
/// the accuracy spread across the formats in each group, and summarizes the
/// spreads per component count.
std::vector<ComplexityPoint> spread_vs_complexity(std::span<const EvalRecord> records);

}  // namespace fsens
