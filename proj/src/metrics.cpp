#include "fsens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <tuple>

#include <boost/math/distributions/students_t.hpp>

#include "fsens/error.hpp"
#include "fsens/kernels.hpp"

namespace fsens {
namespace {

void require(std::size_t have, std::size_t need, std::string_view what) {
  if (have < need) {
    throw Error(ErrorKind::insufficient_data, std::string(what) + " needs at least " + std::to_string(need) +
                                                  " values, got " + std::to_string(have));
  }
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> FormatSeries::to_vector() const {
  std::vector<double> out;
  out.reserve(values.size());
  for (const auto& [_, v] : values) out.push_back(v);
  return out;
}

double accuracy(std::span<const EvalRecord> records) {
  require(records.size(), 1, "accuracy");
  const auto correct = std::count_if(records.begin(), records.end(), [](const EvalRecord& r) { return r.correct; });
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

double spread(std::span<const double> values) {
  require(values.size(), 1, "spread");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return *hi - *lo;
}

double spread(const FormatSeries& series) { return spread(series.to_vector()); }

double std_over_formats(std::span<const double> values) {
  if (values.size() < 2) throw Error(ErrorKind::undefined, "std over formats needs at least 2 formats");
  const double m = mean_of(values);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

double std_over_formats(const FormatSeries& series) { return std_over_formats(series.to_vector()); }

double median(std::span<const double> values) {
  require(values.size(), 1, "median");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

double percentile(std::span<const double> values, double q) {
  require(values.size(), 1, "percentile");
  if (!(q >= 0.0 && q <= 100.0)) throw Error(ErrorKind::validation, "percentile: q must be in [0, 100]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (v[hi] - v[lo]) * (pos - static_cast<double>(lo));
}

double mcc(std::span<const std::size_t> gold, std::span<const std::optional<std::size_t>> predicted,
           std::size_t num_classes) {
  if (gold.size() != predicted.size()) throw Error(ErrorKind::shape, "mcc: gold and prediction lengths differ");
  require(gold.size(), 1, "mcc");
  if (num_classes < 2) throw Error(ErrorKind::validation, "mcc: need at least 2 classes");
  const std::size_t k = num_classes + 1;  // last column = abstain
  std::vector<std::size_t> pred(predicted.size());
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    pred[i] = predicted[i] ? *predicted[i] : num_classes;
    if (gold[i] >= num_classes || pred[i] > num_classes) {
      throw Error(ErrorKind::validation, "mcc: label out of range at row " + std::to_string(i));
    }
  }
  const auto counts = kernels::confusion_counts(gold, pred, k);

  long double s = static_cast<long double>(gold.size());
  long double c = 0;
  std::vector<long double> t(k, 0), p(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    c += counts[i * k + i];
    for (std::size_t j = 0; j < k; ++j) {
      t[i] += counts[i * k + j];
      p[j] += counts[i * k + j];
    }
  }
  long double pt = 0, pp = 0, tt = 0;
  for (std::size_t i = 0; i < k; ++i) {
    pt += p[i] * t[i];
    pp += p[i] * p[i];
    tt += t[i] * t[i];
  }
  const long double denom = (s * s - pp) * (s * s - tt);
  if (denom <= 0) return 0.0;
  return static_cast<double>((c * s - pt) / std::sqrt(denom));
}

double mcc(std::span<const EvalRecord> records) {
  require(records.size(), 1, "mcc");
  const std::size_t k = records.front().num_classes;
  std::vector<std::size_t> gold;
  std::vector<std::optional<std::size_t>> pred;
  gold.reserve(records.size());
  pred.reserve(records.size());
  for (const auto& r : records) {
    if (r.num_classes != k) throw Error(ErrorKind::validation, "mcc: records disagree on the class count");
    gold.push_back(r.gold);
    pred.push_back(r.chosen);
  }
  return mcc(gold, pred, k);
}

std::vector<AggregateRow> aggregate(const SeriesTable& table) {
  if (table.empty()) throw Error(ErrorKind::insufficient_data, "aggregate: no tasks");
  std::set<std::string> methods;
  for (const auto& [m, _] : table.begin()->second) methods.insert(m);
  for (const auto& [task, by_method] : table) {
    std::set<std::string> here;
    for (const auto& [m, _] : by_method) here.insert(m);
    if (here != methods) throw Error(ErrorKind::coverage, "aggregate: task " + task + " has a different method set");
  }
  std::vector<AggregateRow> rows;
  for (const auto& m : methods) {
    AggregateRow row;
    row.method = m;
    for (const auto& [task, by_method] : table) {
      const auto v = by_method.at(m).to_vector();
      row.mean_median += median(v);
      row.mean_std += std_over_formats(v);
      row.mean_spread += spread(v);
    }
    row.tasks = table.size();
    const auto n = static_cast<double>(row.tasks);
    row.mean_median /= n;
    row.mean_std /= n;
    row.mean_spread /= n;
    row.error_bar = 2.0 * row.mean_std;
    rows.push_back(row);
  }
  return rows;
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::method_wins: return "method_wins";
    case Verdict::tie: return "tie";
    case Verdict::baseline_wins: return "baseline_wins";
  }
  return "tie";
}

TTestResult one_sample_t_test(std::span<const double> values) {
  require(values.size(), 2, "t-test");
  TTestResult r;
  const auto n = static_cast<double>(values.size());
  r.mean = mean_of(values);
  double ss = 0.0;
  for (double v : values) ss += (v - r.mean) * (v - r.mean);
  r.sd = std::sqrt(ss / (n - 1.0));
  r.df = n - 1.0;
  // Constant inputs can leave rounding residue in the deviations.
  if (r.sd <= 1e-12 * std::max(1.0, std::abs(r.mean))) {
    r.sd = 0.0;
    if (r.mean == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = r.mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    }
    return r;
  }
  r.t = r.mean / (r.sd / std::sqrt(n));
  boost::math::students_t dist(r.df);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

SignificanceVerdict spread_diff_test(const std::map<std::string, std::vector<double>>& baseline,
                                     const std::map<std::string, std::vector<double>>& method, double alpha,
                                     std::string model, std::string method_tag) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error(ErrorKind::config, "significance level must be in (0, 1)");
  for (const auto& [task, _] : baseline) {
    if (!method.contains(task)) throw Error(ErrorKind::pairing, "task " + task + " is missing for the method");
  }
  for (const auto& [task, _] : method) {
    if (!baseline.contains(task)) throw Error(ErrorKind::pairing, "task " + task + " is missing for the baseline");
  }
  require(baseline.size(), 2, "spread difference test (tasks)");
  std::vector<double> d;
  for (const auto& [task, base] : baseline) d.push_back(spread(base) - spread(method.at(task)));
  const auto t = one_sample_t_test(d);

  SignificanceVerdict v;
  v.model = std::move(model);
  v.method = std::move(method_tag);
  v.mean_difference = t.mean;
  v.t_statistic = t.t;
  v.p_value = t.p;
  v.tasks = d.size();
  if (t.p < alpha) v.verdict = t.mean > 0 ? Verdict::method_wins : Verdict::baseline_wins;
  return v;
}

std::vector<RankRow> rank_methods(const MccTable& table) {
  std::set<std::string> methods;
  bool first = true;
  for (const auto& [model, by_task] : table) {
    for (const auto& [task, by_method] : by_task) {
      std::set<std::string> here;
      for (const auto& [m, _] : by_method) here.insert(m);
      if (first) {
        methods = here;
        first = false;
      } else if (here != methods) {
        throw Error(ErrorKind::coverage, "rank_methods: cell (" + model + ", " + task + ") has a different method set");
      }
    }
  }
  if (methods.empty()) throw Error(ErrorKind::insufficient_data, "rank_methods: no cells");

  std::map<std::string, double> total;
  std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> by_model;
  std::size_t cells = 0;
  for (const auto& [model, by_task] : table) {
    for (const auto& [task, by_method] : by_task) {
      std::vector<std::pair<std::string, double>> cell(by_method.begin(), by_method.end());
      std::stable_sort(cell.begin(), cell.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
      for (std::size_t i = 0; i < cell.size();) {
        std::size_t j = i;
        while (j < cell.size() && cell[j].second == cell[i].second) ++j;
        const double rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
        for (std::size_t k = i; k < j; ++k) {
          total[cell[k].first] += rank;
          auto& acc = by_model[cell[k].first][model];
          acc.first += rank;
          acc.second += 1;
        }
        i = j;
      }
      ++cells;
    }
  }
  std::vector<RankRow> rows;
  for (const auto& m : methods) {
    RankRow row;
    row.method = m;
    row.mean_rank = total[m] / static_cast<double>(cells);
    for (const auto& [model, acc] : by_model[m]) row.per_model[model] = acc.first / static_cast<double>(acc.second);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::map<std::string, double> rank_deltas(std::span<const RankRow> baseline, std::span<const RankRow> shifted) {
  std::map<std::string, double> out;
  for (const auto& s : shifted) {
    for (const auto& b : baseline) {
      if (b.method == s.method) out[s.method] = s.mean_rank - b.mean_rank;
    }
  }
  return out;
}

std::vector<ComplexityPoint> complexity_curve(std::span<const std::pair<std::size_t, double>> samples) {
  std::map<std::size_t, std::vector<double>> by_count;
  for (const auto& [count, s] : samples) by_count[count].push_back(s);
  std::vector<ComplexityPoint> out;
  for (const auto& [count, v] : by_count) {
    ComplexityPoint p;
    p.component_count = count;
    p.mean_spread = mean_of(v);
    p.p5 = percentile(v, 5.0);
    p.p95 = percentile(v, 95.0);
    p.samples = v.size();
    out.push_back(p);
  }
  return out;
}

std::vector<ComplexityPoint> spread_vs_complexity(std::span<const EvalRecord> records) {
  using GroupKey = std::tuple<std::string, std::string, std::string, std::string, std::size_t>;
  std::map<GroupKey, std::map<std::string, std::pair<std::size_t, std::size_t>>> groups;
  for (const auto& r : records) {
    auto& cell = groups[{r.model, r.scenario, r.method, r.task, r.component_count}][r.format_id];
    cell.first += r.correct ? 1 : 0;
    cell.second += 1;
  }
  std::vector<std::pair<std::size_t, double>> samples;
  for (const auto& [key, formats] : groups) {
    if (formats.size() < 2) continue;
    std::vector<double> acc;
    for (const auto& [_, c] : formats) acc.push_back(static_cast<double>(c.first) / static_cast<double>(c.second));
    samples.emplace_back(std::get<4>(key), spread(acc));
  }
  return complexity_curve(samples);
}

}  // namespace fsens
