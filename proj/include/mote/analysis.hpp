// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "mote/csv.hpp"
#include "mote/error.hpp"
#include "mote/model.hpp"
#include "mote/tensor.hpp"

namespace mote {

// ---------------------------------------------------------------------------
// Student-t machinery

namespace detail {

/// Continued-fraction kernel of the regularized incomplete beta function
/// (modified Lentz).
inline double beta_cf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace detail

/// Regularized incomplete beta function I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0))
    throw ConfigError("incomplete beta: a and b must be positive");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0))
    return front * detail::beta_cf(a, b, x) / a;
  return 1.0 - front * detail::beta_cf(b, a, 1.0 - x) / b;
}

/// Lower-tail Student-t CDF, P(T_df <= t). Exact 0.5 at t = 0.
inline double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw ConfigError("student_t_cdf: df must be positive");
  if (t == 0.0) return 0.5;
  const double x = df / (df + t * t);
  const double half_tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x);
  return t > 0.0 ? 1.0 - half_tail : half_tail;
}

struct WelchResult {
  double t_statistic;
  double degrees_of_freedom;
  double p_value;  // lower tail: P(T <= t), small when mean(x) << mean(y)
};

/// One-sided Welch's t-test of H_A: mean(x) < mean(y), with unbiased
/// variances and Welch-Satterthwaite degrees of freedom.
inline WelchResult welch_one_sided(const std::vector<double>& x,
                                   const std::vector<double>& y) {
  if (x.size() < 2 || y.size() < 2)
    throw EmptyBatchError("welch: both samples need at least two values");
  auto moments = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double e : v) mean += e;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double e : v) var += (e - mean) * (e - mean);
    var /= static_cast<double>(v.size() - 1);
    return std::pair<double, double>(mean, var);
  };
  const auto [mx, vx] = moments(x);
  const auto [my, vy] = moments(y);
  if (vx == 0.0 && vy == 0.0)
    throw DegenerateInputError("welch: both samples have zero variance");
  const double nx = static_cast<double>(x.size());
  const double ny = static_cast<double>(y.size());
  const double sx = vx / nx, sy = vy / ny;
  const double se = std::sqrt(sx + sy);
  WelchResult r;
  r.t_statistic = (mx - my) / se;
  r.degrees_of_freedom = (sx + sy) * (sx + sy) /
                         (sx * sx / (nx - 1.0) + sy * sy / (ny - 1.0));
  r.p_value = student_t_cdf(r.t_statistic, r.degrees_of_freedom);
  return r;
}

// ---------------------------------------------------------------------------
// Inter-task similarity study

/// Per-sequence cosine similarities between the embeddings a model produces
/// for the same text under different task instructions. Pairs are unordered
/// and stored once; lookups are symmetric.
struct SimilarityStudy {
  std::vector<std::string> tasks;
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // indices into tasks
  std::vector<std::vector<double>> rows;                   // [sequence][pair]

  std::size_t pair_index(const std::string& a, const std::string& b) const {
    std::size_t ia = task_index(a), ib = task_index(b);
    if (ia > ib) std::swap(ia, ib);
    for (std::size_t p = 0; p < pairs.size(); ++p)
      if (pairs[p] == std::make_pair(ia, ib)) return p;
    throw ConfigError("similarity study: no pair (" + a + ", " + b + ")");
  }

  double at(std::size_t sequence, const std::string& a, const std::string& b) const {
    return rows.at(sequence)[pair_index(a, b)];
  }

  /// All per-sequence values for one task pair.
  std::vector<double> column(const std::string& a, const std::string& b) const {
    const std::size_t p = pair_index(a, b);
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r[p]);
    return out;
  }

 private:
  std::size_t task_index(const std::string& t) const {
    for (std::size_t i = 0; i < tasks.size(); ++i)
      if (tasks[i] == t) return i;
    throw ConfigError("similarity study: unknown task '" + t + "'");
  }
};

/// Embeds each sequence once per task and records every unordered task-pair
/// cosine similarity.
inline SimilarityStudy inter_task_similarity(
    ModelCheckpoint& model, const std::vector<std::string>& tasks,
    const std::vector<std::vector<std::uint32_t>>& sequences,
    const Vocabulary& vocab) {
  if (tasks.size() < 2)
    throw EmptyBatchError("inter_task_similarity: need at least two tasks");
  if (sequences.size() < 2)
    throw EmptyBatchError("inter_task_similarity: need at least two sequences");
  SimilarityStudy study;
  study.tasks = tasks;
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t j = i + 1; j < tasks.size(); ++j)
      study.pairs.emplace_back(i, j);
  for (const auto& seq : sequences) {
    std::vector<Tensor> embeddings;
    embeddings.reserve(tasks.size());
    for (const std::string& t : tasks)
      embeddings.push_back(encode(model, t, seq, vocab));
    std::vector<double> row;
    row.reserve(study.pairs.size());
    for (auto [i, j] : study.pairs)
      row.push_back(cosine_similarity(embeddings[i], embeddings[j]));
    study.rows.push_back(std::move(row));
  }
  return study;
}

// ---------------------------------------------------------------------------
// Report emission (deterministic 17-significant-digit formatting)

inline void emit_similarity_csv(const SimilarityStudy& study,
                                const std::string& path) {
  CsvWriter csv(path);
  csv.raw_line("sequence,task_a,task_b,similarity");
  for (std::size_t s = 0; s < study.rows.size(); ++s)
    for (std::size_t p = 0; p < study.pairs.size(); ++p)
      csv.raw_line(std::to_string(s) + "," + study.tasks[study.pairs[p].first] +
                   "," + study.tasks[study.pairs[p].second] + "," +
                   format_g17(study.rows[s][p]));
  csv.close();
}

struct WelchReportRow {
  std::string task_a, task_b;
  std::string method_x, method_y;
  double mean_x, std_x, mean_y, std_y;
  WelchResult welch;
};

inline void emit_welch_csv(const std::vector<WelchReportRow>& rows,
                           const std::string& path) {
  CsvWriter csv(path);
  csv.raw_line(
      "task_a,task_b,method_x,mean_x,std_x,method_y,mean_y,std_y,t,df,p");
  for (const WelchReportRow& r : rows)
    csv.raw_line(r.task_a + "," + r.task_b + "," + r.method_x + "," +
                 format_g17(r.mean_x) + "," + format_g17(r.std_x) + "," +
                 r.method_y + "," + format_g17(r.mean_y) + "," +
                 format_g17(r.std_y) + "," + format_g17(r.welch.t_statistic) +
                 "," + format_g17(r.welch.degrees_of_freedom) + "," +
                 format_g17(r.welch.p_value));
  csv.close();
}

/// Compares two models' inter-task similarity studies pair by pair with the
/// one-sided Welch test (H_A: method x sits lower than method y).
inline std::vector<WelchReportRow> compare_similarity_studies(
    const SimilarityStudy& x_study, const std::string& x_label,
    const SimilarityStudy& y_study, const std::string& y_label) {
  if (x_study.tasks != y_study.tasks)
    throw ConfigError("similarity comparison: task lists differ");
  std::vector<WelchReportRow> rows;
  auto stats = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double e : v) mean += e;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double e : v) var += (e - mean) * (e - mean);
    var /= static_cast<double>(v.size() - 1);
    return std::pair<double, double>(mean, std::sqrt(var));
  };
  for (auto [i, j] : x_study.pairs) {
    const std::string& ta = x_study.tasks[i];
    const std::string& tb = x_study.tasks[j];
    WelchReportRow row;
    row.task_a = ta;
    row.task_b = tb;
    row.method_x = x_label;
    row.method_y = y_label;
    const std::vector<double> xs = x_study.column(ta, tb);
    const std::vector<double> ys = y_study.column(ta, tb);
    const auto [mx, sx] = stats(xs);
    const auto [my, sy] = stats(ys);
    row.mean_x = mx;
    row.std_x = sx;
    row.mean_y = my;
    row.std_y = sy;
    row.welch = welch_one_sided(xs, ys);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace mote
