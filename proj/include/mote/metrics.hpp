// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mote/error.hpp"

namespace mote {

/// A system-ranked list: item ids with their true relevance, in ranked
/// order. The ideal ordering is derived from the same relevance multiset.
struct RankedItem {
  std::string id;
  unsigned relevance;
};
using RankedResult = std::vector<RankedItem>;

/// NDCG@k with gains 2^rel - 1 and log2(i+1) discounts. All-zero relevance
/// (IDCG = 0) evaluates to 0.
inline double ndcg_at_k(const RankedResult& ranked, std::size_t k) {
  if (k == 0) throw ConfigError("ndcg_at_k: k must be positive");
  auto dcg = [&](const std::vector<unsigned>& rels) {
    double sum = 0.0;
    const std::size_t upto = std::min(k, rels.size());
    for (std::size_t i = 0; i < upto; ++i)
      sum += (std::exp2(static_cast<double>(rels[i])) - 1.0) /
             std::log2(static_cast<double>(i) + 2.0);
    return sum;
  };
  std::vector<unsigned> given;
  given.reserve(ranked.size());
  for (const RankedItem& r : ranked) given.push_back(r.relevance);
  std::vector<unsigned> ideal = given;
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  const double idcg = dcg(ideal);
  if (idcg == 0.0) return 0.0;
  return dcg(given) / idcg;
}

/// Classification accuracy from confusion counts.
inline double accuracy(std::size_t tp, std::size_t tn, std::size_t fp,
                       std::size_t fn) {
  const std::size_t total = tp + tn + fp + fn;
  if (total == 0) throw UndefinedMetricError("accuracy: empty evaluation");
  return static_cast<double>(tp + tn) / static_cast<double>(total);
}

/// Per-item (true class, predicted cluster) assignments with opaque labels.
struct LabeledClustering {
  std::vector<std::pair<int, int>> items;  // (class, cluster)
};

struct VMeasure {
  double homogeneity;
  double completeness;
  double v;
};

/// V-measure from natural-log entropies of the empirical contingency table.
/// Degenerate marginals follow the usual convention: H(C)=0 gives
/// homogeneity 1, H(K)=0 gives completeness 1, and v=0 when both scores
/// vanish.
inline VMeasure v_measure(const LabeledClustering& labeled, double beta = 1.0) {
  if (labeled.items.empty()) throw UndefinedMetricError("v_measure: no items");
  if (!(beta > 0.0)) throw ConfigError("v_measure: beta must be positive");
  const double n = static_cast<double>(labeled.items.size());
  std::map<std::pair<int, int>, std::size_t> joint;
  std::map<int, std::size_t> class_count, cluster_count;
  for (auto [c, k] : labeled.items) {
    ++joint[{c, k}];
    ++class_count[c];
    ++cluster_count[k];
  }
  auto entropy = [&](const std::map<int, std::size_t>& counts) {
    double h = 0.0;
    for (auto& [label, cnt] : counts) {
      const double p = static_cast<double>(cnt) / n;
      h -= p * std::log(p);
    }
    return h;
  };
  const double h_c = entropy(class_count);
  const double h_k = entropy(cluster_count);
  double h_c_given_k = 0.0, h_k_given_c = 0.0;
  for (auto& [ck, cnt] : joint) {
    const double p = static_cast<double>(cnt) / n;
    h_c_given_k -= p * std::log(static_cast<double>(cnt) /
                                static_cast<double>(cluster_count[ck.second]));
    h_k_given_c -= p * std::log(static_cast<double>(cnt) /
                                static_cast<double>(class_count[ck.first]));
  }
  VMeasure out;
  out.homogeneity = h_c == 0.0 ? 1.0 : 1.0 - h_c_given_k / h_c;
  out.completeness = h_k == 0.0 ? 1.0 : 1.0 - h_k_given_c / h_k;
  const double denom = beta * out.homogeneity + out.completeness;
  out.v = denom == 0.0 ? 0.0
                       : (1.0 + beta) * out.homogeneity * out.completeness / denom;
  return out;
}

/// Average precision over a ranked list of positive/negative labels:
/// (1/P) * sum_k k / rank(k), ranks 1-based.
inline double average_precision(const std::vector<bool>& ranked_is_positive) {
  std::size_t positives = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < ranked_is_positive.size(); ++i) {
    if (!ranked_is_positive[i]) continue;
    ++positives;
    sum += static_cast<double>(positives) / static_cast<double>(i + 1);
  }
  if (positives == 0)
    throw UndefinedMetricError("average_precision: no positive pairs");
  return sum / static_cast<double>(positives);
}

inline double mean_average_precision(
    const std::vector<std::vector<bool>>& per_query) {
  if (per_query.empty())
    throw UndefinedMetricError("mean_average_precision: no queries");
  double sum = 0.0;
  for (const auto& q : per_query) sum += average_precision(q);
  return sum / static_cast<double>(per_query.size());
}

/// Parallel predicted/reference score lists.
struct ScoredPairs {
  std::vector<double> predicted;
  std::vector<double> reference;
};

namespace detail {

/// Fractional (average) ranks, 1-based; ties share the mean of their
/// positions.
inline std::vector<double> fractional_ranks(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

inline bool has_ties(const std::vector<double>& x) {
  std::vector<double> s = x;
  std::sort(s.begin(), s.end());
  for (std::size_t i = 1; i < s.size(); ++i)
    if (s[i] == s[i - 1]) return true;
  return false;
}

}  // namespace detail

/// Spearman rank correlation. Tie-free inputs use the closed form
/// 1 - 6*sum(d^2)/(n(n^2-1)); ties fall back to Pearson correlation of
/// fractional ranks.
inline double spearman(const ScoredPairs& s) {
  const std::size_t n = s.predicted.size();
  if (n != s.reference.size())
    throw ShapeError("spearman: length mismatch");
  if (n < 2) throw UndefinedMetricError("spearman: need at least two pairs");
  auto constant = [](const std::vector<double>& v) {
    for (double x : v)
      if (x != v[0]) return false;
    return true;
  };
  if (constant(s.predicted) || constant(s.reference))
    throw UndefinedMetricError("spearman: constant input has no rank ordering");
  const std::vector<double> rx = detail::fractional_ranks(s.predicted);
  const std::vector<double> ry = detail::fractional_ranks(s.reference);
  if (!detail::has_ties(s.predicted) && !detail::has_ties(s.reference)) {
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = rx[i] - ry[i];
      d2 += d * d;
    }
    const double nn = static_cast<double>(n);
    return 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0));
  }
  // Pearson on ranks
  const double nn = static_cast<double>(n);
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= nn;
  my /= nn;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

// ---------------------------------------------------------------------------
// Run-file scoring: CSV of (query id, item id, score, relevance) in, metric
// report CSV out.

struct QueryScore {
  std::string query_id;
  double ndcg10;
  double ap;
};

struct RunFileReport {
  std::vector<QueryScore> per_query;
  double mean_ndcg10 = 0.0;
  double map = 0.0;
};

/// Scores a retrieval run file. Rows are grouped by query in first-seen
/// order; within a query, items are ranked by descending score with input
/// order breaking ties.
inline RunFileReport score_run_file(std::istream& in) {
  struct Row {
    std::string item;
    double score;
    unsigned relevance;
    std::size_t input_order;
  };
  std::vector<std::string> query_order;
  std::map<std::string, std::vector<Row>> by_query;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("query_id", 0) == 0) continue;  // header
    std::istringstream ss(line);
    std::string query, item, score_s, rel_s;
    if (!std::getline(ss, query, ',') || !std::getline(ss, item, ',') ||
        !std::getline(ss, score_s, ',') || !std::getline(ss, rel_s))
      throw ParseError("run file: malformed line " + std::to_string(line_no));
    Row row;
    row.item = item;
    try {
      row.score = std::stod(score_s);
      row.relevance = static_cast<unsigned>(std::stoul(rel_s));
    } catch (const std::exception&) {
      throw ParseError("run file: bad number at line " + std::to_string(line_no));
    }
    auto it = by_query.find(query);
    if (it == by_query.end()) query_order.push_back(query);
    row.input_order = by_query[query].size();
    by_query[query].push_back(row);
  }
  if (query_order.empty()) throw UndefinedMetricError("run file: no rows");
  RunFileReport report;
  for (const std::string& q : query_order) {
    auto rows = by_query[q];
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.input_order < b.input_order;
    });
    RankedResult ranked;
    std::vector<bool> labels;
    for (const Row& r : rows) {
      ranked.push_back({r.item, r.relevance});
      labels.push_back(r.relevance > 0);
    }
    QueryScore qs;
    qs.query_id = q;
    qs.ndcg10 = ndcg_at_k(ranked, 10);
    qs.ap = average_precision(labels);
    report.mean_ndcg10 += qs.ndcg10;
    report.map += qs.ap;
    report.per_query.push_back(std::move(qs));
  }
  report.mean_ndcg10 /= static_cast<double>(report.per_query.size());
  report.map /= static_cast<double>(report.per_query.size());
  return report;
}

inline RunFileReport score_run_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("run file: cannot read '" + path + "'");
  return score_run_file(in);
}

}  // namespace mote
