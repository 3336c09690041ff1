#pragma once

// Per-head relation statistics: attention scores on a relation, their
// point-biserial correlation with correct scoring, joint-modification
// overlap and the head taxonomy.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "ctxattn/model.hpp"
#include "ctxattn/numerics.hpp"
#include "ctxattn/relations.hpp"

namespace ctxattn {

// max over query rows i in Y and key columns j in X of Z[i, j].
inline double relation_score(const AttentionTrace& trace, const HeadAddress& address, Relation relation,
                             const RelationAnnotation& ann) {
  if (relation_module(relation) != address.kind)
    throw Error("relation " + std::string(relation_name(relation)) + " does not live in " +
                std::string(module_name(address.kind)) + " attention");
  const auto it = trace.find(address);
  if (it == trace.end()) throw Error("no captured attention for head " + address.str());
  const Matrix& z = it->second.weights;
  const auto r = resolve(relation, ann);
  double best = 0.0;
  for (std::size_t i : r.queries) {
    for (std::size_t j : r.keys) {
      if (i >= z.rows() || j >= z.cols()) throw Error("relation index outside captured attention");
      best = std::max(best, z(i, j));
    }
  }
  return best;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw Error("mean of an empty sequence");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// (M1 - M0) / s_n * sqrt(n1 n0 / n^2) with the population standard deviation.
inline double point_biserial(const std::vector<double>& scores, const std::vector<int>& indicators) {
  if (scores.size() != indicators.size()) throw Error("point_biserial: length mismatch");
  const std::size_t n = scores.size();
  double s1 = 0.0, s0 = 0.0;
  std::size_t n1 = 0, n0 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (indicators[i] != 0 && indicators[i] != 1) throw Error("point_biserial: indicator must be 0 or 1");
    if (indicators[i]) {
      s1 += scores[i];
      ++n1;
    } else {
      s0 += scores[i];
      ++n0;
    }
  }
  if (n < 2 || n1 == 0 || n0 == 0) throw Error("correlation undefined: indicators have a single class");
  const double m = (s1 + s0) / static_cast<double>(n);
  double ss = 0.0;
  for (double x : scores) ss += (x - m) * (x - m);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (!(sd > 0.0)) throw Error("correlation undefined: scores have zero variance");
  const double m1 = s1 / static_cast<double>(n1), m0 = s0 / static_cast<double>(n0);
  const double nn = static_cast<double>(n);
  return (m1 - m0) / sd * std::sqrt(static_cast<double>(n1) * static_cast<double>(n0) / (nn * nn));
}

// Share of the summed individual gains that the joint modification fails
// to realise.
inline double overlap(double base, const std::vector<double>& individual, double joint) {
  double gains = 0.0;
  for (double a : individual) gains += a - base;
  if (!(gains > 0.0)) throw Error("no individual improvement to overlap");
  return (gains - (joint - base)) / gains;
}

struct TaxonomyThresholds {
  double attend = 0.10;    // mean relation score
  double respond = 0.005;  // accuracy change (fraction, 0.005 = 0.5pp)
};

enum class HeadCategory {
  Irrelevant,
  AttendingFullyResponsive,
  AttendingNegativelyResponsive,
  AttendingPositivelyResponsive,
  AttendingNonResponsive,
  NonAttendingPositivelyResponsive,
};

inline std::string_view category_name(HeadCategory c) {
  switch (c) {
    case HeadCategory::Irrelevant: return "irrelevant";
    case HeadCategory::AttendingFullyResponsive: return "attending-fully-responsive";
    case HeadCategory::AttendingNegativelyResponsive: return "attending-negatively-responsive";
    case HeadCategory::AttendingPositivelyResponsive: return "attending-positively-responsive";
    case HeadCategory::AttendingNonResponsive: return "attending-non-responsive";
    case HeadCategory::NonAttendingPositivelyResponsive: return "non-attending-positively-responsive";
  }
  return "?";
}

// A drop at 0.01 counts as a negative response and a gain at 0.99 as a
// positive one; the opposite directions are ignored. A head that attends
// little and only responds negatively is filed as irrelevant.
inline HeadCategory categorize(double mean_score, double delta_low, double delta_high,
                               const TaxonomyThresholds& t = {}) {
  const bool attending = mean_score >= t.attend;
  const bool neg = delta_low <= -t.respond;
  const bool pos = delta_high >= t.respond;
  if (attending) {
    if (neg && pos) return HeadCategory::AttendingFullyResponsive;
    if (neg) return HeadCategory::AttendingNegativelyResponsive;
    if (pos) return HeadCategory::AttendingPositivelyResponsive;
    return HeadCategory::AttendingNonResponsive;
  }
  return pos ? HeadCategory::NonAttendingPositivelyResponsive : HeadCategory::Irrelevant;
}

// ---------------------------------------------------------------------------
// Reports

// Shortest decimal text that round-trips the double.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

struct HeadReport {
  HeadAddress address;
  Relation relation = Relation::TP_TC;
  std::size_t n_examples = 0;
  double mean_score = 0.0;
  std::optional<double> r_pb;  // absent when undefined
  double delta_low = 0.0;      // accuracy change at C = 0.01
  double delta_high = 0.0;     // accuracy change at C = 0.99
  std::optional<double> delta_disable;
  HeadCategory category = HeadCategory::Irrelevant;
};

inline constexpr const char* kReportHeader =
    "module_kind,layer,head,relation,n_examples,mean_score,r_pb,delta_acc_0.01,delta_acc_0.99,"
    "delta_acc_disable,category";

inline std::string report_row(const HeadReport& r) {
  std::string s;
  s += std::string(module_name(r.address.kind)) + ',' + std::to_string(r.address.layer) + ',' +
       std::to_string(r.address.head) + ',' + std::string(relation_name(r.relation)) + ',' +
       std::to_string(r.n_examples) + ',' + format_double(r.mean_score) + ',' +
       (r.r_pb ? format_double(*r.r_pb) : std::string("NA")) + ',' + format_double(r.delta_low) + ',' +
       format_double(r.delta_high) + ',' +
       (r.delta_disable ? format_double(*r.delta_disable) : std::string("NA")) + ',' +
       std::string(category_name(r.category));
  return s;
}

inline void write_report_csv(const std::vector<HeadReport>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write report " + path);
  out << kReportHeader << '\n';
  for (const auto& r : rows) out << report_row(r) << '\n';
}

inline nlohmann::json report_summary(const std::vector<HeadReport>& rows, const TaxonomyThresholds& t,
                                     double base_accuracy) {
  std::map<std::string, std::size_t> counts;
  for (const auto& r : rows) ++counts[std::string(category_name(r.category))];
  nlohmann::json j;
  j["base_accuracy"] = base_accuracy;
  j["thresholds"] = {{"attend", t.attend}, {"respond", t.respond}};
  j["category_counts"] = counts;
  const HeadReport* best = nullptr;
  for (const auto& r : rows)
    if (!best || r.delta_low < best->delta_low) best = &r;
  if (best)
    j["most_negatively_responsive"] = {{"head", best->address.str()},
                                       {"relation", relation_name(best->relation)},
                                       {"delta_acc_0.01", best->delta_low}};
  return j;
}

// Counts of `values` in `bins` equal-width bins over [0, 1]; 1.0 falls in
// the last bin.
inline std::vector<std::size_t> histogram01(const std::vector<double>& values, std::size_t bins) {
  if (bins == 0) throw Error("histogram needs at least one bin");
  std::vector<std::size_t> h(bins, 0);
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("histogram value outside [0, 1]");
    ++h[std::min(bins - 1, static_cast<std::size_t>(v * static_cast<double>(bins)))];
  }
  return h;
}

}  // namespace ctxattn
