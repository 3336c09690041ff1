#pragma once

// Surgical rewrites of pre-softmax attention scores.
//
// Modify: for every query row i in Y, overwrite the scores of the key subset
// X_sub so that after softmax the subset receives total mass C, split
// equally, while the remaining keys keep their scores (and therefore their
// relative proportions):
//
//   H~[i,j] = log( C / (|X_sub| (1 - C)) * sum_{k in X \ X_sub} exp(H[i,k]) )
//
// Disable: for every query row i in Y, set the scores of all attendable keys
// to zero so softmax spreads attention uniformly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "ctxattn/numerics.hpp"
#include "ctxattn/relations.hpp"

namespace ctxattn {

// Validity of each (query, key) pair of one attention matrix. A key is
// invalid when it is padding or, in decoder self-attention, in the future.
struct KeyMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> valid;

  KeyMask() = default;
  KeyMask(std::size_t r, std::size_t c, std::uint8_t v = 1) : rows(r), cols(c), valid(r * c, v) {}

  bool operator()(std::size_t i, std::size_t j) const { return valid[i * cols + j] != 0; }
  std::span<const std::uint8_t> row(std::size_t i) const { return {valid.data() + i * cols, cols}; }

  IndexSet attended(std::size_t i) const {
    IndexSet out;
    for (std::size_t j = 0; j < cols; ++j)
      if ((*this)(i, j)) out.push_back(j);
    return out;
  }
  friend bool operator==(const KeyMask&, const KeyMask&) = default;
};

inline void check_mass(double c) {
  if (!(c > 0.0 && c < 1.0)) throw Error("target mass C must lie strictly between 0 and 1");
}

// Rewrites h_row on `subset` so the post-softmax mass there is exactly c.
// `attended` is the full set of keys the row may attend (subset included).
inline std::vector<double> modify_row(std::span<const double> h_row, const IndexSet& subset,
                                      const IndexSet& attended, double c) {
  check_mass(c);
  if (subset.empty()) throw Error("modify_row: empty target subset");
  std::set<std::size_t> sub(subset.begin(), subset.end());
  if (sub.size() != subset.size()) throw Error("modify_row: duplicate index in target subset");
  std::vector<double> complement;
  std::size_t covered = 0;
  for (std::size_t k : attended) {
    if (k >= h_row.size()) throw Error("modify_row: attended index out of range");
    if (sub.count(k)) {
      ++covered;
    } else {
      complement.push_back(h_row[k]);
    }
  }
  if (covered != sub.size()) throw Error("modify_row: target subset is not within the attended set");
  if (complement.empty()) throw Error("complement empty; C unreachable by closed-form rewrite");
  const double value = std::log(c) - std::log(static_cast<double>(sub.size())) - std::log1p(-c) +
                       log_sum_exp(complement);
  std::vector<double> out(h_row.begin(), h_row.end());
  for (std::size_t j : sub) out[j] = value;
  return out;
}

// Uniform attention over valid keys for every row in `rows`; other rows
// are left bit-for-bit as they were.
inline void disable_rows(Matrix& h, const IndexSet& rows, const KeyMask& mask) {
  for (std::size_t i : rows) {
    if (i >= h.rows()) throw Error("disable_rows: query index out of range");
    for (std::size_t j = 0; j < h.cols(); ++j)
      if (mask(i, j)) h(i, j) = 0.0;
  }
}

enum class InterventionMode { Modify, Disable };

struct InterventionEntry {
  HeadAddress address;
  Relation relation = Relation::TP_TC;
  InterventionMode mode = InterventionMode::Modify;
  double c = 0.0;  // used by Modify only

  friend bool operator==(const InterventionEntry&, const InterventionEntry&) = default;
};

inline InterventionEntry modify_entry(HeadAddress a, Relation r, double c) {
  return {a, r, InterventionMode::Modify, c};
}
inline InterventionEntry disable_entry(HeadAddress a, Relation r) {
  return {a, r, InterventionMode::Disable, 0.0};
}

class InterventionPlan {
 public:
  InterventionPlan() = default;
  explicit InterventionPlan(std::vector<InterventionEntry> entries) {
    for (auto& e : entries) add(e);
  }

  void add(const InterventionEntry& e) {
    if (e.mode == InterventionMode::Modify) check_mass(e.c);
    if (relation_module(e.relation) != e.address.kind)
      throw Error("relation " + std::string(relation_name(e.relation)) + " lives in " +
                  std::string(module_name(relation_module(e.relation))) +
                  " attention but head " + e.address.str() + " is " +
                  std::string(module_name(e.address.kind)));
    for (const auto& o : entries_) {
      if (o.address == e.address && o.relation == e.relation) {
        if (o == e) return;
        throw Error("conflicting entries for head " + e.address.str() + " relation " +
                    std::string(relation_name(e.relation)));
      }
    }
    entries_.push_back(e);
  }

  const std::vector<InterventionEntry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  // Entries whose relation the example can support.
  InterventionPlan applicable_to(const RelationAnnotation& ann) const {
    InterventionPlan out;
    for (const auto& e : entries_)
      if (supports(e.relation, ann)) out.entries_.push_back(e);
    return out;
  }

 private:
  std::vector<InterventionEntry> entries_;
};

// Plan entries resolved against one example's annotation.
struct HeadRewrite {
  HeadAddress address;
  InterventionMode mode;
  double c;
  IndexSet rows;
  IndexSet keys;
};

class ResolvedPlan {
 public:
  ResolvedPlan() = default;

  ResolvedPlan(const InterventionPlan& plan, const RelationAnnotation& ann) {
    for (const auto& e : plan.entries()) {
      auto r = resolve(e.relation, ann);
      for (const auto& prev : rewrites_) {
        if (prev.address != e.address) continue;
        const bool row_overlap = std::any_of(r.queries.begin(), r.queries.end(), [&](auto i) {
          return std::find(prev.rows.begin(), prev.rows.end(), i) != prev.rows.end();
        });
        if (row_overlap)
          throw Error("conflicting interventions on head " + e.address.str() +
                      ": two entries rewrite the same query row");
      }
      rewrites_.push_back({e.address, e.mode, e.c, std::move(r.queries), std::move(r.keys)});
    }
  }

  const std::vector<HeadRewrite>& rewrites() const { return rewrites_; }
  bool empty() const { return rewrites_.empty(); }

  bool touches(const HeadAddress& a) const {
    return std::any_of(rewrites_.begin(), rewrites_.end(),
                       [&](const HeadRewrite& r) { return r.address == a; });
  }

  // Rewrites `h` in place for every entry addressed to `a`.
  void apply(const HeadAddress& a, Matrix& h, const KeyMask& mask) const {
    for (const auto& rw : rewrites_) {
      if (rw.address != a) continue;
      if (rw.mode == InterventionMode::Disable) {
        disable_rows(h, rw.rows, mask);
        continue;
      }
      for (std::size_t i : rw.rows) {
        if (i >= h.rows()) throw Error("intervention query index out of range on " + a.str());
        for (std::size_t j : rw.keys)
          if (j >= h.cols() || !mask(i, j))
            throw Error("intervention key " + std::to_string(j) + " is not attendable from row " +
                        std::to_string(i) + " on " + a.str());
        auto out = modify_row(h.row(i), rw.keys, mask.attended(i), rw.c);
        std::copy(out.begin(), out.end(), h.row(i).begin());
      }
    }
  }

 private:
  std::vector<HeadRewrite> rewrites_;
};

// ---------------------------------------------------------------------------
// Plan files: a JSON list of {module_kind, layer, head, relation, mode, C}.

inline nlohmann::json plan_to_json(const InterventionPlan& plan) {
  auto arr = nlohmann::json::array();
  for (const auto& e : plan.entries()) {
    nlohmann::json j;
    j["module_kind"] = std::string(module_name(e.address.kind));
    j["layer"] = e.address.layer;
    j["head"] = e.address.head;
    j["relation"] = std::string(relation_name(e.relation));
    j["mode"] = e.mode == InterventionMode::Modify ? "modify" : "disable";
    if (e.mode == InterventionMode::Modify) j["C"] = e.c;
    arr.push_back(std::move(j));
  }
  return arr;
}

inline InterventionPlan plan_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw Error("intervention plan must be a JSON list");
  InterventionPlan plan;
  for (const auto& j : arr) {
    InterventionEntry e;
    e.address.kind = parse_module_kind(j.at("module_kind").get<std::string>());
    e.address.layer = j.at("layer").get<int>();
    e.address.head = j.at("head").get<int>();
    e.relation = parse_relation(j.at("relation").get<std::string>());
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "modify") {
      e.mode = InterventionMode::Modify;
      e.c = j.at("C").get<double>();
    } else if (mode == "disable") {
      e.mode = InterventionMode::Disable;
    } else {
      throw Error("unknown intervention mode '" + mode + "'");
    }
    plan.add(e);
  }
  return plan;
}

inline InterventionPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open plan file " + path);
  return plan_from_json(nlohmann::json::parse(in));
}

inline void save_plan(const InterventionPlan& plan, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write plan file " + path);
  out << plan_to_json(plan).dump(2) << '\n';
}

}  // namespace ctxattn
