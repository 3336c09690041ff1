#pragma once

// Contrastive pronoun test sets: loading, scoring and accuracy.
//
// One example is a source document window plus several candidate
// translations of the current sentence that differ only in the pronoun.
// A candidate's score is the teacher-forced log-likelihood of the whole
// concatenated target (gold target context, [SEP]s, candidate, <eos>).
// The example counts as solved (I = 1) only if the correct candidate's
// score is strictly the largest.

#include <array>
#include <fstream>
#include <functional>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "ctxattn/intervention.hpp"
#include "ctxattn/model.hpp"
#include "ctxattn/relations.hpp"
#include "ctxattn/vocab.hpp"

namespace ctxattn {

struct Candidate {
  std::string tgt_current;
  bool is_correct = false;
  friend bool operator==(const Candidate&, const Candidate&) = default;
};

struct ContrastiveExample {
  std::string id;
  std::vector<std::string> src_context;  // oldest first
  std::string src_current;
  std::vector<std::string> tgt_context;
  std::vector<Candidate> candidates;
  std::size_t antecedent_distance = 0;
  RelationAnnotation annotation;  // indices into the concatenated sequences
  bool context_impossible = false;  // antecedent lies outside the loaded context

  std::size_t correct_index() const {
    for (std::size_t i = 0; i < candidates.size(); ++i)
      if (candidates[i].is_correct) return i;
    throw Error("example " + id + " has no correct candidate");
  }

  friend bool operator==(const ContrastiveExample&, const ContrastiveExample&) = default;
};

// Token counts of `ctx₁ [SEP] … [SEP] current` excluding the trailing <eos>.
inline std::size_t concat_length(const std::vector<std::string>& context, const std::string& current) {
  std::size_t n = tokenize(current).size();
  for (const auto& c : context) n += tokenize(c).size() + 1;
  return n;
}

inline std::vector<std::string> concat_words(const std::vector<std::string>& context,
                                             const std::string& current) {
  std::vector<std::string> out;
  for (const auto& c : context) {
    for (auto& w : tokenize(c)) out.push_back(std::move(w));
    out.emplace_back(Vocabulary::kSepToken);
  }
  for (auto& w : tokenize(current)) out.push_back(std::move(w));
  return out;
}

// Sequence lengths the model sees: concatenation plus <eos>. The target
// length is that of the shortest candidate.
inline std::pair<std::size_t, std::size_t> model_lengths(const ContrastiveExample& ex) {
  const std::size_t src = concat_length(ex.src_context, ex.src_current) + 1;
  std::size_t tgt = SIZE_MAX;
  for (const auto& c : ex.candidates) tgt = std::min(tgt, concat_length(ex.tgt_context, c.tgt_current) + 1);
  return {src, tgt};
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::json example_to_json(const ContrastiveExample& ex) {
  nlohmann::json j;
  j["id"] = ex.id;
  j["src_context"] = ex.src_context;
  j["src_current"] = ex.src_current;
  j["tgt_context"] = ex.tgt_context;
  auto cands = nlohmann::json::array();
  for (const auto& c : ex.candidates) cands.push_back({{"tgt_current", c.tgt_current}, {"is_correct", c.is_correct}});
  j["candidates"] = cands;
  j["antecedent_distance"] = ex.antecedent_distance;
  j["annotation"] = {{"s_p", ex.annotation.s_p},
                     {"s_c", ex.annotation.s_c},
                     {"t_p", ex.annotation.t_p},
                     {"t_c", ex.annotation.t_c},
                     {"t_c_plus1", ex.annotation.t_c_plus1}};
  return j;
}

inline ContrastiveExample example_from_json(const nlohmann::json& j) {
  ContrastiveExample ex;
  const auto& id = j.at("id");
  ex.id = id.is_string() ? id.get<std::string>() : id.dump();
  ex.src_context = j.at("src_context").get<std::vector<std::string>>();
  ex.src_current = j.at("src_current").get<std::string>();
  ex.tgt_context = j.at("tgt_context").get<std::vector<std::string>>();
  if (ex.src_context.size() != ex.tgt_context.size())
    throw Error("src_context and tgt_context differ in length");
  for (const auto& c : j.at("candidates"))
    ex.candidates.push_back({c.at("tgt_current").get<std::string>(), c.at("is_correct").get<bool>()});
  std::size_t n_correct = 0;
  for (const auto& c : ex.candidates) n_correct += c.is_correct;
  if (n_correct != 1) throw Error("exactly one candidate must be marked correct");
  const long long dist = j.at("antecedent_distance").get<long long>();
  if (dist < 0) throw Error("antecedent_distance must be non-negative");
  ex.antecedent_distance = static_cast<std::size_t>(dist);
  const auto& a = j.at("annotation");
  ex.annotation.s_p = a.at("s_p").get<IndexSet>();
  ex.annotation.s_c = a.at("s_c").get<IndexSet>();
  ex.annotation.t_p = a.at("t_p").get<IndexSet>();
  ex.annotation.t_c = a.at("t_c").get<IndexSet>();
  const auto [src_len, tgt_len] = model_lengths(ex);
  (void)src_len;
  if (a.contains("t_c_plus1"))
    ex.annotation.t_c_plus1 = a.at("t_c_plus1").get<IndexSet>();
  else
    ex.annotation.t_c_plus1 = shift_by_one(ex.annotation.t_c, tgt_len);
  return ex;
}

inline void save_contrastive(const std::vector<ContrastiveExample>& examples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write contrastive file " + path);
  for (const auto& ex : examples) out << example_to_json(ex).dump() << '\n';
}

namespace detail {

// Drops indices below `removed` and rebases the rest.
inline IndexSet rebase(const IndexSet& s, std::size_t removed) {
  IndexSet out;
  for (std::size_t i : s)
    if (i >= removed) out.push_back(i - removed);
  return out;
}

inline std::size_t removed_tokens(const std::vector<std::string>& context, std::size_t n_removed) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < n_removed; ++i) n += tokenize(context[i]).size() + 1;
  return n;
}

}  // namespace detail

// Keeps the most recent `max_context` context sentences and rewrites the
// annotation to match. Returns nullopt when the annotation no longer fits.
inline std::optional<ContrastiveExample> truncate_context(ContrastiveExample ex, std::size_t max_context) {
  try {
    const auto [src_len, tgt_len] = model_lengths(ex);
    validate_against_lengths(ex.annotation, src_len, tgt_len);
  } catch (const Error&) {
    return std::nullopt;
  }
  const std::size_t n_ctx = ex.src_context.size();
  const std::size_t drop = n_ctx > max_context ? n_ctx - max_context : 0;
  if (drop > 0) {
    const std::size_t rs = detail::removed_tokens(ex.src_context, drop);
    const std::size_t rt = detail::removed_tokens(ex.tgt_context, drop);
    auto& a = ex.annotation;
    const auto s_p = detail::rebase(a.s_p, rs), t_p = detail::rebase(a.t_p, rt);
    if (s_p.size() != a.s_p.size() || t_p.size() != a.t_p.size()) return std::nullopt;
    a.s_p = s_p;
    a.t_p = t_p;
    a.s_c = detail::rebase(a.s_c, rs);
    a.t_c = detail::rebase(a.t_c, rt);
    ex.src_context.erase(ex.src_context.begin(), ex.src_context.begin() + static_cast<long>(drop));
    ex.tgt_context.erase(ex.tgt_context.begin(), ex.tgt_context.begin() + static_cast<long>(drop));
  }
  const auto [src_len, tgt_len] = model_lengths(ex);
  ex.annotation.t_c_plus1 = shift_by_one(ex.annotation.t_c, tgt_len);
  try {
    validate_against_lengths(ex.annotation, src_len, tgt_len);
  } catch (const Error&) {
    return std::nullopt;
  }
  ex.context_impossible = ex.antecedent_distance > max_context;
  return ex;
}

struct LoadStats {
  std::size_t lines = 0;
  std::size_t loaded = 0;
  std::size_t dropped = 0;  // annotation did not fit
};

inline std::vector<ContrastiveExample> load_contrastive(const std::string& path, std::size_t max_context,
                                                        LoadStats* stats = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open contrastive file " + path);
  std::vector<ContrastiveExample> out;
  LoadStats st;
  std::string line;
  while (std::getline(in, line)) {
    ++st.lines;
    if (line.empty()) continue;
    ContrastiveExample ex;
    try {
      ex = example_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw Error(path + ":" + std::to_string(st.lines) + ": malformed example: " + e.what());
    }
    auto t = truncate_context(std::move(ex), max_context);
    if (!t) {
      ++st.dropped;
      continue;
    }
    out.push_back(std::move(*t));
  }
  st.loaded = out.size();
  if (st.dropped > 0)
    std::clog << "load_contrastive: dropped " << st.dropped << " example(s) from " << path
              << " whose annotation does not fit\n";
  if (stats) *stats = st;
  return out;
}

// Buckets 0, 1, 2, 3 and >3.
using DistanceHistogram = std::array<std::size_t, 5>;

inline std::size_t distance_bucket(std::size_t d) { return std::min<std::size_t>(d, 4); }
inline std::string_view distance_bucket_name(std::size_t b) {
  static constexpr std::array<std::string_view, 5> names{"0", "1", "2", "3", ">3"};
  return names.at(b);
}

inline DistanceHistogram distance_histogram(const std::vector<ContrastiveExample>& examples) {
  DistanceHistogram h{};
  for (const auto& ex : examples) ++h[distance_bucket(ex.antecedent_distance)];
  return h;
}

// ---------------------------------------------------------------------------
// Scoring

struct EncodedExample {
  std::string id;
  std::size_t distance = 0;
  bool context_impossible = false;
  std::vector<TokenId> source;                  // with <eos>
  std::vector<std::vector<TokenId>> targets;    // per candidate, with <eos>
  std::size_t correct = 0;
  RelationAnnotation annotation;

  const std::vector<TokenId>& correct_target() const { return targets[correct]; }
};

inline std::vector<TokenId> encode_words(const Vocabulary& v, const std::vector<std::string>& words) {
  auto ids = v.encode(words);
  ids.push_back(Vocabulary::kEos);
  return ids;
}

inline EncodedExample encode_example(const Vocabulary& v, const ContrastiveExample& ex) {
  EncodedExample e;
  e.id = ex.id;
  e.distance = ex.antecedent_distance;
  e.context_impossible = ex.context_impossible;
  e.source = encode_words(v, concat_words(ex.src_context, ex.src_current));
  for (const auto& c : ex.candidates) e.targets.push_back(encode_words(v, concat_words(ex.tgt_context, c.tgt_current)));
  e.correct = ex.correct_index();
  e.annotation = ex.annotation;
  return e;
}

inline std::vector<EncodedExample> encode_examples(const Vocabulary& v,
                                                   const std::vector<ContrastiveExample>& examples) {
  std::vector<EncodedExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(encode_example(v, ex));
  return out;
}

struct ScoredExample {
  std::string id;
  std::size_t distance = 0;
  std::vector<double> logliks;
  int indicator = 0;
  bool tie = false;  // the correct score equals the best competitor's
};

inline ScoredExample score_example(const Model& model, const EncodedExample& ex,
                                   const InterventionPlan* plan = nullptr) {
  InterventionPlan applicable;
  if (plan) applicable = plan->applicable_to(ex.annotation);
  const ForwardOptions opt{&applicable, &ex.annotation, false};
  const auto resolved = resolve_plan(model, opt);
  const detail::RunContext ctx{resolved ? &*resolved : nullptr, nullptr, nullptr, nullptr};
  const Matrix memory = detail::encode(model, ex.source, ctx);

  ScoredExample s;
  s.id = ex.id;
  s.distance = ex.distance;
  for (const auto& tgt : ex.targets) {
    const auto in = shift_right(tgt);
    const Matrix logits = detail::decode(model, memory, ex.source, in, ctx);
    require_finite(logits, "candidate logits");
    s.logliks.push_back(log_likelihood_from_logits(logits, tgt));
  }
  double best_other = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < s.logliks.size(); ++i)
    if (i != ex.correct) best_other = std::max(best_other, s.logliks[i]);
  const double mine = s.logliks[ex.correct];
  s.indicator = mine > best_other ? 1 : 0;
  s.tie = mine == best_other;
  return s;
}

inline std::vector<ScoredExample> score_all(const Model& model, const std::vector<EncodedExample>& examples,
                                            const InterventionPlan* plan = nullptr) {
  std::vector<ScoredExample> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(score_example(model, ex, plan));
  return out;
}

using DistanceFilter = std::function<bool(std::size_t)>;

inline double accuracy(const std::vector<ScoredExample>& scored, const DistanceFilter& filter = {}) {
  std::size_t n = 0, hits = 0;
  for (const auto& s : scored) {
    if (filter && !filter(s.distance)) continue;
    ++n;
    hits += static_cast<std::size_t>(s.indicator);
  }
  if (n == 0) throw Error("accuracy: no examples left after filtering");
  return static_cast<double>(hits) / static_cast<double>(n);
}

inline std::size_t tie_count(const std::vector<ScoredExample>& scored) {
  std::size_t n = 0;
  for (const auto& s : scored) n += s.tie;
  return n;
}

inline void save_scored(const std::vector<ScoredExample>& scored, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write scored dump " + path);
  for (const auto& s : scored)
    out << nlohmann::json{{"id", s.id}, {"candidate_logliks", s.logliks}, {"I", s.indicator}}.dump() << '\n';
}

}  // namespace ctxattn
