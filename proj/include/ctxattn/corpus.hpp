#pragma once

// Synthetic document-level parallel corpus with pronoun-antecedent gender
// agreement. The source language has one gender-ambiguous pronoun; the
// target language picks one of three pronouns from the gender of the most
// recent noun. Between an antecedent and its pronoun only noun-free filler
// sentences appear, so the antecedent is always unambiguous.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "ctxattn/contrastive.hpp"
#include "ctxattn/numerics.hpp"
#include "ctxattn/relations.hpp"
#include "ctxattn/vocab.hpp"

namespace ctxattn {

struct Noun {
  std::string source;  // may hold several words
  std::string target;
  std::string gender;
};

struct Template {
  std::string source;  // with {N} / {P} slots
  std::string target;
};

struct ToyGrammar {
  std::vector<std::string> genders;
  std::string source_pronoun;
  std::map<std::string, std::string> target_pronouns;  // gender -> pronoun
  std::vector<Noun> nouns;
  std::vector<Template> noun_templates;     // one {N}
  std::vector<Template> pronoun_templates;  // one {P}
  std::vector<Template> intra_templates;    // {N} then {P}
  std::vector<Template> filler_templates;   // neither

  static constexpr std::string_view kNounSlot = "{N}";
  static constexpr std::string_view kPronounSlot = "{P}";

  void validate() const {
    if (genders.size() < 2) throw Error("grammar: at least two genders required");
    std::set<std::string> pronouns;
    for (const auto& g : genders) {
      auto it = target_pronouns.find(g);
      if (it == target_pronouns.end()) throw Error("grammar: no target pronoun for gender " + g);
      if (!pronouns.insert(it->second).second)
        throw Error("grammar: target pronoun shared between genders: " + it->second);
    }
    if (tokenize(source_pronoun).size() != 1) throw Error("grammar: source pronoun must be one word");
    for (const auto& n : nouns) {
      if (std::find(genders.begin(), genders.end(), n.gender) == genders.end())
        throw Error("grammar: noun '" + n.source + "' has unknown gender " + n.gender);
      if (tokenize(n.source).empty() || tokenize(n.target).empty())
        throw Error("grammar: empty noun");
    }
    if (nouns.empty() || noun_templates.empty() || pronoun_templates.empty() ||
        intra_templates.empty() || filler_templates.empty())
      throw Error("grammar: every template class needs at least one entry");
    auto slots = [](const std::string& s, std::string_view slot) {
      std::size_t n = 0;
      for (const auto& w : tokenize(s)) n += (w == slot);
      return n;
    };
    auto check = [&](const std::vector<Template>& ts, std::size_t n, std::size_t p,
                     std::string_view what) {
      for (const auto& t : ts) {
        for (const auto* side : {&t.source, &t.target}) {
          if (slots(*side, kNounSlot) != n || slots(*side, kPronounSlot) != p)
            throw Error("grammar: bad slots in " + std::string(what) + " template '" + *side + "'");
          for (const auto& w : tokenize(*side)) {
            if (w == source_pronoun || pronouns.count(w))
              throw Error("grammar: template word '" + w + "' collides with a pronoun");
          }
        }
      }
    };
    check(noun_templates, 1, 0, "noun");
    check(pronoun_templates, 0, 1, "pronoun");
    check(intra_templates, 1, 1, "intra");
    check(filler_templates, 0, 0, "filler");
    for (const auto& t : intra_templates) {
      for (const auto* side : {&t.source, &t.target}) {
        const auto w = tokenize(*side);
        const auto n = std::find(w.begin(), w.end(), kNounSlot);
        const auto p = std::find(w.begin(), w.end(), kPronounSlot);
        if (n > p) throw Error("grammar: intra template must place the noun before the pronoun");
      }
    }
  }

  const std::string& pronoun_for(const std::string& gender) const { return target_pronouns.at(gender); }

  // Reserved tokens followed by every word, sorted.
  Vocabulary vocabulary() const {
    std::set<std::string> words{source_pronoun};
    for (const auto& [g, p] : target_pronouns) words.insert(p);
    for (const auto& n : nouns) {
      for (auto& w : tokenize(n.source)) words.insert(w);
      for (auto& w : tokenize(n.target)) words.insert(w);
    }
    for (const auto* ts : {&noun_templates, &pronoun_templates, &intra_templates, &filler_templates})
      for (const auto& t : *ts)
        for (const auto* side : {&t.source, &t.target})
          for (auto& w : tokenize(*side))
            if (w != kNounSlot && w != kPronounSlot) words.insert(w);
    Vocabulary v;
    for (const auto& w : words) v.add(w);
    if (v.size() > 256) throw Error("grammar: vocabulary exceeds 256 types");
    return v;
  }
};

inline void to_json(nlohmann::json& j, const Noun& n) {
  j = {{"source", n.source}, {"target", n.target}, {"gender", n.gender}};
}
inline void from_json(const nlohmann::json& j, Noun& n) {
  n.source = j.at("source");
  n.target = j.at("target");
  n.gender = j.at("gender");
}
inline void to_json(nlohmann::json& j, const Template& t) {
  j = {{"source", t.source}, {"target", t.target}};
}
inline void from_json(const nlohmann::json& j, Template& t) {
  t.source = j.at("source");
  t.target = j.at("target");
}
inline void to_json(nlohmann::json& j, const ToyGrammar& g) {
  j = {{"genders", g.genders},
       {"source_pronoun", g.source_pronoun},
       {"target_pronouns", g.target_pronouns},
       {"nouns", g.nouns},
       {"noun_templates", g.noun_templates},
       {"pronoun_templates", g.pronoun_templates},
       {"intra_templates", g.intra_templates},
       {"filler_templates", g.filler_templates}};
}
inline void from_json(const nlohmann::json& j, ToyGrammar& g) {
  g.genders = j.at("genders").get<std::vector<std::string>>();
  g.source_pronoun = j.at("source_pronoun");
  g.target_pronouns = j.at("target_pronouns").get<std::map<std::string, std::string>>();
  g.nouns = j.at("nouns").get<std::vector<Noun>>();
  g.noun_templates = j.at("noun_templates").get<std::vector<Template>>();
  g.pronoun_templates = j.at("pronoun_templates").get<std::vector<Template>>();
  g.intra_templates = j.at("intra_templates").get<std::vector<Template>>();
  g.filler_templates = j.at("filler_templates").get<std::vector<Template>>();
}

inline ToyGrammar load_grammar(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open grammar " + path);
  auto g = nlohmann::json::parse(in).get<ToyGrammar>();
  g.validate();
  return g;
}

inline void save_grammar(const ToyGrammar& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write grammar " + path);
  out << nlohmann::json(g).dump(2) << '\n';
}

// The built-in three-gender grammar (German-like masc/fem/neut pronouns).
inline ToyGrammar default_grammar() {
  ToyGrammar g;
  g.genders = {"A", "B", "C"};
  g.source_pronoun = "it";
  g.target_pronouns = {{"A", "er"}, {"B", "sie"}, {"C", "es"}};
  // Some source nouns have two translations of different gender; for
  // those only the target-side antecedent decides the pronoun.
  g.nouns = {
      {"dog", "hund", "A"},       {"tree", "baum", "A"},        {"spoon", "loeffel", "A"},
      {"chair", "stuhl", "A"},    {"apple pie", "apfel kuchen", "A"},
      {"rain coat", "regen mantel", "A"},
      {"cat", "katze", "B"},      {"bottle", "flasche", "B"},   {"street", "strasse", "B"},
      {"night lamp", "nacht lampe", "B"},
      {"house", "haus", "C"},     {"book", "buch", "C"},        {"bed", "bett", "C"},
      {"window", "fenster", "C"}, {"glass", "glas", "C"},       {"bread knife", "brot messer", "C"},
      {"car", "wagen", "A"},      {"car", "auto", "C"},
      {"bag", "beutel", "A"},     {"bag", "tasche", "B"},
      {"boat", "kahn", "A"},      {"boat", "boot", "C"},
      {"door", "tuer", "B"},      {"door", "tor", "C"},
      {"cup", "becher", "A"},     {"cup", "tasse", "B"},
      {"lamp", "lampe", "B"},     {"lamp", "licht", "C"},
      {"tea cup", "tee tasse", "B"}, {"tea cup", "tee becher", "A"},
      {"water glass", "wasser glas", "C"}, {"water glass", "wasser becher", "A"},
  };
  g.noun_templates = {
      {"i saw the {N} .", "ich sah {N} ."},
      {"the {N} was here .", "{N} war hier ."},
      {"we like the {N} .", "wir moegen {N} ."},
      {"anna found the {N} today .", "anna fand heute {N} ."},
      {"look at the {N} .", "schau {N} an ."},
  };
  g.pronoun_templates = {
      {"{P} is old .", "{P} ist alt ."},
      {"{P} was very big .", "{P} war sehr gross ."},
      {"then {P} broke .", "dann brach {P} ."},
      {"{P} looks nice .", "{P} sieht gut aus ."},
      {"i think {P} is red .", "ich denke {P} ist rot ."},
  };
  g.intra_templates = {
      {"the {N} fell because {P} was old .", "{N} fiel weil {P} alt war ."},
      {"i washed the {N} and {P} is clean .", "ich wusch {N} und {P} ist sauber ."},
      {"when the {N} came {P} was late .", "als {N} kam war {P} spaet ."},
  };
  g.filler_templates = {
      {"we went home .", "wir gingen heim ."},
      {"yes .", "ja ."},
      {"that is true .", "das stimmt ."},
      {"i do not know .", "ich weiss nicht ."},
      {"thank you very much .", "vielen dank ."},
  };
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Documents

struct SentencePair {
  std::string source;
  std::string target;
  friend bool operator==(const SentencePair&, const SentencePair&) = default;
};

// Token indices are relative to their own sentence.
struct PronounEvent {
  std::size_t sentence = 0;  // sentence holding the pronoun
  std::size_t distance = 0;  // sentences back to the antecedent
  IndexSet src_antecedent, tgt_antecedent;
  std::size_t src_pronoun = 0, tgt_pronoun = 0;
  std::string gender;
  friend bool operator==(const PronounEvent&, const PronounEvent&) = default;
};

struct GeneratedDocument {
  std::vector<SentencePair> sentences;
  std::vector<PronounEvent> events;
  friend bool operator==(const GeneratedDocument&, const GeneratedDocument&) = default;
};

using DistanceProfile = std::map<std::size_t, double>;

namespace detail {

struct Filled {
  std::vector<std::string> words;
  IndexSet noun;
  std::size_t pronoun = 0;
};

inline Filled fill(const std::string& tmpl, const std::vector<std::string>& noun,
                   const std::string& pronoun) {
  Filled f;
  for (const auto& w : tokenize(tmpl)) {
    if (w == ToyGrammar::kNounSlot) {
      for (const auto& n : noun) {
        f.noun.push_back(f.words.size());
        f.words.push_back(n);
      }
    } else if (w == ToyGrammar::kPronounSlot) {
      f.pronoun = f.words.size();
      f.words.push_back(pronoun);
    } else {
      f.words.push_back(w);
    }
  }
  return f;
}

template <typename T>
const T& pick(const std::vector<T>& v, Rng& rng) {
  return v[rng.below(v.size())];
}

inline std::size_t sample_distance(const std::vector<std::pair<std::size_t, double>>& cdf, Rng& rng) {
  const double u = rng.uniform();
  for (const auto& [d, c] : cdf)
    if (u < c) return d;
  return cdf.back().first;
}

}  // namespace detail

// Checks the profile and returns it as a cumulative table. Probabilities
// may be rounded (they are renormalised if they sum to 1 within 0.01).
inline std::vector<std::pair<std::size_t, double>> profile_cdf(const DistanceProfile& profile,
                                                               std::size_t sents_per_doc) {
  if (profile.empty()) throw Error("distance profile is empty");
  double total = 0.0;
  for (const auto& [d, p] : profile) {
    if (p < 0.0) throw Error("distance profile has a negative probability");
    if (p > 0.0 && d >= sents_per_doc)
      throw Error("infeasible distance profile: distance " + std::to_string(d) +
                  " does not fit a document of " + std::to_string(sents_per_doc) + " sentences");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-2) throw Error("distance profile probabilities must sum to 1");
  std::vector<std::pair<std::size_t, double>> cdf;
  double acc = 0.0;
  for (const auto& [d, p] : profile) {
    if (p == 0.0) continue;
    acc += p / total;
    cdf.emplace_back(d, acc);
  }
  cdf.back().second = 1.0;
  return cdf;
}

inline std::vector<GeneratedDocument> generate(const ToyGrammar& g, std::size_t n_docs,
                                               std::size_t sents_per_doc,
                                               const DistanceProfile& profile, std::uint64_t seed) {
  g.validate();
  if (sents_per_doc == 0) throw Error("documents need at least one sentence");
  const auto cdf = profile_cdf(profile, sents_per_doc);
  Rng rng = Rng(seed).substream("corpus");

  auto noun_sentence = [&](const Noun& n) {
    const auto& t = detail::pick(g.noun_templates, rng);
    auto s = detail::fill(t.source, tokenize(n.source), "");
    auto d = detail::fill(t.target, tokenize(n.target), "");
    return std::pair{s, d};
  };
  auto filler = [&] {
    const auto& t = detail::pick(g.filler_templates, rng);
    return SentencePair{t.source, t.target};
  };

  std::vector<GeneratedDocument> docs(n_docs);
  std::size_t pending = detail::sample_distance(cdf, rng);
  for (auto& doc : docs) {
    auto& sents = doc.sentences;
    while (sents.size() < sents_per_doc) {
      const std::size_t remaining = sents_per_doc - sents.size();
      const std::size_t need = pending + 1;
      if (need > remaining) {
        while (sents.size() < sents_per_doc) {
          if (rng.uniform() < 0.5) {
            auto [s, t] = noun_sentence(detail::pick(g.nouns, rng));
            sents.push_back({detokenize(s.words), detokenize(t.words)});
          } else {
            sents.push_back(filler());
          }
        }
        break;
      }
      if (remaining > need && rng.uniform() < 0.25) {  // distractor noun
        auto [s, t] = noun_sentence(detail::pick(g.nouns, rng));
        sents.push_back({detokenize(s.words), detokenize(t.words)});
        continue;
      }
      const Noun& noun = detail::pick(g.nouns, rng);
      const std::string& tp = g.pronoun_for(noun.gender);
      PronounEvent ev;
      ev.distance = pending;
      ev.gender = noun.gender;
      if (pending == 0) {
        const auto& t = detail::pick(g.intra_templates, rng);
        auto s = detail::fill(t.source, tokenize(noun.source), g.source_pronoun);
        auto d = detail::fill(t.target, tokenize(noun.target), tp);
        ev.src_antecedent = s.noun;
        ev.tgt_antecedent = d.noun;
        ev.src_pronoun = s.pronoun;
        ev.tgt_pronoun = d.pronoun;
        ev.sentence = sents.size();
        sents.push_back({detokenize(s.words), detokenize(d.words)});
      } else {
        auto [s, d] = noun_sentence(noun);
        ev.src_antecedent = s.noun;
        ev.tgt_antecedent = d.noun;
        sents.push_back({detokenize(s.words), detokenize(d.words)});
        for (std::size_t k = 1; k < pending; ++k) sents.push_back(filler());
        const auto& t = detail::pick(g.pronoun_templates, rng);
        auto ps = detail::fill(t.source, {}, g.source_pronoun);
        auto pd = detail::fill(t.target, {}, tp);
        ev.src_pronoun = ps.pronoun;
        ev.tgt_pronoun = pd.pronoun;
        ev.sentence = sents.size();
        sents.push_back({detokenize(ps.words), detokenize(pd.words)});
      }
      doc.events.push_back(std::move(ev));
      pending = detail::sample_distance(cdf, rng);
    }
  }
  return docs;
}

inline nlohmann::json document_to_json(const GeneratedDocument& d, std::size_t id) {
  nlohmann::json j;
  j["id"] = id;
  auto sents = nlohmann::json::array();
  for (const auto& s : d.sentences) sents.push_back({{"source", s.source}, {"target", s.target}});
  j["sentences"] = sents;
  auto evs = nlohmann::json::array();
  for (const auto& e : d.events)
    evs.push_back({{"sentence", e.sentence},
                   {"distance", e.distance},
                   {"src_antecedent", e.src_antecedent},
                   {"tgt_antecedent", e.tgt_antecedent},
                   {"src_pronoun", e.src_pronoun},
                   {"tgt_pronoun", e.tgt_pronoun},
                   {"gender", e.gender}});
  j["events"] = evs;
  return j;
}

inline GeneratedDocument document_from_json(const nlohmann::json& j) {
  GeneratedDocument d;
  for (const auto& s : j.at("sentences")) d.sentences.push_back({s.at("source"), s.at("target")});
  for (const auto& e : j.at("events")) {
    PronounEvent ev;
    ev.sentence = e.at("sentence");
    ev.distance = e.at("distance");
    ev.src_antecedent = e.at("src_antecedent").get<IndexSet>();
    ev.tgt_antecedent = e.at("tgt_antecedent").get<IndexSet>();
    ev.src_pronoun = e.at("src_pronoun");
    ev.tgt_pronoun = e.at("tgt_pronoun");
    ev.gender = e.at("gender");
    d.events.push_back(std::move(ev));
  }
  return d;
}

inline void save_documents(const std::vector<GeneratedDocument>& docs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write corpus " + path);
  for (std::size_t i = 0; i < docs.size(); ++i) out << document_to_json(docs[i], i).dump() << '\n';
}

inline std::vector<GeneratedDocument> load_documents(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus " + path);
  std::vector<GeneratedDocument> docs;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      docs.push_back(document_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return docs;
}

// ---------------------------------------------------------------------------
// Training pairs: every sentence with every context size 0..context_size,
// both sides concatenated with [SEP] and terminated by <eos>.

struct TrainingPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
  std::size_t context = 0;
  friend bool operator==(const TrainingPair&, const TrainingPair&) = default;
};

inline std::vector<TokenId> concat_with_sep(const Vocabulary& v,
                                            const std::vector<std::string>& sentences) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    if (i) out.push_back(Vocabulary::kSep);
    for (const auto& w : tokenize(sentences[i])) out.push_back(v.id(w));
  }
  out.push_back(Vocabulary::kEos);
  return out;
}

inline std::vector<TrainingPair> to_training_pairs(const Vocabulary& v,
                                                   const std::vector<GeneratedDocument>& docs,
                                                   std::size_t context_size, std::uint64_t seed) {
  std::vector<TrainingPair> pairs;
  for (const auto& doc : docs) {
    for (std::size_t s = 0; s < doc.sentences.size(); ++s) {
      for (std::size_t k = 0; k <= std::min(context_size, s); ++k) {
        std::vector<std::string> src, tgt;
        for (std::size_t c = s - k; c <= s; ++c) {
          src.push_back(doc.sentences[c].source);
          tgt.push_back(doc.sentences[c].target);
        }
        pairs.push_back({concat_with_sep(v, src), concat_with_sep(v, tgt), k});
      }
    }
  }
  Rng rng = Rng(seed).substream("pairs");
  rng.shuffle(pairs);
  return pairs;
}

inline void save_training_pairs(const std::vector<TrainingPair>& pairs, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write training pairs " + path);
  for (const auto& p : pairs)
    out << nlohmann::json{{"source", p.source}, {"target", p.target}, {"context", p.context}}.dump()
        << '\n';
}

inline std::vector<TrainingPair> load_training_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open training pairs " + path);
  std::vector<TrainingPair> pairs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    pairs.push_back({j.at("source").get<std::vector<TokenId>>(),
                     j.at("target").get<std::vector<TokenId>>(), j.value("context", std::size_t{0})});
  }
  return pairs;
}

// ---------------------------------------------------------------------------
// Contrastive examples from pronoun events

// Builds one example per event: the correct target plus one foil per other
// gender (candidates in grammar gender order). Up to `context_cap` previous
// sentences are stored as context; the annotation indexes the concatenation.
inline ContrastiveExample event_to_example(const ToyGrammar& g, const GeneratedDocument& doc,
                                           const PronounEvent& ev, std::size_t context_cap,
                                           std::string id) {
  ContrastiveExample ex;
  ex.id = std::move(id);
  ex.antecedent_distance = ev.distance;
  const std::size_t p = ev.sentence;
  const std::size_t first = p > context_cap ? p - context_cap : 0;
  for (std::size_t s = first; s < p; ++s) {
    ex.src_context.push_back(doc.sentences[s].source);
    ex.tgt_context.push_back(doc.sentences[s].target);
  }
  ex.src_current = doc.sentences[p].source;
  const auto tgt_words = tokenize(doc.sentences[p].target);
  for (const auto& gender : g.genders) {
    auto words = tgt_words;
    words[ev.tgt_pronoun] = g.pronoun_for(gender);
    ex.candidates.push_back({detokenize(words), gender == ev.gender});
  }

  auto offset_of = [](const std::vector<std::string>& ctx, std::size_t k) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < k; ++i) off += tokenize(ctx[i]).size() + 1;
    return off;
  };
  const std::size_t n_ctx = p - first;
  const std::size_t src_cur = offset_of(ex.src_context, n_ctx);
  const std::size_t tgt_cur = offset_of(ex.tgt_context, n_ctx);
  IndexSet s_c, t_c;
  const std::size_t ante = p - ev.distance;
  if (ante >= first) {
    const std::size_t so = offset_of(ex.src_context, ante - first);
    const std::size_t to = offset_of(ex.tgt_context, ante - first);
    for (std::size_t i : ev.src_antecedent) s_c.push_back(so + i);
    for (std::size_t i : ev.tgt_antecedent) t_c.push_back(to + i);
  }
  const std::size_t tgt_len = concat_length(ex.tgt_context, ex.candidates.front().tgt_current) + 1;
  ex.annotation = make_annotation({src_cur + ev.src_pronoun}, std::move(s_c), {tgt_cur + ev.tgt_pronoun},
                                  std::move(t_c), tgt_len);
  return ex;
}

// Samples `n_examples` events without replacement (kept in corpus order).
inline std::vector<ContrastiveExample> to_contrastive(const ToyGrammar& g,
                                                      const std::vector<GeneratedDocument>& docs,
                                                      std::size_t n_examples, std::uint64_t seed,
                                                      std::size_t context_cap) {
  std::vector<std::pair<std::size_t, std::size_t>> events;
  for (std::size_t d = 0; d < docs.size(); ++d)
    for (std::size_t e = 0; e < docs[d].events.size(); ++e) events.emplace_back(d, e);
  if (events.size() < n_examples)
    throw Error("not enough pronoun events: need " + std::to_string(n_examples) + ", corpus has " +
                std::to_string(events.size()));
  Rng rng = Rng(seed).substream("contrastive");
  rng.shuffle(events);
  events.resize(n_examples);
  std::sort(events.begin(), events.end());
  std::vector<ContrastiveExample> out;
  out.reserve(n_examples);
  for (const auto& [d, e] : events)
    out.push_back(event_to_example(g, docs[d], docs[d].events[e], context_cap,
                                   "doc" + std::to_string(d) + "-ev" + std::to_string(e)));
  return out;
}

// A contrastive set with exactly `counts[d]` examples at each distance d.
// Each example comes from its own minimal document (antecedent sentence,
// fillers, pronoun sentence), and the whole document is stored as context.
inline std::vector<ContrastiveExample> shaped_contrastive(const ToyGrammar& g,
                                                          const std::map<std::size_t, std::size_t>& counts,
                                                          std::uint64_t seed) {
  std::vector<ContrastiveExample> out;
  for (const auto& [d, n] : counts) {
    if (n == 0) continue;
    const auto docs = generate(g, n, d + 1, {{d, 1.0}}, Rng(seed).substream("shape-" + std::to_string(d)).next_u64());
    for (std::size_t i = 0; i < docs.size(); ++i) {
      if (docs[i].events.size() != 1) throw Error("shaped_contrastive: unexpected document layout");
      out.push_back(event_to_example(g, docs[i], docs[i].events[0], d,
                                     "d" + std::to_string(d) + "-" + std::to_string(i)));
    }
  }
  return out;
}

}  // namespace ctxattn
