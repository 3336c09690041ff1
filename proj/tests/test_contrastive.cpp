#include <gtest/gtest.h>

#include <fstream>

#include "ctxattn/contrastive.hpp"
#include "ctxattn/corpus.hpp"
#include "test_util.hpp"

using namespace ctxattn;
using namespace ctxattn::fixture;

namespace {

// src: "a b [SEP] e f [SEP] c d", tgt: "b a [SEP] f e [SEP] d c"; the pronoun is
// the first word of the current sentence, the antecedent the first word of
// the oldest context sentence.
ContrastiveExample three_sentence_example() {
  ContrastiveExample ex;
  ex.id = "x";
  ex.src_context = {"a b", "e f"};
  ex.src_current = "c d";
  ex.tgt_context = {"b a", "f e"};
  ex.candidates = {{"d c", true}, {"e c", false}};
  ex.antecedent_distance = 2;
  ex.annotation = make_annotation({6}, {0}, {6}, {1}, 9);
  return ex;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace

TEST(ContrastiveFile, RoundTripPreservesEverything) {
  const auto g = default_grammar();
  const auto docs = generate(g, 40, 6, {{0, 0.3}, {1, 0.5}, {2, 0.2}}, 3);
  const auto ex = to_contrastive(g, docs, 50, 1, 2);
  const auto path = temp_path("contrastive.jsonl");
  save_contrastive(ex, path);
  LoadStats st;
  const auto back = load_contrastive(path, 2, &st);
  EXPECT_EQ(st.loaded, 50u);
  EXPECT_EQ(st.dropped, 0u);
  EXPECT_EQ(back, ex);
}

TEST(ContrastiveFile, MalformedLineNamesItsLineNumber) {
  const auto path = temp_path("bad.jsonl");
  const auto good = example_to_json(three_sentence_example()).dump();
  write_lines(path, {good, good, R"({"id": "broken", "candidates": []})"});
  try {
    load_contrastive(path, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find(path + ":3: malformed example"), std::string::npos) << e.what();
  }
  auto two_correct = example_to_json(three_sentence_example());
  two_correct["candidates"][1]["is_correct"] = true;
  write_lines(path, {two_correct.dump()});
  EXPECT_THROW(load_contrastive(path, 3), Error);
  auto negative = example_to_json(three_sentence_example());
  negative["antecedent_distance"] = -1;
  write_lines(path, {negative.dump()});
  EXPECT_THROW(load_contrastive(path, 3), Error);
}

TEST(ContrastiveFile, OutOfRangeAnnotationIsDroppedAndCounted) {
  const auto path = temp_path("drop.jsonl");
  auto bad = three_sentence_example();
  bad.annotation = make_annotation({6}, {0}, {6}, {1}, 9);
  bad.annotation.t_p = {40};
  write_lines(path, {example_to_json(three_sentence_example()).dump(), example_to_json(bad).dump()});
  LoadStats st;
  const auto out = load_contrastive(path, 3, &st);
  EXPECT_EQ(out.size(), 1u);
  EXPECT_EQ(st.dropped, 1u);
  EXPECT_EQ(st.lines, 2u);
}

TEST(Truncation, KeepsRecentContextAndRebasesIndices) {
  const auto ex = three_sentence_example();
  const auto full = truncate_context(ex, 5);
  ASSERT_TRUE(full);
  EXPECT_FALSE(full->context_impossible);
  EXPECT_EQ(full->annotation, ex.annotation);

  const auto one = truncate_context(ex, 1);
  ASSERT_TRUE(one);
  EXPECT_EQ(one->src_context, (std::vector<std::string>{"e f"}));
  EXPECT_EQ(one->annotation.s_p, (IndexSet{3}));
  EXPECT_EQ(one->annotation.t_p, (IndexSet{3}));
  EXPECT_TRUE(one->annotation.s_c.empty());
  EXPECT_TRUE(one->annotation.t_c.empty());
  EXPECT_TRUE(one->annotation.t_c_plus1.empty());
  EXPECT_TRUE(one->context_impossible);

  const auto none = truncate_context(ex, 0);
  ASSERT_TRUE(none);
  EXPECT_EQ(none->annotation.s_p, (IndexSet{0}));
  EXPECT_TRUE(none->src_context.empty());
}

TEST(Histogram, BucketsAboveThreeTogether) {
  std::vector<ContrastiveExample> v(9, three_sentence_example());
  const std::size_t d[] = {0, 0, 1, 2, 3, 4, 5, 9, 1};
  for (std::size_t i = 0; i < v.size(); ++i) v[i].antecedent_distance = d[i];
  const auto h = distance_histogram(v);
  EXPECT_EQ(h, (DistanceHistogram{2, 2, 1, 1, 3}));
  EXPECT_EQ(distance_bucket_name(4), ">3");
}

TEST(Scoring, TiedCandidatesDoNotCountAsCorrect) {
  const Model m = tiny_model(3);
  auto ex = encode_example(m.vocab(), three_sentence_example());
  ex.targets[1] = ex.targets[0];
  const auto s = score_example(m, ex);
  EXPECT_EQ(s.logliks[0], s.logliks[1]);
  EXPECT_TRUE(s.tie);
  EXPECT_EQ(s.indicator, 0);
}

TEST(Scoring, DumpReranksToTheSameIndicatorsAndLikelihoods) {
  const Model m = tiny_model(17);
  Rng rng(17);
  std::vector<EncodedExample> exs;
  for (std::size_t i = 0; i < 30; ++i) exs.push_back(random_encoded_example(rng, m, i));
  const auto scored = score_all(m, exs);
  const auto path = temp_path("scored.jsonl");
  save_scored(scored, path);
  std::ifstream in(path);
  std::string line;
  std::size_t k = 0, hits = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    const auto ll = j.at("candidate_logliks").get<std::vector<double>>();
    ASSERT_EQ(ll.size(), exs[k].targets.size());
    // Independent oracle: a fresh full forward per candidate.
    for (std::size_t c = 0; c < ll.size(); ++c)
      EXPECT_EQ(ll[c], sequence_log_likelihood(m, exs[k].source, exs[k].targets[c]));
    bool strict = true;
    for (std::size_t c = 0; c < ll.size(); ++c)
      if (c != exs[k].correct && ll[c] >= ll[exs[k].correct]) strict = false;
    EXPECT_EQ(j.at("I").get<int>(), strict ? 1 : 0);
    EXPECT_EQ(j.at("id").get<std::string>(), exs[k].id);
    hits += strict;
    ++k;
  }
  EXPECT_EQ(k, exs.size());
  EXPECT_DOUBLE_EQ(accuracy(scored), static_cast<double>(hits) / static_cast<double>(k));
}

TEST(Scoring, DistancePartitionsRecombineToOverallAccuracy) {
  std::vector<ScoredExample> s;
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    ScoredExample e;
    e.distance = rng.below(6);
    e.indicator = rng.uniform() < 0.7;
    s.push_back(e);
  }
  double recombined = 0.0;
  for (std::size_t d = 0; d < 6; ++d) {
    const auto f = [d](std::size_t x) { return x == d; };
    std::size_t n = 0;
    for (const auto& e : s) n += e.distance == d;
    recombined += accuracy(s, f) * static_cast<double>(n) / 200.0;
  }
  EXPECT_NEAR(recombined, accuracy(s), 1e-12);
  EXPECT_THROW(accuracy(s, [](std::size_t d) { return d > 100; }), Error);
}

TEST(Scoring, PlanEntriesThatTheExampleCannotSupportAreSkipped) {
  const Model m = tiny_model(6);
  auto raw = three_sentence_example();
  raw.annotation = make_annotation({6}, {}, {6}, {}, 9);
  const auto ex = encode_example(m.vocab(), raw);
  InterventionPlan plan;
  plan.add(modify_entry({ModuleKind::DecoderSelf, 1, 1}, Relation::TP_TC, 0.99));
  const auto a = score_example(m, ex);
  const auto b = score_example(m, ex, &plan);
  EXPECT_EQ(a.logliks, b.logliks);
  // With an antecedent the same plan changes the scores.
  const auto ex2 = encode_example(m.vocab(), three_sentence_example());
  EXPECT_NE(score_example(m, ex2).logliks, score_example(m, ex2, &plan).logliks);
}
