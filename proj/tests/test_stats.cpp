#include <gtest/gtest.h>

#include <cmath>

#include "ctxattn/stats.hpp"
#include "test_util.hpp"

using namespace ctxattn;

namespace {

// Textbook Pearson correlation, accumulated in long double.
double pearson(const std::vector<double>& x, const std::vector<int>& y) {
  const auto n = static_cast<long double>(x.size());
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

struct Sample {
  std::vector<double> x;
  std::vector<int> y;
};

Sample random_sample(Rng& rng) {
  Sample s;
  const std::size_t n = 2 + rng.below(60);
  for (std::size_t i = 0; i < n; ++i) {
    s.x.push_back(rng.uniform(0.0, 1.0));
    s.y.push_back(rng.uniform() < 0.5);
  }
  s.y[0] = 0;
  s.y[1] = 1;
  return s;
}

}  // namespace

TEST(PointBiserial, EqualsPearsonOnRandomData) {
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    const auto s = random_sample(rng);
    EXPECT_NEAR(point_biserial(s.x, s.y), pearson(s.x, s.y), 1e-12);
  }
}

TEST(PointBiserial, AffineInvariantAndSignFlips) {
  Rng rng(2);
  for (int t = 0; t < 100; ++t) {
    const auto s = random_sample(rng);
    const double r = point_biserial(s.x, s.y);
    auto up = s.x, down = s.x;
    for (double& v : up) v = 3.5 * v - 2.0;
    for (double& v : down) v = -0.5 * v + 7.0;
    auto flipped = s.y;
    for (int& v : flipped) v = 1 - v;
    EXPECT_NEAR(point_biserial(up, s.y), r, 1e-12);
    EXPECT_NEAR(point_biserial(down, s.y), -r, 1e-12);
    EXPECT_NEAR(point_biserial(s.x, flipped), -r, 1e-12);
  }
}

TEST(PointBiserial, UndefinedCasesAreErrors) {
  try {
    point_biserial({0.1, 0.2, 0.3}, {1, 1, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("correlation undefined"), std::string::npos);
  }
  EXPECT_THROW(point_biserial({0.5, 0.5}, {0, 1}), Error);
  EXPECT_THROW(point_biserial({0.5}, {0, 1}), Error);
  EXPECT_THROW(point_biserial({0.5, 0.2}, {0, 2}), Error);
  // Perfect separation gives one.
  EXPECT_NEAR(point_biserial({0.0, 1.0}, {0, 1}), 1.0, 1e-15);
}

TEST(Overlap, AdditiveFullAndWorkedCases) {
  // Dyadic accuracies keep the arithmetic exact.
  EXPECT_EQ(overlap(0.5, {0.625, 0.75}, 0.875), 0.0);
  EXPECT_EQ(overlap(0.5, {0.625, 0.75}, 0.5), 1.0);
  EXPECT_NEAR(overlap(0.80, {0.82, 0.83}, 0.825), 0.5, 1e-12);
  try {
    overlap(0.8, {0.8, 0.79}, 0.81);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("no individual improvement"), std::string::npos);
  }
}

TEST(Taxonomy, FollowsThresholds) {
  const TaxonomyThresholds t;
  EXPECT_EQ(categorize(0.2, -0.01, 0.01, t), HeadCategory::AttendingFullyResponsive);
  EXPECT_EQ(categorize(0.2, -0.01, 0.0, t), HeadCategory::AttendingNegativelyResponsive);
  EXPECT_EQ(categorize(0.2, 0.0, 0.01, t), HeadCategory::AttendingPositivelyResponsive);
  EXPECT_EQ(categorize(0.2, 0.001, -0.001, t), HeadCategory::AttendingNonResponsive);
  EXPECT_EQ(categorize(0.05, 0.0, 0.01, t), HeadCategory::NonAttendingPositivelyResponsive);
  EXPECT_EQ(categorize(0.05, -0.5, 0.0, t), HeadCategory::Irrelevant);
  EXPECT_EQ(categorize(0.05, 0.0, 0.0, t), HeadCategory::Irrelevant);
  // Boundaries are inclusive.
  EXPECT_EQ(categorize(0.10, -0.005, 0.005, t), HeadCategory::AttendingFullyResponsive);
}

TEST(RelationScore, IsTheMaximumOverTheRelationBlock) {
  const Model m = fixture::tiny_model(4);
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto ex = fixture::random_encoded_example(rng, m, static_cast<std::size_t>(t));
    const auto res = forward(m, ex.source, shift_right(ex.correct_target()), {nullptr, nullptr, true});
    for (const auto& a : m.config().all_heads())
      for (Relation r : kAllRelations) {
        if (relation_module(r) != a.kind) {
          EXPECT_THROW(relation_score(*res.trace, a, r, ex.annotation), Error);
          continue;
        }
        const auto rr = resolve(r, ex.annotation);
        const Matrix& z = res.trace->at(a).weights;
        double best = -1.0;
        for (std::size_t i = 0; i < z.rows(); ++i)
          for (std::size_t j = 0; j < z.cols(); ++j) {
            const bool in_y = std::find(rr.queries.begin(), rr.queries.end(), i) != rr.queries.end();
            const bool in_x = std::find(rr.keys.begin(), rr.keys.end(), j) != rr.keys.end();
            if (in_y && in_x) best = std::max(best, z(i, j));
          }
        EXPECT_EQ(relation_score(*res.trace, a, r, ex.annotation), best);
      }
  }
}

TEST(Reports, NumbersRoundTripAndRowsHaveElevenFields) {
  for (double x : {0.1, 1.0 / 3.0, -0.0033333333333332993, 0.0, 1e-300, 0.99}) {
    EXPECT_EQ(std::strtod(format_double(x).c_str(), nullptr), x);
  }
  EXPECT_EQ(format_double(0.5), "0.5");
  HeadReport r;
  r.address = {ModuleKind::DecoderSelf, 2, 3};
  r.relation = Relation::TP_TC1;
  r.n_examples = 10;
  r.mean_score = 0.25;
  r.delta_low = -0.1;
  r.delta_high = 0.0;
  r.category = HeadCategory::AttendingNegativelyResponsive;
  const auto row = report_row(r);
  EXPECT_EQ(row, "decoder-self,2,3,TP_TC1,10,0.25,NA,-0.1,0,NA,attending-negatively-responsive");
  const std::string header = kReportHeader;
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 10);
  EXPECT_EQ(std::count(row.begin(), row.end(), ','), 10);
}

TEST(Reports, HistogramPutsOneInTheLastBin) {
  EXPECT_EQ(histogram01({0.0, 0.05, 0.1, 0.999, 1.0}, 10), (std::vector<std::size_t>{2, 1, 0, 0, 0, 0, 0, 0, 0, 2}));
  EXPECT_THROW(histogram01({1.5}, 10), Error);
  EXPECT_THROW(histogram01({0.5}, 0), Error);
}
