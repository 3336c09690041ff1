#include <gtest/gtest.h>

#include "ctxattn/pipeline.hpp"
#include "test_util.hpp"

using namespace ctxattn;

namespace {

PipelineConfig fixture_config() { return load_pipeline_config(std::string(CTXATTN_FIXTURE_DIR) + "/config.json"); }

std::size_t data_rows(const std::string& path) { return read_csv(path).rows.size(); }

// One full fixture-config run per test process, shared by the tests below.
const RunDir& shared_run() {
  static const RunDir dir = [] {
    const auto root = fs::path(fixture::temp_path("pipeline_run"));
    fs::remove_all(root);
    RunDir d(root);
    std::ostringstream log;
    run_pipeline(fixture_config(), d, log, true);
    return d;
  }();
  return dir;
}

// Fresh directory seeded with the shared run's upstream artifacts.
RunDir copy_of_shared(const std::string& name) {
  const auto root = fs::path(fixture::temp_path(name));
  fs::remove_all(root);
  fs::copy(shared_run().root(), root, fs::copy_options::recursive);
  return RunDir(root);
}

}  // namespace

TEST(Pipeline, SweepOfOneHeadAtOneMassWritesOneRow) {
  const auto dir = copy_of_shared("sweep_one");
  Selection sel;
  sel.heads = {{ModuleKind::DecoderSelf, 1, 2}};
  sel.relations = {Relation::TP_TC1};
  std::ostringstream log;
  cmd_sweep(fixture_config(), dir, log, sel, {0.5});
  const auto t = read_csv(dir.root() / "sweep.csv");
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0][t.column("C")], "0.5");
  EXPECT_EQ(t.rows[0][t.column("relation")], "TP_TC1");
  EXPECT_THROW(cmd_sweep(fixture_config(), dir, log, sel, {1.5}), Error);
}

TEST(Pipeline, OverlapOfTwoHeadsWritesOnePair) {
  const auto dir = copy_of_shared("overlap_two");
  std::ostringstream log;
  cmd_overlap(fixture_config(), dir, log, 2);
  EXPECT_EQ(data_rows(dir.root() / "overlap.csv"), 1u);
  EXPECT_THROW(cmd_overlap(fixture_config(), dir, log, 1), Error);
}

TEST(Pipeline, MissingUpstreamFileIsNamed) {
  const auto root = fs::path(fixture::temp_path("empty_run"));
  fs::remove_all(root);
  const RunDir dir(root);
  std::ostringstream log;
  try {
    cmd_train(fixture_config(), dir, log);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("grammar.json"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("generate"), std::string::npos) << e.what();
  }
  try {
    cmd_overlap(fixture_config(), dir, log, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("sweep.csv"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, ReportBaseAccuracyMatchesEval) {
  const auto& dir = shared_run();
  const auto eval = read_json((dir.root() / "eval.json").string());
  const auto summary = read_json((dir.root() / "report_summary.json").string());
  EXPECT_EQ(summary.at("base_accuracy").get<double>(), eval.at("accuracy").get<double>());
  // Each report row's deltas are copied from the sweep.
  const auto sweep = read_sweep((dir.root() / "sweep.csv").string());
  const auto report = read_csv(dir.root() / "report.csv");
  ASSERT_FALSE(report.rows.empty());
  for (const auto& row : report.rows) {
    const HeadAddress h{parse_module_kind(row[report.column("module_kind")]), std::stoi(row[report.column("layer")]),
                        std::stoi(row[report.column("head")])};
    const auto* s = find_sweep(sweep, h, parse_relation(row[report.column("relation")]), 0.99);
    ASSERT_NE(s, nullptr);
    EXPECT_EQ(std::stod(row[report.column("delta_acc_0.99")]), s->delta);
  }
}

TEST(Pipeline, EvalUnderAPlanMatchesTheSweepRow) {
  const auto dir = copy_of_shared("eval_plan");
  const auto sweep = read_sweep((dir.root() / "sweep.csv").string());
  const auto& row = sweep.front();
  InterventionPlan plan;
  plan.add(modify_entry(row.head, row.relation, row.c));
  const auto plan_path = dir.out("plan.json");
  save_plan(plan, plan_path);
  std::ostringstream log;
  cmd_eval(fixture_config(), dir, log, plan_path);
  const auto j = read_json(dir.in("eval_plan.json", "eval"));
  EXPECT_EQ(j.at("accuracy").get<double>(), row.accuracy);
}

TEST(Fixtures, ComparisonCatchesPerturbedGoldens) {
  const std::string csv = "a,b\nx,0.25\n";
  EXPECT_EQ(compare_csv(csv, csv, 0.0), "");
  EXPECT_EQ(compare_csv(csv, "a,b\nx,0.2500000000001\n", 1e-9), "");
  EXPECT_NE(compare_csv(csv, "a,b\nx,0.26\n", 1e-12), "");
  EXPECT_NE(compare_csv(csv, "a,b\ny,0.25\n", 1e-12), "");
  EXPECT_NE(compare_csv(csv, "a,b\nx,0.25\nx,0.25\n", 1e-12), "");
  const auto g = nlohmann::json::parse(R"({"acc": 0.5, "by": {"0": 1}})");
  EXPECT_EQ(compare_json(g, g, 0.0), "");
  EXPECT_NE(compare_json(g, nlohmann::json::parse(R"({"acc": 0.51, "by": {"0": 1}})"), 1e-12), "");
  EXPECT_NE(compare_json(g, nlohmann::json::parse(R"({"acc": 0.5})"), 1e-12), "");
}

TEST(Fixtures, VerifyFailsWhenAGoldenIsEdited) {
  const auto fx = fs::path(fixture::temp_path("fixture_copy"));
  fs::remove_all(fx);
  fs::create_directories(fx);
  fs::copy_file(std::string(CTXATTN_FIXTURE_DIR) + "/config.json", fx / "config.json");
  std::ostringstream log;
  regenerate_fixtures(fx, fixture::temp_path("fixture_work"), log);
  auto ok = verify_fixtures(fx, fixture::temp_path("fixture_work2"), log);
  for (const auto& r : ok) EXPECT_TRUE(r.pass) << r.file << ": " << r.detail;

  const auto eval = fx / "golden" / "eval.json";
  auto j = read_json(eval.string());
  j["accuracy"] = j["accuracy"].get<double>() + 0.01;
  write_json(eval.string(), j);
  const auto bad = verify_fixtures(fx, fixture::temp_path("fixture_work2"), log);
  for (const auto& r : bad) EXPECT_EQ(r.pass, r.file != "eval.json") << r.file;
}

TEST(PipelineConfig, JsonOverridesOnlyTheGivenFields) {
  const auto c = pipeline_config_from_json(nlohmann::json::parse(R"({"seed": 9, "model": {"d_model": 32}})"));
  const PipelineConfig d;
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.model.d_model, 32u);
  EXPECT_EQ(c.model.n_heads, d.model.n_heads);
  EXPECT_EQ(c.train.epochs, d.train.epochs);
  EXPECT_EQ(derived_seed(1, "init"), derived_seed(1, "init"));
  EXPECT_NE(derived_seed(1, "init"), derived_seed(2, "init"));
}
