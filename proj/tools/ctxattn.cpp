// Command-line front end for the experiment pipeline. See `ctxattn --help`.

#include <CLI11.hpp>
#include <iostream>

#include "ctxattn/pipeline.hpp"

using namespace ctxattn;

namespace {

struct Common {
  std::string config;
  std::string out_dir = "run";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> context_size;

  PipelineConfig load() const {
    PipelineConfig cfg = config.empty() ? PipelineConfig{} : load_pipeline_config(config);
    if (seed) cfg.seed = *seed;
    if (context_size) cfg.context_size = *context_size;
    return cfg;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "Pipeline configuration (JSON)")->check(CLI::ExistingFile);
  app->add_option("--out-dir", c.out_dir, "Run directory for inputs and outputs")->capture_default_str();
  app->add_option("--seed", c.seed, "Global seed (overrides the config)");
  app->add_option("--context-size", c.context_size, "Context sentences (overrides the config)");
}

Selection parse_selection(const std::vector<std::string>& heads, const std::vector<std::string>& relations) {
  Selection s;
  for (const auto& h : heads)
    if (h != "all") s.heads.push_back(parse_head_address(h));
  for (const auto& r : relations)
    if (r != "all") s.relations.push_back(parse_relation(r));
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-head analysis for context-aware translation models"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("generate", "Generate grammar, corpus, training pairs and contrastive splits");
  auto* trn = app.add_subcommand("train", "Train the model (sentence-level phase, then context-aware)");
  auto* evl = app.add_subcommand("eval", "Contrastive accuracy, optionally under an intervention plan");
  auto* msr = app.add_subcommand("measure", "Per-head relation scores and their correlation with correctness");
  auto* swp = app.add_subcommand("sweep", "Accuracy with each head modified to each C");
  auto* dis = app.add_subcommand("disable", "Accuracy with each head's relation rows made uniform");
  auto* ovl = app.add_subcommand("overlap", "Joint modification of the top-k heads, pairwise");
  auto* tun = app.add_subcommand("tune", "Head tuning and its evaluation");
  auto* rep = app.add_subcommand("report", "Merge measurements and sweeps into categorised head reports");
  auto* all = app.add_subcommand("pipeline", "Run every step in order");
  auto* ver = app.add_subcommand("verify-fixtures", "Re-run the fixture pipeline and diff against goldens");
  auto* reg = app.add_subcommand("regenerate-fixtures", "Rewrite the golden files from a fresh fixture run");

  for (auto* s : {gen, trn, evl, msr, swp, dis, ovl, tun, rep, all}) add_common(s, common);
  for (auto* s : {ver, reg}) s->add_option("--seed", common.seed, "Accepted for uniformity; fixtures pin their own seed");

  std::string plan_path;
  evl->add_option("--plan", plan_path, "Intervention plan (JSON list)")->check(CLI::ExistingFile);

  std::vector<std::string> heads{"all"}, relations{"all"};
  std::vector<double> c_values;
  bool coarse = false, emit_plans = false;
  for (auto* s : {swp, dis}) {
    s->add_option("--heads", heads, "Head addresses such as d-2-3, or 'all'")->delimiter(',');
    s->add_option("--relation", relations, "Relations such as TP_TC, or 'all'")->delimiter(',');
  }
  swp->add_option("--c-values", c_values, "Target masses (default 0.01,0.25,0.5,0.75,0.99)")->delimiter(',');
  swp->add_flag("--coarse", coarse, "Only C = 0.01 and 0.99");
  swp->add_flag("--emit-plans", emit_plans, "Also write each plan to plans/");
  all->add_flag("--coarse", coarse, "Sweep only C = 0.01 and 0.99");

  std::size_t k = 0;
  ovl->add_option("--k", k, "Number of top heads (default from config)");

  std::string tune_head, tune_relation;
  std::optional<double> tune_c;
  tun->add_option("--head", tune_head, "Head to tune (default: designated from measure/sweep)");
  tun->add_option("--relation", tune_relation, "Relation to tune toward");
  tun->add_option("--C", tune_c, "Target mass (default 0.99)");

  std::string fixtures = "fixtures", work_dir = "fixture_run";
  for (auto* s : {ver, reg}) {
    s->add_option("--fixtures", fixtures, "Fixture directory")->capture_default_str();
    s->add_option("--work-dir", work_dir, "Scratch directory for the regenerated run")->capture_default_str();
  }

  CLI11_PARSE(app, argc, argv);

  try {
    auto& out = std::cout;
    if (ver->parsed()) {
      const auto res = verify_fixtures(fixtures, work_dir, out);
      return std::all_of(res.begin(), res.end(), [](const FixtureResult& r) { return r.pass; }) ? 0 : 1;
    }
    if (reg->parsed()) {
      regenerate_fixtures(fixtures, work_dir, out);
      return 0;
    }
    const PipelineConfig cfg = common.load();
    const RunDir dir(common.out_dir);
    if (gen->parsed()) cmd_generate(cfg, dir, out);
    if (trn->parsed()) cmd_train(cfg, dir, out);
    if (evl->parsed()) cmd_eval(cfg, dir, out, plan_path);
    if (msr->parsed()) cmd_measure(cfg, dir, out);
    if (swp->parsed()) {
      auto cs = coarse ? std::vector<double>{0.01, 0.99} : (c_values.empty() ? cfg.c_values : c_values);
      cmd_sweep(cfg, dir, out, parse_selection(heads, relations), cs, emit_plans);
    }
    if (dis->parsed()) cmd_disable(cfg, dir, out, parse_selection(heads, relations));
    if (ovl->parsed()) cmd_overlap(cfg, dir, out, k ? k : cfg.overlap_k);
    if (tun->parsed()) {
      std::optional<HeadTuneTarget> target;
      if (!tune_head.empty() || !tune_relation.empty()) {
        if (tune_head.empty() || tune_relation.empty()) throw Error("--head and --relation go together");
        target = HeadTuneTarget{parse_head_address(tune_head), parse_relation(tune_relation), tune_c.value_or(cfg.tune_c)};
      }
      cmd_tune(cfg, dir, out, target);
    }
    if (rep->parsed()) cmd_report(cfg, dir, out);
    if (all->parsed()) run_pipeline(cfg, dir, out, coarse);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
