// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Tolerances are pinned below.

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>

#include "ctxattn/pipeline.hpp"
#include "test_util.hpp"

using namespace ctxattn;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& why) {
    if (!ok && pass) detail = why;
    pass = pass && ok;
  }
};

std::string fmt(double x) {
  std::ostringstream os;
  os << std::setprecision(6) << x;
  return os.str();
}

IndexSet iota(std::size_t n) {
  IndexSet out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

// Softmax in long double over a full row, independent of the library kernel.
std::vector<long double> reference_softmax(const std::vector<double>& h) {
  const double mx = *std::max_element(h.begin(), h.end());
  long double s = 0;
  std::vector<long double> z(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) s += z[j] = std::exp(static_cast<long double>(h[j] - mx));
  for (auto& v : z) v /= s;
  return z;
}

// 1. Mass identity of the modify rewrite.
Outcome mass_identity() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng = Rng(101).substream("test-perturb");
  double worst_mass = 0, worst_equal = 0, worst_ratio = 0;
  for (double c : {0.01, 0.25, 0.5, 0.75, 0.99}) {
    for (int t = 0; t < 500; ++t) {
      const std::size_t n = 2 + rng.below(30);
      std::vector<double> h(n);
      for (double& x : h) x = rng.uniform(-10.0, 10.0);
      IndexSet perm = iota(n);
      rng.shuffle(perm);
      const std::size_t k = 1 + rng.below(n - 1);
      IndexSet subset(perm.begin(), perm.begin() + static_cast<long>(k));
      std::sort(subset.begin(), subset.end());
      const auto z = reference_softmax(modify_row(h, subset, iota(n), c));
      const auto z0 = reference_softmax(h);
      long double mass = 0;
      for (auto j : subset) mass += z[j];
      worst_mass = std::max(worst_mass, static_cast<double>(std::fabs(mass - c)));
      for (auto j : subset)
        worst_equal = std::max(worst_equal, static_cast<double>(std::fabs(z[j] - z[subset[0]])));
      const std::size_t ref = perm[k];
      for (std::size_t p = k; p < n; ++p) {
        const auto j = perm[p];
        worst_ratio =
            std::max(worst_ratio, static_cast<double>(std::fabs((z[j] / z[ref]) / (z0[j] / z0[ref]) - 1.0L)));
      }
    }
  }
  const double secs = seconds_since(t0);
  o.require(worst_mass <= 1e-9, "mass error " + fmt(worst_mass));
  o.require(worst_equal <= 1e-12, "subset spread " + fmt(worst_equal));
  o.require(worst_ratio <= 1e-9, "complement ratio error " + fmt(worst_ratio));
  o.require(secs < 1.0, "runtime " + fmt(secs) + " s");
  if (o.pass)
    o.detail = "2500 cases; max |mass-C| " + fmt(worst_mass) + ", ratio err " + fmt(worst_ratio) + ", " + fmt(secs) + " s";
  return o;
}

// 2. Disable identity, checked through full forward passes.
Outcome disable_identity() {
  Outcome o;
  fixture::TinyShape s;
  s.enc = 2;
  s.dec = 2;
  std::size_t rows_checked = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Model m = fixture::tiny_model(seed, s);
    Rng rng(seed);
    const auto ex = fixture::random_encoded_example(rng, m, seed);
    const auto tgt_in = shift_right(ex.correct_target());
    const auto plain = forward(m, ex.source, tgt_in, {nullptr, &ex.annotation, true});
    for (const auto& a : m.config().all_heads())
      for (Relation r : kAllRelations) {
        if (relation_module(r) != a.kind) continue;
        const auto rr = resolve_unchecked(r, ex.annotation);
        if (rr.queries.empty() || rr.keys.empty()) continue;
        InterventionPlan plan;
        plan.add(disable_entry(a, r));
        const auto res = forward(m, ex.source, tgt_in, {&plan, &ex.annotation, true});
        const auto& tr = res.trace->at(a);
        const auto& base = plain.trace->at(a);
        for (std::size_t i = 0; i < tr.weights.rows(); ++i) {
          const bool addressed = std::find(rr.queries.begin(), rr.queries.end(), i) != rr.queries.end();
          const double n = static_cast<double>(tr.mask.attended(i).size());
          for (std::size_t j = 0; j < tr.weights.cols(); ++j) {
            if (addressed) {
              const double want = tr.mask(i, j) ? 1.0 / n : 0.0;
              o.require(std::fabs(tr.weights(i, j) - want) <= 1e-12, a.str() + " row " + std::to_string(i) + " not uniform");
            } else {
              const double x = tr.weights(i, j), y = base.weights(i, j);
              const double hx = tr.rewritten(i, j), hy = base.rewritten(i, j);
              o.require(std::memcmp(&x, &y, sizeof x) == 0 && std::memcmp(&hx, &hy, sizeof hx) == 0,
                        a.str() + " unaddressed row " + std::to_string(i) + " changed");
            }
          }
          rows_checked += addressed;
        }
      }
  }
  o.require(rows_checked > 0, "no rows addressed");
  if (o.pass) o.detail = std::to_string(rows_checked) + " addressed rows uniform; all other rows bitwise equal";
  return o;
}

// 3. Point-biserial against an independent Pearson oracle.
Outcome point_biserial_oracle() {
  Outcome o;
  Rng rng(303);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.below(200);
    std::vector<double> x(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = rng.uniform();
      y[i] = rng.uniform() < 0.3 ? 1 : 0;
    }
    // Force both classes to appear.
    const std::size_t one = rng.below(n);
    y[one] = 1;
    y[(one + 1 + rng.below(n - 1)) % n] = 0;
    long double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) mx += x[i], my += y[i];
    mx /= n;
    my /= n;
    long double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sxy += (x[i] - mx) * (y[i] - my);
      sxx += (x[i] - mx) * (x[i] - mx);
      syy += (y[i] - my) * (y[i] - my);
    }
    const double oracle = static_cast<double>(sxy / std::sqrt(sxx * syy));
    worst = std::max(worst, std::fabs(point_biserial(x, y) - oracle));
  }
  o.require(worst <= 1e-12, "max deviation " + fmt(worst));
  bool raised = false;
  try {
    point_biserial({0.2, 0.4, 0.6}, {0, 0, 0});
  } catch (const Error&) {
    raised = true;
  }
  o.require(raised, "single-class input did not raise");
  if (o.pass) o.detail = "1000 sets; max |r_pb - pearson| " + fmt(worst) + "; single class raises";
  return o;
}

// 4. Overlap on additive, fully overlapping and worked cases.
Outcome overlap_cases() {
  Outcome o;
  // Dyadic accuracies make the additive and full cases exact in binary.
  const double additive = overlap(0.5, {0.5 + 0.015625, 0.5 + 0.03125}, 0.5 + 0.046875);
  const double full = overlap(0.5, {0.5 + 0.015625, 0.5 + 0.03125}, 0.5);
  const double worked = overlap(0.8, {0.82, 0.83}, 0.825);
  o.require(additive == 0.0, "additive case gave " + format_double(additive));
  o.require(full == 1.0, "full case gave " + format_double(full));
  o.require(std::fabs(worked - 0.5) <= 1e-12, "worked case gave " + format_double(worked));
  if (o.pass) o.detail = "O = 0, O = 1 exactly; worked case " + format_double(worked);
  return o;
}

// 5. Head-tuning gradients and locality.
Outcome head_tuning() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) worst = std::max(worst, fixture::head_tune_gradient_error(seed, 1e-4));
  o.require(worst < 1e-5, "max relative error " + fmt(worst));

  fixture::TinyShape s;
  s.enc = 2;
  s.dec = 2;
  const Model m = fixture::tiny_model(55, s);
  Rng rng(55);
  std::vector<EncodedExample> ex;
  for (std::size_t i = 0; i < 12; ++i) ex.push_back(fixture::random_encoded_example(rng, m, i));
  HeadTuneConfig cfg;
  cfg.steps = 100;
  cfg.batch_size = 4;
  cfg.lr = 1e-2;
  for (const auto& [a, r] : std::vector<std::pair<HeadAddress, Relation>>{
           {{ModuleKind::DecoderSelf, 2, 2}, Relation::TP_TC1},
           {{ModuleKind::Cross, 1, 1}, Relation::TP_SC},
           {{ModuleKind::EncoderSelf, 2, 1}, Relation::SP_SC}}) {
    const auto res = head_tune(m, {a, r, 0.9}, ex, cfg);
    o.require(fixture::same_weights_except(m, res.model, a), a.str() + ": parameters outside the slices moved");
    o.require(!(m.weights() == res.model.weights()), a.str() + ": nothing moved");
  }
  const double secs = seconds_since(t0);
  o.require(secs < 30.0, "runtime " + fmt(secs) + " s");
  if (o.pass) o.detail = "20 seeds; max rel err " + fmt(worst) + "; locality after 100 steps; " + fmt(secs) + " s";
  return o;
}

// 6. Desk-scale pipeline with the pinned seed.
Outcome desk_pipeline(const fs::path& fixtures, const fs::path& work) {
  Outcome o;
  const auto t0 = Clock::now();
  const auto cfg = load_pipeline_config((fixtures / "desk_config.json").string());
  const auto root = work / "desk";
  fs::remove_all(root);
  const RunDir dir(root);
  std::ostringstream log;
  run_pipeline(cfg, dir, log);
  const double secs = seconds_since(t0);

  const auto eval = read_json(dir.in("eval.json", "eval"));
  const double acc = eval.at("accuracy").get<double>();
  const double acc0 = eval.at("by_distance").at("0").at("accuracy").get<double>();
  o.require(acc >= 0.90, "(a) overall accuracy " + format_double(acc));
  o.require(acc0 >= 0.95, "(a) distance-0 accuracy " + format_double(acc0));

  const auto tuning = read_json(dir.in("tuning.json", "tune"));
  const auto head = parse_head_address(tuning.at("head").get<std::string>());
  const auto rel = parse_relation(tuning.at("relation").get<std::string>());
  const auto measure = read_measure(dir.in("measure.csv", "measure"));
  const auto sweep = read_sweep(dir.in("sweep.csv", "sweep"));
  double mean = -1;
  for (const auto& m : measure)
    if (m.head == head && m.relation == rel) mean = m.mean_score;
  const auto* lo = find_sweep(sweep, head, rel, 0.01);
  const auto* hi = find_sweep(sweep, head, rel, 0.99);
  o.require(head.kind == ModuleKind::DecoderSelf && (rel == Relation::TP_TC || rel == Relation::TP_TC1),
            "(b) designated head is not a decoder-self TP_TC/TP_TC1 head");
  o.require(lo && hi, "(b) designated head missing from the sweep");
  // Accuracies are multiples of 1/n, so a 1e-12 slack only absorbs rounding.
  constexpr double slack = 1e-12;
  if (lo && hi) {
    o.require(mean >= 0.10, "(b) mean relation score " + format_double(mean));
    o.require(lo->delta <= -0.02 + slack, "(b) delta at C=0.01 " + format_double(lo->delta));
    o.require(hi->delta >= -slack, "(c) delta at C=0.99 " + format_double(hi->delta));
  }
  const double base = tuning.at("base_accuracy").get<double>();
  const double tuned = tuning.at("tuned_accuracy").get<double>();
  const double modified = tuning.at("modified_accuracy").get<double>();
  o.require(base <= tuned + slack && tuned <= modified + 0.01 + slack,
            "(d) base " + format_double(base) + ", tuned " + format_double(tuned) + ", modified " +
                format_double(modified));
  o.require(secs <= 900.0, "runtime " + fmt(secs) + " s");
  if (o.pass)
    o.detail = "acc " + fmt(acc) + " (d0 " + fmt(acc0) + "); " + head.str() + " " + std::string(relation_name(rel)) +
               " mean " + fmt(mean) + ", d@0.01 " + fmt(lo->delta) + ", d@0.99 " + fmt(hi->delta) + "; tuned " +
               fmt(tuned) + " vs base " + fmt(base) + "/modified " + fmt(modified) + "; " + fmt(secs) + " s";
  return o;
}

// 7. Two fixture runs produce byte-identical outputs (and match the goldens).
Outcome deterministic_replay(const fs::path& fixtures, const fs::path& work) {
  Outcome o;
  auto cfg = load_pipeline_config((fixtures / "config.json").string());
  std::array<fs::path, 2> roots{work / "replay_a", work / "replay_b"};
  for (const auto& r : roots) {
    fs::remove_all(r);
    std::ostringstream log;
    run_pipeline(cfg, RunDir(r), log, true);
  }
  for (const auto& name : golden_files())
    o.require(read_text((roots[0] / name).string()) == read_text((roots[1] / name).string()), name + " differs");
  std::ostringstream log;
  const auto res = verify_fixtures(fixtures, work / "replay_verify", log);
  for (const auto& r : res) o.require(r.pass, "golden " + r.file + " mismatch: " + r.detail);
  if (o.pass) o.detail = std::to_string(golden_files().size()) + " files byte-identical across runs and equal to goldens";
  return o;
}

// 8. Shaped datasets reproduce the reference per-distance counts.
Outcome dataset_shapes(const fs::path& fixtures, const fs::path& work) {
  Outcome o;
  const auto shapes = read_json((fixtures / "shaped" / "shapes.json").string());
  const auto g = default_grammar();
  std::ostringstream summary;
  for (const auto& [name, entry] : shapes.items()) {
    std::map<std::size_t, std::size_t> counts;
    for (const auto& [d, n] : entry.at("generate").items()) counts[std::stoul(d)] = n.get<std::size_t>();
    const auto expected = entry.at("expected").get<std::vector<std::size_t>>();
    const auto path = (work / (name + ".jsonl")).string();
    save_contrastive(shaped_contrastive(g, counts, entry.at("seed").get<std::uint64_t>()), path);
    o.require(sha256_hex(read_text(path)) == entry.at("sha256").get<std::string>(), name + ": file digest differs");

    LoadStats st;
    const auto loaded = load_contrastive(path, 5, &st);
    const auto h = distance_histogram(loaded);
    o.require(st.dropped == 0, name + ": dropped examples on load");
    o.require(std::vector<std::size_t>(h.begin(), h.end()) == expected, name + ": histogram differs");

    // Sentence-level protocol: only intra-sentential examples, evaluated
    // without context, and every one of them stays resolvable.
    std::size_t kept = 0, impossible_kept = 0, other_possible = 0;
    for (const auto& ex : loaded) {
      const auto t = truncate_context(ex, 0);
      if (!t) continue;
      if (ex.antecedent_distance == 0) {
        ++kept;
        impossible_kept += t->context_impossible;
      } else {
        other_possible += !t->context_impossible;
      }
    }
    o.require(kept == expected[0] && impossible_kept == 0 && other_possible == 0,
              name + ": distance-0 filter kept " + std::to_string(kept));
    summary << name << ' ';
    for (std::size_t i = 0; i < h.size(); ++i) summary << (i ? "/" : "") << h[i];
    summary << " (d0 " << kept << ") ";
  }
  if (o.pass) o.detail = summary.str();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string work_dir = "acceptance_work", fixtures = "fixtures";
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "Scratch directory")->capture_default_str();
  app.add_option("--fixtures", fixtures, "Fixture directory")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria (1-8)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work_dir);

  const std::vector<std::function<Outcome()>> criteria{
      mass_identity,
      disable_identity,
      point_biserial_oracle,
      overlap_cases,
      head_tuning,
      [&] { return desk_pipeline(fixtures, work_dir); },
      [&] { return deterministic_replay(fixtures, work_dir); },
      [&] { return dataset_shapes(fixtures, work_dir); },
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << o.detail << std::endl;
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
