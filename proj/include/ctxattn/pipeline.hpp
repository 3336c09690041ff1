#pragma once

// The experiment pipeline behind the command-line tool. Every command reads
// its inputs from and writes its outputs to one run directory:
//
//   grammar.json          generate   grammar used for every split
//   corpus.jsonl          generate   training documents
//   train_pairs.jsonl     generate   (source, target) ids, context 0..K
//   heldout_pairs.jsonl   generate   pairs for the greedy-decoding check
//   dev.jsonl             generate   contrastive set for checkpoint selection
//   test.jsonl            generate   contrastive evaluation set
//   tune.jsonl            generate   annotated examples for head tuning
//   model.ckpt            train      selected checkpoint
//   train_metrics.jsonl   train      one record per epoch
//   eval.json             eval       accuracy overall and per distance
//   scored.jsonl          eval       per-candidate log-likelihoods
//   measure.csv           measure    mean relation score and r_pb per head
//   measure_histogram.csv measure    binned per-example scores
//   sweep.csv             sweep      accuracy per (head, relation, C)
//   disable.csv           disable    accuracy with each head disabled
//   overlap.csv           overlap    joint modification of top-k heads
//   tuned.ckpt            tune       head-tuned model
//   tuning.json           tune       base / tuned / modified comparison
//   report.csv            report     HeadReport rows with categories
//   report_summary.json   report     thresholds and category counts

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ctxattn/contrastive.hpp"
#include "ctxattn/corpus.hpp"
#include "ctxattn/intervention.hpp"
#include "ctxattn/model.hpp"
#include "ctxattn/stats.hpp"
#include "ctxattn/training.hpp"

namespace ctxattn {

namespace fs = std::filesystem;

struct CorpusSettings {
  std::size_t train_docs = 300;
  std::size_t sents_per_doc = 6;
  DistanceProfile profile{{0, 0.3}, {1, 0.5}, {2, 0.2}};
  std::size_t dev_examples = 200;
  std::size_t test_examples = 300;
  std::size_t tune_examples = 200;
  std::size_t heldout_pairs = 60;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::size_t context_size = 2;
  std::string grammar_path;  // empty: built-in grammar
  CorpusSettings corpus;
  ModelConfig model;
  TrainConfig train;
  std::size_t sentence_epochs = 1;  // sentence-level phase before context training
  HeadTuneConfig tune{5e-3, 150, 16, 1};
  double tune_c = 0.99;
  TaxonomyThresholds thresholds;
  std::vector<double> c_values{0.01, 0.25, 0.5, 0.75, 0.99};
  std::size_t overlap_k = 3;
  std::size_t histogram_bins = 10;

  PipelineConfig() { train.epochs = 4; }
};

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  c.seed = j.value("seed", c.seed);
  c.context_size = j.value("context_size", c.context_size);
  c.grammar_path = j.value("grammar", c.grammar_path);
  if (j.contains("corpus")) {
    const auto& k = j.at("corpus");
    auto& s = c.corpus;
    s.train_docs = k.value("train_docs", s.train_docs);
    s.sents_per_doc = k.value("sents_per_doc", s.sents_per_doc);
    if (k.contains("profile")) {
      s.profile.clear();
      for (const auto& [key, v] : k.at("profile").items()) s.profile[std::stoul(key)] = v.get<double>();
    }
    s.dev_examples = k.value("dev_examples", s.dev_examples);
    s.test_examples = k.value("test_examples", s.test_examples);
    s.tune_examples = k.value("tune_examples", s.tune_examples);
    s.heldout_pairs = k.value("heldout_pairs", s.heldout_pairs);
  }
  if (j.contains("model")) {
    nlohmann::json m = c.model;
    m.update(j.at("model"));
    c.model = m.get<ModelConfig>();
  }
  if (j.contains("train")) {
    nlohmann::json t = c.train;
    t.update(j.at("train"));
    c.train = t.get<TrainConfig>();
    c.sentence_epochs = j.at("train").value("sentence_epochs", c.sentence_epochs);
  }
  if (j.contains("tune")) {
    const auto& t = j.at("tune");
    c.tune.lr = t.value("lr", c.tune.lr);
    c.tune.steps = t.value("steps", c.tune.steps);
    c.tune.batch_size = t.value("batch_size", c.tune.batch_size);
    c.tune_c = t.value("C", c.tune_c);
  }
  if (j.contains("thresholds")) {
    c.thresholds.attend = j.at("thresholds").value("attend", c.thresholds.attend);
    c.thresholds.respond = j.at("thresholds").value("respond", c.thresholds.respond);
  }
  c.c_values = j.value("c_values", c.c_values);
  c.overlap_k = j.value("overlap_k", c.overlap_k);
  c.histogram_bins = j.value("histogram_bins", c.histogram_bins);
  return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path);
  return pipeline_config_from_json(nlohmann::json::parse(in));
}

// Derived seeds: one named substream per consumer of randomness.
inline std::uint64_t derived_seed(std::uint64_t seed, std::string_view name) {
  return Rng(seed).substream(name).next_u64();
}

// ---------------------------------------------------------------------------
// Files

class RunDir {
 public:
  explicit RunDir(fs::path root) : root_(std::move(root)) {}
  const fs::path& root() const { return root_; }

  std::string out(std::string_view name) const {
    const auto p = root_ / name;
    fs::create_directories(p.parent_path());
    return p.string();
  }

  // Path of an upstream artifact; the error names the producing command.
  std::string in(std::string_view name, std::string_view producer) const {
    const auto p = root_ / name;
    if (!fs::exists(p))
      throw Error("missing upstream file " + p.string() + " (run '" + std::string(producer) + "' first)");
    return p.string();
  }

 private:
  fs::path root_;
};

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_json(const std::string& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }
inline nlohmann::json read_json(const std::string& path) { return nlohmann::json::parse(read_text(path)); }

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw Error("CSV has no column '" + std::string(name) + "'");
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::istringstream in(read_text(path));
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw Error("empty CSV " + path);
  t.header = split_csv_line(line);
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size())
      throw Error(path + ":" + std::to_string(n) + ": expected " + std::to_string(t.header.size()) + " cells");
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

// ---------------------------------------------------------------------------
// Shared loading helpers

struct Workbench {
  ToyGrammar grammar;
  Model model;
  std::vector<ContrastiveExample> examples;
  std::vector<EncodedExample> encoded;
};

inline ToyGrammar grammar_for(const PipelineConfig& cfg) {
  return cfg.grammar_path.empty() ? default_grammar() : load_grammar(cfg.grammar_path);
}

inline std::vector<EncodedExample> load_encoded(const Vocabulary& v, const std::string& path,
                                                std::size_t context, std::vector<ContrastiveExample>* raw = nullptr) {
  auto ex = load_contrastive(path, context);
  auto enc = encode_examples(v, ex);
  if (raw) *raw = std::move(ex);
  return enc;
}

inline Workbench open_bench(const RunDir& dir, const PipelineConfig& cfg, const std::string& model_file = "model.ckpt") {
  Workbench w;
  w.grammar = load_grammar(dir.in("grammar.json", "generate"));
  w.model = load_checkpoint(dir.in(model_file, model_file == "model.ckpt" ? "train" : "tune"));
  w.encoded = load_encoded(w.model.vocab(), dir.in("test.jsonl", "generate"), cfg.context_size, &w.examples);
  if (w.encoded.empty()) throw Error("test set is empty");
  return w;
}

inline double base_accuracy(const RunDir& dir) {
  return read_json(dir.in("eval.json", "eval")).at("accuracy").get<double>();
}

// Heads and relations selected by --heads / --relation; empty means all.
struct Selection {
  std::vector<HeadAddress> heads;
  std::vector<Relation> relations;

  std::vector<std::pair<HeadAddress, Relation>> pairs(const ModelConfig& c) const {
    std::vector<std::pair<HeadAddress, Relation>> out;
    const auto hs = heads.empty() ? c.all_heads() : heads;
    for (const auto& h : hs) {
      c.check_address(h);
      for (Relation r : kAllRelations) {
        if (relation_module(r) != h.kind) continue;
        if (!relations.empty() && std::find(relations.begin(), relations.end(), r) == relations.end()) continue;
        out.emplace_back(h, r);
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Commands

inline void cmd_generate(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log) {
  const ToyGrammar g = grammar_for(cfg);
  const Vocabulary v = g.vocabulary();
  save_grammar(g, dir.out("grammar.json"));
  const auto& k = cfg.corpus;
  const auto docs = generate(g, k.train_docs, k.sents_per_doc, k.profile, derived_seed(cfg.seed, "train-docs"));
  save_documents(docs, dir.out("corpus.jsonl"));
  const auto pairs = to_training_pairs(v, docs, cfg.context_size, derived_seed(cfg.seed, "train-pairs"));
  save_training_pairs(pairs, dir.out("train_pairs.jsonl"));

  auto split = [&](std::string_view name, std::size_t n) {
    const auto d = generate(g, std::max<std::size_t>(n, 1), k.sents_per_doc, k.profile,
                            derived_seed(cfg.seed, std::string(name) + "-docs"));
    return to_contrastive(g, d, n, derived_seed(cfg.seed, std::string(name) + "-sample"), cfg.context_size);
  };
  const auto dev = split("dev", k.dev_examples);
  const auto test = split("test", k.test_examples);
  const auto tune = split("tune", k.tune_examples);
  save_contrastive(dev, dir.out("dev.jsonl"));
  save_contrastive(test, dir.out("test.jsonl"));
  save_contrastive(tune, dir.out("tune.jsonl"));

  const auto hdocs = generate(g, std::max<std::size_t>(k.heldout_pairs, 1), k.sents_per_doc, k.profile,
                              derived_seed(cfg.seed, "heldout-docs"));
  auto held = to_training_pairs(v, hdocs, cfg.context_size, derived_seed(cfg.seed, "heldout-pairs"));
  held.resize(std::min(held.size(), k.heldout_pairs));
  save_training_pairs(held, dir.out("heldout_pairs.jsonl"));

  const auto h = distance_histogram(test);
  log << "generate: vocabulary " << v.size() << ", " << docs.size() << " documents, " << pairs.size()
      << " training pairs, dev/test/tune " << dev.size() << "/" << test.size() << "/" << tune.size()
      << " examples\n  test distances:";
  for (std::size_t b = 0; b < h.size(); ++b) log << ' ' << distance_bucket_name(b) << ':' << h[b];
  log << '\n';
}

inline void cmd_train(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log) {
  const auto g = load_grammar(dir.in("grammar.json", "generate"));
  const auto pairs = load_training_pairs(dir.in("train_pairs.jsonl", "generate"));
  const auto v = g.vocabulary();
  const auto dev = load_encoded(v, dir.in("dev.jsonl", "generate"), cfg.context_size);
  ModelConfig mc = cfg.model;
  mc.vocab_size = v.size();
  mc.seed = derived_seed(cfg.seed, "init");
  Model model = Model::initialized(mc, v);

  std::ofstream metrics(dir.out("train_metrics.jsonl"));
  auto record = [&](std::string_view phase) {
    return [&, phase](const EpochMetrics& m) {
      auto j = metrics_to_json(m);
      j["phase"] = phase;
      metrics << j.dump() << '\n';
      log << "train[" << phase << "] epoch " << m.epoch << ": loss " << format_double(m.train_loss)
          << ", token acc " << format_double(m.train_token_acc);
      if (m.selection) log << ", dev acc " << format_double(*m.selection);
      log << '\n';
    };
  };
  if (cfg.sentence_epochs > 0) {
    std::vector<TrainingPair> sentence;
    for (const auto& p : pairs)
      if (p.context == 0) sentence.push_back(p);
    TrainConfig tc = cfg.train;
    tc.epochs = cfg.sentence_epochs;
    tc.seed = derived_seed(cfg.seed, "sentence-phase");
    model = train(model, sentence, tc, {}, record("sentence")).model;
  }
  TrainConfig tc = cfg.train;
  tc.seed = derived_seed(cfg.seed, "context-phase");
  const SelectionMetric select = [&](const Model& m) { return accuracy(score_all(m, dev)); };
  const auto res = train(model, pairs, tc, select, record("context"));
  save_checkpoint(res.model, dir.out("model.ckpt"));
  log << "train: kept epoch " << res.best_epoch << " of the context phase\n";
}

inline nlohmann::json accuracy_record(const std::vector<ScoredExample>& scored) {
  nlohmann::json j;
  j["n_examples"] = scored.size();
  j["accuracy"] = accuracy(scored);
  j["ties"] = tie_count(scored);
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t b = 0; b < 5; ++b) {
    std::size_t n = 0;
    for (const auto& s : scored) n += distance_bucket(s.distance) == b;
    if (n == 0) continue;
    per[std::string(distance_bucket_name(b))] = {
        {"n", n}, {"accuracy", accuracy(scored, [b](std::size_t d) { return distance_bucket(d) == b; })}};
  }
  j["by_distance"] = per;
  return j;
}

inline void cmd_eval(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log,
                     const std::string& plan_path = {}) {
  const auto w = open_bench(dir, cfg);
  InterventionPlan plan;
  if (!plan_path.empty()) plan = load_plan(plan_path);
  const auto scored = score_all(w.model, w.encoded, plan.empty() ? nullptr : &plan);
  auto rec = accuracy_record(scored);
  if (!plan.empty()) rec["plan"] = plan_to_json(plan);
  const std::string stem = plan.empty() ? "eval" : "eval_plan";
  write_json(dir.out(stem + ".json"), rec);
  save_scored(scored, dir.out(plan.empty() ? "scored.jsonl" : "scored_plan.jsonl"));
  log << "eval: accuracy " << format_double(rec["accuracy"].get<double>()) << " on " << scored.size()
      << " examples (" << rec["ties"].get<std::size_t>() << " ties)\n";
}

inline void cmd_measure(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log) {
  const auto w = open_bench(dir, cfg);
  std::map<std::string, int> indicator;
  {
    std::istringstream in(read_text(dir.in("scored.jsonl", "eval")));
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) {
        const auto j = nlohmann::json::parse(line);
        indicator[j.at("id").get<std::string>()] = j.at("I").get<int>();
      }
  }
  const auto pairs = Selection{}.pairs(w.model.config());
  std::map<std::pair<HeadAddress, Relation>, std::pair<std::vector<double>, std::vector<int>>> data;
  for (const auto& ex : w.encoded) {
    const auto it = indicator.find(ex.id);
    if (it == indicator.end()) throw Error("scored.jsonl has no entry for example " + ex.id + "; rerun 'eval'");
    const auto res = forward(w.model, ex.source, shift_right(ex.correct_target()), {nullptr, nullptr, true});
    for (const auto& [h, r] : pairs) {
      if (!supports(r, ex.annotation)) continue;
      auto& d = data[{h, r}];
      d.first.push_back(relation_score(*res.trace, h, r, ex.annotation));
      d.second.push_back(it->second);
    }
  }
  std::ostringstream csv, hist;
  csv << "module_kind,layer,head,relation,n_examples,mean_score,r_pb\n";
  hist << "module_kind,layer,head,relation,bin_lo,bin_hi,count\n";
  for (const auto& [h, r] : pairs) {
    const auto it = data.find({h, r});
    if (it == data.end()) continue;
    const auto& [scores, ind] = it->second;
    std::string rpb = "NA";
    try {
      rpb = format_double(point_biserial(scores, ind));
    } catch (const Error&) {
    }
    const std::string key = std::string(module_name(h.kind)) + ',' + std::to_string(h.layer) + ',' +
                            std::to_string(h.head) + ',' + std::string(relation_name(r));
    csv << key << ',' << scores.size() << ',' << format_double(mean(scores)) << ',' << rpb << '\n';
    const auto counts = histogram01(scores, cfg.histogram_bins);
    for (std::size_t b = 0; b < counts.size(); ++b)
      hist << key << ',' << format_double(static_cast<double>(b) / static_cast<double>(counts.size())) << ','
           << format_double(static_cast<double>(b + 1) / static_cast<double>(counts.size())) << ',' << counts[b]
           << '\n';
  }
  write_text(dir.out("measure.csv"), csv.str());
  write_text(dir.out("measure_histogram.csv"), hist.str());
  log << "measure: " << data.size() << " head/relation pairs over " << w.encoded.size() << " examples\n";
}

inline void cmd_sweep(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log, const Selection& sel,
                      const std::vector<double>& c_values, bool emit_plans = false) {
  for (double c : c_values) check_mass(c);
  const auto w = open_bench(dir, cfg);
  const double base = base_accuracy(dir);
  std::ostringstream csv;
  csv << "module_kind,layer,head,relation,C,accuracy,delta_vs_base\n";
  std::size_t rows = 0;
  for (const auto& [h, r] : sel.pairs(w.model.config())) {
    for (double c : c_values) {
      InterventionPlan plan;
      plan.add(modify_entry(h, r, c));
      if (emit_plans)
        save_plan(plan, dir.out("plans/" + h.str() + "_" + std::string(relation_name(r)) + "_" + format_double(c) + ".json"));
      const double acc = accuracy(score_all(w.model, w.encoded, &plan));
      csv << module_name(h.kind) << ',' << h.layer << ',' << h.head << ',' << relation_name(r) << ','
          << format_double(c) << ',' << format_double(acc) << ',' << format_double(acc - base) << '\n';
      ++rows;
    }
  }
  write_text(dir.out("sweep.csv"), csv.str());
  log << "sweep: " << rows << " rows against base accuracy " << format_double(base) << '\n';
}

inline void cmd_disable(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log, const Selection& sel) {
  const auto w = open_bench(dir, cfg);
  const double base = base_accuracy(dir);
  std::ostringstream csv;
  csv << "module_kind,layer,head,relation,accuracy,delta_vs_base\n";
  std::size_t rows = 0;
  for (const auto& [h, r] : sel.pairs(w.model.config())) {
    InterventionPlan plan;
    plan.add(disable_entry(h, r));
    const double acc = accuracy(score_all(w.model, w.encoded, &plan));
    csv << module_name(h.kind) << ',' << h.layer << ',' << h.head << ',' << relation_name(r) << ','
        << format_double(acc) << ',' << format_double(acc - base) << '\n';
    ++rows;
  }
  write_text(dir.out("disable.csv"), csv.str());
  log << "disable: " << rows << " rows\n";
}

struct SweepRow {
  HeadAddress head;
  Relation relation;
  double c, accuracy, delta;
};

inline std::vector<SweepRow> read_sweep(const std::string& path) {
  const auto t = read_csv(path);
  std::vector<SweepRow> out;
  const auto mk = t.column("module_kind"), l = t.column("layer"), h = t.column("head"), r = t.column("relation"),
             c = t.column("C"), a = t.column("accuracy"), d = t.column("delta_vs_base");
  for (const auto& row : t.rows)
    out.push_back({{parse_module_kind(row[mk]), std::stoi(row[l]), std::stoi(row[h])},
                   parse_relation(row[r]),
                   std::stod(row[c]),
                   std::stod(row[a]),
                   std::stod(row[d])});
  return out;
}

inline const SweepRow* find_sweep(const std::vector<SweepRow>& rows, const HeadAddress& h, Relation r, double c) {
  for (const auto& s : rows)
    if (s.head == h && s.relation == r && s.c == c) return &s;
  return nullptr;
}

inline void cmd_overlap(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log, std::size_t k) {
  if (k < 2) throw Error("overlap needs at least two heads (k >= 2)");
  const auto sweep = read_sweep(dir.in("sweep.csv", "sweep"));
  const auto w = open_bench(dir, cfg);
  const double base = base_accuracy(dir);
  // Best relation per head at C = 0.99, then the top k heads.
  std::map<HeadAddress, SweepRow> best;
  for (const auto& s : sweep) {
    if (s.c != 0.99) continue;
    auto it = best.find(s.head);
    if (it == best.end() || s.delta > it->second.delta) best.insert_or_assign(s.head, s);
  }
  if (best.size() < k)
    throw Error("sweep.csv has C = 0.99 rows for only " + std::to_string(best.size()) + " heads; need " +
                std::to_string(k));
  std::vector<SweepRow> top;
  for (const auto& [h, s] : best) top.push_back(s);
  std::stable_sort(top.begin(), top.end(), [](const SweepRow& a, const SweepRow& b) { return a.delta > b.delta; });
  top.resize(k);
  std::ostringstream csv;
  csv << "head_a,relation_a,head_b,relation_b,accuracy_a,accuracy_b,accuracy_joint,overlap\n";
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) {
      InterventionPlan plan;
      plan.add(modify_entry(top[i].head, top[i].relation, 0.99));
      plan.add(modify_entry(top[j].head, top[j].relation, 0.99));
      const double joint = accuracy(score_all(w.model, w.encoded, &plan));
      std::string o = "NA";
      try {
        o = format_double(overlap(base, {top[i].accuracy, top[j].accuracy}, joint));
      } catch (const Error&) {
      }
      csv << top[i].head.str() << ',' << relation_name(top[i].relation) << ',' << top[j].head.str() << ','
          << relation_name(top[j].relation) << ',' << format_double(top[i].accuracy) << ','
          << format_double(top[j].accuracy) << ',' << format_double(joint) << ',' << o << '\n';
      ++pairs;
    }
  write_text(dir.out("overlap.csv"), csv.str());
  log << "overlap: " << pairs << " pair(s) among the top " << k << " heads\n";
}

struct MeasureRow {
  HeadAddress head;
  Relation relation;
  std::size_t n;
  double mean_score;
  std::optional<double> r_pb;
};

inline std::vector<MeasureRow> read_measure(const std::string& path) {
  const auto t = read_csv(path);
  std::vector<MeasureRow> out;
  const auto mk = t.column("module_kind"), l = t.column("layer"), h = t.column("head"), r = t.column("relation"),
             n = t.column("n_examples"), m = t.column("mean_score"), p = t.column("r_pb");
  for (const auto& row : t.rows) {
    MeasureRow x{{parse_module_kind(row[mk]), std::stoi(row[l]), std::stoi(row[h])},
                 parse_relation(row[r]),
                 std::stoul(row[n]),
                 std::stod(row[m]),
                 std::nullopt};
    if (row[p] != "NA") x.r_pb = std::stod(row[p]);
    out.push_back(x);
  }
  return out;
}

// The decoder-self head/relation on the target antecedent that attends at
// least the threshold and loses the most accuracy when modified to 0.01.
inline std::optional<HeadTuneTarget> designated_head(const std::vector<MeasureRow>& measure,
                                                     const std::vector<SweepRow>& sweep,
                                                     const TaxonomyThresholds& t, double c) {
  std::optional<HeadTuneTarget> best;
  double best_delta = 0.0;
  for (const auto& m : measure) {
    if (m.head.kind != ModuleKind::DecoderSelf || m.mean_score < t.attend) continue;
    const auto* s = find_sweep(sweep, m.head, m.relation, 0.01);
    if (!s) continue;
    if (!best || s->delta < best_delta) {
      best = HeadTuneTarget{m.head, m.relation, c};
      best_delta = s->delta;
    }
  }
  return best;
}

inline TuningRecord cmd_tune(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log,
                             std::optional<HeadTuneTarget> target = std::nullopt) {
  const auto w = open_bench(dir, cfg);
  if (!target) {
    target = designated_head(read_measure(dir.in("measure.csv", "measure")), read_sweep(dir.in("sweep.csv", "sweep")),
                             cfg.thresholds, cfg.tune_c);
    if (!target) throw Error("no attending decoder-self head with a C = 0.01 sweep row; pass --head and --relation");
  }
  const auto tune = load_encoded(w.model.vocab(), dir.in("tune.jsonl", "generate"), cfg.context_size);
  const auto held = load_training_pairs(dir.in("heldout_pairs.jsonl", "generate"));
  HeadTuneConfig hc = cfg.tune;
  hc.seed = derived_seed(cfg.seed, "head-tune");
  const auto res = head_tune(w.model, *target, tune, hc);
  save_checkpoint(res.model, dir.out("tuned.ckpt"));
  const auto rec = evaluate_tuning(w.model, res.model, *target, w.encoded, held);
  auto j = tuning_to_json(rec);
  j["steps"] = hc.steps;
  j["first_loss"] = res.losses.empty() ? 0.0 : res.losses.front();
  j["last_loss"] = res.losses.empty() ? 0.0 : res.losses.back();
  write_json(dir.out("tuning.json"), j);
  log << "tune: " << rec.head << " " << rec.relation << " accuracy base " << format_double(rec.base_accuracy)
      << ", tuned " << format_double(rec.tuned_accuracy) << ", modified " << format_double(rec.modified_accuracy)
      << "; greedy token accuracy " << format_double(rec.base_token_accuracy) << " -> "
      << format_double(rec.tuned_token_accuracy) << '\n';
  return rec;
}

inline std::vector<HeadReport> cmd_report(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log) {
  const double base = base_accuracy(dir);
  const auto measure = read_measure(dir.in("measure.csv", "measure"));
  const auto sweep = read_sweep(dir.in("sweep.csv", "sweep"));
  const auto dis = read_csv(dir.in("disable.csv", "disable"));
  std::vector<HeadReport> rows;
  for (const auto& m : measure) {
    const auto* lo = find_sweep(sweep, m.head, m.relation, 0.01);
    const auto* hi = find_sweep(sweep, m.head, m.relation, 0.99);
    if (!lo || !hi) continue;  // not swept at both ends
    HeadReport r;
    r.address = m.head;
    r.relation = m.relation;
    r.n_examples = m.n;
    r.mean_score = m.mean_score;
    r.r_pb = m.r_pb;
    r.delta_low = lo->delta;
    r.delta_high = hi->delta;
    for (const auto& row : dis.rows) {
      if (parse_module_kind(row[dis.column("module_kind")]) == m.head.kind &&
          std::stoi(row[dis.column("layer")]) == m.head.layer && std::stoi(row[dis.column("head")]) == m.head.head &&
          parse_relation(row[dis.column("relation")]) == m.relation)
        r.delta_disable = std::stod(row[dis.column("delta_vs_base")]);
    }
    r.category = categorize(r.mean_score, r.delta_low, r.delta_high, cfg.thresholds);
    rows.push_back(r);
  }
  write_report_csv(rows, dir.out("report.csv"));
  write_json(dir.out("report_summary.json"), report_summary(rows, cfg.thresholds, base));
  std::map<std::string, std::size_t> counts;
  for (const auto& r : rows) ++counts[std::string(category_name(r.category))];
  log << "report: " << rows.size() << " rows;";
  for (const auto& [k, v] : counts) log << ' ' << k << '=' << v;
  log << '\n';
  return rows;
}

inline void run_pipeline(const PipelineConfig& cfg, const RunDir& dir, std::ostream& log, bool coarse = false) {
  cmd_generate(cfg, dir, log);
  cmd_train(cfg, dir, log);
  cmd_eval(cfg, dir, log);
  cmd_measure(cfg, dir, log);
  cmd_sweep(cfg, dir, log, {}, coarse ? std::vector<double>{0.01, 0.99} : cfg.c_values);
  cmd_disable(cfg, dir, log, {});
  cmd_overlap(cfg, dir, log, cfg.overlap_k);
  cmd_tune(cfg, dir, log);
  cmd_report(cfg, dir, log);
}

// ---------------------------------------------------------------------------
// Fixtures: golden copies of pipeline outputs for a pinned configuration.

inline const std::vector<std::string>& golden_files() {
  static const std::vector<std::string> files{"eval.json", "measure.csv", "sweep.csv", "disable.csv",
                                              "overlap.csv", "tuning.json", "report.csv", "report_summary.json"};
  return files;
}

struct FixtureResult {
  std::string file;
  bool pass = false;
  std::string detail;
};

// Numeric cells agree within `tol`; everything else must match exactly.
inline std::string compare_csv(const std::string& golden, const std::string& actual, double tol) {
  std::istringstream g(golden), a(actual);
  std::string lg, la;
  std::vector<std::string> header;
  std::size_t line = 0;
  std::ostringstream diff;
  while (true) {
    const bool hg = static_cast<bool>(std::getline(g, lg));
    const bool ha = static_cast<bool>(std::getline(a, la));
    ++line;
    if (!hg && !ha) break;
    if (hg != ha) return "line count differs at line " + std::to_string(line);
    const auto cg = split_csv_line(lg), ca = split_csv_line(la);
    if (line == 1) header = cg;
    if (cg.size() != ca.size()) return "cell count differs at line " + std::to_string(line);
    for (std::size_t c = 0; c < cg.size(); ++c) {
      if (cg[c] == ca[c]) continue;
      char* eg = nullptr;
      char* ea = nullptr;
      const double vg = std::strtod(cg[c].c_str(), &eg), va = std::strtod(ca[c].c_str(), &ea);
      const bool numeric = !cg[c].empty() && !ca[c].empty() && *eg == '\0' && *ea == '\0';
      if (numeric && std::abs(vg - va) <= tol) continue;
      diff << "line " << line << " column " << (c < header.size() ? header[c] : std::to_string(c)) << ": golden '"
           << cg[c] << "' vs actual '" << ca[c] << "'\n";
    }
  }
  return diff.str();
}

inline std::string compare_json(const nlohmann::json& g, const nlohmann::json& a, double tol, const std::string& path = "") {
  if (g.is_number() && a.is_number()) {
    const double x = g.get<double>(), y = a.get<double>();
    return std::abs(x - y) <= tol ? "" : path + ": golden " + g.dump() + " vs actual " + a.dump() + "\n";
  }
  if (g.type() != a.type()) return path + ": type differs\n";
  if (g.is_object()) {
    std::string out;
    for (const auto& [k, v] : g.items()) {
      if (!a.contains(k)) {
        out += path + "/" + k + ": missing\n";
        continue;
      }
      out += compare_json(v, a.at(k), tol, path + "/" + k);
    }
    for (const auto& [k, v] : a.items())
      if (!g.contains(k)) out += path + "/" + k + ": unexpected\n";
    return out;
  }
  if (g.is_array()) {
    if (g.size() != a.size()) return path + ": array length differs\n";
    std::string out;
    for (std::size_t i = 0; i < g.size(); ++i) out += compare_json(g[i], a[i], tol, path + "/" + std::to_string(i));
    return out;
  }
  return g == a ? "" : path + ": golden " + g.dump() + " vs actual " + a.dump() + "\n";
}

// Regenerates the pipeline outputs from `fixture_dir/config.json` into
// `work_dir` and diffs each against `fixture_dir/golden/`.
inline std::vector<FixtureResult> verify_fixtures(const fs::path& fixture_dir, const fs::path& work_dir,
                                                  std::ostream& log, double tol = 1e-12) {
  auto cfg = load_pipeline_config((fixture_dir / "config.json").string());
  if (!cfg.grammar_path.empty() && fs::path(cfg.grammar_path).is_relative())
    cfg.grammar_path = (fixture_dir / cfg.grammar_path).string();
  fs::remove_all(work_dir);
  const RunDir dir(work_dir);
  std::ostringstream quiet;
  run_pipeline(cfg, dir, quiet, true);
  const auto manifest = read_json((fixture_dir / "golden" / "MANIFEST.json").string());
  std::vector<FixtureResult> results;
  for (const auto& name : golden_files()) {
    FixtureResult r{name, false, ""};
    const auto gp = fixture_dir / "golden" / name, ap = work_dir / name;
    if (!fs::exists(gp)) {
      r.detail = "golden file missing";
    } else {
      const auto golden = read_text(gp.string()), actual = read_text(ap.string());
      const auto expected = manifest.value(name, std::string());
      if (sha256_hex(actual) == expected && sha256_hex(golden) == expected) {
        r.pass = true;
      } else {
        r.detail = name.ends_with(".csv") ? compare_csv(golden, actual, tol)
                                          : compare_json(nlohmann::json::parse(golden), nlohmann::json::parse(actual), tol);
        if (r.detail.empty() && sha256_hex(golden) != expected) r.detail = "golden digest does not match MANIFEST.json\n";
        r.pass = r.detail.empty();
      }
    }
    log << (r.pass ? "PASS " : "FAIL ") << name << '\n' << r.detail;
    results.push_back(std::move(r));
  }
  return results;
}

// Writes goldens and their digests from a fresh pipeline run.
inline void regenerate_fixtures(const fs::path& fixture_dir, const fs::path& work_dir, std::ostream& log) {
  auto cfg = load_pipeline_config((fixture_dir / "config.json").string());
  if (!cfg.grammar_path.empty() && fs::path(cfg.grammar_path).is_relative())
    cfg.grammar_path = (fixture_dir / cfg.grammar_path).string();
  fs::remove_all(work_dir);
  const RunDir dir(work_dir);
  run_pipeline(cfg, dir, log, true);
  fs::create_directories(fixture_dir / "golden");
  nlohmann::json manifest = nlohmann::json::object();
  for (const auto& name : golden_files()) {
    const auto text = read_text((work_dir / name).string());
    write_text((fixture_dir / "golden" / name).string(), text);
    manifest[name] = sha256_hex(text);
  }
  write_json((fixture_dir / "golden" / "MANIFEST.json").string(), manifest);
}

}  // namespace ctxattn
