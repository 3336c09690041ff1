#pragma once

// Teacher-forced training of the translation model, and head tuning: a
// regression of one attention head's pre-softmax scores toward the scores
// that the closed-form rewrite would impose, touching only that head's
// query/key projection columns.

#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "ctxattn/contrastive.hpp"
#include "ctxattn/corpus.hpp"
#include "ctxattn/intervention.hpp"
#include "ctxattn/model.hpp"
#include "ctxattn/stats.hpp"

namespace ctxattn {

enum class Optimizer { AdamW, SgdMomentum };

inline std::string_view optimizer_name(Optimizer o) { return o == Optimizer::AdamW ? "adamw" : "sgd"; }
inline Optimizer parse_optimizer(std::string_view s) {
  if (s == "adamw") return Optimizer::AdamW;
  if (s == "sgd") return Optimizer::SgdMomentum;
  throw Error("unknown optimizer '" + std::string(s) + "'");
}

struct TrainConfig {
  double lr = 2e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::size_t accumulation = 1;  // batches per optimizer step
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;
  Optimizer optimizer = Optimizer::AdamW;
  double momentum = 0.9;  // SGD momentum / Adam beta1
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(lr > 0.0) || epochs == 0 || batch_size == 0 || accumulation == 0 || weight_decay < 0.0 ||
        !(max_grad_norm > 0.0))
      throw Error("train config: learning rate, epochs, batch size, accumulation and gradient norm must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"accumulation", c.accumulation},
       {"weight_decay", c.weight_decay},
       {"max_grad_norm", c.max_grad_norm},
       {"optimizer", optimizer_name(c.optimizer)},
       {"momentum", c.momentum},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.lr = j.value("lr", d.lr);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.accumulation = j.value("accumulation", d.accumulation);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.max_grad_norm = j.value("max_grad_norm", d.max_grad_norm);
  c.optimizer = parse_optimizer(j.value("optimizer", std::string(optimizer_name(d.optimizer))));
  c.momentum = j.value("momentum", d.momentum);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.seed = j.value("seed", d.seed);
}

namespace detail {

inline std::vector<std::pair<std::string, Matrix*>> parameters(Weights& w) {
  std::vector<std::pair<std::string, Matrix*>> out;
  w.visit([&](const std::string& n, Matrix& m) { out.emplace_back(n, &m); });
  return out;
}

inline bool decays(const std::string& name) {
  return !(name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bq") ||
           name.ends_with(".bk") || name.ends_with(".bv") || name.ends_with(".bo") ||
           name.ends_with(".b1") || name.ends_with(".b2") || name == "out_b");
}

// Softmax minus one-hot, scaled by `scale`; returns the summed cross-entropy
// and counts argmax hits into `correct`.
inline double token_loss_grad(const Matrix& logits, std::span<const TokenId> target, double scale,
                              Matrix& dlogits, std::size_t& correct) {
  dlogits = Matrix(logits.rows(), logits.cols());
  double loss = 0.0;
  for (std::size_t t = 0; t < target.size(); ++t) {
    auto row = logits.row(t);
    const double lse = log_sum_exp(row);
    loss += lse - row[target[t]];
    std::size_t best = 0;
    for (std::size_t v = 0; v < row.size(); ++v) {
      dlogits(t, v) = scale * std::exp(row[v] - lse);
      if (row[v] > row[best]) best = v;
    }
    dlogits(t, target[t]) -= scale;
    correct += best == target[t];
  }
  return loss;
}

}  // namespace detail

// Summed token cross-entropy of one pair and its gradient (scaled by
// `scale`) accumulated into `grad`.
inline double accumulate_pair_gradient(const Model& model, const TrainingPair& pair, double scale,
                                       Weights& grad, Rng* dropout_rng, std::size_t* correct = nullptr) {
  detail::Tape tape;
  detail::RunContext ctx{nullptr, nullptr, &tape, dropout_rng};
  const auto in = shift_right(pair.target);
  const Matrix memory = detail::encode(model, pair.source, ctx);
  const Matrix logits = detail::decode(model, memory, pair.source, in, ctx);
  Matrix dlogits;
  std::size_t hits = 0;
  const double loss = detail::token_loss_grad(logits, pair.target, scale, dlogits, hits);
  if (correct) *correct += hits;
  detail::backward(model, tape, dlogits, grad);
  return loss;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;       // mean token cross-entropy
  double train_token_acc = 0.0;  // teacher-forced argmax accuracy
  std::optional<double> selection;
  double lr_end = 0.0;
};

inline nlohmann::json metrics_to_json(const EpochMetrics& m) {
  nlohmann::json j{{"epoch", m.epoch}, {"train_loss", m.train_loss}, {"train_token_acc", m.train_token_acc},
                   {"lr", m.lr_end}};
  if (m.selection) j["selection"] = *m.selection;
  return j;
}

struct TrainResult {
  Model model;  // best checkpoint by the selection metric, else the last
  std::vector<EpochMetrics> metrics;
  std::size_t best_epoch = 0;
};

// Higher is better; evaluated after every epoch when provided.
using SelectionMetric = std::function<double(const Model&)>;

inline TrainResult train(Model model, const std::vector<TrainingPair>& pairs, const TrainConfig& cfg,
                         const SelectionMetric& select = {},
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  if (pairs.empty()) throw Error("train: no training pairs");
  for (const auto& p : pairs) {
    for (TokenId t : p.source)
      if (t >= model.config().vocab_size) throw Error("train: source token outside the model vocabulary");
    for (TokenId t : p.target)
      if (t >= model.config().vocab_size) throw Error("train: target token outside the model vocabulary");
  }
  const Rng root(cfg.seed);
  Rng batch_rng = root.substream("batching");
  Rng dropout_rng = root.substream("dropout");
  Rng* drop = model.config().dropout > 0.0 ? &dropout_rng : nullptr;

  const std::size_t batches = (pairs.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t steps_per_epoch = (batches + cfg.accumulation - 1) / cfg.accumulation;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;

  Weights grad = Weights::zeros(model.config());
  Weights m1 = Weights::zeros(model.config()), m2 = Weights::zeros(model.config());
  auto params = detail::parameters(model.weights());
  auto grads = detail::parameters(grad);
  auto mom = detail::parameters(m1);
  auto sec = detail::parameters(m2);
  auto zero_grad = [&] {
    for (auto& [n, g] : grads) g->fill(0.0);
  };
  zero_grad();

  std::size_t step = 0;
  auto apply_step = [&] {
    double norm2 = 0.0;
    for (auto& [n, g] : grads)
      for (double v : g->values()) norm2 += v * v;
    const double norm = std::sqrt(norm2);
    if (!std::isfinite(norm))
      throw Error("training diverged: non-finite gradient norm at step " + std::to_string(step));
    const double clip = norm > cfg.max_grad_norm ? cfg.max_grad_norm / norm : 1.0;
    const double lr = cfg.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
    ++step;
    const double b1 = cfg.momentum, b2 = cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(step));
    for (std::size_t p = 0; p < params.size(); ++p) {
      double* w = params[p].second->data();
      const double* g = grads[p].second->data();
      double* m = mom[p].second->data();
      double* v = sec[p].second->data();
      const bool wd = detail::decays(params[p].first);
      const std::size_t n = params[p].second->size();
      if (cfg.optimizer == Optimizer::AdamW) {
        for (std::size_t i = 0; i < n; ++i) {
          const double gi = g[i] * clip;
          m[i] = b1 * m[i] + (1.0 - b1) * gi;
          v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
          if (wd) w[i] -= lr * cfg.weight_decay * w[i];
          w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
        }
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          double gi = g[i] * clip;
          if (wd) gi += cfg.weight_decay * w[i];
          m[i] = cfg.momentum * m[i] + gi;
          w[i] -= lr * m[i];
        }
      }
    }
    zero_grad();
  };

  TrainResult result;
  std::optional<double> best;
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t e = 1; e <= cfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    batch_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t tokens = 0, correct = 0, pending = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(order.size(), lo + cfg.batch_size);
      std::size_t batch_tokens = 0;
      for (std::size_t k = lo; k < hi; ++k) batch_tokens += pairs[order[k]].target.size();
      const double scale = 1.0 / static_cast<double>(batch_tokens * cfg.accumulation);
      double batch_loss = 0.0;
      try {
        for (std::size_t k = lo; k < hi; ++k)
          batch_loss += accumulate_pair_gradient(model, pairs[order[k]], scale, grad, drop, &correct);
      } catch (const Error& err) {
        // Inputs were validated above, so a failure here is numerical.
        throw Error("training diverged in epoch " + std::to_string(e) + ", batch " + std::to_string(b + 1) +
                    ": " + err.what());
      }
      if (!std::isfinite(batch_loss))
        throw Error("training diverged: loss is " + std::to_string(batch_loss) + " in epoch " +
                    std::to_string(e) + ", batch " + std::to_string(b + 1));
      loss_sum += batch_loss;
      tokens += batch_tokens;
      if (++pending == cfg.accumulation || b + 1 == batches) {
        apply_step();
        pending = 0;
      }
    }
    EpochMetrics m;
    m.epoch = e;
    m.train_loss = loss_sum / static_cast<double>(tokens);
    m.train_token_acc = static_cast<double>(correct) / static_cast<double>(tokens);
    m.lr_end = cfg.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
    if (select) m.selection = select(model);
    const bool improved = !select || !best || *m.selection > *best;
    if (improved) {
      if (select) best = m.selection;
      result.model = model;
      result.best_epoch = e;
    }
    result.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return result;
}

// Mean token cross-entropy and teacher-forced argmax accuracy.
inline std::pair<double, double> evaluate_pairs(const Model& model, const std::vector<TrainingPair>& pairs) {
  double loss = 0.0;
  std::size_t tokens = 0, correct = 0;
  for (const auto& p : pairs) {
    const auto res = forward(model, p.source, shift_right(p.target));
    Matrix dl;
    loss += detail::token_loss_grad(res.logits, p.target, 0.0, dl, correct);
    tokens += p.target.size();
  }
  if (tokens == 0) throw Error("evaluate_pairs: no tokens");
  return {loss / static_cast<double>(tokens), static_cast<double>(correct) / static_cast<double>(tokens)};
}

// Greedy-decoding token accuracy: position-wise agreement of the decoded
// sequence (plus <eos>) with the reference, over the reference length.
inline double greedy_token_accuracy(const Model& model, const std::vector<TrainingPair>& pairs) {
  std::size_t tokens = 0, correct = 0;
  for (const auto& p : pairs) {
    auto out = greedy_decode(model, p.source, {}, p.target.size() + 4);
    out.push_back(Vocabulary::kEos);
    for (std::size_t i = 0; i < p.target.size(); ++i) correct += i < out.size() && out[i] == p.target[i];
    tokens += p.target.size();
  }
  if (tokens == 0) throw Error("greedy_token_accuracy: no tokens");
  return static_cast<double>(correct) / static_cast<double>(tokens);
}

// ---------------------------------------------------------------------------
// Head tuning

struct HeadTuneTarget {
  HeadAddress address;
  Relation relation = Relation::TP_TC;
  double c = 0.99;
};

struct HeadTuneConfig {
  double lr = 1e-3;
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  std::uint64_t seed = 1;
};

// Constant per-example inputs of the tuned head plus its regression target,
// restricted to the query rows in Y.
struct HeadTuneExample {
  IndexSet rows;      // query positions (Y)
  Matrix xq;          // |Y| x d, normalised inputs of those queries
  Matrix xk;          // n_keys x d
  Matrix target;      // |Y| x n_keys, H-hat
  Matrix valid;       // |Y| x n_keys, 1 where the key is attendable
};

// Runs the frozen reference model once per example to capture the head's
// inputs and scores, and builds the rewrite target for rows in Y.
inline std::vector<HeadTuneExample> prepare_head_tune(const Model& reference, const HeadTuneTarget& target,
                                                      const std::vector<EncodedExample>& examples,
                                                      std::size_t* skipped = nullptr) {
  const auto& a = target.address;
  reference.config().check_address(a);
  if (relation_module(target.relation) != a.kind)
    throw Error("relation " + std::string(relation_name(target.relation)) + " cannot be tuned on " +
                std::string(module_name(a.kind)) + " head " + a.str());
  check_mass(target.c);
  std::vector<HeadTuneExample> out;
  std::size_t skip = 0;
  const auto l = static_cast<std::size_t>(a.layer - 1);
  for (const auto& ex : examples) {
    if (!supports(target.relation, ex.annotation)) {
      ++skip;
      continue;
    }
    const auto& tgt = ex.correct_target();
    const auto in = shift_right(tgt);
    AttentionTrace trace;
    detail::Tape tape;
    detail::RunContext ctx{nullptr, &trace, &tape, nullptr};
    const Matrix memory = detail::encode(reference, ex.source, ctx);
    detail::decode(reference, memory, ex.source, in, ctx);
    const detail::AttentionCache* cache = nullptr;
    switch (a.kind) {
      case ModuleKind::EncoderSelf: cache = &tape.enc[l].self; break;
      case ModuleKind::Cross: cache = &tape.dec[l].cross; break;
      case ModuleKind::DecoderSelf: cache = &tape.dec[l].self; break;
    }
    const HeadTrace& ht = trace.at(a);
    const auto r = resolve(target.relation, ex.annotation);
    HeadTuneExample h;
    h.rows = r.queries;
    const std::size_t d = cache->xq.cols(), nk = cache->xkv.rows();
    h.xq = Matrix(h.rows.size(), d);
    h.target = Matrix(h.rows.size(), nk);
    h.valid = Matrix(h.rows.size(), nk);
    h.xk = cache->xkv;
    for (std::size_t k = 0; k < h.rows.size(); ++k) {
      const std::size_t i = h.rows[k];
      std::copy_n(cache->xq.row(i).begin(), d, h.xq.row(k).begin());
      const auto modified = modify_row(ht.scores.row(i), r.keys, ht.mask.attended(i), target.c);
      for (std::size_t j = 0; j < nk; ++j) {
        h.target(k, j) = modified[j];
        h.valid(k, j) = ht.mask(i, j) ? 1.0 : 0.0;
      }
    }
    out.push_back(std::move(h));
  }
  if (skipped) *skipped = skip;
  return out;
}

// Gradients for the head's columns of W_Q / W_K and the bias slices.
struct HeadGradient {
  Matrix wq, bq, wk, bk;  // d x dk, 1 x dk, d x dk, 1 x dk
};

namespace detail {

inline Matrix head_projection(const Matrix& x, const Matrix& w, const Matrix& b, std::size_t off,
                              std::size_t dk) {
  Matrix out(x.rows(), dk);
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t t = 0; t < dk; ++t) {
      double acc = b(0, off + t);
      for (std::size_t p = 0; p < x.cols(); ++p) acc += x(i, p) * w(p, off + t);
      out(i, t) = acc;
    }
  return out;
}

}  // namespace detail

// Mean squared error between the head's current scores and the target over
// rows in Y and attendable columns, averaged over all such entries in the
// batch. Gradients are written to `grad` when given.
inline double head_tune_loss(const Model& model, const HeadAddress& a,
                             const std::vector<const HeadTuneExample*>& batch, HeadGradient* grad) {
  const auto& p = model.weights().attention(a);
  const std::size_t d = model.config().d_model, dk = model.config().d_head();
  const std::size_t off = static_cast<std::size_t>(a.head - 1) * dk;
  const double s = 1.0 / std::sqrt(static_cast<double>(dk));
  if (grad) *grad = {Matrix(d, dk), Matrix(1, dk), Matrix(d, dk), Matrix(1, dk)};
  double count = 0.0;
  for (const auto* ex : batch)
    for (double v : ex->valid.values()) count += v;
  if (count == 0.0) return 0.0;
  double loss = 0.0;
  for (const auto* ex : batch) {
    const Matrix q = detail::head_projection(ex->xq, p.wq, p.bq, off, dk);
    const Matrix k = detail::head_projection(ex->xk, p.wk, p.bk, off, dk);
    Matrix h = matmul_nt(q, k);
    Matrix g(h.rows(), h.cols());
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (std::size_t j = 0; j < h.cols(); ++j) {
        if (ex->valid(i, j) == 0.0) continue;
        const double diff = s * h(i, j) - ex->target(i, j);
        loss += diff * diff;
        g(i, j) = 2.0 * diff / count;
      }
    if (!grad) continue;
    Matrix dq = matmul(g, k);    // s applied below
    Matrix dkm = matmul_tn(g, q);
    for (double& v : dq.values()) v *= s;
    for (double& v : dkm.values()) v *= s;
    matmul_tn_acc(ex->xq, dq, grad->wq);
    column_sums_acc(dq, grad->bq);
    matmul_tn_acc(ex->xk, dkm, grad->wk);
    column_sums_acc(dkm, grad->bk);
  }
  return loss / count;
}

struct HeadTuneResult {
  Model model;
  std::vector<double> losses;  // per step, before the update
  std::size_t skipped_examples = 0;
  std::size_t skipped_batches = 0;
};

// Adam on the head's slices only; every other parameter is left untouched.
inline HeadTuneResult head_tune(const Model& model, const HeadTuneTarget& target,
                                const std::vector<EncodedExample>& examples, const HeadTuneConfig& cfg) {
  if (cfg.batch_size == 0 || !(cfg.lr > 0.0)) throw Error("head tuning needs a positive batch size and learning rate");
  HeadTuneResult res;
  const Model reference = model;  // frozen copy: targets never move
  const auto data = prepare_head_tune(reference, target, examples, &res.skipped_examples);
  if (data.empty()) throw Error("head tuning: no example supports relation " + std::string(relation_name(target.relation)));
  res.model = model;
  const auto& a = target.address;
  const std::size_t d = model.config().d_model, dk = model.config().d_head();
  const std::size_t off = static_cast<std::size_t>(a.head - 1) * dk;

  HeadGradient m1{Matrix(d, dk), Matrix(1, dk), Matrix(d, dk), Matrix(1, dk)}, m2 = m1;
  Rng rng = Rng(cfg.seed).substream("batching");
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    std::vector<const HeadTuneExample*> batch;
    while (batch.size() < std::min(cfg.batch_size, data.size())) {
      if (cursor == order.size()) {
        order.resize(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    if (std::all_of(batch.begin(), batch.end(), [](const auto* e) { return e->rows.empty(); })) {
      std::clog << "head_tune: skipping a batch with no query rows\n";
      ++res.skipped_batches;
      continue;
    }
    HeadGradient g;
    res.losses.push_back(head_tune_loss(res.model, a, batch, &g));
    ++t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    auto& p = res.model.weights().attention(a);
    auto update = [&](Matrix& w, const Matrix& gr, Matrix& m, Matrix& v) {
      for (std::size_t r = 0; r < gr.rows(); ++r)
        for (std::size_t c = 0; c < dk; ++c) {
          const double gi = gr(r, c);
          m(r, c) = b1 * m(r, c) + (1.0 - b1) * gi;
          v(r, c) = b2 * v(r, c) + (1.0 - b2) * gi * gi;
          if (gi == 0.0 && m(r, c) == 0.0) continue;
          w(r, off + c) -= cfg.lr * (m(r, c) / c1) / (std::sqrt(v(r, c) / c2) + eps);
        }
    };
    update(p.wq, g.wq, m1.wq, m2.wq);
    update(p.bq, g.bq, m1.bq, m2.bq);
    update(p.wk, g.wk, m1.wk, m2.wk);
    update(p.bk, g.bk, m1.bk, m2.bk);
  }
  return res;
}

struct TuningRecord {
  std::string head;
  std::string relation;
  double c = 0.99;
  double base_accuracy = 0.0;
  double tuned_accuracy = 0.0;
  double modified_accuracy = 0.0;  // base model with the head rewritten to C
  double base_token_accuracy = 0.0;
  double tuned_token_accuracy = 0.0;
  double base_relation_score = 0.0;
  double tuned_relation_score = 0.0;
};

inline nlohmann::json tuning_to_json(const TuningRecord& r) {
  return {{"head", r.head},
          {"relation", r.relation},
          {"C", r.c},
          {"base_accuracy", r.base_accuracy},
          {"tuned_accuracy", r.tuned_accuracy},
          {"modified_accuracy", r.modified_accuracy},
          {"base_token_accuracy", r.base_token_accuracy},
          {"tuned_token_accuracy", r.tuned_token_accuracy},
          {"base_relation_score", r.base_relation_score},
          {"tuned_relation_score", r.tuned_relation_score}};
}

// Mean relation score of one head over examples that support the relation,
// measured on the correct candidate.
inline double mean_relation_score(const Model& model, const HeadAddress& a, Relation r,
                                  const std::vector<EncodedExample>& examples) {
  std::vector<double> scores;
  for (const auto& ex : examples) {
    if (!supports(r, ex.annotation)) continue;
    const auto res = forward(model, ex.source, shift_right(ex.correct_target()), {nullptr, nullptr, true});
    scores.push_back(relation_score(*res.trace, a, r, ex.annotation));
  }
  return mean(scores);
}

inline TuningRecord evaluate_tuning(const Model& base, const Model& tuned, const HeadTuneTarget& target,
                                    const std::vector<EncodedExample>& contrastive,
                                    const std::vector<TrainingPair>& heldout) {
  TuningRecord r;
  r.head = target.address.str();
  r.relation = std::string(relation_name(target.relation));
  r.c = target.c;
  r.base_accuracy = accuracy(score_all(base, contrastive));
  r.tuned_accuracy = accuracy(score_all(tuned, contrastive));
  InterventionPlan plan;
  plan.add(modify_entry(target.address, target.relation, target.c));
  r.modified_accuracy = accuracy(score_all(base, contrastive, &plan));
  if (!heldout.empty()) {
    r.base_token_accuracy = greedy_token_accuracy(base, heldout);
    r.tuned_token_accuracy = greedy_token_accuracy(tuned, heldout);
  }
  r.base_relation_score = mean_relation_score(base, target.address, target.relation, contrastive);
  r.tuned_relation_score = mean_relation_score(tuned, target.address, target.relation, contrastive);
  return r;
}

}  // namespace ctxattn
