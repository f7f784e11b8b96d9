#pragma once

#include <chrono>
#include <cstdio>
#include <map>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "epic/config.hpp"
#include "epic/data.hpp"
#include "epic/loss.hpp"
#include "epic/model.hpp"
#include "epic/prompt.hpp"

namespace epic {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Uniform k in {0..min(k_max, batch-1)}, then k distinct indices != self.
// A batch of one with k_max > 0 degrades to k = 0 (warned once).
inline std::vector<int> sample_in_batch_demos(int batch_size, int self_index, int k_max,
                                              std::mt19937_64& rng) {
  const int k_cap = std::min(k_max, batch_size - 1);
  if (k_cap <= 0) {
    if (k_max > 0 && batch_size <= 1) {
      static bool warned = false;
      if (!warned) {
        std::fprintf(stderr, "warning: batch of 1 cannot supply demonstrations; using k=0\n");
        warned = true;
      }
    }
    return {};
  }
  const int k = static_cast<int>(rng() % static_cast<std::uint64_t>(k_cap + 1));
  std::vector<int> others;
  others.reserve(batch_size - 1);
  for (int j = 0; j < batch_size; ++j)
    if (j != self_index) others.push_back(j);
  // Partial Fisher-Yates: first k entries are a without-replacement sample.
  for (int i = 0; i < k; ++i) {
    const int j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(others.size() - i));
    std::swap(others[i], others[j]);
  }
  others.resize(k);
  return others;
}

// Warmup to lr over warmup_steps, then linear decay to zero.
inline double lr_at_step(const TrainConfig& cfg, int step) {
  if (cfg.steps == 0) return 0.0;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return cfg.lr * static_cast<double>(step + 1) / cfg.warmup_steps;
  const int decay_span = std::max(cfg.steps - cfg.warmup_steps, 1);
  return cfg.lr * static_cast<double>(cfg.steps - step) / decay_span;
}

struct StepLog {
  int step = 0;
  double loss = 0;
  double lr = 0;
  std::vector<int> k_hist;  // counts for k = 0..k_max
  long tokens = 0;
  double wall_ms = 0;
};

inline std::string k_hist_string(const std::vector<int>& hist) {
  std::string s;
  for (size_t i = 0; i < hist.size(); ++i) {
    if (i) s += ';';
    s += std::to_string(hist[i]);
  }
  return s;
}

template <typename T>
class Trainer {
 public:
  Trainer(ModelParams<T>& params, const TrainConfig& cfg)
      : params_(&params), cfg_(cfg), sample_rng_(cfg.seed + 1) {
    cfg_.validate();
    if (cfg_.variant.softprompt != SoftPromptKind::Off && params.soft_prompt.rows == 0) {
      if (cfg_.k_max <= 0) throw ConfigError("soft-prompt variants require k_max > 0");
      params.soft_prompt =
          make_soft_prompt<T>(cfg_.variant, cfg_.k_max, params.cfg.d_model, cfg_.seed);
    }
    params.for_each_tensor([&](const std::string& name, Matrix<T>& m) {
      names_.push_back(name);
      tensors_.push_back(&m);
      adam_m_.emplace_back(m.rows, m.cols);
      adam_v_.emplace_back(m.rows, m.cols);
    });
  }

  // When set, the extra EPIC forward pass is skipped and the plain query
  // embedding feeds the loss directly. Only valid with k_max == 0; used to
  // verify that the EPIC trainer degenerates to the standard baseline.
  void set_dedicated_baseline(bool on) {
    if (on && (cfg_.k_max != 0 || cfg_.variant.softprompt != SoftPromptKind::Off))
      throw ConfigError("dedicated baseline path requires k_max=0 and softprompt=off");
    baseline_path_ = on;
  }

  const TrainConfig& config() const { return cfg_; }
  std::mt19937_64 sample_rng_snapshot() const { return sample_rng_; }

  // Loss (and optionally analytic parameter gradients) for one batch without
  // touching parameters or the trainer's rng. The rng governing k-sampling is
  // passed by value so repeated calls see identical demonstrations.
  T batch_loss(const std::vector<Triplet>& batch, std::mt19937_64 rng,
               std::map<std::string, Matrix<T>>* grads_out = nullptr, StepLog* log = nullptr) {
    Tape<T> tape;
    const bool want_grad = grads_out != nullptr;
    BoundModel<T> model = BoundModel<T>::bind(tape, *params_, want_grad);
    auto root = build_batch_loss(tape, model, batch, rng, log);
    const T loss = tape.value(root).at(0, 0);
    if (want_grad) {
      tape.backward(root);
      grads_out->clear();
      model.for_each_leaf([&](const std::string& name, typename Tape<T>::NodeId id) {
        (*grads_out)[name] = tape.grad(id);
      });
    }
    return loss;
  }

  // One optimizer step over a same-task batch.
  StepLog train_step(const std::vector<Triplet>& batch) {
    const auto t0 = std::chrono::steady_clock::now();
    check_same_task(batch);
    StepLog log;
    log.step = step_;
    log.k_hist.assign(cfg_.k_max + 1, 0);

    Tape<T> tape;
    BoundModel<T> model = BoundModel<T>::bind(tape, *params_, /*requires_grad=*/true);
    auto root = build_batch_loss(tape, model, batch, sample_rng_, &log);
    log.loss = static_cast<double>(tape.value(root).at(0, 0));
    if (!std::isfinite(log.loss))
      throw NumericalError("non-finite loss at step " + std::to_string(step_));
    tape.backward(root);

    log.lr = lr_at_step(cfg_, step_);
    apply_adamw(tape, model, static_cast<T>(log.lr));
    ++step_;
    log.wall_ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0).count();
    return log;
  }

  int step() const { return step_; }

 private:
  using NodeId = typename Tape<T>::NodeId;

  void check_same_task(const std::vector<Triplet>& batch) const {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    for (const auto& t : batch)
      if (t.task_id != batch[0].task_id)
        throw ConfigError("train_step: batch mixes task_ids (" + batch[0].task_id + " vs " +
                          t.task_id + ")");
  }

  NodeId maybe_detach(Tape<T>& tape, NodeId v) const {
    return cfg_.demo_grad == DemoGrad::Detach ? tape.detach(v) : v;
  }

  NodeId build_batch_loss(Tape<T>& tape, BoundModel<T>& model,
                          const std::vector<Triplet>& batch, std::mt19937_64& rng,
                          StepLog* log) {
    const int B = static_cast<int>(batch.size());
    const int eos = params_->special.eos_id;
    long tokens = 0;

    // Pass 1-3: plain query, positive and hard-negative embeddings (Eq.1
    // layout for queries; passages carry no instruction).
    std::vector<NodeId> eq(B), ep(B);
    std::vector<std::vector<NodeId>> en(B);
    for (int i = 0; i < B; ++i) {
      const Triplet& t = batch[i];
      MixedSequence<T> sq = standalone_sequence<T>(t.instruction, t.query, eos);
      eq[i] = model.eos_pool(model.forward(sq));
      tokens += static_cast<long>(sq.size());
      MixedSequence<T> sp;
      append_tokens(sp, t.positive);
      sp.push_back(tok<T>(eos));
      ep[i] = model.eos_pool(model.forward(sp));
      tokens += static_cast<long>(sp.size());
      for (const auto& ntoks : t.hard_negatives) {
        MixedSequence<T> sn;
        append_tokens(sn, ntoks);
        sn.push_back(tok<T>(eos));
        en[i].push_back(model.eos_pool(model.forward(sn)));
        tokens += static_cast<long>(sn.size());
      }
    }

    // Instruction embedding, shared, when the compression variant folds the
    // instruction into a vector as well.
    NodeId instr_vec = -1;
    if (cfg_.variant.compression == Compression::AllIncludingInstruction) {
      MixedSequence<T> si;
      append_tokens(si, batch[0].instruction);
      si.push_back(tok<T>(eos));
      instr_vec = model.adapt(maybe_detach(tape, model.eos_pool(model.forward(si))));
      tokens += static_cast<long>(si.size());
    }

    // Pass 4: the EPIC-enhanced query embedding.
    std::vector<NodeId> query_emb(B);
    for (int i = 0; i < B; ++i) {
      if (baseline_path_) {
        query_emb[i] = eq[i];
        continue;
      }
      std::vector<DemoEmbedding<T>> demos;
      if (cfg_.variant.softprompt != SoftPromptKind::Off) {
        demos = soft_prompt_demos(tape, model, batch[i]);
      } else {
        const std::vector<int> idx =
            sample_in_batch_demos(B, i, cfg_.k_max, rng);
        if (log && static_cast<int>(idx.size()) < static_cast<int>(log->k_hist.size()))
          ++log->k_hist[idx.size()];
        for (int j : idx) demos.push_back(graph_demo(tape, model, batch[j], eq[j], ep[j], instr_vec));
        if (idx.empty()) {
          // k = 0: the EPIC sequence equals the plain layout already encoded
          // in pass 1, so reuse it — this makes the k_max=0 configuration
          // degrade to the standard baseline exactly.
          query_emb[i] = eq[i];
          continue;
        }
      }
      MixedSequence<T> seq;
      if (cfg_.variant.softprompt == SoftPromptKind::PrefixSoftPrompt) {
        for (int r = 0; r < params_->soft_prompt.rows; ++r)
          seq.push_back(inject_node<T>(tape.select_row(model.soft_prompt, r)));
        append_tokens(seq, batch[i].instruction);
        append_tokens(seq, batch[i].query);
        seq.push_back(tok<T>(eos));
        if (static_cast<int>(seq.size()) > params_->cfg.max_seq_len)
          throw std::length_error("soft-prompt sequence exceeds max_seq_len");
      } else {
        seq = assemble_epic_sequence(demos, batch[i].instruction, batch[i].query, cfg_.variant,
                                     eos, params_->cfg.max_seq_len);
      }
      query_emb[i] = model.eos_pool(model.forward(seq));
      tokens += static_cast<long>(seq.size());
    }

    // InfoNCE per triplet: negatives are the other positives in batch order,
    // then the triplet's own hard negatives.
    NodeId total = tape.constant(Matrix<T>(1, 1));
    for (int i = 0; i < B; ++i) {
      std::vector<NodeId> negs;
      for (int j = 0; j < B; ++j)
        if (j != i) negs.push_back(ep[j]);
      for (NodeId h : en[i]) negs.push_back(h);
      total = tape.add(total, info_nce_node(tape, query_emb[i], ep[i], negs,
                                            static_cast<T>(cfg_.temperature)));
    }
    if (log) log->tokens = tokens;
    return tape.scale(total, T(1) / T(B));
  }

  // Demonstration E_j from the batch's own forward passes: pooled embeddings
  // adapted by g, detached per config.
  DemoEmbedding<T> graph_demo(Tape<T>& tape, BoundModel<T>& model, const Triplet& src,
                              NodeId eq_src, NodeId ep_src, NodeId instr_vec) {
    DemoEmbedding<T> d;
    d.instruction_tokens = src.instruction;
    d.q_tokens = src.query;
    d.p_tokens = src.positive;
    const Compression c = cfg_.variant.compression;
    d.q_compressed = (c == Compression::Pair || c == Compression::AllIncludingInstruction ||
                      c == Compression::QueryOnly);
    d.p_compressed = (c == Compression::Pair || c == Compression::AllIncludingInstruction ||
                      c == Compression::PassageOnly);
    d.instr_compressed = (c == Compression::AllIncludingInstruction);
    if (d.q_compressed)
      d.q_slots.push_back(inject_node<T>(model.adapt(maybe_detach(tape, eq_src))));
    if (d.p_compressed)
      d.p_slots.push_back(inject_node<T>(model.adapt(maybe_detach(tape, ep_src))));
    if (d.instr_compressed) d.instr_slots.push_back(inject_node<T>(instr_vec));
    return d;
  }

  // Learnable-token baselines: k_max demo slots filled from the soft-prompt
  // matrix (LearnableDemoSlots keeps the full EPIC layout).
  std::vector<DemoEmbedding<T>> soft_prompt_demos(Tape<T>& tape, BoundModel<T>& model,
                                                  const Triplet& t) {
    std::vector<DemoEmbedding<T>> demos;
    if (cfg_.variant.softprompt != SoftPromptKind::LearnableDemoSlots) return demos;
    const int k = params_->soft_prompt.rows / 2;
    for (int j = 0; j < k; ++j) {
      DemoEmbedding<T> d;
      d.instruction_tokens = t.instruction;
      d.q_slots.push_back(inject_node<T>(tape.select_row(model.soft_prompt, 2 * j)));
      d.p_slots.push_back(inject_node<T>(tape.select_row(model.soft_prompt, 2 * j + 1)));
      demos.push_back(std::move(d));
    }
    return demos;
  }

  void apply_adamw(Tape<T>& tape, BoundModel<T>& model, T lr) {
    ++adam_t_;
    const T b1 = T(0.9), b2 = T(0.999), eps = T(1e-8);
    const T bc1 = T(1) - std::pow(b1, T(adam_t_));
    const T bc2 = T(1) - std::pow(b2, T(adam_t_));
    size_t ti = 0;
    model.for_each_leaf([&](const std::string&, NodeId id) {
      Matrix<T>& p = *tensors_[ti];
      Matrix<T>& m = adam_m_[ti];
      Matrix<T>& v = adam_v_[ti];
      const Matrix<T>& g = tape.grad(id);
      for (size_t k = 0; k < p.size(); ++k) {
        m.data[k] = b1 * m.data[k] + (T(1) - b1) * g.data[k];
        v.data[k] = b2 * v.data[k] + (T(1) - b2) * g.data[k] * g.data[k];
        const T mh = m.data[k] / bc1;
        const T vh = v.data[k] / bc2;
        p.data[k] -= lr * (mh / (std::sqrt(vh) + eps) +
                           static_cast<T>(cfg_.weight_decay) * p.data[k]);
      }
      ++ti;
    });
  }

  ModelParams<T>* params_;
  TrainConfig cfg_;
  bool baseline_path_ = false;
  std::mt19937_64 sample_rng_;
  int step_ = 0;
  int adam_t_ = 0;
  std::vector<std::string> names_;
  std::vector<Matrix<T>*> tensors_;
  std::vector<Matrix<T>> adam_m_, adam_v_;
};

struct TrainResult {
  std::vector<StepLog> log;
};

// Full training run: same-task batches, seed-deterministic order, CSV
// telemetry per step.
template <typename T>
TrainResult train(ModelParams<T>& params, const std::vector<Triplet>& dataset,
                  const TrainConfig& cfg, std::ostream* csv = nullptr,
                  bool dedicated_baseline = false) {
  if (dataset.empty()) throw ConfigError("train: dataset is empty");
  Trainer<T> trainer(params, cfg);
  trainer.set_dedicated_baseline(dedicated_baseline);
  TrainResult result;
  if (csv) *csv << "step,loss,lr,k_histogram,tokens_this_step,wall_ms\n";
  std::uint64_t epoch_seed = cfg.seed;
  std::vector<std::vector<int>> batches;
  size_t bi = 0;
  for (int s = 0; s < cfg.steps; ++s) {
    if (bi >= batches.size()) {
      batches = make_same_task_batches(dataset, cfg.batch_size, epoch_seed++);
      bi = 0;
    }
    std::vector<Triplet> batch;
    for (int idx : batches[bi++]) batch.push_back(dataset[idx]);
    StepLog log = trainer.train_step(batch);
    result.log.push_back(log);
    if (csv)
      *csv << log.step << ',' << log.loss << ',' << log.lr << ',' << k_hist_string(log.k_hist)
           << ',' << log.tokens << ',' << log.wall_ms << '\n';
  }
  return result;
}

struct GradCheckReport {
  std::map<std::string, double> per_tensor;
  double max_rel_err = 0;
};

// Central finite differences against analytic gradients. f must be a pure
// function of the parameters. stride subsamples entries within each tensor
// (every tensor is always touched).
template <typename T, typename LossFn>
GradCheckReport grad_check(LossFn&& f, ModelParams<T>& params,
                           const std::map<std::string, Matrix<T>>& analytic, T eps,
                           int stride = 1) {
  if (eps <= T(0)) throw std::domain_error("grad_check: eps must be positive");
  if (stride < 1) stride = 1;
  GradCheckReport report;
  params.for_each_tensor([&](const std::string& name, Matrix<T>& m) {
    auto it = analytic.find(name);
    if (it == analytic.end()) throw std::logic_error("grad_check: no analytic grad for " + name);
    const Matrix<T>& g = it->second;
    double worst = 0;
    for (size_t k = 0; k < m.size(); k += stride) {
      const T orig = m.data[k];
      m.data[k] = orig + eps;
      const double fp = static_cast<double>(f(params));
      m.data[k] = orig - eps;
      const double fm = static_cast<double>(f(params));
      m.data[k] = orig;
      const double num = (fp - fm) / (2.0 * static_cast<double>(eps));
      const double ana = static_cast<double>(g.data[k]);
      const double denom = std::max({std::abs(num), std::abs(ana), 1e-6});
      worst = std::max(worst, std::abs(num - ana) / denom);
    }
    report.per_tensor[name] = worst;
    report.max_rel_err = std::max(report.max_rel_err, worst);
  });
  return report;
}

}  // namespace epic
