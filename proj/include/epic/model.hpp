#pragma once

#include <random>
#include <string>
#include <vector>

#include "epic/config.hpp"
#include "epic/matrix.hpp"
#include "epic/tape.hpp"

namespace epic {

// User-facing mixed token/vector sequence. SeqElement<T> (tape.hpp) is the
// same representation; graph-producing code additionally uses InjectNode.
template <typename T>
using MixedSequence = std::vector<SeqElement<T>>;

template <typename T>
SeqElement<T> tok(int id) {
  SeqElement<T> e;
  e.kind = SeqElement<T>::Kind::Token;
  e.token_id = id;
  return e;
}

template <typename T>
SeqElement<T> inject(std::vector<T> v) {
  SeqElement<T> e;
  e.kind = SeqElement<T>::Kind::InjectConst;
  e.vec = std::move(v);
  return e;
}

template <typename T>
SeqElement<T> inject_node(int node) {
  SeqElement<T> e;
  e.kind = SeqElement<T>::Kind::InjectNode;
  e.node = node;
  return e;
}

template <typename T>
void append_tokens(MixedSequence<T>& seq, const std::vector<int>& ids) {
  for (int id : ids) seq.push_back(tok<T>(id));
}

// Weights of the tiny causal transformer plus the demonstration adapter.
template <typename T>
struct ModelParams {
  ModelConfig cfg;
  SpecialTokens special;

  Matrix<T> tok_emb;  // vocab x d
  struct Layer {
    Matrix<T> wq, wk, wv, wo;  // d x d
    Matrix<T> w_in;            // d x d_ff
    Matrix<T> w_out;           // d_ff x d
    Matrix<T> attn_gain, mlp_gain;  // 1 x d
  };
  std::vector<Layer> layers;
  Matrix<T> final_gain;  // 1 x d

  Matrix<T> adapter_w1, adapter_w2;  // d x d
  Matrix<T> adapter_b1, adapter_b2;  // 1 x d

  // 2k x d when a soft-prompt variant is trained, otherwise empty.
  Matrix<T> soft_prompt;

  static ModelParams init(const ModelConfig& cfg, const SpecialTokens& special) {
    cfg.validate();
    special.validate(cfg.vocab_size);
    ModelParams p;
    p.cfg = cfg;
    p.special = special;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    auto randn = [&](int r, int c, double scale) {
      Matrix<T> m(r, c);
      for (T& v : m.data) v = static_cast<T>(dist(rng) * scale);
      return m;
    };
    auto ones = [&](int r, int c) {
      Matrix<T> m(r, c);
      m.fill(T(1));
      return m;
    };
    p.tok_emb = randn(cfg.vocab_size, cfg.d_model, 1.0);
    p.layers.resize(cfg.n_layers);
    for (auto& l : p.layers) {
      l.wq = randn(cfg.d_model, cfg.d_model, 1.0);
      l.wk = randn(cfg.d_model, cfg.d_model, 1.0);
      l.wv = randn(cfg.d_model, cfg.d_model, 1.0);
      l.wo = randn(cfg.d_model, cfg.d_model, resid_scale);
      l.w_in = randn(cfg.d_model, cfg.d_ff, 1.0);
      l.w_out = randn(cfg.d_ff, cfg.d_model, resid_scale);
      l.attn_gain = ones(1, cfg.d_model);
      l.mlp_gain = ones(1, cfg.d_model);
    }
    p.final_gain = ones(1, cfg.d_model);
    p.adapter_w1 = randn(cfg.d_model, cfg.d_model, 1.0);
    p.adapter_w2 = randn(cfg.d_model, cfg.d_model, 1.0);
    p.adapter_b1 = Matrix<T>(1, cfg.d_model);
    p.adapter_b2 = Matrix<T>(1, cfg.d_model);
    return p;
  }

  template <typename F>
  void for_each_tensor(F&& f) {
    f("tok_emb", tok_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string pre = "layers." + std::to_string(i) + ".";
      f(pre + "wq", layers[i].wq);
      f(pre + "wk", layers[i].wk);
      f(pre + "wv", layers[i].wv);
      f(pre + "wo", layers[i].wo);
      f(pre + "w_in", layers[i].w_in);
      f(pre + "w_out", layers[i].w_out);
      f(pre + "attn_gain", layers[i].attn_gain);
      f(pre + "mlp_gain", layers[i].mlp_gain);
    }
    f("final_gain", final_gain);
    f("adapter_w1", adapter_w1);
    f("adapter_b1", adapter_b1);
    f("adapter_w2", adapter_w2);
    f("adapter_b2", adapter_b2);
    if (soft_prompt.rows > 0) f("soft_prompt", soft_prompt);
  }

  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<ModelParams*>(this)->for_each_tensor(
        [&](const std::string& name, Matrix<T>& m) { f(name, static_cast<const Matrix<T>&>(m)); });
  }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.cfg = cfg;
    out.special = special;
    auto conv = [](const Matrix<T>& m) {
      Matrix<U> r(m.rows, m.cols);
      for (size_t i = 0; i < m.size(); ++i) r.data[i] = static_cast<U>(m.data[i]);
      return r;
    };
    out.tok_emb = conv(tok_emb);
    out.layers.resize(layers.size());
    for (size_t i = 0; i < layers.size(); ++i) {
      out.layers[i].wq = conv(layers[i].wq);
      out.layers[i].wk = conv(layers[i].wk);
      out.layers[i].wv = conv(layers[i].wv);
      out.layers[i].wo = conv(layers[i].wo);
      out.layers[i].w_in = conv(layers[i].w_in);
      out.layers[i].w_out = conv(layers[i].w_out);
      out.layers[i].attn_gain = conv(layers[i].attn_gain);
      out.layers[i].mlp_gain = conv(layers[i].mlp_gain);
    }
    out.final_gain = conv(final_gain);
    out.adapter_w1 = conv(adapter_w1);
    out.adapter_b1 = conv(adapter_b1);
    out.adapter_w2 = conv(adapter_w2);
    out.adapter_b2 = conv(adapter_b2);
    out.soft_prompt = conv(soft_prompt);
    return out;
  }
};

// Counts full transformer forward passes executed on this thread; the
// inference path reads it to report exact pass budgets.
inline long& forward_pass_counter() {
  static thread_local long counter = 0;
  return counter;
}

struct ForwardOptions {
  bool want_attention = false;
  bool force_uniform_attention = false;  // sink-metric self-test hook
};

template <typename T>
struct ForwardGraph {
  using NodeId = typename Tape<T>::NodeId;
  int n = 0;
  std::vector<NodeId> layer_states;  // [0] = input embeddings, [i] = after block i
  NodeId final_states = -1;          // after final norm
  std::vector<AttnMaps<T>> attention;  // per block, when requested
};

// Model parameters registered as leaves on a tape; all forward passes of one
// training step share these leaf nodes so gradients accumulate in one place.
template <typename T>
struct BoundModel {
  using NodeId = typename Tape<T>::NodeId;

  Tape<T>* tape = nullptr;
  const ModelConfig* cfg = nullptr;
  NodeId tok_emb = -1;
  struct LayerIds {
    NodeId wq, wk, wv, wo, w_in, w_out, attn_gain, mlp_gain;
  };
  std::vector<LayerIds> layers;
  NodeId final_gain = -1;
  NodeId adapter_w1 = -1, adapter_b1 = -1, adapter_w2 = -1, adapter_b2 = -1;
  NodeId soft_prompt = -1;
  // Counts full transformer forward passes; feeds the inference cost records.
  mutable long forward_passes = 0;

  static BoundModel bind(Tape<T>& tape, const ModelParams<T>& p, bool requires_grad) {
    BoundModel m;
    m.tape = &tape;
    m.cfg = &p.cfg;
    m.tok_emb = tape.leaf(p.tok_emb, requires_grad);
    m.layers.reserve(p.layers.size());
    for (const auto& l : p.layers) {
      LayerIds ids;
      ids.wq = tape.leaf(l.wq, requires_grad);
      ids.wk = tape.leaf(l.wk, requires_grad);
      ids.wv = tape.leaf(l.wv, requires_grad);
      ids.wo = tape.leaf(l.wo, requires_grad);
      ids.w_in = tape.leaf(l.w_in, requires_grad);
      ids.w_out = tape.leaf(l.w_out, requires_grad);
      ids.attn_gain = tape.leaf(l.attn_gain, requires_grad);
      ids.mlp_gain = tape.leaf(l.mlp_gain, requires_grad);
      m.layers.push_back(ids);
    }
    m.final_gain = tape.leaf(p.final_gain, requires_grad);
    m.adapter_w1 = tape.leaf(p.adapter_w1, requires_grad);
    m.adapter_b1 = tape.leaf(p.adapter_b1, requires_grad);
    m.adapter_w2 = tape.leaf(p.adapter_w2, requires_grad);
    m.adapter_b2 = tape.leaf(p.adapter_b2, requires_grad);
    if (p.soft_prompt.rows > 0) m.soft_prompt = tape.leaf(p.soft_prompt, requires_grad);
    return m;
  }

  // Visits leaf node ids in the same order as ModelParams::for_each_tensor.
  template <typename F>
  void for_each_leaf(F&& f) const {
    f("tok_emb", tok_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string pre = "layers." + std::to_string(i) + ".";
      f(pre + "wq", layers[i].wq);
      f(pre + "wk", layers[i].wk);
      f(pre + "wv", layers[i].wv);
      f(pre + "wo", layers[i].wo);
      f(pre + "w_in", layers[i].w_in);
      f(pre + "w_out", layers[i].w_out);
      f(pre + "attn_gain", layers[i].attn_gain);
      f(pre + "mlp_gain", layers[i].mlp_gain);
    }
    f("final_gain", final_gain);
    f("adapter_w1", adapter_w1);
    f("adapter_b1", adapter_b1);
    f("adapter_w2", adapter_w2);
    f("adapter_b2", adapter_b2);
    if (soft_prompt >= 0) f("soft_prompt", soft_prompt);
  }

  ForwardGraph<T> forward(const MixedSequence<T>& seq, const ForwardOptions& opt = {}) const {
    if (seq.empty()) throw std::domain_error("forward: empty sequence");
    if (static_cast<int>(seq.size()) > cfg->max_seq_len)
      throw std::length_error("forward: sequence exceeds max_seq_len");
    ++forward_passes;
    ++forward_pass_counter();
    Tape<T>& tp = *tape;
    ForwardGraph<T> out;
    out.n = static_cast<int>(seq.size());
    NodeId x = tp.assemble(tok_emb, seq);
    out.layer_states.push_back(x);
    if (opt.want_attention) out.attention.resize(layers.size());
    for (size_t li = 0; li < layers.size(); ++li) {
      const LayerIds& L = layers[li];
      NodeId h = tp.rmsnorm(x, L.attn_gain);
      NodeId q = tp.rope(tp.matmul(h, L.wq), cfg->n_heads, static_cast<T>(cfg->rotary_base));
      NodeId k = tp.rope(tp.matmul(h, L.wk), cfg->n_heads, static_cast<T>(cfg->rotary_base));
      NodeId v = tp.matmul(h, L.wv);
      AttnMaps<T>* cap = opt.want_attention ? &out.attention[li] : nullptr;
      NodeId a = tp.causal_attention(q, k, v, cfg->n_heads, cap, opt.force_uniform_attention);
      x = tp.add(x, tp.matmul(a, L.wo));
      NodeId h2 = tp.rmsnorm(x, L.mlp_gain);
      x = tp.add(x, tp.matmul(tp.gelu(tp.matmul(h2, L.w_in)), L.w_out));
      out.layer_states.push_back(x);
    }
    out.final_states = tp.rmsnorm(x, final_gain);
    return out;
  }

  // EOS pooling: final-layer hidden state of the last position.
  NodeId eos_pool(const ForwardGraph<T>& fg) const {
    if (fg.n < 1) throw std::domain_error("eos_pool: empty sequence");
    return tape->select_row(fg.final_states, fg.n - 1);
  }

  // Demonstration adapter g: two linear maps with a GELU between.
  NodeId adapt(NodeId v) const {
    const Matrix<T>& x = tape->value(v);
    if (!x.finite()) throw std::domain_error("adapt: non-finite input");
    NodeId h = tp_gelu(tape->add_row_broadcast(tape->matmul(v, adapter_w1), adapter_b1));
    return tape->add_row_broadcast(tape->matmul(h, adapter_w2), adapter_b2);
  }

 private:
  NodeId tp_gelu(NodeId a) const { return tape->gelu(a); }
};

// Value-level view of a forward pass, for inference and analysis code that
// does not need the graph.
template <typename T>
struct HiddenStates {
  int n = 0;
  std::vector<Matrix<T>> layer_states;
  Matrix<T> final_states;
  std::vector<AttnMaps<T>> attention;
  bool has_attention = false;
};

template <typename T>
HiddenStates<T> run_forward(const ModelParams<T>& params, const MixedSequence<T>& seq,
                            const ForwardOptions& opt = {}) {
  Tape<T> tape;
  BoundModel<T> m = BoundModel<T>::bind(tape, params, /*requires_grad=*/false);
  ForwardGraph<T> fg = m.forward(seq, opt);
  HiddenStates<T> hs;
  hs.n = fg.n;
  for (auto id : fg.layer_states) hs.layer_states.push_back(tape.value(id));
  hs.final_states = tape.value(fg.final_states);
  hs.attention = std::move(fg.attention);
  hs.has_attention = opt.want_attention;
  return hs;
}

template <typename T>
std::vector<T> eos_pool(const HiddenStates<T>& hs) {
  if (hs.n < 1) throw std::domain_error("eos_pool: empty sequence");
  const Matrix<T>& f = hs.final_states;
  return std::vector<T>(f.row_ptr(hs.n - 1), f.row_ptr(hs.n - 1) + f.cols);
}

// Head-averaged attention the last (EOS) position assigns to position 0.
template <typename T>
T attention_to_first_token(const HiddenStates<T>& hs, int layer) {
  if (!hs.has_attention) throw std::logic_error("attention maps were not captured");
  if (layer < 0 || layer >= static_cast<int>(hs.attention.size()))
    throw std::out_of_range("attention_to_first_token: layer out of range");
  const AttnMaps<T>& maps = hs.attention[layer];
  T acc = T(0);
  for (const auto& head : maps) acc += head.at(hs.n - 1, 0);
  return acc / static_cast<T>(maps.size());
}

// Plain (non-graph) adapter evaluation on a d-vector.
template <typename T>
std::vector<T> adapt_vector(const ModelParams<T>& p, const std::vector<T>& v) {
  const int d = p.cfg.d_model;
  if (static_cast<int>(v.size()) != d) throw std::domain_error("adapt: wrong input dimension");
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) throw std::domain_error("adapt: non-finite input");
  std::vector<T> h(d), out(d);
  for (int j = 0; j < d; ++j) {
    T acc = p.adapter_b1.at(0, j);
    for (int i = 0; i < d; ++i) acc += v[i] * p.adapter_w1.at(i, j);
    h[j] = gelu_scalar(acc);
  }
  for (int j = 0; j < d; ++j) {
    T acc = p.adapter_b2.at(0, j);
    for (int i = 0; i < d; ++i) acc += h[i] * p.adapter_w2.at(i, j);
    out[j] = acc;
  }
  return out;
}

}  // namespace epic
