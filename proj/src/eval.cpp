#include "epic/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "epic/loss.hpp"

namespace epic {

RankedList rank_by_cosine(int query_id, const std::vector<float>& query_emb,
                          const std::vector<std::vector<float>>& candidate_embs,
                          const std::vector<int>& relevant) {
  std::vector<std::pair<double, int>> scored;
  scored.reserve(candidate_embs.size());
  for (size_t i = 0; i < candidate_embs.size(); ++i) {
    std::vector<double> a(query_emb.begin(), query_emb.end());
    std::vector<double> b(candidate_embs[i].begin(), candidate_embs[i].end());
    scored.emplace_back(cosine_sim(a, b), static_cast<int>(i));
  }
  std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });
  RankedList out;
  out.query_id = query_id;
  out.relevant = relevant;
  out.ordered_candidates.reserve(scored.size());
  for (const auto& [s, id] : scored) out.ordered_candidates.push_back(id);
  return out;
}

RetrievalMetrics retrieval_metrics(const std::vector<RankedList>& rankings,
                                   const std::vector<int>& k_list) {
  if (rankings.empty()) throw std::invalid_argument("retrieval_metrics: no rankings");
  RetrievalMetrics m;
  for (int k : k_list) m.recall_at[k] = 0;
  for (const RankedList& r : rankings) {
    if (r.relevant.empty())
      throw std::invalid_argument("retrieval_metrics: query without relevant candidates");
    std::vector<char> is_rel(r.ordered_candidates.size(), 0);
    for (int c : r.relevant)
      for (size_t i = 0; i < r.ordered_candidates.size(); ++i)
        if (r.ordered_candidates[i] == c) is_rel[i] = 1;
    const double n_rel = static_cast<double>(r.relevant.size());
    for (int k : k_list) {
      int hits = 0;
      for (int i = 0; i < k && i < static_cast<int>(is_rel.size()); ++i) hits += is_rel[i];
      m.recall_at[k] += hits / n_rel;
    }
    double dcg = 0;
    for (int i = 0; i < 10 && i < static_cast<int>(is_rel.size()); ++i)
      if (is_rel[i]) dcg += 1.0 / std::log2(i + 2.0);
    double idcg = 0;
    for (int i = 0; i < 10 && i < static_cast<int>(r.relevant.size()); ++i)
      idcg += 1.0 / std::log2(i + 2.0);
    m.ndcg10 += dcg / idcg;
    for (size_t i = 0; i < is_rel.size(); ++i)
      if (is_rel[i]) {
        m.mrr += 1.0 / static_cast<double>(i + 1);
        break;
      }
  }
  const double n = static_cast<double>(rankings.size());
  for (auto& [k, v] : m.recall_at) v /= n;
  m.ndcg10 /= n;
  m.mrr /= n;
  return m;
}

namespace {
// Ranks with ties assigned the average of the positions they span.
std::vector<double> average_ranks(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t t = i; t <= j; ++t) ranks[idx[t]] = avg;
    i = j + 1;
  }
  return ranks;
}
}  // namespace

double spearman(const std::vector<double>& pred, const std::vector<double>& gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("spearman: size mismatch");
  if (pred.size() < 2) throw std::invalid_argument("spearman: need at least two pairs");
  auto constant = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
  };
  if (constant(pred)) throw std::domain_error("spearman: constant predictions");
  if (constant(gold)) throw std::domain_error("spearman: constant gold scores");
  const std::vector<double> ra = average_ranks(pred);
  const std::vector<double> rb = average_ranks(gold);
  const double n = static_cast<double>(ra.size());
  double ma = 0, mb = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double num = 0, da = 0, db = 0;
  for (size_t i = 0; i < ra.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - mb);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - mb) * (rb[i] - mb);
  }
  return num / std::sqrt(da * db);
}

namespace {
// Sink probes re-run in double so the reported proportions are exact: under
// forced-uniform attention every captured row holds 1/(row length) computed
// in double, which compares equal to 1.0/n.
MixedSequence<double> widen(const MixedSequence<float>& seq) {
  MixedSequence<double> out;
  out.reserve(seq.size());
  for (const auto& e : seq) {
    if (e.kind == SeqElement<float>::Kind::Token) {
      out.push_back(tok<double>(e.token_id));
    } else if (e.kind == SeqElement<float>::Kind::InjectConst) {
      out.push_back(inject(std::vector<double>(e.vec.begin(), e.vec.end())));
    } else {
      throw std::invalid_argument("sink_profile: graph-node injections not supported");
    }
  }
  return out;
}
}  // namespace

SinkProfile sink_profile(const ModelParams<float>& params,
                         const std::vector<MixedSequence<float>>& probe_inputs,
                         const std::vector<int>& layers, bool force_uniform) {
  if (probe_inputs.empty()) throw std::invalid_argument("sink_profile: no probe inputs");
  SinkProfile out;
  out.layers = layers;
  out.proportion.assign(layers.size(), 0.0);
  ForwardOptions opt;
  opt.want_attention = true;
  opt.force_uniform_attention = force_uniform;
  const ModelParams<double> dparams = params.cast<double>();
  for (const auto& seq : probe_inputs) {
    HiddenStates<double> hs = run_forward(dparams, widen(seq), opt);
    for (size_t i = 0; i < layers.size(); ++i)
      out.proportion[i] += attention_to_first_token(hs, layers[i]);
  }
  for (double& p : out.proportion) p /= static_cast<double>(probe_inputs.size());
  return out;
}

TaskEvalSet build_eval_set(const TaskSpec& spec, const SynthVocab& vocab,
                           std::uint64_t seed, int n_triplets, int n_queries, int n_demos) {
  if (n_queries > n_triplets)
    throw std::invalid_argument("build_eval_set: more queries than triplets");
  TaskEvalSet set;
  set.spec = spec;
  set.instruction = vocab.instruction_tokens(spec);
  const auto eval_triplets = generate_triplets(spec, n_triplets, seed, vocab,
                                               /*unique_entities=*/true);
  // Corpus: all positives first (relevant[i] == i), then every hard negative.
  for (const Triplet& t : eval_triplets) set.corpus.push_back(t.positive);
  for (const Triplet& t : eval_triplets)
    for (const auto& hn : t.hard_negatives) set.corpus.push_back(hn);
  for (int i = 0; i < n_queries; ++i) {
    set.queries.push_back(eval_triplets[i].query);
    set.relevant.push_back(i);
  }
  // Demonstrations come from a disjoint stream so they never appear verbatim
  // in the corpus.
  const auto demo_triplets = generate_triplets(spec, n_demos, seed ^ 0x5eedDEADu, vocab);
  for (const Triplet& t : demo_triplets) {
    DemoPair p;
    p.instruction_tokens = t.instruction;
    p.query_tokens = t.query;
    p.passage_tokens = t.positive;
    set.demo_pairs.push_back(std::move(p));
  }
  return set;
}

ModeReport evaluate_mode(const ModelParams<float>& params, DemoCache& cache, EmbedMode mode,
                         const TaskEvalSet& set, const std::vector<int>& k_list) {
  ModeReport rep;
  rep.mode = to_string(mode);
  std::vector<std::vector<float>> corpus_embs;
  corpus_embs.reserve(set.corpus.size());
  for (const auto& doc : set.corpus) {
    EmbedRequest req{set.spec.task_id, doc, EmbedMode::Plain, EmbedRole::Passage};
    corpus_embs.push_back(embed(req, params, cache).embedding);
  }
  std::vector<RankedList> rankings;
  double seq_len_sum = 0, wall_sum = 0;
  for (size_t qi = 0; qi < set.queries.size(); ++qi) {
    EmbedRequest req{set.spec.task_id, set.queries[qi], mode, EmbedRole::Query};
    EmbedResult res = embed(req, params, cache);
    seq_len_sum += res.cost.sequence_length;
    wall_sum += res.cost.wall_ms;
    rep.total_forward_passes += res.cost.forward_passes;
    rankings.push_back(rank_by_cosine(static_cast<int>(qi), res.embedding, corpus_embs,
                                      {set.relevant[qi]}));
  }
  rep.metrics = retrieval_metrics(rankings, k_list);
  rep.mean_seq_len = seq_len_sum / static_cast<double>(set.queries.size());
  rep.mean_wall_ms = wall_sum / static_cast<double>(set.queries.size());
  return rep;
}

std::vector<ModeReport> compare_modes(const ModelParams<float>& params,
                                      const std::vector<TaskEvalSet>& sets,
                                      const std::vector<EmbedMode>& modes) {
  if (sets.empty()) throw std::invalid_argument("compare_modes: no eval sets");
  DemoCache cache;
  for (const TaskEvalSet& s : sets)
    build_cache(cache, s.spec.task_id, s.instruction, s.demo_pairs, params);
  std::vector<ModeReport> out;
  for (EmbedMode mode : modes) {
    ModeReport agg;
    agg.mode = to_string(mode);
    for (const TaskEvalSet& s : sets) {
      ModeReport r = evaluate_mode(params, cache, mode, s);
      for (const auto& [k, v] : r.metrics.recall_at) agg.metrics.recall_at[k] += v;
      agg.metrics.ndcg10 += r.metrics.ndcg10;
      agg.metrics.mrr += r.metrics.mrr;
      agg.mean_seq_len += r.mean_seq_len;
      agg.mean_wall_ms += r.mean_wall_ms;
      agg.total_forward_passes += r.total_forward_passes;
    }
    const double n = static_cast<double>(sets.size());
    for (auto& [k, v] : agg.metrics.recall_at) v /= n;
    agg.metrics.ndcg10 /= n;
    agg.metrics.mrr /= n;
    agg.mean_seq_len /= n;
    agg.mean_wall_ms /= n;
    out.push_back(std::move(agg));
  }
  return out;
}

Table2Report table2_report(const std::vector<std::uint64_t>& seeds,
                           const std::vector<double>& baseline,
                           const std::vector<double>& epic_wo_icd,
                           const std::vector<double>& epic_w_icd) {
  if (baseline.size() != seeds.size() || epic_wo_icd.size() != seeds.size() ||
      epic_w_icd.size() != seeds.size())
    throw std::invalid_argument("table2_report: score lists must match the seed list");
  Table2Report rep;
  rep.seeds = seeds;
  rep.scores["baseline"] = baseline;
  rep.scores["epic_wo_icd"] = epic_wo_icd;
  rep.scores["epic_w_icd"] = epic_w_icd;
  auto mean = [](const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  rep.means["baseline"] = mean(baseline);
  rep.means["epic_wo_icd"] = mean(epic_wo_icd);
  rep.means["epic_w_icd"] = mean(epic_w_icd);
  rep.ordering_holds_on_mean = rep.means["epic_w_icd"] >= rep.means["epic_wo_icd"] &&
                               rep.means["epic_wo_icd"] >= rep.means["baseline"];
  rep.ordering_holds_per_seed = true;
  for (size_t i = 0; i < seeds.size(); ++i)
    if (!(epic_w_icd[i] >= epic_wo_icd[i] && epic_wo_icd[i] >= baseline[i]))
      rep.ordering_holds_per_seed = false;
  std::ostringstream os;
  os << "condition,mean";
  for (auto s : seeds) os << ",seed" << s;
  os << "\n";
  for (const char* name : {"baseline", "epic_wo_icd", "epic_w_icd"}) {
    os << name << "," << rep.means[name];
    for (double v : rep.scores[name]) os << "," << v;
    os << "\n";
  }
  os << "ordering_mean," << (rep.ordering_holds_on_mean ? "pass" : "fail") << "\n";
  os << "ordering_per_seed,"
     << (rep.ordering_holds_per_seed ? "pass" : "warn: inverted on some seed") << "\n";
  rep.summary = os.str();
  return rep;
}

std::vector<StsPair> make_sts_pairs(const TaskSpec& spec, const SynthVocab& vocab,
                                    std::uint64_t seed, int n) {
  if (n < 2) throw std::invalid_argument("make_sts_pairs: need at least two pairs");
  const auto triplets = generate_triplets(spec, n, seed, vocab);
  std::vector<StsPair> pairs;
  pairs.reserve(n);
  for (int i = 0; i < n; ++i) {
    StsPair p;
    p.text_a = triplets[i].query;
    // Cycle through match strengths: the own positive, the own hard negative,
    // and another triplet's positive, so gold scores span the full range.
    switch (i % 3) {
      case 0: p.text_b = triplets[i].positive; break;
      case 1: p.text_b = triplets[i].hard_negatives.at(0); break;
      default: p.text_b = triplets[(i + 1) % n].positive; break;
    }
    p.gold = static_cast<double>(oracle_overlap(p.text_a, p.text_b, vocab));
    pairs.push_back(std::move(p));
  }
  return pairs;
}

double sts_eval(const ModelParams<float>& params, const std::vector<int>& instruction,
                const std::vector<StsPair>& pairs) {
  std::vector<double> pred, gold;
  for (const StsPair& p : pairs) {
    auto ea = eos_pool(run_forward(
        params, standalone_sequence<float>(instruction, p.text_a, params.special.eos_id)));
    auto eb = eos_pool(run_forward(
        params, standalone_sequence<float>(instruction, p.text_b, params.special.eos_id)));
    std::vector<double> da(ea.begin(), ea.end()), db(eb.begin(), eb.end());
    pred.push_back(cosine_sim(da, db));
    gold.push_back(p.gold);
  }
  return spearman(pred, gold);
}

}  // namespace epic
