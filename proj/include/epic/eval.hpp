#pragma once

#include <map>
#include <string>
#include <vector>

#include "epic/cache.hpp"
#include "epic/data.hpp"
#include "epic/model.hpp"

namespace epic {

// One query's candidates ordered by descending score; ties broken by
// ascending candidate id (stable).
struct RankedList {
  int query_id = 0;
  std::vector<int> ordered_candidates;
  std::vector<int> relevant;  // candidate ids with relevance 1
};

RankedList rank_by_cosine(int query_id, const std::vector<float>& query_emb,
                          const std::vector<std::vector<float>>& candidate_embs,
                          const std::vector<int>& relevant);

struct RetrievalMetrics {
  std::map<int, double> recall_at;
  double ndcg10 = 0;
  double mrr = 0;
};

// Binary-relevance recall@k, nDCG@10 (log base 2) and MRR, averaged over
// queries.
RetrievalMetrics retrieval_metrics(const std::vector<RankedList>& rankings,
                                   const std::vector<int>& k_list);

// Spearman rank correlation with average-rank tie handling. Throws on
// constant predictions (undefined correlation).
double spearman(const std::vector<double>& pred, const std::vector<double>& gold);

// Mean EOS->first-token attention share per requested layer, averaged over
// heads then probe inputs.
struct SinkProfile {
  std::vector<int> layers;
  std::vector<double> proportion;  // parallel to layers
};

SinkProfile sink_profile(const ModelParams<float>& params,
                         const std::vector<MixedSequence<float>>& probe_inputs,
                         const std::vector<int>& layers, bool force_uniform = false);

// ---- desk-scale evaluation harness ----------------------------------------

// Held-out retrieval set for one task: queries with their relevant candidate
// plus a corpus of positives and hard negatives.
struct TaskEvalSet {
  TaskSpec spec;
  std::vector<int> instruction;
  std::vector<std::vector<int>> queries;        // query token lists
  std::vector<int> relevant;                    // corpus index per query
  std::vector<std::vector<int>> corpus;         // candidate token lists
  std::vector<DemoPair> demo_pairs;             // demonstrations for this task
};

// Builds the eval set from uniquely-keyed triplets: corpus = all positives
// followed by all hard negatives; the first n_queries queries are evaluated.
TaskEvalSet build_eval_set(const TaskSpec& spec, const SynthVocab& vocab,
                           std::uint64_t seed, int n_triplets, int n_queries, int n_demos);

struct ModeReport {
  std::string mode;
  RetrievalMetrics metrics;
  double mean_seq_len = 0;
  double mean_wall_ms = 0;
  long total_forward_passes = 0;
};

// Embeds the corpus (plain) once and each query under the given mode.
ModeReport evaluate_mode(const ModelParams<float>& params, DemoCache& cache, EmbedMode mode,
                         const TaskEvalSet& set, const std::vector<int>& k_list = {1, 5});

// Per-mode aggregate cost and score table over a set of tasks (Fig.-style
// three-way comparison). Returns one report per requested mode with metrics
// averaged over tasks.
std::vector<ModeReport> compare_modes(const ModelParams<float>& params,
                                      const std::vector<TaskEvalSet>& sets,
                                      const std::vector<EmbedMode>& modes);

// Three-condition comparison (baseline / EPIC without demos at inference /
// EPIC with demos), per seed and mean, with the directional ordering check.
struct Table2Report {
  std::vector<std::uint64_t> seeds;
  // scores[condition][seed]: recall@1 means over tasks.
  std::map<std::string, std::vector<double>> scores;
  std::map<std::string, double> means;
  bool ordering_holds_on_mean = false;
  bool ordering_holds_per_seed = false;
  std::string summary;
};

Table2Report table2_report(const std::vector<std::uint64_t>& seeds,
                           const std::vector<double>& baseline,
                           const std::vector<double>& epic_wo_icd,
                           const std::vector<double>& epic_w_icd);

// STS pairs with graded gold scores derived from content-token overlap.
struct StsPair {
  std::vector<int> text_a;
  std::vector<int> text_b;
  double gold = 0;
};

std::vector<StsPair> make_sts_pairs(const TaskSpec& spec, const SynthVocab& vocab,
                                    std::uint64_t seed, int n);

// Spearman correlation of cosine similarities against gold scores. Pairs are
// embedded symmetrically (instruction applied to both sides).
double sts_eval(const ModelParams<float>& params, const std::vector<int>& instruction,
                const std::vector<StsPair>& pairs);

}  // namespace epic
