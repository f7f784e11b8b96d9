#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "epic/config.hpp"
#include "epic/model.hpp"

namespace epic {

// A textual demonstration: instruction plus a query-passage pair.
struct DemoPair {
  std::vector<int> instruction_tokens;
  std::vector<int> query_tokens;
  std::vector<int> passage_tokens;

  void validate() const {
    if (instruction_tokens.empty() || query_tokens.empty() || passage_tokens.empty())
      throw std::invalid_argument("DemoPair: token lists must be non-empty");
  }
};

// A demonstration in injectable form. Compressed sides hold one or more
// Inject elements (constants at inference, graph nodes during training);
// sides left textual by a compression variant keep their tokens.
template <typename T>
struct DemoEmbedding {
  std::vector<int> instruction_tokens;
  std::vector<SeqElement<T>> instr_slots;  // non-empty iff instruction compressed
  std::vector<SeqElement<T>> q_slots;
  std::vector<SeqElement<T>> p_slots;
  std::vector<int> q_tokens;  // used when the query side stays textual
  std::vector<int> p_tokens;
  bool instr_compressed = false;
  bool q_compressed = true;
  bool p_compressed = true;
};

namespace detail {
template <typename T>
void append_demo_side(MixedSequence<T>& seq, bool compressed,
                      const std::vector<SeqElement<T>>& slots,
                      const std::vector<int>& tokens) {
  if (compressed)
    seq.insert(seq.end(), slots.begin(), slots.end());
  else
    append_tokens(seq, tokens);
}

template <typename T>
void append_instruction(MixedSequence<T>& seq, const DemoEmbedding<T>& d) {
  if (d.instr_compressed)
    seq.insert(seq.end(), d.instr_slots.begin(), d.instr_slots.end());
  else
    append_tokens(seq, d.instruction_tokens);
}
}  // namespace detail

// Builds [E_1; ...; E_k; I; X; EOS] with the format variant controlling the
// per-demonstration layout. k = 0 collapses to the plain [I; X; EOS] layout.
template <typename T>
MixedSequence<T> assemble_epic_sequence(const std::vector<DemoEmbedding<T>>& demos,
                                        const std::vector<int>& instruction,
                                        const std::vector<int>& input_tokens,
                                        const PromptVariant& variant, int eos_id,
                                        int max_seq_len) {
  MixedSequence<T> seq;
  const bool single_instr = variant.format == PromptFormat::SingleInstruction;
  if (single_instr && !demos.empty()) append_tokens(seq, instruction);
  for (const auto& d : demos) {
    if (!single_instr) detail::append_instruction(seq, d);
    switch (variant.format) {
      case PromptFormat::NoPair:
        break;
      case PromptFormat::QueryOnly:
        detail::append_demo_side(seq, d.q_compressed, d.q_slots, d.q_tokens);
        break;
      case PromptFormat::PassageOnly:
        detail::append_demo_side(seq, d.p_compressed, d.p_slots, d.p_tokens);
        break;
      case PromptFormat::Full:
      case PromptFormat::SingleInstruction:
        detail::append_demo_side(seq, d.q_compressed, d.q_slots, d.q_tokens);
        detail::append_demo_side(seq, d.p_compressed, d.p_slots, d.p_tokens);
        break;
    }
  }
  append_tokens(seq, instruction);
  append_tokens(seq, input_tokens);
  seq.push_back(tok<T>(eos_id));
  if (static_cast<int>(seq.size()) > max_seq_len)
    throw std::length_error("assemble_epic_sequence: sequence exceeds max_seq_len");
  return seq;
}

// Conventional textual ICL layout [D_1; ...; D_k; I; X; EOS], tokens only.
template <typename T>
MixedSequence<T> assemble_textual_icl_sequence(const std::vector<DemoPair>& demos,
                                               const std::vector<int>& instruction,
                                               const std::vector<int>& input_tokens,
                                               int eos_id, int max_seq_len) {
  MixedSequence<T> seq;
  for (const auto& d : demos) {
    append_tokens(seq, d.instruction_tokens);
    append_tokens(seq, d.query_tokens);
    append_tokens(seq, d.passage_tokens);
  }
  append_tokens(seq, instruction);
  append_tokens(seq, input_tokens);
  seq.push_back(tok<T>(eos_id));
  if (static_cast<int>(seq.size()) > max_seq_len)
    throw std::length_error("assemble_textual_icl_sequence: sequence exceeds max_seq_len");
  return seq;
}

// Standalone [I; S; EOS] layout used for demonstration-side encodings. The
// demonstration encodings themselves never carry in-context prompts.
template <typename T>
MixedSequence<T> standalone_sequence(const std::vector<int>& instruction,
                                     const std::vector<int>& text_tokens, int eos_id) {
  MixedSequence<T> seq;
  append_tokens(seq, instruction);
  append_tokens(seq, text_tokens);
  seq.push_back(tok<T>(eos_id));
  return seq;
}

// Positions whose final-layer states represent a length-l side under the
// sample-n rule: the last token of each full n-chunk, with the trailing
// (possibly partial) chunk represented by the EOS state. Returned indices are
// absolute within [I; S; EOS]; the EOS index is instr_len + l.
inline std::vector<int> sample_n_positions(int instr_len, int l, int n) {
  if (n < 1) throw std::domain_error("sample_n: n must be >= 1");
  std::vector<int> pos;
  const int chunks = (l + n - 1) / n;  // ceil(l/n), >= 1 when l >= 1
  for (int i = 1; i < std::max(chunks, 1); ++i) pos.push_back(instr_len + i * n - 1);
  pos.push_back(instr_len + l);  // EOS position
  return pos;
}

// One demonstration side encoded standalone and compressed to Inject slots.
template <typename T>
std::vector<SeqElement<T>> encode_side(const ModelParams<T>& params,
                                       const std::vector<int>& instruction,
                                       const std::vector<int>& side_tokens,
                                       std::optional<int> sample_n) {
  MixedSequence<T> seq =
      standalone_sequence<T>(instruction, side_tokens, params.special.eos_id);
  HiddenStates<T> hs = run_forward(params, seq);
  std::vector<SeqElement<T>> slots;
  if (!sample_n.has_value()) {
    slots.push_back(inject(adapt_vector(params, eos_pool(hs))));
    return slots;
  }
  for (int p : sample_n_positions(static_cast<int>(instruction.size()),
                                  static_cast<int>(side_tokens.size()), *sample_n)) {
    std::vector<T> v(hs.final_states.row_ptr(p), hs.final_states.row_ptr(p) + hs.final_states.cols);
    slots.push_back(inject(adapt_vector(params, v)));
  }
  return slots;
}

// Eq.3 path at inference: each side is encoded standalone, EOS-pooled and
// passed through the adapter. The compression variant decides which sides
// become vectors and which stay textual.
template <typename T>
DemoEmbedding<T> encode_demo_pair(const DemoPair& pair, const ModelParams<T>& params,
                                  const PromptVariant& variant = {}) {
  pair.validate();
  DemoEmbedding<T> d;
  d.instruction_tokens = pair.instruction_tokens;
  d.q_tokens = pair.query_tokens;
  d.p_tokens = pair.passage_tokens;
  const Compression c = variant.compression;
  d.q_compressed = (c == Compression::Pair || c == Compression::AllIncludingInstruction ||
                    c == Compression::QueryOnly);
  d.p_compressed = (c == Compression::Pair || c == Compression::AllIncludingInstruction ||
                    c == Compression::PassageOnly);
  d.instr_compressed = (c == Compression::AllIncludingInstruction);
  if (d.q_compressed)
    d.q_slots = encode_side(params, pair.instruction_tokens, pair.query_tokens, variant.sample_n);
  // Passages never carry instructions, in demonstrations or anywhere else, so
  // the cached p-vector matches the training-time [P; EOS] encoding exactly.
  if (d.p_compressed)
    d.p_slots = encode_side(params, {}, pair.passage_tokens, variant.sample_n);
  if (d.instr_compressed) {
    MixedSequence<T> seq;
    append_tokens(seq, pair.instruction_tokens);
    seq.push_back(tok<T>(params.special.eos_id));
    HiddenStates<T> hs = run_forward(params, seq);
    d.instr_slots.push_back(inject(adapt_vector(params, eos_pool(hs))));
  }
  return d;
}

// Learnable continuous vectors for the soft-prompt baselines: 2k rows of
// d_model, seeded normal init. LearnableDemoSlots places them in the q/p
// slots of the full EPIC layout; PrefixSoftPrompt prepends them verbatim.
template <typename T>
Matrix<T> make_soft_prompt(const PromptVariant& variant, int k, int d_model,
                           std::uint64_t seed) {
  if (variant.softprompt == SoftPromptKind::Off)
    throw std::domain_error("make_soft_prompt: variant has soft prompts disabled");
  if (k <= 0) throw std::domain_error("make_soft_prompt: k must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 0.02);
  Matrix<T> m(2 * k, d_model);
  for (T& v : m.data) v = static_cast<T>(dist(rng));
  return m;
}

}  // namespace epic
