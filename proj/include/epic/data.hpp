#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "epic/config.hpp"

namespace epic {

enum class TaskSymmetry { AsymmetricRetrieval, SymmetricSts };

// A synthetic embedding task: one instruction, a family of latent topics,
// and surface templates controlling how queries and passages are phrased.
struct TaskSpec {
  std::string task_id;
  std::string instruction_text;
  int topic_count = 10;
  int words_per_topic = 5;
  int template_count = 4;
  TaskSymmetry symmetry = TaskSymmetry::AsymmetricRetrieval;
  int task_index = 0;

  void validate() const {
    if (topic_count < 2) throw ConfigError("TaskSpec: topic_count must be >= 2");
    if (instruction_text.empty()) throw ConfigError("TaskSpec: instruction_text is empty");
  }
};

struct Triplet {
  std::string task_id;
  std::vector<int> instruction;
  std::vector<int> query;
  std::vector<int> positive;
  std::vector<std::vector<int>> hard_negatives;
};

// Word-level tokenizer over a closed synthetic vocabulary. Ids 0..3 are
// reserved for special tokens; the vocabulary words start at id 4.
class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(std::vector<std::string> words, SpecialTokens special);

  int vocab_size() const { return static_cast<int>(id_to_word_.size()); }
  const SpecialTokens& special() const { return special_; }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;
  int id_of(const std::string& word) const;  // unk_id if absent

 private:
  std::vector<std::string> id_to_word_;
  std::unordered_map<std::string, int> word_to_id_;
  SpecialTokens special_;
};

std::vector<TaskSpec> generate_tasks(int n_tasks, std::uint64_t seed);

// Deterministic vocabulary derived from a task list: shared filler and
// entity pools plus per-task instruction and topic words.
class SynthVocab {
 public:
  explicit SynthVocab(const std::vector<TaskSpec>& tasks);

  const Tokenizer& tokenizer() const { return tok_; }
  bool is_content(int id) const;  // topic or entity token
  int entity_pool_size() const { return entity_count_; }
  std::vector<int> instruction_tokens(const TaskSpec& spec) const;
  const std::vector<int>& topic_words(int task_index, int topic) const;
  int entity_id(int index) const;
  const std::vector<std::vector<int>>& query_templates() const { return query_templates_; }
  const std::vector<std::vector<int>>& passage_templates() const { return passage_templates_; }

 private:
  Tokenizer tok_;
  int content_lo_ = 0, content_hi_ = 0;
  int entity_count_ = 0;
  std::vector<int> entity_ids_;
  std::map<std::pair<int, int>, std::vector<int>> topic_words_;
  std::map<int, std::vector<int>> instr_tokens_;
  std::vector<std::vector<int>> query_templates_;
  std::vector<std::vector<int>> passage_templates_;
};

// Seed-deterministic triplets. Query and positive share topic and entity
// tokens; the hard negative reuses the positive's surface template with a
// sibling topic and fresh entities. unique_entities makes every triplet's
// entity pair distinct (used for eval corpora so the positive is the unique
// best match by token overlap).
std::vector<Triplet> generate_triplets(const TaskSpec& spec, int n, std::uint64_t seed,
                                       const SynthVocab& vocab, bool unique_entities = false);

// Number of shared content tokens (multiset intersection over topic and
// entity words). The brute-force ranking oracle for generated tasks.
int oracle_overlap(const std::vector<int>& a, const std::vector<int>& b,
                   const SynthVocab& vocab);

// Same-task batches covering every sample once per epoch, seed-deterministic.
// A task's trailing remainder forms a short batch. Throws if batch_size
// exceeds every task's sample count.
std::vector<std::vector<int>> make_same_task_batches(const std::vector<Triplet>& dataset,
                                                     int batch_size, std::uint64_t seed);

struct JsonlError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<Triplet> read_jsonl(const std::string& path, const Tokenizer& tok);
void write_jsonl(const std::string& path, const std::vector<Triplet>& triplets,
                 const Tokenizer& tok);

}  // namespace epic
