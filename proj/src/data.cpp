#include "epic/data.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"

namespace epic {

namespace {

const char* kSyllables[] = {"ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du",
                            "ka", "ke", "ki", "ko", "ku", "ma", "me", "mi", "mo", "mu"};

// Collision-free pseudo-word: prefix letter + base-20 syllable encoding.
std::string make_word(char prefix, int idx) {
  std::string w(1, prefix);
  std::string body;
  int v = idx;
  do {
    body = std::string(kSyllables[v % 20]) + body;
    v /= 20;
  } while (v > 0);
  if (idx < 20) body = std::string(kSyllables[0]) + body;  // keep >= 2 syllables
  return w + body;
}

constexpr int kSharedInstrWords = 4;
constexpr int kTemplateCount = 4;
constexpr int kTemplateWords = 3;
constexpr int kEntityCount = 64;

std::uint64_t task_stream_seed(std::uint64_t seed, int task_index) {
  return seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(task_index + 1);
}

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> words, SpecialTokens special)
    : special_(special) {
  id_to_word_ = {"<pad>", "<eos>", "<unk>", "<rsv>"};
  id_to_word_.insert(id_to_word_.end(), words.begin(), words.end());
  for (size_t i = 0; i < id_to_word_.size(); ++i) {
    if (!word_to_id_.emplace(id_to_word_[i], static_cast<int>(i)).second)
      throw ConfigError("Tokenizer: duplicate word '" + id_to_word_[i] + "'");
  }
  special_.validate(vocab_size());
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    auto it = word_to_id_.find(w);
    ids.push_back(it == word_to_id_.end() ? special_.unk_id : it->second);
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab_size())
      throw std::domain_error("decode: token id out of range");
    if (i) out += ' ';
    out += id_to_word_[ids[i]];
  }
  return out;
}

int Tokenizer::id_of(const std::string& word) const {
  auto it = word_to_id_.find(word);
  return it == word_to_id_.end() ? special_.unk_id : it->second;
}

std::vector<TaskSpec> generate_tasks(int n_tasks, std::uint64_t seed) {
  if (n_tasks < 1) throw ConfigError("generate_tasks: n_tasks must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<TaskSpec> tasks(n_tasks);
  for (int i = 0; i < n_tasks; ++i) {
    TaskSpec& t = tasks[i];
    t.task_index = i;
    t.task_id = "task" + std::to_string(i);
    // Every fourth task is a symmetric STS-style task.
    t.symmetry = (i % 4 == 3) ? TaskSymmetry::SymmetricSts : TaskSymmetry::AsymmetricRetrieval;
    t.topic_count = 10;
    t.words_per_topic = 5;
    t.template_count = kTemplateCount;
  }
  // Instruction text needs the vocabulary; fill it from a vocab over these specs.
  SynthVocab vocab(tasks);
  for (auto& t : tasks)
    t.instruction_text = vocab.tokenizer().decode(vocab.instruction_tokens(t));
  (void)rng;
  return tasks;
}

SynthVocab::SynthVocab(const std::vector<TaskSpec>& tasks) {
  std::vector<std::string> words;
  std::vector<int> qtpl_ids, ptpl_ids, instr_ids, domain_ids;
  auto add = [&](const std::string& w) {
    words.push_back(w);
    return static_cast<int>(words.size()) - 1 + 4;  // 4 reserved ids
  };
  for (int i = 0; i < kTemplateCount * kTemplateWords; ++i) qtpl_ids.push_back(add(make_word('q', i)));
  for (int i = 0; i < kTemplateCount * kTemplateWords; ++i) ptpl_ids.push_back(add(make_word('p', i)));
  for (int i = 0; i < kSharedInstrWords; ++i) instr_ids.push_back(add(make_word('i', i)));
  for (size_t t = 0; t < tasks.size(); ++t) domain_ids.push_back(add(make_word('d', static_cast<int>(t))));

  content_lo_ = static_cast<int>(words.size()) + 4;
  int word_idx = 0;
  for (const auto& task : tasks) {
    for (int topic = 0; topic < task.topic_count; ++topic) {
      std::vector<int> ids;
      for (int j = 0; j < task.words_per_topic; ++j) ids.push_back(add(make_word('t', word_idx++)));
      topic_words_[{task.task_index, topic}] = std::move(ids);
    }
  }
  entity_count_ = kEntityCount;
  for (int i = 0; i < kEntityCount; ++i) entity_ids_.push_back(add(make_word('e', i)));
  content_hi_ = static_cast<int>(words.size()) + 4;

  tok_ = Tokenizer(std::move(words), SpecialTokens{});

  for (int t = 0; t < kTemplateCount; ++t) {
    query_templates_.push_back({qtpl_ids[t * 3], qtpl_ids[t * 3 + 1], qtpl_ids[t * 3 + 2]});
    passage_templates_.push_back({ptpl_ids[t * 3], ptpl_ids[t * 3 + 1], ptpl_ids[t * 3 + 2]});
  }
  for (const auto& task : tasks) {
    // [i0 i1 d_task i2 i3]: distinct per task via the domain word.
    instr_tokens_[task.task_index] = {instr_ids[0], instr_ids[1], domain_ids[task.task_index],
                                      instr_ids[2], instr_ids[3]};
  }
}

bool SynthVocab::is_content(int id) const { return id >= content_lo_ && id < content_hi_; }

std::vector<int> SynthVocab::instruction_tokens(const TaskSpec& spec) const {
  auto it = instr_tokens_.find(spec.task_index);
  if (it == instr_tokens_.end()) throw ConfigError("SynthVocab: unknown task");
  return it->second;
}

const std::vector<int>& SynthVocab::topic_words(int task_index, int topic) const {
  auto it = topic_words_.find({task_index, topic});
  if (it == topic_words_.end()) throw ConfigError("SynthVocab: unknown topic");
  return it->second;
}

int SynthVocab::entity_id(int index) const { return entity_ids_.at(index); }

std::vector<Triplet> generate_triplets(const TaskSpec& spec, int n, std::uint64_t seed,
                                       const SynthVocab& vocab, bool unique_entities) {
  spec.validate();
  if (n < 1) throw ConfigError("generate_triplets: n must be >= 1");
  std::mt19937_64 rng(task_stream_seed(seed, spec.task_index));
  auto uniform = [&](int lo, int hi) {
    return static_cast<int>(lo + rng() % static_cast<std::uint64_t>(hi - lo + 1));
  };

  // Ordered distinct entity pairs, shuffled once; used when every triplet
  // needs a globally unique pair.
  std::vector<std::pair<int, int>> pairs;
  if (unique_entities) {
    for (int i = 0; i < vocab.entity_pool_size(); ++i)
      for (int j = 0; j < vocab.entity_pool_size(); ++j)
        if (i != j) pairs.emplace_back(i, j);
    std::shuffle(pairs.begin(), pairs.end(), rng);
    // Positives take pairs [0, n), hard negatives [n, 2n): no two candidates
    // in an eval corpus share an entity pair, so overlap ranks the positive
    // strictly first.
    if (2 * n > static_cast<int>(pairs.size()))
      throw ConfigError("generate_triplets: not enough unique entity pairs");
  }

  const std::vector<int> instr = vocab.instruction_tokens(spec);
  const auto& qtpl = vocab.query_templates();
  const auto& ptpl = vocab.passage_templates();
  std::vector<Triplet> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int topic = uniform(0, spec.topic_count - 1);
    const auto& tw = vocab.topic_words(spec.task_index, topic);
    const int a = uniform(0, spec.words_per_topic - 1);
    int b = uniform(0, spec.words_per_topic - 2);
    if (b >= a) ++b;
    int e1, e2;
    if (unique_entities) {
      e1 = pairs[i].first;
      e2 = pairs[i].second;
    } else {
      e1 = uniform(0, vocab.entity_pool_size() - 1);
      e2 = uniform(0, vocab.entity_pool_size() - 2);
      if (e2 >= e1) ++e2;
    }
    const auto& qt = qtpl[uniform(0, spec.template_count - 1)];
    const bool sts = spec.symmetry == TaskSymmetry::SymmetricSts;
    // STS positives are paraphrases: a different query-style template with
    // the identical content-token multiset.
    const auto& pt = sts ? qtpl[uniform(0, spec.template_count - 1)]
                         : ptpl[uniform(0, spec.template_count - 1)];

    auto sentence = [&](const std::vector<int>& tpl, int w1, int w2, int x1, int x2) {
      return std::vector<int>{tpl[0], tpl[1], w1, w2, tpl[2], vocab.entity_id(x1),
                              vocab.entity_id(x2)};
    };
    Triplet t;
    t.task_id = spec.task_id;
    t.instruction = instr;
    t.query = sentence(qt, tw[a], tw[b], e1, e2);
    t.positive = sentence(pt, tw[a], tw[b], e1, e2);

    int sibling = uniform(0, spec.topic_count - 2);
    if (sibling >= topic) ++sibling;
    const auto& sw = vocab.topic_words(spec.task_index, sibling);
    const int sa = uniform(0, spec.words_per_topic - 1);
    int sb = uniform(0, spec.words_per_topic - 2);
    if (sb >= sa) ++sb;
    int ne1, ne2;
    if (unique_entities) {
      ne1 = pairs[n + i].first;
      ne2 = pairs[n + i].second;
    } else {
      ne1 = uniform(0, vocab.entity_pool_size() - 1);
      if (ne1 == e1) ne1 = (ne1 + 1) % vocab.entity_pool_size();
      ne2 = uniform(0, vocab.entity_pool_size() - 1);
      if (ne2 == e2 || ne2 == ne1) ne2 = (ne2 + 2) % vocab.entity_pool_size();
    }
    t.hard_negatives.push_back(sentence(pt, sw[sa], sw[sb], ne1, ne2));
    out.push_back(std::move(t));
  }
  return out;
}

int oracle_overlap(const std::vector<int>& a, const std::vector<int>& b,
                   const SynthVocab& vocab) {
  std::map<int, int> counts;
  for (int id : a)
    if (vocab.is_content(id)) ++counts[id];
  int overlap = 0;
  for (int id : b) {
    if (!vocab.is_content(id)) continue;
    auto it = counts.find(id);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  return overlap;
}

std::vector<std::vector<int>> make_same_task_batches(const std::vector<Triplet>& dataset,
                                                     int batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::map<std::string, std::vector<int>> by_task;
  for (size_t i = 0; i < dataset.size(); ++i)
    by_task[dataset[i].task_id].push_back(static_cast<int>(i));
  for (const auto& [task, idx] : by_task)
    if (batch_size > static_cast<int>(idx.size()))
      throw ConfigError("batch_size exceeds sample count of task " + task);

  std::mt19937_64 rng(seed);
  std::vector<std::vector<int>> batches;
  for (auto& [task, idx] : by_task) {
    std::shuffle(idx.begin(), idx.end(), rng);
    for (size_t off = 0; off < idx.size(); off += batch_size) {
      const size_t end = std::min(off + batch_size, idx.size());
      batches.emplace_back(idx.begin() + off, idx.begin() + end);
    }
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

std::vector<Triplet> read_jsonl(const std::string& path, const Tokenizer& tok) {
  std::ifstream in(path);
  if (!in) throw JsonlError("cannot open " + path);
  std::vector<Triplet> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw JsonlError(path + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    auto field = [&](const char* name) -> const nlohmann::json& {
      if (!j.contains(name))
        throw JsonlError(path + ":" + std::to_string(lineno) + ": missing field '" + name + "'");
      return j.at(name);
    };
    Triplet t;
    t.task_id = field("task_id").get<std::string>();
    t.instruction = tok.encode(field("instruction").get<std::string>());
    t.query = tok.encode(field("query").get<std::string>());
    t.positive = tok.encode(field("positive").get<std::string>());
    for (const auto& neg : field("negatives"))
      t.hard_negatives.push_back(tok.encode(neg.get<std::string>()));
    out.push_back(std::move(t));
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<Triplet>& triplets,
                 const Tokenizer& tok) {
  std::ofstream out(path);
  if (!out) throw JsonlError("cannot open " + path + " for writing");
  for (const auto& t : triplets) {
    nlohmann::json j;
    j["task_id"] = t.task_id;
    j["instruction"] = tok.decode(t.instruction);
    j["query"] = tok.decode(t.query);
    j["positive"] = tok.decode(t.positive);
    nlohmann::json negs = nlohmann::json::array();
    for (const auto& n : t.hard_negatives) negs.push_back(tok.decode(n));
    j["negatives"] = negs;
    out << j.dump() << '\n';
  }
  if (!out) throw JsonlError("write failed: " + path);
}

}  // namespace epic
