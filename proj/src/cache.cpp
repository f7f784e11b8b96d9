#include "epic/cache.hpp"

#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

namespace epic {

namespace {

std::int64_t now_seconds() {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch()).count();
}

MixedSequence<float> request_sequence(const EmbedRequest& req,
                                      const ModelParams<float>& params,
                                      const CacheEntry* entry) {
  const int eos = params.special.eos_id;
  MixedSequence<float> seq;
  if (req.role == EmbedRole::Passage) {
    // Instructions and prompts are never applied to passages.
    append_tokens(seq, req.tokens);
    seq.push_back(tok<float>(eos));
    return seq;
  }
  if (!entry)
    throw CacheMissError("no cache entry for task " + req.task_id);
  switch (req.mode) {
    case EmbedMode::Plain:
      return standalone_sequence<float>(entry->instruction_tokens, req.tokens, eos);
    case EmbedMode::Epic:
      return assemble_epic_sequence(entry->demo_embeddings, entry->instruction_tokens,
                                    req.tokens, entry->variant, eos, params.cfg.max_seq_len);
    case EmbedMode::TextualIcl:
      return assemble_textual_icl_sequence<float>(entry->demo_pairs, entry->instruction_tokens,
                                                  req.tokens, eos, params.cfg.max_seq_len);
  }
  throw std::logic_error("unreachable embed mode");
}

EmbedResult run_request(const MixedSequence<float>& seq, const ModelParams<float>& params) {
  EmbedResult res;
  res.cost.sequence_length = static_cast<int>(seq.size());
  const long passes0 = forward_pass_counter();
  const auto t0 = std::chrono::steady_clock::now();
  HiddenStates<float> hs = run_forward(params, seq);
  res.cost.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  res.cost.forward_passes = forward_pass_counter() - passes0;
  res.embedding = eos_pool(hs);
  return res;
}

}  // namespace

void DemoCache::attach_model(const ModelParams<float>& params) {
  attached_fingerprint_ = fingerprint(params);
  attached_ = true;
}

const CacheEntry& DemoCache::entry(const std::string& task_id) const {
  auto it = entries_.find(task_id);
  if (it == entries_.end()) throw CacheMissError("no cache entry for task " + task_id);
  return it->second;
}

const CacheEntry& build_cache(DemoCache& cache, const std::string& task_id,
                              const std::vector<int>& instruction_tokens,
                              const std::vector<DemoPair>& demo_pairs,
                              const ModelParams<float>& params, const PromptVariant& variant) {
  CacheEntry entry;
  entry.instruction_tokens = instruction_tokens;
  entry.demo_pairs = demo_pairs;
  entry.variant = variant;
  for (const auto& pair : demo_pairs)
    entry.demo_embeddings.push_back(encode_demo_pair(pair, params, variant));
  entry.model_fingerprint = fingerprint(params);
  entry.created_at = now_seconds();
  cache.put(task_id, std::move(entry));
  if (!cache.attached()) cache.attach_model(params);
  return cache.entry(task_id);
}

EmbedResult embed(const EmbedRequest& req, const ModelParams<float>& params,
                  const DemoCache& cache) {
  const CacheEntry* entry = nullptr;
  if (req.role == EmbedRole::Query) {
    entry = &cache.entry(req.task_id);
    if (req.mode == EmbedMode::Epic) {
      const std::uint64_t fp =
          cache.attached() ? cache.attached_fingerprint() : fingerprint(params);
      if (entry->model_fingerprint != fp)
        throw StaleCacheError("cache entry for task " + req.task_id +
                              " was built with different weights; rebuild required");
    }
  }
  return run_request(request_sequence(req, params, entry), params);
}

EmbedResult embed_with_inline_demos(const EmbedRequest& req, const ModelParams<float>& params,
                                    const std::vector<int>& instruction_tokens,
                                    const std::vector<DemoPair>& demo_pairs,
                                    const PromptVariant& variant) {
  if (req.role != EmbedRole::Query || req.mode != EmbedMode::Epic)
    throw std::invalid_argument("inline demo embedding applies to epic-mode queries");
  const long passes0 = forward_pass_counter();
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<DemoEmbedding<float>> demos;
  for (const auto& pair : demo_pairs) demos.push_back(encode_demo_pair(pair, params, variant));
  MixedSequence<float> seq =
      assemble_epic_sequence(demos, instruction_tokens, req.tokens, variant,
                             params.special.eos_id, params.cfg.max_seq_len);
  EmbedResult res;
  res.cost.sequence_length = static_cast<int>(seq.size());
  HiddenStates<float> hs = run_forward(params, seq);
  res.embedding = eos_pool(hs);
  res.cost.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  res.cost.forward_passes = forward_pass_counter() - passes0;
  return res;
}

namespace {

void write_tokens(std::ostream& os, const std::vector<int>& ids) {
  os << ids.size();
  for (int id : ids) os << ' ' << id;
}

std::vector<int> read_tokens(std::istream& is) {
  size_t n;
  if (!(is >> n)) throw CheckpointError("democache manifest: bad token list");
  std::vector<int> ids(n);
  for (auto& id : ids)
    if (!(is >> id)) throw CheckpointError("democache manifest: bad token id");
  return ids;
}

void write_slots(std::ostream& os, const std::vector<SeqElement<float>>& slots,
                 std::vector<float>& blob) {
  os << slots.size();
  for (const auto& s : slots) {
    if (s.kind != SeqElement<float>::Kind::InjectConst)
      throw CheckpointError("democache: only constant slots are persistable");
    blob.insert(blob.end(), s.vec.begin(), s.vec.end());
  }
}

std::vector<SeqElement<float>> read_slots(std::istream& is, const std::vector<float>& blob,
                                          size_t& cursor, int d) {
  size_t n;
  if (!(is >> n)) throw CheckpointError("democache manifest: bad slot count");
  std::vector<SeqElement<float>> slots;
  for (size_t i = 0; i < n; ++i) {
    if (cursor + d > blob.size()) throw CheckpointError("democache blob too short");
    slots.push_back(inject(std::vector<float>(blob.begin() + cursor, blob.begin() + cursor + d)));
    cursor += d;
  }
  return slots;
}

}  // namespace

void save_cache(const std::string& prefix, const DemoCache& cache) {
  std::ostringstream man;
  std::vector<float> blob;
  man << "epic-democache v1\n";
  int dim = 0;
  for (const auto& [task_id, e] : cache.entries())
    for (const auto& de : e.demo_embeddings)
      for (const auto* slots : {&de.instr_slots, &de.q_slots, &de.p_slots})
        for (const auto& s : *slots)
          if (s.kind == SeqElement<float>::Kind::InjectConst && dim == 0)
            dim = static_cast<int>(s.vec.size());
  man << "dim " << dim << '\n';
  for (const auto& [task_id, e] : cache.entries()) {
    man << "task " << task_id << ' ' << e.model_fingerprint << ' ' << e.created_at << ' '
        << to_string(e.variant.format) << ' ' << to_string(e.variant.compression) << ' '
        << (e.variant.sample_n ? std::to_string(*e.variant.sample_n) : std::string("-")) << ' '
        << to_string(e.variant.softprompt) << '\n';
    man << "instr ";
    write_tokens(man, e.instruction_tokens);
    man << '\n';
    man << "pairs " << e.demo_pairs.size() << '\n';
    for (const auto& p : e.demo_pairs) {
      man << "pair ";
      write_tokens(man, p.instruction_tokens);
      man << ' ';
      write_tokens(man, p.query_tokens);
      man << ' ';
      write_tokens(man, p.passage_tokens);
      man << '\n';
    }
    man << "demos " << e.demo_embeddings.size() << '\n';
    for (const auto& d : e.demo_embeddings) {
      man << "demo " << d.instr_compressed << ' ' << d.q_compressed << ' ' << d.p_compressed
          << ' ';
      write_tokens(man, d.instruction_tokens);
      man << ' ';
      write_tokens(man, d.q_tokens);
      man << ' ';
      write_tokens(man, d.p_tokens);
      man << ' ';
      write_slots(man, d.instr_slots, blob);
      man << ' ';
      write_slots(man, d.q_slots, blob);
      man << ' ';
      write_slots(man, d.p_slots, blob);
      man << '\n';
    }
  }
  std::ofstream mf(prefix + ".cachemanifest", std::ios::binary);
  if (!mf) throw CheckpointError("cannot write " + prefix + ".cachemanifest");
  mf << man.str();
  std::ofstream bf(prefix + ".cacheblob", std::ios::binary);
  if (!bf) throw CheckpointError("cannot write " + prefix + ".cacheblob");
  bf.write(reinterpret_cast<const char*>(blob.data()),
           static_cast<std::streamsize>(blob.size() * sizeof(float)));
}

DemoCache load_cache(const std::string& prefix) {
  std::ifstream mf(prefix + ".cachemanifest");
  if (!mf) throw CheckpointError("cannot open " + prefix + ".cachemanifest");
  std::ifstream bf(prefix + ".cacheblob", std::ios::binary);
  if (!bf) throw CheckpointError("cannot open " + prefix + ".cacheblob");
  std::vector<char> raw((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  if (raw.size() % sizeof(float) != 0) throw CheckpointError("democache blob size not float-aligned");
  std::vector<float> blob(raw.size() / sizeof(float));
  std::memcpy(blob.data(), raw.data(), raw.size());

  std::string line;
  if (!std::getline(mf, line) || line != "epic-democache v1")
    throw CheckpointError("unrecognized democache manifest header");

  DemoCache cache;
  size_t cursor = 0;
  int d = 0;
  std::string key;
  CacheEntry entry;
  std::string current_task;
  auto flush = [&]() {
    if (!current_task.empty()) cache.put(current_task, std::move(entry));
    entry = CacheEntry();
  };
  while (mf >> key) {
    if (key == "task") {
      flush();
      std::string fmt, comp, sn, sp;
      mf >> current_task >> entry.model_fingerprint >> entry.created_at >> fmt >> comp >> sn >> sp;
      entry.variant.format = prompt_format_from_string(fmt);
      entry.variant.compression = compression_from_string(comp);
      entry.variant.sample_n =
          sn == "-" ? std::optional<int>{} : std::optional<int>{std::stoi(sn)};
      entry.variant.softprompt = softprompt_from_string(sp);
    } else if (key == "instr") {
      entry.instruction_tokens = read_tokens(mf);
    } else if (key == "pairs") {
      size_t n;
      mf >> n;
      (void)n;
    } else if (key == "pair") {
      DemoPair p;
      p.instruction_tokens = read_tokens(mf);
      p.query_tokens = read_tokens(mf);
      p.passage_tokens = read_tokens(mf);
      entry.demo_pairs.push_back(std::move(p));
    } else if (key == "demos") {
      size_t n;
      mf >> n;
      (void)n;
    } else if (key == "demo") {
      DemoEmbedding<float> de;
      mf >> de.instr_compressed >> de.q_compressed >> de.p_compressed;
      de.instruction_tokens = read_tokens(mf);
      de.q_tokens = read_tokens(mf);
      de.p_tokens = read_tokens(mf);
      de.instr_slots = read_slots(mf, blob, cursor, d);
      de.q_slots = read_slots(mf, blob, cursor, d);
      de.p_slots = read_slots(mf, blob, cursor, d);
      entry.demo_embeddings.push_back(std::move(de));
    } else if (key == "dim") {
      mf >> d;
    } else {
      throw CheckpointError("democache manifest: unknown key " + key);
    }
  }
  flush();
  return cache;
}

std::string to_string(EmbedMode m) {
  switch (m) {
    case EmbedMode::Plain: return "plain";
    case EmbedMode::Epic: return "epic";
    case EmbedMode::TextualIcl: return "textual_icl";
  }
  return "?";
}

EmbedMode embed_mode_from_string(const std::string& s) {
  if (s == "plain") return EmbedMode::Plain;
  if (s == "epic") return EmbedMode::Epic;
  if (s == "textual_icl") return EmbedMode::TextualIcl;
  throw ConfigError("unknown embed mode: " + s);
}

}  // namespace epic
