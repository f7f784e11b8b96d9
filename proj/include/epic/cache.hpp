#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "epic/checkpoint.hpp"
#include "epic/model.hpp"
#include "epic/prompt.hpp"

namespace epic {

struct CacheMissError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct StaleCacheError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CacheEntry {
  std::vector<int> instruction_tokens;
  std::vector<DemoPair> demo_pairs;                 // textual form (for ICL mode)
  std::vector<DemoEmbedding<float>> demo_embeddings;
  PromptVariant variant;
  std::uint64_t model_fingerprint = 0;
  std::int64_t created_at = 0;
};

// Per-task store of precomputed demonstration embeddings. Entries are tied
// to the exact weights via the checkpoint fingerprint.
class DemoCache {
 public:
  bool has(const std::string& task_id) const { return entries_.count(task_id) > 0; }

  // Memoized weight fingerprint used to validate entries at embed time.
  void attach_model(const ModelParams<float>& params);
  std::uint64_t attached_fingerprint() const { return attached_fingerprint_; }
  bool attached() const { return attached_; }
  const CacheEntry& entry(const std::string& task_id) const;
  void put(const std::string& task_id, CacheEntry entry) { entries_[task_id] = std::move(entry); }
  const std::map<std::string, CacheEntry>& entries() const { return entries_; }
  std::map<std::string, CacheEntry>& entries() { return entries_; }

 private:
  std::map<std::string, CacheEntry> entries_;
  std::uint64_t attached_fingerprint_ = 0;
  bool attached_ = false;
};

// Encodes the demonstration pairs once and stores them under task_id.
// Rebuilding with identical inputs yields bit-identical vectors.
const CacheEntry& build_cache(DemoCache& cache, const std::string& task_id,
                              const std::vector<int>& instruction_tokens,
                              const std::vector<DemoPair>& demo_pairs,
                              const ModelParams<float>& params,
                              const PromptVariant& variant = {});

enum class EmbedMode { Plain, Epic, TextualIcl };
enum class EmbedRole { Query, Passage };

struct EmbedRequest {
  std::string task_id;
  std::vector<int> tokens;
  EmbedMode mode = EmbedMode::Plain;
  EmbedRole role = EmbedRole::Query;
};

struct CostRecord {
  int sequence_length = 0;
  long forward_passes = 0;
  double wall_ms = 0;
};

struct EmbedResult {
  std::vector<float> embedding;
  CostRecord cost;
};

// Embeds one text. Queries carry the task instruction (and, in epic or
// textual modes, the in-context prompt); passages always use the bare
// [X; EOS] layout. Epic mode requires a cache entry whose fingerprint
// matches the given weights.
EmbedResult embed(const EmbedRequest& req, const ModelParams<float>& params,
                  const DemoCache& cache);

// Same output as epic-mode embed(), but re-encodes the demonstrations for
// this one query instead of reading them from the cache. Exists to verify
// cache transparency and to count the saved forward passes.
EmbedResult embed_with_inline_demos(const EmbedRequest& req, const ModelParams<float>& params,
                                    const std::vector<int>& instruction_tokens,
                                    const std::vector<DemoPair>& demo_pairs,
                                    const PromptVariant& variant = {});

// On-disk persistence next to the checkpoint: <prefix>.cachemanifest (text)
// plus <prefix>.cacheblob (flat little-endian float32).
void save_cache(const std::string& prefix, const DemoCache& cache);
DemoCache load_cache(const std::string& prefix);

std::string to_string(EmbedMode m);
EmbedMode embed_mode_from_string(const std::string& s);

}  // namespace epic
