// Command-line front end: data generation, training, evaluation, embedding,
// mode comparison and attention-sink analysis. Every command is driven by a
// JSON run config plus overriding flags, and echoes the resolved config into
// the output directory.

#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "epic/cache.hpp"
#include "epic/checkpoint.hpp"
#include "epic/data.hpp"
#include "epic/eval.hpp"
#include "epic/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct DataConfig {
  int n_tasks = 8;
  int triplets_per_task = 2000;
  std::uint64_t seed = 42;
  std::string dir;  // where gen-data wrote (or will write) the splits
};

struct EvalConfig {
  int n_queries = 200;
  int corpus_triplets = 500;  // corpus = positives + hard negatives = 2x this
  int n_demos = 5;
  std::vector<int> k_list = {1, 5};
  std::uint64_t seed = 42;
};

struct RunConfig {
  epic::ModelConfig model;
  epic::TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  std::string out = "out";
  bool warmup_explicit = false;
};

void reject_unknown(const json& j, const std::string& section,
                    const std::set<std::string>& allowed) {
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw epic::ConfigError("unknown config key '" + key + "' in " + section);
}

void load_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw epic::ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw epic::ConfigError("config parse error in " + path + ": " + e.what());
  }
  reject_unknown(j, "top level", {"model", "train", "variant", "data", "eval", "out"});
  if (j.contains("model")) {
    const json& m = j["model"];
    reject_unknown(m, "model", {"d_model", "n_layers", "n_heads", "d_ff", "vocab_size",
                                "max_seq_len", "rotary_base", "seed"});
    if (m.contains("d_model")) rc.model.d_model = m["d_model"];
    if (m.contains("n_layers")) rc.model.n_layers = m["n_layers"];
    if (m.contains("n_heads")) rc.model.n_heads = m["n_heads"];
    if (m.contains("d_ff")) rc.model.d_ff = m["d_ff"];
    if (m.contains("vocab_size")) rc.model.vocab_size = m["vocab_size"];
    if (m.contains("max_seq_len")) rc.model.max_seq_len = m["max_seq_len"];
    if (m.contains("rotary_base")) rc.model.rotary_base = m["rotary_base"];
    if (m.contains("seed")) rc.model.seed = m["seed"];
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown(t, "train", {"batch_size", "steps", "lr", "warmup_steps", "temperature",
                                "k_max", "demo_grad", "seed", "weight_decay", "precision"});
    if (t.contains("batch_size")) rc.train.batch_size = t["batch_size"];
    if (t.contains("steps")) rc.train.steps = t["steps"];
    if (t.contains("lr")) rc.train.lr = t["lr"];
    if (t.contains("warmup_steps")) {
      rc.train.warmup_steps = t["warmup_steps"];
      rc.warmup_explicit = true;
    }
    if (t.contains("temperature")) rc.train.temperature = t["temperature"];
    if (t.contains("k_max")) rc.train.k_max = t["k_max"];
    if (t.contains("demo_grad"))
      rc.train.demo_grad = epic::demo_grad_from_string(t["demo_grad"]);
    if (t.contains("seed")) rc.train.seed = t["seed"];
    if (t.contains("weight_decay")) rc.train.weight_decay = t["weight_decay"];
    if (t.contains("precision")) {
      const std::string p = t["precision"];
      if (p == "f32") rc.train.precision = epic::Precision::F32;
      else if (p == "f64") rc.train.precision = epic::Precision::F64;
      else throw epic::ConfigError("unknown precision: " + p);
    }
  }
  if (j.contains("variant")) {
    const json& v = j["variant"];
    reject_unknown(v, "variant", {"format", "compression", "sample_n", "softprompt"});
    if (v.contains("format"))
      rc.train.variant.format = epic::prompt_format_from_string(v["format"]);
    if (v.contains("compression"))
      rc.train.variant.compression = epic::compression_from_string(v["compression"]);
    if (v.contains("sample_n")) rc.train.variant.sample_n = int(v["sample_n"]);
    if (v.contains("softprompt"))
      rc.train.variant.softprompt = epic::softprompt_from_string(v["softprompt"]);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    reject_unknown(d, "data", {"n_tasks", "triplets_per_task", "seed", "dir"});
    if (d.contains("n_tasks")) rc.data.n_tasks = d["n_tasks"];
    if (d.contains("triplets_per_task")) rc.data.triplets_per_task = d["triplets_per_task"];
    if (d.contains("seed")) rc.data.seed = d["seed"];
    if (d.contains("dir")) rc.data.dir = d["dir"];
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    reject_unknown(e, "eval", {"n_queries", "corpus_triplets", "n_demos", "k_list", "seed"});
    if (e.contains("n_queries")) rc.eval.n_queries = e["n_queries"];
    if (e.contains("corpus_triplets")) rc.eval.corpus_triplets = e["corpus_triplets"];
    if (e.contains("n_demos")) rc.eval.n_demos = e["n_demos"];
    if (e.contains("k_list")) rc.eval.k_list = e["k_list"].get<std::vector<int>>();
    if (e.contains("seed")) rc.eval.seed = e["seed"];
  }
  if (j.contains("out")) rc.out = j["out"];
}

void apply_variant_kv(RunConfig& rc, const std::vector<std::string>& kvs) {
  for (const std::string& kv : kvs) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw epic::ConfigError("--variant expects KEY=VAL, got: " + kv);
    const std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
    if (key == "format") rc.train.variant.format = epic::prompt_format_from_string(val);
    else if (key == "compression")
      rc.train.variant.compression = epic::compression_from_string(val);
    else if (key == "sample_n") rc.train.variant.sample_n = std::stoi(val);
    else if (key == "softprompt")
      rc.train.variant.softprompt = epic::softprompt_from_string(val);
    else throw epic::ConfigError("unknown variant key: " + key);
  }
}

json resolved_json(const RunConfig& rc) {
  json j;
  j["model"] = {{"d_model", rc.model.d_model},       {"n_layers", rc.model.n_layers},
                {"n_heads", rc.model.n_heads},       {"d_ff", rc.model.d_ff},
                {"vocab_size", rc.model.vocab_size}, {"max_seq_len", rc.model.max_seq_len},
                {"rotary_base", rc.model.rotary_base}, {"seed", rc.model.seed}};
  j["train"] = {{"batch_size", rc.train.batch_size},
                {"steps", rc.train.steps},
                {"lr", rc.train.lr},
                {"warmup_steps", rc.train.warmup_steps},
                {"temperature", rc.train.temperature},
                {"k_max", rc.train.k_max},
                {"demo_grad", epic::to_string(rc.train.demo_grad)},
                {"seed", rc.train.seed},
                {"weight_decay", rc.train.weight_decay},
                {"precision", rc.train.precision == epic::Precision::F64 ? "f64" : "f32"}};
  j["variant"] = {{"format", epic::to_string(rc.train.variant.format)},
                  {"compression", epic::to_string(rc.train.variant.compression)},
                  {"softprompt", epic::to_string(rc.train.variant.softprompt)}};
  if (rc.train.variant.sample_n) j["variant"]["sample_n"] = *rc.train.variant.sample_n;
  j["data"] = {{"n_tasks", rc.data.n_tasks},
               {"triplets_per_task", rc.data.triplets_per_task},
               {"seed", rc.data.seed},
               {"dir", rc.data.dir}};
  j["eval"] = {{"n_queries", rc.eval.n_queries},
               {"corpus_triplets", rc.eval.corpus_triplets},
               {"n_demos", rc.eval.n_demos},
               {"k_list", rc.eval.k_list},
               {"seed", rc.eval.seed}};
  j["out"] = rc.out;
  return j;
}

// Exclusive lock on the output directory; removed on scope exit.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    std::ifstream probe(path_);
    if (probe.good())
      throw epic::ConfigError("output directory is locked by another run: " + path_.string());
    std::ofstream f(path_);
    if (!f) throw epic::ConfigError("cannot create lock file: " + path_.string());
    f << "pid " << ::getpid() << "\n";
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

void echo_config(const RunConfig& rc) {
  std::ofstream f(fs::path(rc.out) / "config_resolved.json");
  if (!f) throw epic::ConfigError("cannot write resolved config under " + rc.out);
  f << resolved_json(rc).dump(2) << "\n";
}

// Caps internal parallelism; the implementation is serial, so anything >= 1
// is accepted and only validated.
int epic_threads() {
  const char* env = std::getenv("EPIC_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  if (n < 1) throw epic::ConfigError("EPIC_THREADS must be a positive integer");
  return n;
}

std::uint64_t eval_stream_seed(const RunConfig& rc, int task_index) {
  return rc.eval.seed + 0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(task_index + 1);
}

// ---- shared loading helpers ------------------------------------------------

struct DataBundle {
  std::vector<epic::TaskSpec> tasks;
  std::unique_ptr<epic::SynthVocab> vocab;
};

DataBundle make_bundle(const RunConfig& rc) {
  DataBundle b;
  b.tasks = epic::generate_tasks(rc.data.n_tasks, rc.data.seed);
  b.vocab = std::make_unique<epic::SynthVocab>(b.tasks);
  if (b.vocab->tokenizer().vocab_size() > rc.model.vocab_size)
    throw epic::ConfigError("vocab_size " + std::to_string(rc.model.vocab_size) +
                            " is too small for the generated vocabulary (" +
                            std::to_string(b.vocab->tokenizer().vocab_size()) + " words)");
  return b;
}

// Reads data.dir/tasks.json and checks it matches the resolved data config.
void check_data_dir(const RunConfig& rc) {
  if (rc.data.dir.empty()) throw epic::ConfigError("data.dir is required (run gen-data first)");
  const fs::path meta = fs::path(rc.data.dir) / "tasks.json";
  std::ifstream in(meta);
  if (!in) throw epic::ConfigError("missing " + meta.string() + " (run gen-data first)");
  json j;
  in >> j;
  if (int(j.at("n_tasks")) != rc.data.n_tasks || std::uint64_t(j.at("seed")) != rc.data.seed)
    throw epic::ConfigError("data directory was generated with a different n_tasks/seed");
}

std::vector<epic::Triplet> load_train_split(const RunConfig& rc, const DataBundle& b) {
  check_data_dir(rc);
  std::vector<epic::Triplet> all;
  for (const auto& spec : b.tasks) {
    const fs::path p = fs::path(rc.data.dir) / (spec.task_id + ".train.jsonl");
    auto part = epic::read_jsonl(p.string(), b.vocab->tokenizer());
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

std::string checkpoint_prefix(const RunConfig& rc, const std::string& flag) {
  if (!flag.empty()) return flag;
  return (fs::path(rc.out) / "model").string();
}

epic::ModelParams<float> load_model(const std::string& prefix) {
  if (!fs::exists(prefix + ".manifest"))
    throw epic::ConfigError("missing checkpoint: " + prefix + ".manifest");
  return epic::load_checkpoint(prefix);
}

// ---- commands --------------------------------------------------------------

int cmd_gen_data(RunConfig rc) {
  if (rc.data.dir.empty()) rc.data.dir = rc.out;
  DirLock lock(rc.out);
  DataBundle b = make_bundle(rc);
  fs::create_directories(rc.data.dir);
  echo_config(rc);

  json meta;
  meta["n_tasks"] = rc.data.n_tasks;
  meta["seed"] = rc.data.seed;
  meta["triplets_per_task"] = rc.data.triplets_per_task;
  long train_count = 0, eval_count = 0;
  for (const auto& spec : b.tasks) {
    meta["task_ids"].push_back(spec.task_id);
    const auto train_split = epic::generate_triplets(
        spec, rc.data.triplets_per_task, rc.data.seed, *b.vocab);
    const auto eval_split = epic::generate_triplets(
        spec, rc.eval.corpus_triplets, eval_stream_seed(rc, spec.task_index), *b.vocab,
        /*unique_entities=*/true);
    const fs::path base = rc.data.dir;
    epic::write_jsonl((base / (spec.task_id + ".train.jsonl")).string(), train_split,
                      b.vocab->tokenizer());
    epic::write_jsonl((base / (spec.task_id + ".eval.jsonl")).string(), eval_split,
                      b.vocab->tokenizer());
    train_count += static_cast<long>(train_split.size());
    eval_count += static_cast<long>(eval_split.size());
    std::cout << spec.task_id << ": " << train_split.size() << " train / "
              << eval_split.size() << " eval triplets\n";
  }
  std::ofstream mf(fs::path(rc.data.dir) / "tasks.json");
  if (!mf) throw epic::ConfigError("cannot write tasks.json under " + rc.data.dir);
  mf << meta.dump(2) << "\n";
  std::cout << "total: " << train_count << " train / " << eval_count << " eval triplets across "
            << rc.data.n_tasks << " tasks\n";
  return kExitOk;
}

void write_train_state(const RunConfig& rc, int steps_done) {
  std::ofstream f(fs::path(rc.out) / "train_state.json");
  f << json{{"steps_done", steps_done}}.dump(2) << "\n";
}

int cmd_train(RunConfig rc, bool resume) {
  if (!rc.warmup_explicit) rc.train.warmup_steps = rc.train.steps * 3 / 10;
  rc.model.validate();
  rc.train.validate();
  DirLock lock(rc.out);
  DataBundle b = make_bundle(rc);
  echo_config(rc);
  const std::string prefix = (fs::path(rc.out) / "model").string();

  epic::ModelParams<float> params;
  epic::TrainConfig tc = rc.train;
  if (resume && fs::exists(prefix + ".manifest")) {
    params = epic::load_checkpoint(prefix);
    int done = 0;
    std::ifstream sf(fs::path(rc.out) / "train_state.json");
    if (sf) {
      json j;
      sf >> j;
      done = j.value("steps_done", 0);
    }
    if (done >= tc.steps) {
      std::cout << "checkpoint already trained for " << done << " steps; nothing to do\n";
      return kExitOk;
    }
    // Continue for the remaining steps with a fresh schedule; optimizer
    // moments restart.
    tc.steps -= done;
    tc.warmup_steps = std::min(tc.warmup_steps, tc.steps);
    tc.seed = tc.seed + static_cast<std::uint64_t>(done);
    std::cout << "resuming from " << done << " steps; " << tc.steps << " remaining\n";
  } else {
    params = epic::ModelParams<float>::init(rc.model, epic::SpecialTokens{});
  }

  const auto dataset = load_train_split(rc, b);
  std::ofstream csv(fs::path(rc.out) / "train_log.csv");
  if (!csv) throw epic::ConfigError("cannot write train_log.csv under " + rc.out);

  try {
    if (tc.precision == epic::Precision::F64) {
      auto p64 = params.cast<double>();
      epic::train(p64, dataset, tc, &csv);
      params = p64.cast<float>();
    } else {
      epic::train(params, dataset, tc, &csv);
    }
  } catch (const epic::NumericalError& e) {
    epic::save_checkpoint(prefix + "_nan_snapshot", params);
    std::cerr << "numerical failure: " << e.what() << " (snapshot written to " << prefix
              << "_nan_snapshot.*)\n";
    return kExitNumerical;
  }
  epic::save_checkpoint(prefix, params);
  write_train_state(rc, rc.train.steps);
  std::cout << "trained " << tc.steps << " steps; checkpoint at " << prefix << ".{manifest,blob}"
            << " fingerprint " << epic::fingerprint(params) << "\n";
  return kExitOk;
}

std::vector<epic::TaskEvalSet> build_eval_sets(const RunConfig& rc, const DataBundle& b) {
  std::vector<epic::TaskEvalSet> sets;
  for (const auto& spec : b.tasks)
    sets.push_back(epic::build_eval_set(spec, *b.vocab, eval_stream_seed(rc, spec.task_index),
                                        rc.eval.corpus_triplets, rc.eval.n_queries,
                                        rc.eval.n_demos));
  return sets;
}

void write_mode_csv(std::ostream& os, const std::vector<epic::ModeReport>& reports,
                    const std::vector<int>& k_list) {
  os << "mode";
  for (int k : k_list) os << ",recall@" << k;
  os << ",ndcg@10,mrr,mean_seq_len,total_fwd_passes,mean_wall_ms\n";
  for (const auto& r : reports) {
    os << r.mode;
    for (int k : k_list) os << ',' << r.metrics.recall_at.at(k);
    os << ',' << r.metrics.ndcg10 << ',' << r.metrics.mrr << ',' << r.mean_seq_len << ','
       << r.total_forward_passes << ',' << r.mean_wall_ms << '\n';
  }
}

int cmd_eval(RunConfig rc, const std::string& ckpt_flag, const std::string& mode_str) {
  DirLock lock(rc.out);
  DataBundle b = make_bundle(rc);
  echo_config(rc);
  auto params = load_model(checkpoint_prefix(rc, ckpt_flag));
  const epic::EmbedMode mode = epic::embed_mode_from_string(mode_str);
  const auto sets = build_eval_sets(rc, b);
  epic::DemoCache cache;
  for (const auto& s : sets)
    epic::build_cache(cache, s.spec.task_id, s.instruction, s.demo_pairs, params);

  std::ofstream csv(fs::path(rc.out) / ("eval_" + mode_str + ".csv"));
  csv << "task";
  for (int k : rc.eval.k_list) csv << ",recall@" << k;
  csv << ",ndcg@10,mrr\n";
  double mean_r1 = 0;
  for (const auto& s : sets) {
    auto rep = epic::evaluate_mode(params, cache, mode, s, rc.eval.k_list);
    csv << s.spec.task_id;
    for (int k : rc.eval.k_list) csv << ',' << rep.metrics.recall_at.at(k);
    csv << ',' << rep.metrics.ndcg10 << ',' << rep.metrics.mrr << '\n';
    mean_r1 += rep.metrics.recall_at.at(rc.eval.k_list.front());
    std::cout << s.spec.task_id << " recall@" << rc.eval.k_list.front() << " = "
              << rep.metrics.recall_at.at(rc.eval.k_list.front()) << "\n";
  }
  mean_r1 /= static_cast<double>(sets.size());
  std::cout << "mean recall@" << rc.eval.k_list.front() << " (" << mode_str
            << ") = " << mean_r1 << "\n";
  return kExitOk;
}

int cmd_compare(RunConfig rc, const std::string& ckpt_flag) {
  DirLock lock(rc.out);
  DataBundle b = make_bundle(rc);
  echo_config(rc);
  auto params = load_model(checkpoint_prefix(rc, ckpt_flag));
  const auto sets = build_eval_sets(rc, b);
  const auto reports = epic::compare_modes(
      params, sets, {epic::EmbedMode::Plain, epic::EmbedMode::Epic, epic::EmbedMode::TextualIcl});

  std::ofstream csv(fs::path(rc.out) / "compare.csv");
  write_mode_csv(csv, reports, {1, 5});
  std::ofstream cost(fs::path(rc.out) / "cost.csv");
  cost << "mode,seq_len,fwd_passes,wall_ms\n";
  for (const auto& r : reports)
    cost << r.mode << ',' << r.mean_seq_len << ',' << r.total_forward_passes << ','
         << r.mean_wall_ms << '\n';
  std::ostringstream summary;
  write_mode_csv(summary, reports, {1, 5});
  std::cout << summary.str();
  return kExitOk;
}

int cmd_sink(RunConfig rc, const std::string& ckpt_flag, bool uniform, int n_probes) {
  DirLock lock(rc.out);
  DataBundle b = make_bundle(rc);
  echo_config(rc);
  auto params = load_model(checkpoint_prefix(rc, ckpt_flag));
  const auto& spec = b.tasks.front();
  const auto set = epic::build_eval_set(spec, *b.vocab, eval_stream_seed(rc, spec.task_index),
                                        std::max(n_probes, rc.eval.n_demos), n_probes,
                                        rc.eval.n_demos);
  std::vector<int> layers(params.cfg.n_layers);
  for (int i = 0; i < params.cfg.n_layers; ++i) layers[i] = i;

  // Plain probes [I; X; EOS] vs in-context probes with the cached
  // demonstrations injected ahead of the query.
  std::vector<epic::MixedSequence<float>> plain_probes, epic_probes;
  epic::DemoCache cache;
  const auto& entry =
      epic::build_cache(cache, spec.task_id, set.instruction, set.demo_pairs, params);
  for (int i = 0; i < n_probes; ++i) {
    plain_probes.push_back(
        epic::standalone_sequence<float>(set.instruction, set.queries[i], params.special.eos_id));
    epic_probes.push_back(epic::assemble_epic_sequence(
        entry.demo_embeddings, set.instruction, set.queries[i], entry.variant,
        params.special.eos_id, params.cfg.max_seq_len));
  }

  std::ofstream csv(fs::path(rc.out) / "sink.csv");
  csv << "layer,condition,eos_to_first\n";
  if (uniform) {
    const auto prof = epic::sink_profile(params, plain_probes, layers, /*force_uniform=*/true);
    for (size_t i = 0; i < layers.size(); ++i) {
      csv << layers[i] << ",uniform," << prof.proportion[i] << '\n';
      std::cout << "layer " << layers[i] << " uniform " << prof.proportion[i] << "\n";
    }
    return kExitOk;
  }
  const auto base = epic::sink_profile(params, plain_probes, layers);
  const auto icd = epic::sink_profile(params, epic_probes, layers);
  for (size_t i = 0; i < layers.size(); ++i) {
    csv << layers[i] << ",plain," << base.proportion[i] << '\n';
    csv << layers[i] << ",epic_icd," << icd.proportion[i] << '\n';
    std::cout << "layer " << layers[i] << ": plain " << base.proportion[i] << " vs epic_icd "
              << icd.proportion[i] << "\n";
  }
  return kExitOk;
}

int cmd_embed(RunConfig rc, const std::string& ckpt_flag, const std::string& mode_str,
              std::string task_id, const std::string& input_path) {
  DirLock lock(rc.out);
  DataBundle b = make_bundle(rc);
  echo_config(rc);
  auto params = load_model(checkpoint_prefix(rc, ckpt_flag));
  if (task_id.empty()) task_id = b.tasks.front().task_id;
  const epic::TaskSpec* spec = nullptr;
  for (const auto& t : b.tasks)
    if (t.task_id == task_id) spec = &t;
  if (!spec) throw epic::ConfigError("unknown task_id: " + task_id);

  const auto set = epic::build_eval_set(*spec, *b.vocab, eval_stream_seed(rc, spec->task_index),
                                        rc.eval.n_demos, 0, rc.eval.n_demos);
  epic::DemoCache cache;
  epic::build_cache(cache, task_id, set.instruction, set.demo_pairs, params);

  std::ifstream file_in;
  if (!input_path.empty() && input_path != "-") {
    file_in.open(input_path);
    if (!file_in) throw epic::ConfigError("cannot open input file: " + input_path);
  }
  std::istream& in = file_in.is_open() ? file_in : std::cin;
  const epic::EmbedMode mode = epic::embed_mode_from_string(mode_str);

  std::ofstream out_file(fs::path(rc.out) / "embeddings.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    epic::EmbedRequest req{task_id, b.vocab->tokenizer().encode(line), mode,
                           epic::EmbedRole::Query};
    auto res = epic::embed(req, params, cache);
    json rec{{"text", line}, {"task_id", task_id}, {"mode", mode_str},
             {"embedding", res.embedding}};
    const std::string dumped = rec.dump();
    std::cout << dumped << "\n";
    out_file << dumped << "\n";
    ++n;
  }
  std::cerr << "embedded " << n << " texts (d=" << params.cfg.d_model << ")\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EPIC: embedding-injected in-context prompts for a tiny decoder-only embedder"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may appear after the subcommand

  std::string config_path, out_flag, mode_str = "epic", ckpt_flag, variant_task, input_path;
  std::vector<std::string> variant_kvs;
  std::optional<std::uint64_t> seed_flag;
  std::optional<int> kmax_flag, steps_flag;
  bool resume = false, uniform = false;
  int n_probes = 8;

  app.add_option("--config", config_path, "JSON run config");
  app.add_option("--seed", seed_flag, "override the command's primary seed");
  app.add_option("--out", out_flag, "output directory");
  app.add_option("--k-max", kmax_flag, "maximum in-batch demonstrations");
  app.add_option("--variant", variant_kvs, "prompt variant KEY=VAL (repeatable)");

  auto* gen = app.add_subcommand("gen-data", "write train/eval JSONL splits");
  auto* train = app.add_subcommand("train", "contrastive training run");
  train->add_option("--steps", steps_flag, "override train.steps");
  train->add_flag("--resume", resume, "continue from the checkpoint in --out");
  auto* eval = app.add_subcommand("eval", "retrieval evaluation of a checkpoint");
  auto* compare = app.add_subcommand("compare", "plain vs epic vs textual_icl comparison");
  auto* sink = app.add_subcommand("sink", "EOS-to-first-token attention profile");
  sink->add_flag("--uniform", uniform, "force uniform attention (self-test: reports 1/n)");
  sink->add_option("--probes", n_probes, "number of probe queries");
  auto* embd = app.add_subcommand("embed", "embed texts from stdin or --input as JSONL");
  embd->add_option("--input", input_path, "input file, one text per line ('-' = stdin)");
  embd->add_option("--task", variant_task, "task id providing instruction and demos");

  std::string data_dir;
  for (auto* sc : {gen, train, eval, compare, sink, embd})
    sc->add_option("--data", data_dir, "data directory from gen-data");
  for (auto* sc : {eval, compare, sink, embd})
    sc->add_option("--checkpoint", ckpt_flag, "checkpoint prefix (default <out>/model)");
  for (auto* sc : {eval, embd})
    sc->add_option("--mode", mode_str, "plain | epic | textual_icl");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    epic_threads();
    RunConfig rc;
    if (!config_path.empty()) load_config_file(rc, config_path);
    if (!out_flag.empty()) rc.out = out_flag;
    if (!data_dir.empty()) rc.data.dir = data_dir;
    if (kmax_flag) rc.train.k_max = *kmax_flag;
    if (steps_flag) rc.train.steps = *steps_flag;
    apply_variant_kv(rc, variant_kvs);
    if (seed_flag) {
      if (gen->parsed()) rc.data.seed = *seed_flag;
      else if (train->parsed()) rc.train.seed = rc.model.seed = *seed_flag;
      else rc.eval.seed = *seed_flag;
    }
    rc.train.variant.validate();

    if (gen->parsed()) return cmd_gen_data(rc);
    if (train->parsed()) return cmd_train(rc, resume);
    if (eval->parsed()) return cmd_eval(rc, ckpt_flag, mode_str);
    if (compare->parsed()) return cmd_compare(rc, ckpt_flag);
    if (sink->parsed()) return cmd_sink(rc, ckpt_flag, uniform, n_probes);
    if (embd->parsed()) return cmd_embed(rc, ckpt_flag, mode_str, variant_task, input_path);
    return kExitUsage;
  } catch (const epic::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
