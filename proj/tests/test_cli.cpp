#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kCli = EPIC_CLI_PATH;

int run(const std::string& args) {
  const int status = std::system((kCli + " " + args + " >/dev/null 2>&1").c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

fs::path work_root() {
  static fs::path root = [] {
    fs::path p = fs::temp_directory_path() / "epic_cli_test";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return root;
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// Tiny everything: 2 layers, 2 tasks, 2 steps, so each command finishes fast.
std::string tiny_config() {
  static std::string path = [] {
    const fs::path p = work_root() / "config.json";
    std::ofstream f(p);
    f << R"({
      "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32,
                "vocab_size": 512, "max_seq_len": 512, "seed": 7},
      "train": {"batch_size": 4, "steps": 2, "lr": 0.003, "k_max": 2, "seed": 7},
      "data": {"n_tasks": 2, "triplets_per_task": 16, "seed": 42},
      "eval": {"n_queries": 4, "corpus_triplets": 8, "n_demos": 2, "k_list": [1, 5]}
    })";
    return p.string();
  }();
  return path;
}

std::string data_dir() {
  static std::string dir = [] {
    const fs::path d = work_root() / "data";
    REQUIRE(run("gen-data --config " + tiny_config() + " --out " + d.string()) == 0);
    return d.string();
  }();
  return dir;
}

std::string trained_out() {
  static std::string dir = [] {
    const fs::path d = work_root() / "train_a";
    REQUIRE(run("train --config " + tiny_config() + " --data " + data_dir() + " --out " +
                d.string()) == 0);
    return d.string();
  }();
  return dir;
}

}  // namespace

TEST_CASE("gen-data is seed-deterministic and writes metadata") {
  const std::string d1 = data_dir();
  const fs::path d2 = work_root() / "data2";
  REQUIRE(run("gen-data --config " + tiny_config() + " --out " + d2.string()) == 0);

  json meta = json::parse(read_file(fs::path(d1) / "tasks.json"));
  CHECK(meta["n_tasks"] == 2);
  CHECK(meta["seed"] == 42);
  REQUIRE(meta["task_ids"].size() == 2);
  for (const auto& tid : meta["task_ids"]) {
    const std::string name = std::string(tid) + ".train.jsonl";
    CHECK(read_file(fs::path(d1) / name) == read_file(d2 / name));
    const std::string ename = std::string(tid) + ".eval.jsonl";
    CHECK(read_file(fs::path(d1) / ename) == read_file(d2 / ename));
  }

  // A different seed changes the data.
  const fs::path d3 = work_root() / "data3";
  REQUIRE(run("gen-data --config " + tiny_config() + " --seed 43 --out " + d3.string()) == 0);
  const std::string first = std::string(meta["task_ids"][0]) + ".train.jsonl";
  CHECK(read_file(fs::path(d1) / first) != read_file(d3 / first));

  // The resolved config is echoed and the lock is released.
  CHECK(fs::exists(fs::path(d1) / "config_resolved.json"));
  CHECK_FALSE(fs::exists(fs::path(d1) / ".lock"));
  json rc = json::parse(read_file(fs::path(d3) / "config_resolved.json"));
  CHECK(rc["data"]["seed"] == 43);  // flag overrode the file
}

TEST_CASE("train twice yields byte-identical checkpoints") {
  const std::string a = trained_out();
  const fs::path b = work_root() / "train_b";
  REQUIRE(run("train --config " + tiny_config() + " --data " + data_dir() + " --out " +
              b.string()) == 0);

  CHECK(read_file(fs::path(a) / "model.blob") == read_file(b / "model.blob"));
  CHECK(read_file(fs::path(a) / "model.manifest") == read_file(b / "model.manifest"));

  const std::string log = read_file(fs::path(a) / "train_log.csv");
  CHECK(log.rfind("step,loss,lr,k_histogram,tokens_this_step,wall_ms", 0) == 0);
  json state = json::parse(read_file(fs::path(a) / "train_state.json"));
  CHECK(state["steps_done"] == 2);
}

TEST_CASE("train --steps 0 writes the initialization") {
  const fs::path out = work_root() / "train_zero";
  REQUIRE(run("train --config " + tiny_config() + " --data " + data_dir() + " --steps 0 --out " +
              out.string()) == 0);
  CHECK(fs::exists(out / "model.blob"));
  CHECK(fs::exists(out / "model.manifest"));
}

TEST_CASE("eval and compare write their reports") {
  const std::string ckpt = trained_out() + "/model";
  const fs::path out = work_root() / "eval_out";
  REQUIRE(run("eval --config " + tiny_config() + " --checkpoint " + ckpt + " --mode epic --out " +
              out.string()) == 0);
  const std::string csv = read_file(out / "eval_epic.csv");
  CHECK(csv.rfind("task,recall@1,recall@5,ndcg@10,mrr", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 tasks

  const fs::path cout_dir = work_root() / "compare_out";
  REQUIRE(run("compare --config " + tiny_config() + " --checkpoint " + ckpt + " --out " +
              cout_dir.string()) == 0);
  const std::string cmp = read_file(cout_dir / "compare.csv");
  CHECK(cmp.find("plain,") != std::string::npos);
  CHECK(cmp.find("epic,") != std::string::npos);
  CHECK(cmp.find("textual_icl,") != std::string::npos);
  const std::string cost = read_file(cout_dir / "cost.csv");
  CHECK(cost.rfind("mode,seq_len,fwd_passes,wall_ms", 0) == 0);
}

TEST_CASE("sink --uniform reports the 1/n self-test") {
  const std::string ckpt = trained_out() + "/model";
  const fs::path out = work_root() / "sink_out";
  REQUIRE(run("sink --config " + tiny_config() + " --checkpoint " + ckpt +
              " --uniform --probes 2 --out " + out.string()) == 0);
  const std::string csv = read_file(out / "sink.csv");
  CHECK(csv.rfind("layer,condition,eos_to_first", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 layers
  CHECK(csv.find("uniform") != std::string::npos);

  const fs::path out2 = work_root() / "sink_real";
  REQUIRE(run("sink --config " + tiny_config() + " --checkpoint " + ckpt + " --probes 2 --out " +
              out2.string()) == 0);
  const std::string real = read_file(out2 / "sink.csv");
  CHECK(real.find("plain") != std::string::npos);
  CHECK(real.find("epic_icd") != std::string::npos);
}

TEST_CASE("embed emits one JSONL record per input line") {
  const std::string ckpt = trained_out() + "/model";
  const fs::path input = work_root() / "texts.txt";
  {
    std::ofstream f(input);
    f << "find the matching passage\n\nanother query text\n";  // blank line skipped
  }
  const fs::path out = work_root() / "embed_out";
  REQUIRE(run("embed --config " + tiny_config() + " --checkpoint " + ckpt + " --mode epic" +
              " --input " + input.string() + " --out " + out.string()) == 0);
  std::ifstream f(out / "embeddings.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(f, line)) {
    json rec = json::parse(line);
    CHECK(rec["embedding"].size() == 16);
    CHECK(rec["mode"] == "epic");
    CHECK(rec.contains("text"));
    CHECK(rec.contains("task_id"));
    ++n;
  }
  CHECK(n == 2);
}

TEST_CASE("usage and config errors exit with code 2") {
  CHECK(run("--help") == 0);
  CHECK(run("") == 2);                    // missing subcommand
  CHECK(run("no-such-command") == 2);
  CHECK(run("train --no-such-flag") == 2);

  // Unknown config key.
  const fs::path bad = work_root() / "bad.json";
  {
    std::ofstream f(bad);
    f << R"({"model": {"d_mdoel": 16}})";
  }
  CHECK(run("gen-data --config " + bad.string() + " --out " +
            (work_root() / "bad_out").string()) == 2);

  // Malformed JSON.
  const fs::path garbled = work_root() / "garbled.json";
  {
    std::ofstream f(garbled);
    f << "{not json";
  }
  CHECK(run("gen-data --config " + garbled.string() + " --out " +
            (work_root() / "bad_out2").string()) == 2);

  // Missing checkpoint and missing data directory.
  CHECK(run("eval --config " + tiny_config() + " --checkpoint /nonexistent/model --out " +
            (work_root() / "bad_out3").string()) == 2);
  CHECK(run("train --config " + tiny_config() + " --data /nonexistent --out " +
            (work_root() / "bad_out4").string()) == 2);

  // Conflicting variant: sample_n with a soft prompt.
  CHECK(run("eval --config " + tiny_config() + " --checkpoint " + trained_out() +
            "/model --variant sample_n=2 --variant softprompt=prefix_soft_prompt --out " +
            (work_root() / "bad_out5").string()) == 2);
}

TEST_CASE("a locked output directory refuses a second run") {
  const fs::path out = work_root() / "locked_out";
  fs::create_directories(out);
  { std::ofstream f(out / ".lock"); f << "pid 1\n"; }
  CHECK(run("gen-data --config " + tiny_config() + " --out " + out.string()) == 2);
  fs::remove(out / ".lock");
  CHECK(run("gen-data --config " + tiny_config() + " --out " + out.string()) == 0);
}

TEST_CASE("EPIC_THREADS is validated") {
  const fs::path out = work_root() / "threads_out";
  const int bad = std::system(("EPIC_THREADS=0 " + kCli + " gen-data --config " + tiny_config() +
                               " --out " + out.string() + " >/dev/null 2>&1")
                                  .c_str());
  CHECK(WEXITSTATUS(bad) == 2);
  const int ok = std::system(("EPIC_THREADS=2 " + kCli + " gen-data --config " + tiny_config() +
                              " --out " + out.string() + "2 >/dev/null 2>&1")
                                 .c_str());
  CHECK(WEXITSTATUS(ok) == 0);
}
