#include "epic/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace epic {

namespace {

std::vector<char> serialize_blob(const ModelParams<float>& params) {
  std::vector<char> blob;
  params.for_each_tensor([&](const std::string&, const Matrix<float>& m) {
    const size_t bytes = m.size() * sizeof(float);
    const size_t off = blob.size();
    blob.resize(off + bytes);
    std::memcpy(blob.data() + off, m.data.data(), bytes);
  });
  return blob;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void save_checkpoint(const std::string& prefix, const ModelParams<float>& params) {
  const ModelConfig& c = params.cfg;
  std::ostringstream man;
  man << "epic-checkpoint v1\n";
  man << "d_model " << c.d_model << "\n";
  man << "n_layers " << c.n_layers << "\n";
  man << "n_heads " << c.n_heads << "\n";
  man << "d_ff " << c.d_ff << "\n";
  man << "vocab_size " << c.vocab_size << "\n";
  man << "max_seq_len " << c.max_seq_len << "\n";
  man << "rotary_base " << format_double(c.rotary_base) << "\n";
  man << "seed " << c.seed << "\n";
  man << "eos_id " << params.special.eos_id << "\n";
  man << "pad_id " << params.special.pad_id << "\n";
  man << "unk_id " << params.special.unk_id << "\n";
  size_t offset = 0;
  params.for_each_tensor([&](const std::string& name, const Matrix<float>& m) {
    man << "tensor " << name << " " << m.rows << " " << m.cols << " f32 " << offset << "\n";
    offset += m.size() * sizeof(float);
  });

  std::ofstream mf(prefix + ".manifest", std::ios::binary);
  if (!mf) throw CheckpointError("cannot write " + prefix + ".manifest");
  mf << man.str();
  mf.close();
  if (!mf) throw CheckpointError("write failed: " + prefix + ".manifest");

  const std::vector<char> blob = serialize_blob(params);
  std::ofstream bf(prefix + ".blob", std::ios::binary);
  if (!bf) throw CheckpointError("cannot write " + prefix + ".blob");
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  bf.close();
  if (!bf) throw CheckpointError("write failed: " + prefix + ".blob");
}

ModelParams<float> load_checkpoint(const std::string& prefix) {
  std::ifstream mf(prefix + ".manifest");
  if (!mf) throw CheckpointError("cannot open " + prefix + ".manifest");
  std::string line;
  if (!std::getline(mf, line) || line != "epic-checkpoint v1")
    throw CheckpointError("unrecognized manifest header in " + prefix + ".manifest");

  ModelConfig cfg;
  SpecialTokens special;
  struct TensorEntry {
    int rows, cols;
    size_t offset;
  };
  std::map<std::string, TensorEntry> tensors;
  std::vector<std::string> tensor_order;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "d_model") ss >> cfg.d_model;
    else if (key == "n_layers") ss >> cfg.n_layers;
    else if (key == "n_heads") ss >> cfg.n_heads;
    else if (key == "d_ff") ss >> cfg.d_ff;
    else if (key == "vocab_size") ss >> cfg.vocab_size;
    else if (key == "max_seq_len") ss >> cfg.max_seq_len;
    else if (key == "rotary_base") ss >> cfg.rotary_base;
    else if (key == "seed") ss >> cfg.seed;
    else if (key == "eos_id") ss >> special.eos_id;
    else if (key == "pad_id") ss >> special.pad_id;
    else if (key == "unk_id") ss >> special.unk_id;
    else if (key == "tensor") {
      std::string name, dtype;
      TensorEntry e;
      ss >> name >> e.rows >> e.cols >> dtype >> e.offset;
      if (!ss || dtype != "f32")
        throw CheckpointError("bad tensor line in manifest: " + line);
      tensors[name] = e;
      tensor_order.push_back(name);
    } else {
      throw CheckpointError("unknown manifest key: " + key);
    }
  }

  std::ifstream bf(prefix + ".blob", std::ios::binary);
  if (!bf) throw CheckpointError("cannot open " + prefix + ".blob");
  std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  ModelParams<float> p = ModelParams<float>::init(cfg, special);
  if (tensors.count("soft_prompt")) {
    const auto& e = tensors["soft_prompt"];
    p.soft_prompt = Matrix<float>(e.rows, e.cols);
  }
  size_t seen = 0;
  p.for_each_tensor([&](const std::string& name, Matrix<float>& m) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("manifest missing tensor " + name);
    const TensorEntry& e = it->second;
    if (e.rows != m.rows || e.cols != m.cols)
      throw CheckpointError("shape mismatch for tensor " + name);
    const size_t bytes = m.size() * sizeof(float);
    if (e.offset + bytes > blob.size()) throw CheckpointError("blob too short for " + name);
    std::memcpy(m.data.data(), blob.data() + e.offset, bytes);
    ++seen;
  });
  if (seen != tensor_order.size())
    throw CheckpointError("manifest lists tensors unknown to this model");
  return p;
}

std::uint64_t fingerprint(const ModelParams<float>& params) {
  const std::vector<char> blob = serialize_blob(params);
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : blob) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace epic
