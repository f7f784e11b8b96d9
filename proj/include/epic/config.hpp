#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace epic {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = 2048;
  int max_seq_len = 256;
  double rotary_base = 10000.0;
  std::uint64_t seed = 42;

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
      throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("head dimension must be even for rotary");
    if (vocab_size < 4) throw ConfigError("vocab_size must be at least 4");
    if (max_seq_len < 2) throw ConfigError("max_seq_len must be at least 2");
    if (rotary_base <= 0) throw ConfigError("rotary_base must be positive");
  }
};

struct SpecialTokens {
  int pad_id = 0;
  int eos_id = 1;
  int unk_id = 2;

  void validate(int vocab_size) const {
    if (eos_id == pad_id) throw ConfigError("eos_id and pad_id must differ");
    if (eos_id >= vocab_size || pad_id >= vocab_size)
      throw ConfigError("special token ids must be below vocab_size");
  }
};

enum class PromptFormat { Full, NoPair, QueryOnly, PassageOnly, SingleInstruction };
enum class Compression { Pair, AllIncludingInstruction, QueryOnly, PassageOnly };
enum class SoftPromptKind { Off, LearnableDemoSlots, PrefixSoftPrompt };

struct PromptVariant {
  PromptFormat format = PromptFormat::Full;
  Compression compression = Compression::Pair;
  std::optional<int> sample_n;  // every-n hidden-state sampling for demo sides
  SoftPromptKind softprompt = SoftPromptKind::Off;

  void validate() const {
    if (softprompt != SoftPromptKind::Off && sample_n.has_value())
      throw ConfigError("sample_n is incompatible with soft-prompt variants");
    if (sample_n.has_value() && *sample_n < 1) throw ConfigError("sample_n must be >= 1");
  }
};

enum class DemoGrad { Detach, Flow };
enum class Precision { F32, F64 };

struct TrainConfig {
  int batch_size = 8;
  int steps = 1000;
  double lr = 3e-3;
  int warmup_steps = 300;
  double temperature = 0.05;
  int k_max = 5;
  DemoGrad demo_grad = DemoGrad::Detach;
  PromptVariant variant;
  std::uint64_t seed = 42;
  Precision precision = Precision::F32;
  double weight_decay = 0.01;

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (steps < 0) throw ConfigError("steps must be non-negative");
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (temperature <= 0) throw ConfigError("temperature must be positive");
    if (k_max < 0) throw ConfigError("k_max must be non-negative");
    if (warmup_steps > steps) throw ConfigError("warmup_steps must not exceed steps");
    variant.validate();
  }
};

const char* to_string(PromptFormat f);
const char* to_string(Compression c);
const char* to_string(SoftPromptKind s);
const char* to_string(DemoGrad d);
PromptFormat prompt_format_from_string(const std::string& s);
Compression compression_from_string(const std::string& s);
SoftPromptKind softprompt_from_string(const std::string& s);
DemoGrad demo_grad_from_string(const std::string& s);

}  // namespace epic
