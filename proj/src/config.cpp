#include "epic/config.hpp"

namespace epic {

const char* to_string(PromptFormat f) {
  switch (f) {
    case PromptFormat::Full: return "full";
    case PromptFormat::NoPair: return "no_pair";
    case PromptFormat::QueryOnly: return "query_only";
    case PromptFormat::PassageOnly: return "passage_only";
    case PromptFormat::SingleInstruction: return "single_instruction";
  }
  return "?";
}

const char* to_string(Compression c) {
  switch (c) {
    case Compression::Pair: return "pair";
    case Compression::AllIncludingInstruction: return "all_including_instruction";
    case Compression::QueryOnly: return "query_only";
    case Compression::PassageOnly: return "passage_only";
  }
  return "?";
}

const char* to_string(SoftPromptKind s) {
  switch (s) {
    case SoftPromptKind::Off: return "off";
    case SoftPromptKind::LearnableDemoSlots: return "learnable_demo_slots";
    case SoftPromptKind::PrefixSoftPrompt: return "prefix_soft_prompt";
  }
  return "?";
}

const char* to_string(DemoGrad d) {
  return d == DemoGrad::Detach ? "detach" : "flow";
}

PromptFormat prompt_format_from_string(const std::string& s) {
  if (s == "full") return PromptFormat::Full;
  if (s == "no_pair") return PromptFormat::NoPair;
  if (s == "query_only") return PromptFormat::QueryOnly;
  if (s == "passage_only") return PromptFormat::PassageOnly;
  if (s == "single_instruction") return PromptFormat::SingleInstruction;
  throw ConfigError("unknown prompt format: " + s);
}

Compression compression_from_string(const std::string& s) {
  if (s == "pair") return Compression::Pair;
  if (s == "all_including_instruction") return Compression::AllIncludingInstruction;
  if (s == "query_only") return Compression::QueryOnly;
  if (s == "passage_only") return Compression::PassageOnly;
  throw ConfigError("unknown compression strategy: " + s);
}

SoftPromptKind softprompt_from_string(const std::string& s) {
  if (s == "off") return SoftPromptKind::Off;
  if (s == "learnable_demo_slots") return SoftPromptKind::LearnableDemoSlots;
  if (s == "prefix_soft_prompt") return SoftPromptKind::PrefixSoftPrompt;
  throw ConfigError("unknown softprompt kind: " + s);
}

DemoGrad demo_grad_from_string(const std::string& s) {
  if (s == "detach") return DemoGrad::Detach;
  if (s == "flow") return DemoGrad::Flow;
  throw ConfigError("unknown demo_grad mode: " + s);
}

}  // namespace epic
