#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "cutkit/model.hpp"
#include "cutkit/tokenizer.hpp"

namespace cutkit::nn {

// Tokenizer + network, always constructed together so vocabulary ids agree.
struct LanguageModel {
  Tokenizer tok;
  TransformerLM net;
};

// cfg.vocab_size is derived from the tokenizer, not taken from the caller.
LanguageModel make_language_model(ModelConfig cfg, Tokenizer tok, uint64_t seed);

// Token ids for context followed by target, with the scoring boundary at the
// context/target seam. append_eos adds EOS after the target so sequence
// termination is part of every scored span.
struct Scored {
  std::vector<int> ids;
  size_t boundary;
};
Scored encode_pair(const Tokenizer& tok, std::string_view context, std::string_view target,
                   bool append_eos);

// One log-probability per target token (EOS included when append_eos).
std::vector<double> token_logprobs(const LanguageModel& lm, std::string_view context,
                                   std::string_view target, bool append_eos = true);

// Decode a continuation of context until EOS / max_new_tokens / context limit.
std::string generate(const LanguageModel& lm, std::string_view context,
                     const GenerationConfig& gen, std::mt19937_64* rng = nullptr);

// Binary checkpoint: magic, JSON header (config, alphabet, tensor table,
// optimizer step), then raw little-endian doubles for parameters and, when
// included, Adam moments. Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const LanguageModel& lm,
                     bool include_optimizer = true);
LanguageModel load_checkpoint(const std::filesystem::path& path);

}  // namespace cutkit::nn
