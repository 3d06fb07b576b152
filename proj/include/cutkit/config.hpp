#pragma once

#include <filesystem>
#include <string>

#include "cutkit/loop.hpp"

namespace cutkit::config {

// Every tunable in one place. The JSON schema mirrors the nesting here;
// unknown keys are rejected so a typo cannot silently fall back to a default.
struct RunConfig {
  nn::ModelConfig model;  // vocab_size always comes from the tokenizer
  uint64_t model_seed = 1;

  objectives::ObjectiveKind objective = objectives::ObjectiveKind::CUT;
  objectives::ObjectiveConfig obj;
  nn::OptimizerConfig opt;

  int epochs = 3;
  size_t batch_size = 8;
  uint64_t seed = 1;

  loop::CorpusOptions corpus;

  int iterations = 3;
  size_t instructions_per_iteration = 100;
  int epochs_per_iteration = 3;
  bool warm_start = true;
  size_t eval_n = 50;

  nn::GenerationConfig gen;

  std::string templates_path;  // empty = built-in templates
};

// Range checks across all fields. Throws UsageError on the first violation.
void validate(const RunConfig& cfg);

// Parses a (possibly partial) JSON document over the defaults; rejects
// unknown keys at every level and validates the result.
RunConfig config_from_json(const std::string& text);
// Serializes every field, so the output is the effective configuration.
std::string config_to_json(const RunConfig& cfg);

RunConfig load_config_file(const std::filesystem::path& path);
void save_config_file(const std::filesystem::path& path, const RunConfig& cfg);

// templates_path when set (JSON object {train, inference, judge}), otherwise
// the built-in defaults. Always validated.
corpus::TemplateSet templates_for(const RunConfig& cfg);

// Assembled views for the loop module.
loop::TrainConfig train_config(const RunConfig& cfg);
loop::LoopConfig loop_config(const RunConfig& cfg);

}  // namespace cutkit::config
