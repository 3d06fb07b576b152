#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cutkit/backend.hpp"
#include "cutkit/corpus.hpp"

namespace cutkit::judge {

enum class Provenance { ORACLE, EXTERNAL, TRAINED };
std::string_view to_string(Provenance p);
Provenance provenance_from_string(std::string_view s);

struct JudgeVerdict {
  std::string judgment;
  corpus::Polarity polarity = corpus::Polarity::NEGATIVE;
  Provenance provenance = Provenance::ORACLE;
};

inline constexpr std::string_view kOraclePositiveJudgment =
    "Perfect. The response is satisfactory.";
inline constexpr std::string_view kTrainedJudgeFallback = "The response could not be judged.";

// Annotation prompt sent to an external chat model. The keyword instruction
// mirrors the polarity rule so replies classify cleanly.
inline constexpr std::string_view kAnnotationPrompt =
    "You are reviewing a model response. Write a concise judgment of the response to the "
    "instruction below: name the biggest flaw and how to fix it, or, if the response is "
    "flawless, begin your judgment with \"Perfect.\"\n\n"
    "### Instruction:\n{instruction}\n\n### Response:\n{response}\n\n### Judgment:\n";

// A deterministic desk-scale task: seeded instruction generator, exact
// canonical answer, localized critique, and a corruption that manufactures a
// detectably wrong response for corpus building.
struct SyntheticTask {
  std::string name;
  std::function<std::string(std::mt19937_64&)> gen_instruction;
  // Throws DataError when the instruction was not produced by this task.
  std::function<std::string(std::string_view instruction)> canonical;
  // Empty iff the response is correct; otherwise names the first violation.
  std::function<std::string(std::string_view instruction, std::string_view response)> critique;
  std::function<std::string(std::string_view instruction, std::mt19937_64&)> corrupt;
};

const std::vector<SyntheticTask>& builtin_tasks();
const SyntheticTask& task_by_name(std::string_view name);

// Pure: identical inputs yield byte-identical verdicts.
JudgeVerdict oracle_judge(const SyntheticTask& task, std::string_view instruction,
                          std::string_view response);

// n distinct instructions, none of which appear in `exclude`; deterministic in
// (task, seed). Throws RuntimeError when the task's space is exhausted.
std::vector<std::string> sample_instructions(const SyntheticTask& task, uint64_t seed, size_t n,
                                             const std::set<std::string>* exclude = nullptr);

// Oracle-judged triplets over fresh instructions: each response is either the
// canonical answer or a task corruption (probability wrong_fraction).
std::vector<corpus::JudgmentTriplet> synth_triplets(const SyntheticTask& task, uint64_t seed,
                                                    size_t n, double wrong_fraction,
                                                    const std::set<std::string>* exclude = nullptr);

struct ExternalJudgeConfig {
  std::string endpoint;  // full URL; a bare host gets /v1/chat/completions
  std::string model;
  std::string api_key;
  int max_concurrency = 4;
  int max_retries = 3;
  int backoff_initial_ms = 200;  // doubles per retry
  int timeout_s = 30;
  std::string prompt_template = std::string(kAnnotationPrompt);
};

// Reads JUDGE_ENDPOINT, JUDGE_MODEL, JUDGE_API_KEY, JUDGE_MAX_CONCURRENCY.
// Missing endpoint/model/key is a configuration error.
ExternalJudgeConfig external_config_from_env();

// Chat-completion client with retry/backoff and a shared in-flight cap.
class ExternalJudge {
 public:
  explicit ExternalJudge(ExternalJudgeConfig cfg);
  ~ExternalJudge();
  ExternalJudge(ExternalJudge&&) noexcept;
  ExternalJudge& operator=(ExternalJudge&&) noexcept;

  // Throws the last typed error once retries are exhausted; never returns a
  // verdict on failure.
  JudgeVerdict judge(std::string_view instruction, std::string_view response);

  // One raw chat completion under the same retry/backoff/in-flight rules.
  std::string complete(std::string_view prompt);

  // One slot per (instruction, response) item; failures become nullopt with
  // the error text recorded at the same index of `errors` when given.
  std::vector<std::optional<JudgeVerdict>> judge_many(
      std::span<const std::pair<std::string, std::string>> items,
      std::vector<std::string>* errors = nullptr);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct JudgeTrainConfig {
  int epochs = 2;
  nn::OptimizerConfig opt;
  uint64_t seed = 7;
};

// MLE over the judgment region of the judge template, [instruction, response]
// as conditioning. step_losses receives one loss per optimizer step.
nn::LanguageModel train_judge(nn::LanguageModel base,
                              std::span<const corpus::JudgmentTriplet> triplets,
                              const corpus::TemplateSet& templates, const JudgeTrainConfig& cfg,
                              std::vector<double>* step_losses = nullptr);

// Greedy decode of the judgment region; blank output maps to NEGATIVE with the
// fallback text.
JudgeVerdict trained_judge(const nn::LanguageModel& judge_model, std::string_view instruction,
                           std::string_view response, const corpus::TemplateSet& templates,
                           const nn::GenerationConfig& gen = {});

}  // namespace cutkit::judge
