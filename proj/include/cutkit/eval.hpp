#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cutkit/backend.hpp"
#include "cutkit/corpus.hpp"
#include "cutkit/judge.hpp"

namespace cutkit::eval {

struct RougeScores {
  double rouge1 = 0.0;
  double rouge2 = 0.0;
  double rougeL = 0.0;
  double rougeLsum = 0.0;
};

// Tokenization is pinned: lowercase, split on non-alphanumeric bytes, no
// stemming. Lsum uses union-LCS over newline-split sentences. Multi-reference
// takes the max per metric. Empty candidate or reference list scores 0 and
// sets *warning instead of erroring.
RougeScores rouge(std::string_view candidate, std::span<const std::string> references,
                  std::string* warning = nullptr);

// Token sequence under the pinned recipe; exposed for oracle tests.
std::vector<std::string> rouge_tokens(std::string_view text);

struct ComplianceRecord {
  std::string instruction;
  std::string response;
  bool pass = false;
};

// Fraction of n greedy responses passing the task's exact checker.
// Deterministic in seed; instructions in `exclude` are never sampled.
double compliance_rate(const nn::LanguageModel& lm, const judge::SyntheticTask& task, size_t n,
                       uint64_t seed, const corpus::TemplateSet& templates,
                       const nn::GenerationConfig& gen = {},
                       std::vector<ComplianceRecord>* records = nullptr,
                       const std::set<std::string>* exclude = nullptr);

// +1 first response wins, -1 second wins, 0 tie.
using PairwiseJudge =
    std::function<int(std::string_view instruction, std::string_view first,
                      std::string_view second)>;

// Checker-based comparison: a passing response beats a failing one.
PairwiseJudge oracle_pairwise(const judge::SyntheticTask& task);

// Comparison prompt sent to an external judge; the reply's first token names
// the winner (A or B) and anything else counts as a tie.
inline constexpr std::string_view kComparisonPrompt =
    "Compare the two responses to the instruction and name the better one. Reply with the "
    "single letter A or B (or TIE if they are equally good).\n\n"
    "### Instruction:\n{instruction}\n\n### Response A:\n{first}\n\n### Response B:\n{second}\n\n"
    "### Verdict:\n";
PairwiseJudge external_pairwise(judge::ExternalJudge& client,
                                std::string_view prompt_template = kComparisonPrompt);

struct WinRecord {
  std::string instruction;
  std::string response_a;
  std::string response_b;
  double score_a = 0.5;  // both-order average for this instruction
};

// Fraction of instructions where model a is preferred; ties 0.5; each pair is
// judged in both presentation orders and averaged.
double win_rate(const nn::LanguageModel& a, const nn::LanguageModel& b,
                std::span<const std::string> instructions, const PairwiseJudge& judge,
                const corpus::TemplateSet& templates, const nn::GenerationConfig& gen = {},
                std::vector<WinRecord>* records = nullptr);

// Score plus the per-example records it was computed from; records are
// serialized JSON objects, one per example.
struct EvalReport {
  std::string metric;
  double score = 0.0;
  size_t sample_count = 0;
  std::vector<std::string> record_lines;
};

void save_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport load_report(const std::filesystem::path& path);

}  // namespace cutkit::eval
