#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cutkit/backend.hpp"
#include "cutkit/corpus.hpp"
#include "cutkit/judge.hpp"
#include "cutkit/objectives.hpp"

namespace cutkit::loop {

// One JSONL row of the training log.
struct StepLog {
  int64_t step = 0;
  double total = 0.0;
  double l1_mle_part = 0.0;
  double l1_ut_part = 0.0;
  double l2_part = 0.0;
  size_t tokens_in_U = 0;
  size_t tokens_total = 0;
};
using StepSink = std::function<void(const StepLog&)>;

struct TrainConfig {
  objectives::ObjectiveKind objective = objectives::ObjectiveKind::CUT;
  objectives::ObjectiveConfig obj;
  nn::OptimizerConfig opt;
  int epochs = 3;
  size_t batch_size = 8;
  uint64_t seed = 1;
  corpus::TemplateSet templates;
  nn::GenerationConfig gen;  // ILF refinement and loop generation
};

// How triplets become CUT training data.
struct CorpusOptions {
  double align_p_ratio = 0.25;
  uint64_t seed = 0;
  std::string fake_judgment = std::string(corpus::kFakePositiveJudgment);
  std::string positive_keyword = std::string(corpus::kPositiveKeyword);
};

// CUT (or plain MLE) over prebuilt alignment examples; 0 epochs returns the
// model unchanged. epoch_means, when given, receives one mean loss per epoch.
nn::LanguageModel offline_align(nn::LanguageModel model,
                                std::span<const corpus::AlignmentExample> examples,
                                const TrainConfig& cfg, const StepSink& sink = {},
                                std::vector<double>* epoch_means = nullptr);

struct DpoPair {
  std::string instruction;
  std::string chosen;
  std::string rejected;
};

// Groups triplets by instruction, scores POSITIVE=1 / NEGATIVE=0, and keeps
// every strict-preference pair.
std::vector<DpoPair> pairs_from_triplets(std::span<const corpus::JudgmentTriplet> triplets);

nn::LanguageModel train_dpo_pairs(nn::LanguageModel model, std::span<const DpoPair> pairs,
                                  const TrainConfig& cfg, const StepSink& sink = {},
                                  std::vector<double>* epoch_means = nullptr);

// Any objective from raw triplets: CUT and MLE build alignment data first,
// the ILF variants refine negatives with the starting model, ILF-DPO also
// freezes it as the reference.
nn::LanguageModel train_on_triplets(nn::LanguageModel model,
                                    std::span<const corpus::JudgmentTriplet> triplets,
                                    const TrainConfig& cfg, const CorpusOptions& corpus_opts,
                                    const StepSink& sink = {},
                                    std::vector<double>* epoch_means = nullptr);

struct LoopConfig {
  int iterations = 3;
  size_t instructions_per_iteration = 1000;
  int epochs_per_iteration = 3;
  uint64_t seed = 1;
  bool warm_start = true;  // continue from the previous iteration's weights
  size_t eval_n = 100;     // 0 disables the compliance metric
  TrainConfig train;
  CorpusOptions corpus;
};

struct IterationReport {
  int iteration = 0;
  size_t instruction_count = 0;
  size_t positives = 0;
  size_t negatives = 0;
  size_t dropped = 0;
  size_t align_p = 0;   // post-downsample composition
  size_t align_n = 0;
  size_t misalign = 0;
  std::vector<double> mean_epoch_loss;
  std::map<std::string, double> eval_before;
  std::map<std::string, double> eval_after;
};

std::string report_to_json(const IterationReport& r);
IterationReport report_from_json(const std::string& text);

using JudgeFn = std::function<judge::JudgeVerdict(std::string_view instruction,
                                                  std::string_view response)>;
// n fresh instructions, none in `used`; deterministic in seed.
using InstructionSource = std::function<std::vector<std::string>(
    size_t n, uint64_t seed, const std::set<std::string>& used)>;

InstructionSource task_instruction_source(const judge::SyntheticTask& task);
// Serves pool entries in order, skipping used ones; exhaustion is an error.
InstructionSource pool_instruction_source(std::vector<std::string> pool);

struct VerdictRecord {
  std::string instruction_id;
  std::string judgment;
  corpus::Polarity polarity = corpus::Polarity::NEGATIVE;
  judge::Provenance provenance = judge::Provenance::ORACLE;
  double latency_ms = 0.0;
};
using VerdictSink = std::function<void(const VerdictRecord&)>;
// Judge failures: the item is dropped and reported here.
using DropSink = std::function<void(std::string_view instruction_id, std::string_view error)>;

// Shared judging/sampling state threaded through the iterations of one run.
struct OnlineContext {
  InstructionSource source;
  JudgeFn judge_fn;
  const judge::SyntheticTask* eval_task = nullptr;  // compliance metric when set
  std::set<std::string> used;  // includes eval instructions; grows every iteration
};

// Steps: generate greedy responses for fresh instructions, judge them (judge
// failures drop the item), build and downsample alignment data, train.
// `iteration` is 1-based and seeds this iteration's streams.
std::pair<nn::LanguageModel, IterationReport> online_iteration(
    nn::LanguageModel model, OnlineContext& ctx, const LoopConfig& cfg, int iteration,
    const StepSink& step_sink = {}, const VerdictSink& verdict_sink = {},
    const DropSink& drop_sink = {}, std::vector<corpus::JudgmentTriplet>* out_triplets = nullptr);

// Chains iterations under run_dir (checkpoint, report, logs per iteration) and
// resumes after the last complete iteration when rerun on the same directory.
// config_snapshot, when given, is written verbatim as the run's config.json.
struct RunResult {
  nn::LanguageModel model;
  std::vector<IterationReport> reports;
};
RunResult run_online(nn::LanguageModel model, OnlineContext ctx, const LoopConfig& cfg,
                     const std::filesystem::path& run_dir,
                     const std::string* config_snapshot = nullptr);

}  // namespace cutkit::loop
