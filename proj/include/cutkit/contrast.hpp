#pragma once

#include <span>
#include <vector>

#include "cutkit/backend.hpp"
#include "cutkit/corpus.hpp"

namespace cutkit::contrast {

// Probabilities below this are clamped up before any exponentiation so that
// gamma weighting never evaluates 0^0 or underflows to an exact zero.
inline constexpr double kProbFloor = 1e-30;

// Per-token contrast between the authentic-negative and fake-positive
// conditionings of one shared response. Indices cover the response region
// (terminating EOS included); judgment tokens are never candidates.
struct ContrastResult {
  std::vector<double> p_neg;
  std::vector<double> p_pos;
  std::vector<int> U;  // sorted ascending
  std::vector<double> weights;
  double lambda = 1.1;
  double alpha = 1.0;
  double gamma = 1.0;
};

// exp of each log-prob, clamped to [kProbFloor, 1].
std::vector<double> probs_from_logprobs(std::span<const double> row);

// U = { t : p_neg[t] - lambda * p_pos[t] > 0 }, strict inequality, on raw
// probabilities (not log-probabilities).
std::vector<int> detect_inappropriate(std::span<const double> p_neg,
                                      std::span<const double> p_pos, double lambda);

// weights[t] = alpha * p_neg[t]^gamma on U, 0 elsewhere.
std::vector<double> dynamic_weights(std::span<const double> p_neg, std::span<const int> U,
                                    double alpha, double gamma);

// Scores the shared response under both judgment conditionings (train
// template) and runs detection plus weighting.
ContrastResult contrast_example(const nn::LanguageModel& lm,
                                const corpus::AlignmentExample& align_n,
                                const corpus::AlignmentExample& misalign,
                                const corpus::TemplateSet& templates, double lambda, double alpha,
                                double gamma);

}  // namespace cutkit::contrast
