#pragma once

#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cutkit/backend.hpp"
#include "cutkit/contrast.hpp"
#include "cutkit/corpus.hpp"

namespace cutkit::objectives {

inline constexpr std::string_view kDefaultRefineTemplate =
    "### Instruction:\n{instruction}\n### Response:\n{response}\n### Judgment:\n{judgment}\n"
    "### Improved Response:\n";

struct AblationFlags {
  bool disable_l1 = false;
  bool disable_l2_align_p = false;
  bool disable_l2_align_n = false;
  bool ut_all_tokens = false;            // flag every misaligned-response token
  bool disable_dynamic_weighting = false;  // weights become the constant alpha on U
};

struct ObjectiveConfig {
  double lambda = 1.1;
  double alpha = 1.0;
  double gamma = 1.0;
  double dpo_beta = 0.1;
  AblationFlags ablations;
  // Default treats the dynamic weight as a constant during differentiation;
  // enabling this lets gradients flow through p(y_t | y_<t, x, j-) as well.
  bool weight_gradient = false;
};

enum class ObjectiveKind { CUT, FORWARD_PREDICTION, HINDSIGHT, ILF_MLE, ILF_DPO, MLE };
ObjectiveKind objective_from_string(std::string_view name);
std::string_view to_string(ObjectiveKind kind);

struct LossBreakdown {
  double total = 0.0;
  double l1_mle_part = 0.0;
  double l1_ut_part = 0.0;
  double l2_part = 0.0;
  size_t tokens_in_U = 0;
  size_t tokens_total = 0;  // response tokens that entered detection
};

// ---------------------------------------------------------------------------
// Formula layer: pure functions over log-prob rows, no model involved.

// -(1/N) [ sum_{t not in U} logp_x[t] + sum_{t in U} weights[t]*log(1-exp(logp_x[t])) ].
// Both sums score the response conditioned on x alone. p_neg conditions only
// the weights (already folded in); it is accepted for shape validation.
double cut_l1(std::span<const double> logp_x, std::span<const double> p_neg,
              std::span<const int> U, std::span<const double> weights);
struct L1Parts {
  double mle_part = 0.0;
  double ut_part = 0.0;
};
L1Parts cut_l1_parts(std::span<const double> logp_x, std::span<const int> U,
                     std::span<const double> weights);
// d cut_l1 / d logp_x.
std::vector<double> cut_l1_row_grad(std::span<const double> logp_x, std::span<const int> U,
                                    std::span<const double> weights);

// aligned: mean NLL of logp_x; misaligned: mean NLL of logp_xj.
double cut_l2(std::span<const double> logp_x, std::span<const double> logp_xj, bool aligned_flag);

double mle_from_rows(std::span<const double> row);  // mean NLL
double forward_prediction_from_rows(std::span<const double> logp_y, std::span<const double> logp_j);
double hindsight_from_rows(std::span<const double> logp_y_xj);

// -log sigma( beta * [(lp_pc - lp_rc) - (lp_pr - lp_rr)] ); log-probs are
// sequence sums over response tokens.
double dpo_loss(double lp_policy_chosen, double lp_policy_rejected, double lp_ref_chosen,
                double lp_ref_rejected, double beta);

// ---------------------------------------------------------------------------
// Model layer: render, score, and optionally backpropagate. grad_scale
// multiplies every row gradient (batch averaging); with_grad=false never
// touches model gradient state.

struct CutExampleParts {
  double l1_mle = 0.0;
  double l1_ut = 0.0;
  double l2 = 0.0;
  size_t tokens_in_U = 0;
  size_t tokens_total = 0;
};

CutExampleParts apply_cut_align_p(nn::LanguageModel& lm, const corpus::AlignmentExample& ex,
                                  const corpus::TemplateSet& templates, const ObjectiveConfig& cfg,
                                  double grad_scale, bool with_grad);
CutExampleParts apply_cut_align_n(nn::LanguageModel& lm, const corpus::AlignmentExample& align_n,
                                  const corpus::AlignmentExample& misalign,
                                  const corpus::TemplateSet& templates, const ObjectiveConfig& cfg,
                                  double grad_scale, bool with_grad);

// L_CUT over a mixed-category batch. ALIGN_N partners resolve inside the batch
// first, then through extra_lookup. MISALIGN entries are contrast material,
// never training targets. Parts are averaged over ALIGN_P + ALIGN_N count.
LossBreakdown cut_total(nn::LanguageModel& lm, std::span<const corpus::AlignmentExample> batch,
                        const corpus::TemplateSet& templates, const ObjectiveConfig& cfg,
                        const std::map<std::string, const corpus::AlignmentExample*>* extra_lookup,
                        bool with_grad);

// Baseline objective value surfaces (no gradient state touched).
double forward_prediction_loss(const nn::LanguageModel& lm, const corpus::JudgmentTriplet& t,
                               const corpus::TemplateSet& templates);
double hindsight_loss(const nn::LanguageModel& lm, const corpus::JudgmentTriplet& t,
                      const corpus::TemplateSet& templates);
double ilf_mle_loss(const nn::LanguageModel& lm, std::string_view instruction,
                    std::string_view refined, const corpus::TemplateSet& templates);

double apply_forward_prediction(nn::LanguageModel& lm, const corpus::JudgmentTriplet& t,
                                const corpus::TemplateSet& templates, double grad_scale,
                                bool with_grad);
double apply_hindsight(nn::LanguageModel& lm, const corpus::JudgmentTriplet& t,
                       const corpus::TemplateSet& templates, double grad_scale, bool with_grad);
double apply_mle(nn::LanguageModel& lm, std::string_view instruction, std::string_view response,
                 const corpus::TemplateSet& templates, double grad_scale, bool with_grad);

// Decode a refined response for (x, y, j). Deterministic under greedy config.
std::string ilf_refine(const nn::LanguageModel& lm, std::string_view instruction,
                       std::string_view response, std::string_view judgment,
                       const nn::GenerationConfig& gen,
                       std::string_view refine_template = kDefaultRefineTemplate);

// One preference pair against a frozen reference; returns the pair loss.
double apply_dpo_pair(nn::LanguageModel& policy, const nn::TransformerLM& reference,
                      std::string_view instruction, std::string_view chosen,
                      std::string_view rejected, const corpus::TemplateSet& templates, double beta,
                      double grad_scale, bool with_grad);

}  // namespace cutkit::objectives
