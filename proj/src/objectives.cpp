#include "cutkit/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cutkit/error.hpp"

namespace cutkit::objectives {

namespace {

// Cap inside log(1 - p): keeps the unlikelihood term finite when the model is
// near-certain of a flagged token. The row gradient uses the same capped
// probability, so saturated tokens keep a (clipped) push instead of the capped
// loss's literal zero slope.
constexpr double kMaxProb = 1.0 - 1e-7;

double capped_prob(double logp) { return std::min(std::exp(logp), kMaxProb); }

double mean_nll(std::span<const double> rows) {
  if (rows.empty()) throw DataError("cannot average over an empty target span");
  double s = 0.0;
  for (double v : rows) s += v;
  return -s / static_cast<double>(rows.size());
}

double sum_rows(std::span<const double> rows) {
  double s = 0.0;
  for (double v : rows) s += v;
  return s;
}

// log(1 + exp(-m)) without overflow on either tail.
double softplus_neg(double m) {
  if (m >= 0.0) return std::log1p(std::exp(-m));
  return -m + std::log1p(std::exp(m));
}

double sigmoid_neg(double m) {  // sigma(-m) = 1 - sigma(m)
  if (m >= 0.0) {
    double e = std::exp(-m);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(m));
}

std::vector<bool> flag_mask(size_t n, std::span<const int> U) {
  std::vector<bool> in_u(n, false);
  int prev = -1;
  for (int t : U) {
    if (t <= prev) throw DataError("detected indices must be strictly ascending");
    if (t < 0 || static_cast<size_t>(t) >= n) {
      throw DataError("detected index " + std::to_string(t) + " outside the response");
    }
    in_u[static_cast<size_t>(t)] = true;
    prev = t;
  }
  return in_u;
}

std::string train_prefix(const corpus::TemplateSet& templates, std::string_view instruction,
                         std::string_view judgment) {
  return corpus::prompt_prefix(templates.train,
                               {{"instruction", std::string(instruction)},
                                {"judgment", std::string(judgment)},
                                {"response", ""}},
                               "response");
}

std::string inference_prefix(const corpus::TemplateSet& templates, std::string_view instruction) {
  return corpus::prompt_prefix(
      templates.inference, {{"instruction", std::string(instruction)}, {"response", ""}},
      "response");
}

// Judge-template rendering scored in one pass: rows cover the response bytes,
// the glue between response and judgment, the judgment bytes, then EOS.
struct FpLayout {
  nn::Scored sc;
  size_t n_resp = 0;   // response rows (no EOS; text continues after them)
  size_t j_row = 0;    // first judgment row
  size_t n_jdg = 0;    // judgment rows plus the terminal EOS row
};

FpLayout fp_layout(const nn::Tokenizer& tok, const corpus::JudgmentTriplet& t,
                   const corpus::TemplateSet& templates) {
  corpus::RenderedSpans r = corpus::render_with_spans(templates.judge,
                                                      {{"instruction", t.instruction},
                                                       {"response", t.response},
                                                       {"judgment", t.judgment}});
  auto rit = r.spans.find("response");
  auto jit = r.spans.find("judgment");
  if (rit == r.spans.end() || jit == r.spans.end()) {
    throw UsageError("judge template needs both {response} and {judgment}");
  }
  auto [rb, re] = rit->second;
  auto [jb, je] = jit->second;
  if (je != r.text.size()) throw UsageError("{judgment} must be the final judge-template field");
  if (re > jb) throw UsageError("judge template must place {response} before {judgment}");
  if (re == rb) throw DataError("empty response in '" + t.id + "'");
  if (je == jb) throw DataError("empty judgment in '" + t.id + "'");

  FpLayout out;
  std::string_view text = r.text;
  out.sc = nn::encode_pair(tok, text.substr(0, rb), text.substr(rb), /*append_eos=*/true);
  out.n_resp = re - rb;
  out.j_row = jb - rb;
  out.n_jdg = (je - jb) + 1;
  return out;
}

double fp_from_layout(const FpLayout& L, std::span<const double> rows) {
  double y_part = 0.0, j_part = 0.0;
  for (size_t k = 0; k < L.n_resp; ++k) y_part += rows[k];
  for (size_t k = L.j_row; k < rows.size(); ++k) j_part += rows[k];
  return -y_part / static_cast<double>(L.n_resp) - j_part / static_cast<double>(L.n_jdg);
}

}  // namespace

ObjectiveKind objective_from_string(std::string_view name) {
  if (name == "cut") return ObjectiveKind::CUT;
  if (name == "forward") return ObjectiveKind::FORWARD_PREDICTION;
  if (name == "hindsight") return ObjectiveKind::HINDSIGHT;
  if (name == "ilf-mle") return ObjectiveKind::ILF_MLE;
  if (name == "ilf-dpo") return ObjectiveKind::ILF_DPO;
  if (name == "mle") return ObjectiveKind::MLE;
  throw UsageError("unknown objective '" + std::string(name) +
                   "' (expected cut|forward|hindsight|ilf-mle|ilf-dpo|mle)");
}

std::string_view to_string(ObjectiveKind kind) {
  switch (kind) {
    case ObjectiveKind::CUT: return "cut";
    case ObjectiveKind::FORWARD_PREDICTION: return "forward";
    case ObjectiveKind::HINDSIGHT: return "hindsight";
    case ObjectiveKind::ILF_MLE: return "ilf-mle";
    case ObjectiveKind::ILF_DPO: return "ilf-dpo";
    case ObjectiveKind::MLE: return "mle";
  }
  throw UsageError("unknown objective kind");
}

double cut_l1(std::span<const double> logp_x, std::span<const double> p_neg,
              std::span<const int> U, std::span<const double> weights) {
  if (!p_neg.empty() && p_neg.size() != logp_x.size()) {
    throw DataError("p_neg length does not match the scored response");
  }
  L1Parts parts = cut_l1_parts(logp_x, U, weights);
  return parts.mle_part + parts.ut_part;
}

L1Parts cut_l1_parts(std::span<const double> logp_x, std::span<const int> U,
                     std::span<const double> weights) {
  size_t n = logp_x.size();
  if (n == 0) throw DataError("cannot score an empty response");
  if (weights.size() != n) throw DataError("weight vector length does not match the response");
  std::vector<bool> in_u = flag_mask(n, U);
  double mle = 0.0, ut = 0.0;
  for (size_t t = 0; t < n; ++t) {
    if (in_u[t]) {
      ut += weights[t] * std::log1p(-capped_prob(logp_x[t]));
    } else {
      mle += logp_x[t];
    }
  }
  L1Parts out;
  out.mle_part = -mle / static_cast<double>(n);
  out.ut_part = -ut / static_cast<double>(n);
  return out;
}

std::vector<double> cut_l1_row_grad(std::span<const double> logp_x, std::span<const int> U,
                                    std::span<const double> weights) {
  size_t n = logp_x.size();
  if (n == 0) throw DataError("cannot score an empty response");
  if (weights.size() != n) throw DataError("weight vector length does not match the response");
  std::vector<bool> in_u = flag_mask(n, U);
  double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> g(n);
  for (size_t t = 0; t < n; ++t) {
    if (in_u[t]) {
      double p = capped_prob(logp_x[t]);
      g[t] = inv_n * weights[t] * p / (1.0 - p);
    } else {
      g[t] = -inv_n;
    }
  }
  return g;
}

double cut_l2(std::span<const double> logp_x, std::span<const double> logp_xj, bool aligned_flag) {
  return aligned_flag ? mean_nll(logp_x) : mean_nll(logp_xj);
}

double mle_from_rows(std::span<const double> row) { return mean_nll(row); }

double forward_prediction_from_rows(std::span<const double> logp_y,
                                    std::span<const double> logp_j) {
  return mean_nll(logp_y) + mean_nll(logp_j);
}

double hindsight_from_rows(std::span<const double> logp_y_xj) { return mean_nll(logp_y_xj); }

double dpo_loss(double lp_policy_chosen, double lp_policy_rejected, double lp_ref_chosen,
                double lp_ref_rejected, double beta) {
  if (!(beta > 0.0)) throw UsageError("dpo beta must be positive");
  double margin =
      beta * ((lp_policy_chosen - lp_ref_chosen) - (lp_policy_rejected - lp_ref_rejected));
  return softplus_neg(margin);
}

CutExampleParts apply_cut_align_p(nn::LanguageModel& lm, const corpus::AlignmentExample& ex,
                                  const corpus::TemplateSet& templates, const ObjectiveConfig& cfg,
                                  double grad_scale, bool with_grad) {
  if (ex.category != corpus::Category::ALIGN_P) {
    throw DataError("'" + ex.id + "' is not an ALIGN_P example");
  }
  CutExampleParts parts;
  if (cfg.ablations.disable_l2_align_p) return parts;
  parts.l2 = apply_mle(lm, ex.instruction, ex.response, templates, grad_scale, with_grad);
  return parts;
}

CutExampleParts apply_cut_align_n(nn::LanguageModel& lm, const corpus::AlignmentExample& align_n,
                                  const corpus::AlignmentExample& misalign,
                                  const corpus::TemplateSet& templates, const ObjectiveConfig& cfg,
                                  double grad_scale, bool with_grad) {
  if (align_n.category != corpus::Category::ALIGN_N) {
    throw DataError("'" + align_n.id + "' is not an ALIGN_N example");
  }
  if (misalign.category != corpus::Category::MISALIGN) {
    throw DataError("'" + misalign.id + "' is not a MISALIGN example");
  }
  if (misalign.partner_id != align_n.id || align_n.partner_id != misalign.id) {
    throw DataError("'" + align_n.id + "' and '" + misalign.id + "' are not partners");
  }
  if (misalign.instruction != align_n.instruction || misalign.response != align_n.response) {
    throw DataError("partner pair '" + align_n.id + "'/'" + misalign.id +
                    "' must share instruction and response");
  }

  const bool need_l1 = !cfg.ablations.disable_l1;
  const bool need_l2 = !cfg.ablations.disable_l2_align_n;
  const std::string& y = align_n.response;
  std::string prefix_neg = train_prefix(templates, align_n.instruction, align_n.judgment);
  std::string prefix_pos = train_prefix(templates, misalign.instruction, misalign.judgment);
  std::string prefix_x = inference_prefix(templates, align_n.instruction);

  // The fake-positive conditioning only feeds detection; never differentiated.
  std::vector<double> p_pos =
      contrast::probs_from_logprobs(nn::token_logprobs(lm, prefix_pos, y, true));

  // Gradients through the dynamic weights land on the negative-conditioning
  // row, whose backward runs before the L1 forward; fetch the x-row early.
  const bool weight_grad = with_grad && need_l1 && cfg.weight_gradient &&
                           !cfg.ablations.disable_dynamic_weighting;
  std::vector<double> rows_x_pre;
  if (weight_grad) rows_x_pre = nn::token_logprobs(lm, prefix_x, y, true);

  nn::Scored sc_neg = nn::encode_pair(lm.tok, prefix_neg, y, true);
  const bool cache_neg = with_grad && (need_l2 || weight_grad);
  std::vector<double> rows_neg = cache_neg ? lm.net.forward_cached(sc_neg.ids, sc_neg.boundary)
                                           : lm.net.token_logprobs(sc_neg.ids, sc_neg.boundary);
  std::vector<double> p_neg = contrast::probs_from_logprobs(rows_neg);

  size_t n = p_neg.size();
  std::vector<int> U;
  if (cfg.ablations.ut_all_tokens) {
    U.resize(n);
    std::iota(U.begin(), U.end(), 0);
  } else {
    U = contrast::detect_inappropriate(p_neg, p_pos, cfg.lambda);
  }
  std::vector<double> weights;
  if (cfg.ablations.disable_dynamic_weighting) {
    weights.assign(n, 0.0);
    for (int t : U) weights[static_cast<size_t>(t)] = cfg.alpha;
  } else {
    weights = contrast::dynamic_weights(p_neg, U, cfg.alpha, cfg.gamma);
  }

  CutExampleParts parts;
  parts.tokens_total = n;
  parts.tokens_in_U = U.size();
  if (need_l2) parts.l2 = mean_nll(rows_neg);

  if (cache_neg) {
    std::vector<double> g(n, 0.0);
    if (need_l2) {
      double gv = -grad_scale / static_cast<double>(n);
      for (double& v : g) v = gv;
    }
    if (weight_grad) {
      // d/d logp_neg[t] of -(1/N) w_t log(1 - p_x[t]) with w_t = alpha p_neg^gamma.
      double inv_n = 1.0 / static_cast<double>(n);
      for (int t : U) {
        auto ti = static_cast<size_t>(t);
        g[ti] -= grad_scale * inv_n * cfg.gamma * weights[ti] *
                 std::log1p(-capped_prob(rows_x_pre[ti]));
      }
    }
    lm.net.backward(g);
  }

  if (need_l1) {
    nn::Scored sc_x = nn::encode_pair(lm.tok, prefix_x, y, true);
    std::vector<double> rows_x = with_grad ? lm.net.forward_cached(sc_x.ids, sc_x.boundary)
                                           : lm.net.token_logprobs(sc_x.ids, sc_x.boundary);
    L1Parts l1 = cut_l1_parts(rows_x, U, weights);
    parts.l1_mle = l1.mle_part;
    parts.l1_ut = l1.ut_part;
    if (with_grad) {
      std::vector<double> g = cut_l1_row_grad(rows_x, U, weights);
      for (double& v : g) v *= grad_scale;
      lm.net.backward(g);
    }
  }
  return parts;
}

LossBreakdown cut_total(nn::LanguageModel& lm, std::span<const corpus::AlignmentExample> batch,
                        const corpus::TemplateSet& templates, const ObjectiveConfig& cfg,
                        const std::map<std::string, const corpus::AlignmentExample*>* extra_lookup,
                        bool with_grad) {
  std::map<std::string, const corpus::AlignmentExample*> local;
  size_t n_targets = 0;
  for (const auto& e : batch) {
    if (!local.emplace(e.id, &e).second) throw DataError("duplicate example id '" + e.id + "'");
    if (e.category != corpus::Category::MISALIGN) ++n_targets;
  }
  if (n_targets == 0) throw DataError("batch has no ALIGN_P or ALIGN_N examples");
  double gs = 1.0 / static_cast<double>(n_targets);

  auto resolve = [&](const std::string& id) -> const corpus::AlignmentExample* {
    if (auto it = local.find(id); it != local.end()) return it->second;
    if (extra_lookup) {
      if (auto it = extra_lookup->find(id); it != extra_lookup->end()) return it->second;
    }
    return nullptr;
  };

  LossBreakdown out;
  for (const auto& e : batch) {
    if (e.category == corpus::Category::MISALIGN) continue;
    CutExampleParts parts;
    if (e.category == corpus::Category::ALIGN_P) {
      parts = apply_cut_align_p(lm, e, templates, cfg, gs, with_grad);
    } else {
      const corpus::AlignmentExample* partner = resolve(e.partner_id);
      if (!partner) {
        throw DataError("ALIGN_N '" + e.id + "' has unresolved partner '" + e.partner_id + "'");
      }
      parts = apply_cut_align_n(lm, e, *partner, templates, cfg, gs, with_grad);
    }
    double ex_total = parts.l1_mle + parts.l1_ut + parts.l2;
    if (!std::isfinite(ex_total)) throw RuntimeError("non-finite loss at example '" + e.id + "'");
    out.l1_mle_part += gs * parts.l1_mle;
    out.l1_ut_part += gs * parts.l1_ut;
    out.l2_part += gs * parts.l2;
    out.tokens_in_U += parts.tokens_in_U;
    out.tokens_total += parts.tokens_total;
  }
  out.total = out.l1_mle_part + out.l1_ut_part + out.l2_part;
  return out;
}

double forward_prediction_loss(const nn::LanguageModel& lm, const corpus::JudgmentTriplet& t,
                               const corpus::TemplateSet& templates) {
  FpLayout L = fp_layout(lm.tok, t, templates);
  return fp_from_layout(L, lm.net.token_logprobs(L.sc.ids, L.sc.boundary));
}

double hindsight_loss(const nn::LanguageModel& lm, const corpus::JudgmentTriplet& t,
                      const corpus::TemplateSet& templates) {
  std::string prefix = train_prefix(templates, t.instruction, t.judgment);
  return hindsight_from_rows(nn::token_logprobs(lm, prefix, t.response, true));
}

double ilf_mle_loss(const nn::LanguageModel& lm, std::string_view instruction,
                    std::string_view refined, const corpus::TemplateSet& templates) {
  std::string prefix = inference_prefix(templates, instruction);
  return mle_from_rows(nn::token_logprobs(lm, prefix, refined, true));
}

double apply_forward_prediction(nn::LanguageModel& lm, const corpus::JudgmentTriplet& t,
                                const corpus::TemplateSet& templates, double grad_scale,
                                bool with_grad) {
  if (!with_grad) return forward_prediction_loss(lm, t, templates);
  FpLayout L = fp_layout(lm.tok, t, templates);
  std::vector<double> rows = lm.net.forward_cached(L.sc.ids, L.sc.boundary);
  std::vector<double> g(rows.size(), 0.0);
  for (size_t k = 0; k < L.n_resp; ++k) g[k] = -grad_scale / static_cast<double>(L.n_resp);
  for (size_t k = L.j_row; k < rows.size(); ++k) g[k] = -grad_scale / static_cast<double>(L.n_jdg);
  lm.net.backward(g);
  return fp_from_layout(L, rows);
}

double apply_hindsight(nn::LanguageModel& lm, const corpus::JudgmentTriplet& t,
                       const corpus::TemplateSet& templates, double grad_scale, bool with_grad) {
  if (!with_grad) return hindsight_loss(lm, t, templates);
  std::string prefix = train_prefix(templates, t.instruction, t.judgment);
  nn::Scored sc = nn::encode_pair(lm.tok, prefix, t.response, true);
  std::vector<double> rows = lm.net.forward_cached(sc.ids, sc.boundary);
  std::vector<double> g(rows.size(), -grad_scale / static_cast<double>(rows.size()));
  lm.net.backward(g);
  return hindsight_from_rows(rows);
}

double apply_mle(nn::LanguageModel& lm, std::string_view instruction, std::string_view response,
                 const corpus::TemplateSet& templates, double grad_scale, bool with_grad) {
  std::string prefix = inference_prefix(templates, instruction);
  if (!with_grad) return mle_from_rows(nn::token_logprobs(lm, prefix, response, true));
  nn::Scored sc = nn::encode_pair(lm.tok, prefix, response, true);
  std::vector<double> rows = lm.net.forward_cached(sc.ids, sc.boundary);
  std::vector<double> g(rows.size(), -grad_scale / static_cast<double>(rows.size()));
  lm.net.backward(g);
  return mle_from_rows(rows);
}

std::string ilf_refine(const nn::LanguageModel& lm, std::string_view instruction,
                       std::string_view response, std::string_view judgment,
                       const nn::GenerationConfig& gen, std::string_view refine_template) {
  std::string prompt = corpus::render(refine_template,
                                      {{"instruction", std::string(instruction)},
                                       {"response", std::string(response)},
                                       {"judgment", std::string(judgment)}});
  return nn::generate(lm, prompt, gen);
}

double apply_dpo_pair(nn::LanguageModel& policy, const nn::TransformerLM& reference,
                      std::string_view instruction, std::string_view chosen,
                      std::string_view rejected, const corpus::TemplateSet& templates, double beta,
                      double grad_scale, bool with_grad) {
  if (!(beta > 0.0)) throw UsageError("dpo beta must be positive");
  std::string prefix = inference_prefix(templates, instruction);
  nn::Scored sc_c = nn::encode_pair(policy.tok, prefix, chosen, true);
  nn::Scored sc_r = nn::encode_pair(policy.tok, prefix, rejected, true);

  if (!with_grad) {
    double pc = sum_rows(policy.net.token_logprobs(sc_c.ids, sc_c.boundary));
    double pr = sum_rows(policy.net.token_logprobs(sc_r.ids, sc_r.boundary));
    double rc = sum_rows(reference.token_logprobs(sc_c.ids, sc_c.boundary));
    double rr = sum_rows(reference.token_logprobs(sc_r.ids, sc_r.boundary));
    return dpo_loss(pc, pr, rc, rr, beta);
  }

  // The margin needs all four sequence sums before backward can run, and the
  // tape holds one forward: cache chosen, score the rest statelessly, then
  // re-forward rejected for its backward.
  std::vector<double> rows_c = policy.net.forward_cached(sc_c.ids, sc_c.boundary);
  double pc = sum_rows(rows_c);
  double pr = sum_rows(policy.net.token_logprobs(sc_r.ids, sc_r.boundary));
  double rc = sum_rows(reference.token_logprobs(sc_c.ids, sc_c.boundary));
  double rr = sum_rows(reference.token_logprobs(sc_r.ids, sc_r.boundary));
  double margin = beta * ((pc - rc) - (pr - rr));
  double slope = sigmoid_neg(margin);  // -dL/dmargin

  std::vector<double> gc(rows_c.size(), -grad_scale * beta * slope);
  policy.net.backward(gc);
  std::vector<double> rows_r = policy.net.forward_cached(sc_r.ids, sc_r.boundary);
  std::vector<double> gr(rows_r.size(), grad_scale * beta * slope);
  policy.net.backward(gr);
  return softplus_neg(margin);
}

}  // namespace cutkit::objectives
