#include "cutkit/contrast.hpp"

#include <algorithm>
#include <cmath>

#include "cutkit/error.hpp"

namespace cutkit::contrast {

std::vector<double> probs_from_logprobs(std::span<const double> row) {
  std::vector<double> p(row.size());
  for (size_t i = 0; i < row.size(); ++i) {
    double v = std::exp(row[i]);
    if (v < kProbFloor) v = kProbFloor;
    if (v > 1.0) v = 1.0;
    p[i] = v;
  }
  return p;
}

std::vector<int> detect_inappropriate(std::span<const double> p_neg,
                                      std::span<const double> p_pos, double lambda) {
  if (p_neg.size() != p_pos.size()) {
    throw DataError("contrast length mismatch: " + std::to_string(p_neg.size()) + " vs " +
                    std::to_string(p_pos.size()));
  }
  if (!(lambda > 0.0)) throw UsageError("lambda must be positive");
  std::vector<int> u;
  for (size_t t = 0; t < p_neg.size(); ++t) {
    if (p_neg[t] - lambda * p_pos[t] > 0.0) u.push_back(static_cast<int>(t));
  }
  return u;
}

std::vector<double> dynamic_weights(std::span<const double> p_neg, std::span<const int> U,
                                    double alpha, double gamma) {
  if (!(alpha >= 0.0)) throw UsageError("alpha must be non-negative");
  if (!(gamma >= 0.0)) throw UsageError("gamma must be non-negative");
  std::vector<double> w(p_neg.size(), 0.0);
  for (int t : U) {
    if (t < 0 || static_cast<size_t>(t) >= p_neg.size()) {
      throw DataError("detected index " + std::to_string(t) + " outside the response");
    }
    double p = std::max(p_neg[t], kProbFloor);
    w[t] = alpha * std::pow(p, gamma);
  }
  return w;
}

ContrastResult contrast_example(const nn::LanguageModel& lm,
                                const corpus::AlignmentExample& align_n,
                                const corpus::AlignmentExample& misalign,
                                const corpus::TemplateSet& templates, double lambda, double alpha,
                                double gamma) {
  if (misalign.partner_id != align_n.id) {
    throw DataError("MISALIGN '" + misalign.id + "' is not the partner of ALIGN_N '" + align_n.id +
                    "'");
  }
  if (misalign.instruction != align_n.instruction || misalign.response != align_n.response) {
    throw DataError("partner pair '" + align_n.id + "'/'" + misalign.id +
                    "' must share instruction and response");
  }

  auto score = [&](const corpus::AlignmentExample& e) {
    corpus::RenderedSpans r = corpus::render_with_spans(
        templates.train, {{"instruction", e.instruction},
                          {"judgment", e.judgment},
                          {"response", e.response}});
    auto [begin, end] = r.spans.at("response");
    (void)end;
    return token_logprobs(lm, std::string_view(r.text).substr(0, begin), e.response,
                          /*append_eos=*/true);
  };

  ContrastResult out;
  out.lambda = lambda;
  out.alpha = alpha;
  out.gamma = gamma;
  out.p_neg = probs_from_logprobs(score(align_n));
  out.p_pos = probs_from_logprobs(score(misalign));
  out.U = detect_inappropriate(out.p_neg, out.p_pos, lambda);
  out.weights = dynamic_weights(out.p_neg, out.U, alpha, gamma);
  return out;
}

}  // namespace cutkit::contrast
