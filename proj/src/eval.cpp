#include "cutkit/eval.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include <json.hpp>

#include "cutkit/error.hpp"
#include "cutkit/jsonl.hpp"

namespace cutkit::eval {

namespace {

double f_measure(double match, double cand_len, double ref_len) {
  double p = cand_len > 0.0 ? match / cand_len : 0.0;
  double r = ref_len > 0.0 ? match / ref_len : 0.0;
  return (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

double ngram_overlap(std::span<const std::string> c, std::span<const std::string> r, size_t n) {
  if (c.size() < n || r.size() < n) return 0.0;
  auto counts = [n](std::span<const std::string> toks) {
    std::map<std::string, long> m;
    for (size_t i = 0; i + n <= toks.size(); ++i) {
      std::string key;
      for (size_t k = 0; k < n; ++k) {
        key += toks[i + k];
        key += '\x1f';
      }
      ++m[key];
    }
    return m;
  };
  std::map<std::string, long> cc = counts(c), rc = counts(r);
  long match = 0;
  for (const auto& [key, cnt] : cc) {
    auto it = rc.find(key);
    if (it != rc.end()) match += std::min(cnt, it->second);
  }
  return static_cast<double>(match);
}

size_t lcs_length(std::span<const std::string> a, std::span<const std::string> b) {
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Marks the reference positions matched by one optimal LCS alignment.
void mark_lcs_hits(std::span<const std::string> ref, std::span<const std::string> cand,
                   std::vector<bool>& hit) {
  size_t n = ref.size(), m = cand.size();
  std::vector<std::vector<size_t>> dp(n + 1, std::vector<size_t>(m + 1, 0));
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      dp[i][j] =
          ref[i - 1] == cand[j - 1] ? dp[i - 1][j - 1] + 1 : std::max(dp[i - 1][j], dp[i][j - 1]);
    }
  }
  size_t i = n, j = m;
  while (i > 0 && j > 0) {
    if (ref[i - 1] == cand[j - 1] && dp[i][j] == dp[i - 1][j - 1] + 1) {
      hit[i - 1] = true;
      --i;
      --j;
    } else if (dp[i - 1][j] >= dp[i][j - 1]) {
      --i;
    } else {
      --j;
    }
  }
}

std::vector<std::vector<std::string>> sentence_tokens(std::string_view text) {
  std::vector<std::vector<std::string>> out;
  size_t start = 0;
  while (start <= text.size()) {
    size_t nl = text.find('\n', start);
    std::string_view line =
        nl == std::string_view::npos ? text.substr(start) : text.substr(start, nl - start);
    std::vector<std::string> toks = rouge_tokens(line);
    if (!toks.empty()) out.push_back(std::move(toks));
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return out;
}

// Summary-level LCS: per reference sentence, union the positions matched
// against every candidate sentence, then F over summed hits.
double rouge_lsum(std::string_view candidate, std::string_view reference) {
  std::vector<std::vector<std::string>> cs = sentence_tokens(candidate);
  std::vector<std::vector<std::string>> rs = sentence_tokens(reference);
  size_t cand_total = 0, ref_total = 0, hits = 0;
  for (const auto& s : cs) cand_total += s.size();
  for (const auto& s : rs) ref_total += s.size();
  for (const auto& r : rs) {
    std::vector<bool> hit(r.size(), false);
    for (const auto& c : cs) mark_lcs_hits(r, c, hit);
    hits += static_cast<size_t>(std::count(hit.begin(), hit.end(), true));
  }
  return f_measure(static_cast<double>(hits), static_cast<double>(cand_total),
                   static_cast<double>(ref_total));
}

RougeScores rouge_single(std::span<const std::string> c, std::span<const std::string> r,
                         std::string_view cand_text, std::string_view ref_text) {
  RougeScores s;
  s.rouge1 = f_measure(ngram_overlap(c, r, 1), static_cast<double>(c.size()),
                       static_cast<double>(r.size()));
  double c2 = c.size() >= 2 ? static_cast<double>(c.size() - 1) : 0.0;
  double r2 = r.size() >= 2 ? static_cast<double>(r.size() - 1) : 0.0;
  s.rouge2 = f_measure(ngram_overlap(c, r, 2), c2, r2);
  s.rougeL = f_measure(static_cast<double>(lcs_length(c, r)), static_cast<double>(c.size()),
                       static_cast<double>(r.size()));
  s.rougeLsum = rouge_lsum(cand_text, ref_text);
  return s;
}

}  // namespace

std::vector<std::string> rouge_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

RougeScores rouge(std::string_view candidate, std::span<const std::string> references,
                  std::string* warning) {
  if (warning) warning->clear();
  std::vector<std::string> c = rouge_tokens(candidate);
  if (references.empty()) {
    if (warning) *warning = "empty reference list scores 0";
    return {};
  }
  if (c.empty()) {
    if (warning) *warning = "empty candidate scores 0";
    return {};
  }
  RougeScores best;
  for (const std::string& ref : references) {
    std::vector<std::string> r = rouge_tokens(ref);
    RougeScores s = rouge_single(c, r, candidate, ref);
    best.rouge1 = std::max(best.rouge1, s.rouge1);
    best.rouge2 = std::max(best.rouge2, s.rouge2);
    best.rougeL = std::max(best.rougeL, s.rougeL);
    best.rougeLsum = std::max(best.rougeLsum, s.rougeLsum);
  }
  return best;
}

double compliance_rate(const nn::LanguageModel& lm, const judge::SyntheticTask& task, size_t n,
                       uint64_t seed, const corpus::TemplateSet& templates,
                       const nn::GenerationConfig& gen, std::vector<ComplianceRecord>* records,
                       const std::set<std::string>* exclude) {
  if (n == 0) throw UsageError("compliance_rate needs at least one instruction");
  std::vector<std::string> instructions = judge::sample_instructions(task, seed, n, exclude);
  size_t passes = 0;
  for (const std::string& x : instructions) {
    std::string prompt =
        corpus::prompt_prefix(templates.inference, {{"instruction", x}, {"response", ""}},
                              "response");
    std::string response = nn::generate(lm, prompt, gen);
    bool pass = task.critique(x, response).empty();
    passes += pass ? 1 : 0;
    if (records) records->push_back({x, std::move(response), pass});
  }
  return static_cast<double>(passes) / static_cast<double>(n);
}

PairwiseJudge oracle_pairwise(const judge::SyntheticTask& task) {
  return [&task](std::string_view instruction, std::string_view first, std::string_view second) {
    bool pf = task.critique(instruction, first).empty();
    bool ps = task.critique(instruction, second).empty();
    if (pf == ps) return 0;
    return pf ? 1 : -1;
  };
}

PairwiseJudge external_pairwise(judge::ExternalJudge& client, std::string_view prompt_template) {
  return [&client, tmpl = std::string(prompt_template)](
             std::string_view instruction, std::string_view first, std::string_view second) {
    std::string reply = client.complete(corpus::render(tmpl, {{"instruction", std::string(instruction)},
                                                              {"first", std::string(first)},
                                                              {"second", std::string(second)}}));
    size_t k = reply.find_first_not_of(" \t\r\n");
    if (k == std::string::npos) return 0;
    if (reply[k] == 'A') return 1;
    if (reply[k] == 'B') return -1;
    return 0;
  };
}

double win_rate(const nn::LanguageModel& a, const nn::LanguageModel& b,
                std::span<const std::string> instructions, const PairwiseJudge& judge,
                const corpus::TemplateSet& templates, const nn::GenerationConfig& gen,
                std::vector<WinRecord>* records) {
  if (instructions.empty()) throw UsageError("win_rate needs at least one instruction");
  auto order_score = [&](int verdict) {  // verdict about (a-first, b-second)
    if (verdict > 0) return 1.0;
    if (verdict < 0) return 0.0;
    return 0.5;
  };
  double total = 0.0;
  for (const std::string& x : instructions) {
    std::string prompt =
        corpus::prompt_prefix(templates.inference, {{"instruction", x}, {"response", ""}},
                              "response");
    std::string ra = nn::generate(a, prompt, gen);
    std::string rb = nn::generate(b, prompt, gen);
    double s1 = order_score(judge(x, ra, rb));
    double s2 = 1.0 - order_score(judge(x, rb, ra));
    double score_a = 0.5 * (s1 + s2);
    total += score_a;
    if (records) records->push_back({x, std::move(ra), std::move(rb), score_a});
  }
  return total / static_cast<double>(instructions.size());
}

void save_report(const std::filesystem::path& path, const EvalReport& report) {
  nlohmann::json j;
  j["metric"] = report.metric;
  j["score"] = report.score;
  j["sample_count"] = report.sample_count;
  nlohmann::json records = nlohmann::json::array();
  for (const std::string& line : report.record_lines) {
    try {
      records.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("invalid record line in eval report: ") + e.what());
    }
  }
  j["records"] = std::move(records);
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out << jsonl::dump_lossy(j, 2) << "\n";
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  EvalReport r;
  try {
    r.metric = j.at("metric").get<std::string>();
    r.score = j.at("score").get<double>();
    r.sample_count = j.at("sample_count").get<size_t>();
    for (const auto& rec : j.at("records")) {
      r.record_lines.push_back(jsonl::dump_lossy(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return r;
}

}  // namespace cutkit::eval
