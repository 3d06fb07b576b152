#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "cutkit/error.hpp"
#include "cutkit/judge.hpp"

#include "cutkit/jsonl.hpp"
#include "cutkit/rng.hpp"

namespace cutkit::judge {

namespace {

std::string env_or(const char* name, std::string_view fallback) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : std::string(fallback);
}

// Bounded in-flight slots shared by every call on one client.
class Gate {
 public:
  explicit Gate(int slots) : free_(slots > 0 ? slots : 1) {}
  void acquire() {
    std::unique_lock lk(m_);
    cv_.wait(lk, [&] { return free_ > 0; });
    --free_;
  }
  void release() {
    {
      std::lock_guard lk(m_);
      ++free_;
    }
    cv_.notify_one();
  }

 private:
  std::mutex m_;
  std::condition_variable cv_;
  int free_;
};

struct UrlParts {
  std::string base;  // scheme://host[:port]
  std::string path;
};

UrlParts parse_endpoint(const std::string& url) {
  if (url.starts_with("https://")) {
    throw UsageError("https judge endpoints need TLS support this build lacks; use http");
  }
  if (!url.starts_with("http://")) throw UsageError("judge endpoint must be an http:// URL");
  UrlParts p;
  size_t slash = url.find('/', 7);
  if (slash == std::string::npos) {
    p.base = url;
    p.path = "/v1/chat/completions";
  } else {
    p.base = url.substr(0, slash);
    p.path = url.substr(slash);
  }
  if (p.base.size() <= 7) throw UsageError("judge endpoint has no host");
  return p;
}

}  // namespace

ExternalJudgeConfig external_config_from_env() {
  ExternalJudgeConfig cfg;
  cfg.endpoint = env_or("JUDGE_ENDPOINT", "");
  cfg.model = env_or("JUDGE_MODEL", "");
  cfg.api_key = env_or("JUDGE_API_KEY", "");
  if (cfg.endpoint.empty()) throw UsageError("JUDGE_ENDPOINT is not set");
  if (cfg.model.empty()) throw UsageError("JUDGE_MODEL is not set");
  if (cfg.api_key.empty()) throw UsageError("JUDGE_API_KEY is not set");
  std::string conc = env_or("JUDGE_MAX_CONCURRENCY", "");
  if (!conc.empty()) {
    int v = 0;
    try {
      size_t used = 0;
      v = std::stoi(conc, &used);
      if (used != conc.size()) v = 0;
    } catch (const std::exception&) {
      v = 0;
    }
    if (v <= 0) throw UsageError("JUDGE_MAX_CONCURRENCY must be a positive integer");
    cfg.max_concurrency = v;
  }
  return cfg;
}

struct ExternalJudge::Impl {
  ExternalJudgeConfig cfg;
  UrlParts url;
  Gate gate;

  explicit Impl(ExternalJudgeConfig c)
      : cfg(std::move(c)), url(parse_endpoint(cfg.endpoint)), gate(cfg.max_concurrency) {}
};

ExternalJudge::ExternalJudge(ExternalJudgeConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}
ExternalJudge::~ExternalJudge() = default;
ExternalJudge::ExternalJudge(ExternalJudge&&) noexcept = default;
ExternalJudge& ExternalJudge::operator=(ExternalJudge&&) noexcept = default;

JudgeVerdict ExternalJudge::judge(std::string_view instruction, std::string_view response) {
  std::string judgment = complete(corpus::render(impl_->cfg.prompt_template,
                                                 {{"instruction", std::string(instruction)},
                                                  {"response", std::string(response)}}));
  JudgeVerdict v;
  v.judgment = std::move(judgment);
  v.polarity = corpus::classify_polarity(v.judgment);
  v.provenance = Provenance::EXTERNAL;
  return v;
}

std::string ExternalJudge::complete(std::string_view prompt) {
  Impl& im = *impl_;
  nlohmann::json body = {
      {"model", im.cfg.model},
      {"temperature", 0},
      {"messages", nlohmann::json::array({{{"role", "user"}, {"content", std::string(prompt)}}})},
  };
  std::string payload = jsonl::dump_lossy(body);
  httplib::Headers headers = {{"Authorization", "Bearer " + im.cfg.api_key}};

  std::string last_error;
  int attempts = im.cfg.max_retries + 1;
  for (int a = 0; a < attempts; ++a) {
    if (a > 0) {
      auto ms = std::chrono::milliseconds(
          static_cast<long long>(im.cfg.backoff_initial_ms) << (a - 1));
      std::this_thread::sleep_for(ms);
    }
    im.gate.acquire();
    httplib::Client cli(im.url.base);
    cli.set_connection_timeout(im.cfg.timeout_s, 0);
    cli.set_read_timeout(im.cfg.timeout_s, 0);
    httplib::Result res = cli.Post(im.url.path, headers, payload, "application/json");
    im.gate.release();

    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;  // retryable
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "judge endpoint returned status " + std::to_string(res->status);
      continue;  // retryable
    }
    if (res->status < 200 || res->status >= 300) {
      throw RuntimeError("judge endpoint returned status " + std::to_string(res->status));
    }
    try {
      nlohmann::json j = nlohmann::json::parse(res->body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed judge response body: ") + e.what());
    }
  }
  throw RuntimeError("judge request failed after " + std::to_string(attempts) +
                     " attempts; last error: " + last_error);
}

std::vector<std::optional<JudgeVerdict>> ExternalJudge::judge_many(
    std::span<const std::pair<std::string, std::string>> items, std::vector<std::string>* errors) {
  std::vector<std::optional<JudgeVerdict>> out(items.size());
  if (errors) errors->assign(items.size(), "");
  if (items.empty()) return out;
  size_t workers =
      std::min(static_cast<size_t>(std::max(1, impl_->cfg.max_concurrency)), items.size());
  std::atomic<size_t> next{0};
  auto run = [&] {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= items.size()) break;
      try {
        out[i] = judge(items[i].first, items[i].second);
      } catch (const std::exception& e) {
        if (errors) (*errors)[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  for (auto& th : pool) th.join();
  return out;
}

nn::LanguageModel train_judge(nn::LanguageModel base,
                              std::span<const corpus::JudgmentTriplet> triplets,
                              const corpus::TemplateSet& templates, const JudgeTrainConfig& cfg,
                              std::vector<double>* step_losses) {
  if (triplets.empty()) throw DataError("empty judge training set");
  if (cfg.epochs <= 0) throw UsageError("judge training needs at least one epoch");
  std::vector<size_t> order(triplets.size());
  std::iota(order.begin(), order.end(), size_t{0});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 g = rng::engine(rng::derive(cfg.seed, 9100, static_cast<uint64_t>(epoch)));
    rng::shuffle(order, g);
    for (size_t idx : order) {
      const corpus::JudgmentTriplet& t = triplets[idx];
      std::string prefix = corpus::prompt_prefix(templates.judge,
                                                 {{"instruction", t.instruction},
                                                  {"response", t.response},
                                                  {"judgment", ""}},
                                                 "judgment");
      nn::Scored sc = nn::encode_pair(base.tok, prefix, t.judgment, true);
      std::vector<double> rows = base.net.forward_cached(sc.ids, sc.boundary);
      double loss = 0.0;
      for (double r : rows) loss -= r;
      loss /= static_cast<double>(rows.size());
      std::vector<double> grad(rows.size(), -1.0 / static_cast<double>(rows.size()));
      base.net.zero_grads();
      base.net.backward(grad);
      base.net.adam_step(cfg.opt);
      if (step_losses) step_losses->push_back(loss);
    }
  }
  return base;
}

JudgeVerdict trained_judge(const nn::LanguageModel& judge_model, std::string_view instruction,
                           std::string_view response, const corpus::TemplateSet& templates,
                           const nn::GenerationConfig& gen) {
  std::string prompt = corpus::prompt_prefix(templates.judge,
                                             {{"instruction", std::string(instruction)},
                                              {"response", std::string(response)},
                                              {"judgment", ""}},
                                             "judgment");
  std::string out = nn::generate(judge_model, prompt, gen);
  bool blank = out.find_first_not_of(" \t\r\n") == std::string::npos;
  JudgeVerdict v;
  v.provenance = Provenance::TRAINED;
  if (blank) {
    v.judgment = std::string(kTrainedJudgeFallback);
    v.polarity = corpus::Polarity::NEGATIVE;
  } else {
    v.judgment = std::move(out);
    v.polarity = corpus::classify_polarity(v.judgment);
  }
  return v;
}

}  // namespace cutkit::judge
