#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cutkit/corpus.hpp"
#include "cutkit/error.hpp"
#include "cutkit/judge.hpp"
#include "cutkit/rng.hpp"

using namespace cutkit;

namespace {

// Local chat-completions stub. Each test configures behavior through the
// callback; the server counts requests and records the last payload.
struct StubServer {
  httplib::Server svr;
  std::thread th;
  int port = 0;
  std::atomic<int> hits{0};
  std::atomic<int> in_flight{0};
  std::atomic<int> peak_in_flight{0};
  std::mutex m;
  std::string last_body;
  std::string last_auth;

  using Responder = std::function<void(int hit, const httplib::Request&, httplib::Response&)>;

  explicit StubServer(Responder respond, const std::string& path = "/v1/chat/completions") {
    svr.Post(path, [this, respond](const httplib::Request& req, httplib::Response& res) {
      int me = ++in_flight;
      int prev = peak_in_flight.load();
      while (me > prev && !peak_in_flight.compare_exchange_weak(prev, me)) {
      }
      int hit = ++hits;
      {
        std::lock_guard lk(m);
        last_body = req.body;
        auto it = req.headers.find("Authorization");
        last_auth = it == req.headers.end() ? "" : it->second;
      }
      respond(hit, req, res);
      --in_flight;
    });
    port = svr.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    th = std::thread([this] { svr.listen_after_bind(); });
    svr.wait_until_ready();
  }

  ~StubServer() {
    svr.stop();
    th.join();
  }

  std::string endpoint() const { return "http://127.0.0.1:" + std::to_string(port); }
};

void reply_content(httplib::Response& res, const std::string& content) {
  nlohmann::json j = {{"choices", {{{"message", {{"content", content}}}}}}};
  res.set_content(j.dump(), "application/json");
}

judge::ExternalJudgeConfig fast_config(const std::string& endpoint) {
  judge::ExternalJudgeConfig cfg;
  cfg.endpoint = endpoint;
  cfg.model = "stub-model";
  cfg.api_key = "stub-key";
  cfg.max_retries = 3;
  cfg.backoff_initial_ms = 1;
  cfg.timeout_s = 5;
  return cfg;
}

struct EnvGuard {
  std::vector<std::pair<std::string, std::string>> saved;
  explicit EnvGuard(std::initializer_list<const char*> names) {
    for (const char* n : names) {
      const char* v = std::getenv(n);
      saved.emplace_back(n, v ? v : "\x01unset");
    }
  }
  ~EnvGuard() {
    for (auto& [n, v] : saved) {
      if (v == "\x01unset") {
        unsetenv(n.c_str());
      } else {
        setenv(n.c_str(), v.c_str(), 1);
      }
    }
  }
};

nn::LanguageModel tiny_judge_model(uint64_t seed) {
  nn::ModelConfig mc;
  mc.d_model = 8;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 16;
  mc.max_seq = 384;
  return nn::make_language_model(mc, nn::Tokenizer::byte_level(), seed);
}

}  // namespace

TEST_CASE("builtin tasks resolve by name and reject unknowns") {
  const auto& tasks = judge::builtin_tasks();
  REQUIRE(tasks.size() == 4);
  std::set<std::string> names;
  for (const auto& t : tasks) names.insert(t.name);
  CHECK(names == std::set<std::string>{"lowercase-echo", "arithmetic", "suffix-tag",
                                       "constraint-truthfulness"});
  CHECK(judge::task_by_name("arithmetic").name == "arithmetic");
  CHECK_THROWS_AS(judge::task_by_name("sudoku"), UsageError);
  CHECK_THROWS_WITH_AS(judge::task_by_name("sudoku"),
                       doctest::Contains("lowercase-echo"), UsageError);
}

TEST_CASE("oracle judgment properties hold on every builtin task") {
  for (const auto& task : judge::builtin_tasks()) {
    CAPTURE(task.name);
    std::mt19937_64 g = rng::engine(17);
    for (int i = 0; i < 25; ++i) {
      std::string instruction = task.gen_instruction(g);
      std::string canonical = task.canonical(instruction);

      // A regenerated instruction is parseable and its canonical answer clean.
      CHECK(task.critique(instruction, canonical).empty());
      auto ok = judge::oracle_judge(task, instruction, canonical);
      CHECK(ok.polarity == corpus::Polarity::POSITIVE);
      CHECK(ok.judgment == judge::kOraclePositiveJudgment);
      CHECK(ok.provenance == judge::Provenance::ORACLE);
      CHECK(corpus::classify_polarity(ok.judgment) == corpus::Polarity::POSITIVE);

      // Corruptions are real: different text, critiqued, negative verdict.
      std::string wrong = task.corrupt(instruction, g);
      CHECK(wrong != canonical);
      CHECK(!task.critique(instruction, wrong).empty());
      auto bad = judge::oracle_judge(task, instruction, wrong);
      CHECK(bad.polarity == corpus::Polarity::NEGATIVE);
      CHECK(corpus::classify_polarity(bad.judgment) == corpus::Polarity::NEGATIVE);

      // Purity: same inputs, byte-identical verdicts.
      auto again = judge::oracle_judge(task, instruction, wrong);
      CHECK(again.judgment == bad.judgment);
    }
    CHECK_THROWS_AS(task.canonical("please divide by zero"), DataError);
  }
}

TEST_CASE("instruction generators are deterministic per seed stream") {
  for (const auto& task : judge::builtin_tasks()) {
    std::mt19937_64 a = rng::engine(5), b = rng::engine(5), c = rng::engine(6);
    CHECK(task.gen_instruction(a) == task.gen_instruction(b));
    bool any_diff = false;
    for (int i = 0; i < 20 && !any_diff; ++i) {
      any_diff = task.gen_instruction(a) != task.gen_instruction(c);
    }
    CHECK(any_diff);
  }
}

TEST_CASE("task critiques localize the planted mistakes") {
  const auto& echo = judge::task_by_name("lowercase-echo");
  std::string c1 = echo.critique("echo in lowercase: Basil", "Basil");
  CHECK(c1.find("capitalization") != std::string::npos);
  CHECK(c1.find("position 0") != std::string::npos);
  CHECK(echo.canonical("echo in lowercase: Basil") == "basil");

  const auto& arith = judge::task_by_name("arithmetic");
  std::string ins = "Ada buys 3 boxes with 4 pens each. How many pens did Ada buy in total?";
  CHECK(arith.canonical(ins) == "12");
  CHECK(arith.critique(ins, "3").find("forgets to multiply") != std::string::npos);
  CHECK(arith.critique(ins, "13").find("expected 12") != std::string::npos);

  const auto& tag = judge::task_by_name("suffix-tag");
  std::string tins = "Write maple onyx and finish the reply with #done";
  CHECK(tag.canonical(tins) == "maple onyx #done");
  CHECK(tag.critique(tins, "maple onyx").find("#done") != std::string::npos);

  const auto& fact = judge::task_by_name("constraint-truthfulness");
  std::string fins = "What color is the old snow?";
  CHECK(fact.canonical(fins) == "The old snow is white.");
  std::string fc = fact.critique(fins, "The old snow is green.");
  CHECK(fc.find("green") != std::string::npos);
  CHECK(fc.find("white") != std::string::npos);
}

TEST_CASE("sample_instructions is distinct, seeded, and exhaustible") {
  const auto& task = judge::task_by_name("suffix-tag");
  auto a = judge::sample_instructions(task, 11, 40);
  auto b = judge::sample_instructions(task, 11, 40);
  CHECK(a == b);
  CHECK(std::set<std::string>(a.begin(), a.end()).size() == a.size());

  std::set<std::string> exclude(a.begin(), a.end());
  auto more = judge::sample_instructions(task, 12, 40, &exclude);
  for (const auto& ins : more) CHECK(exclude.count(ins) == 0);

  // The task space is 16x16 phrases; asking for more must fail loudly.
  CHECK_THROWS_AS(judge::sample_instructions(task, 13, 100000), RuntimeError);
}

TEST_CASE("synth_triplets mixes canonical and corrupted responses by fraction") {
  const auto& task = judge::task_by_name("arithmetic");

  auto all_good = judge::synth_triplets(task, 3, 20, 0.0);
  REQUIRE(all_good.size() == 20);
  for (const auto& t : all_good) {
    CHECK(t.polarity == corpus::Polarity::POSITIVE);
    CHECK(t.response == task.canonical(t.instruction));
    corpus::validate_triplet(t);
  }

  auto all_bad = judge::synth_triplets(task, 3, 20, 1.0);
  size_t negatives = 0;
  for (const auto& t : all_bad) {
    if (t.polarity == corpus::Polarity::NEGATIVE) ++negatives;
    corpus::validate_triplet(t);
  }
  CHECK(negatives == all_bad.size());

  auto mixed = judge::synth_triplets(task, 5, 60, 0.5);
  size_t neg = 0;
  std::set<std::string> ids;
  for (const auto& t : mixed) {
    ids.insert(t.id);
    if (t.polarity == corpus::Polarity::NEGATIVE) {
      ++neg;
      CHECK(t.judgment == task.critique(t.instruction, t.response));
    } else {
      CHECK(t.judgment == judge::kOraclePositiveJudgment);
    }
  }
  CHECK(ids.size() == mixed.size());
  CHECK(neg > 10);
  CHECK(neg < 50);

  auto rerun = judge::synth_triplets(task, 5, 60, 0.5);
  REQUIRE(rerun.size() == mixed.size());
  for (size_t i = 0; i < mixed.size(); ++i) {
    CHECK(rerun[i].id == mixed[i].id);
    CHECK(rerun[i].instruction == mixed[i].instruction);
    CHECK(rerun[i].response == mixed[i].response);
    CHECK(rerun[i].judgment == mixed[i].judgment);
    CHECK(rerun[i].polarity == mixed[i].polarity);
  }
}

TEST_CASE("provenance names round-trip") {
  for (auto p : {judge::Provenance::ORACLE, judge::Provenance::EXTERNAL,
                 judge::Provenance::TRAINED}) {
    CHECK(judge::provenance_from_string(judge::to_string(p)) == p);
  }
  CHECK_THROWS_AS(judge::provenance_from_string("psychic"), DataError);
}

TEST_CASE("external config is read from the environment") {
  EnvGuard guard{"JUDGE_ENDPOINT", "JUDGE_MODEL", "JUDGE_API_KEY", "JUDGE_MAX_CONCURRENCY"};
  unsetenv("JUDGE_ENDPOINT");
  unsetenv("JUDGE_MODEL");
  unsetenv("JUDGE_API_KEY");
  unsetenv("JUDGE_MAX_CONCURRENCY");

  CHECK_THROWS_WITH_AS(judge::external_config_from_env(), "JUDGE_ENDPOINT is not set", UsageError);
  setenv("JUDGE_ENDPOINT", "http://judge.local:9", 1);
  CHECK_THROWS_WITH_AS(judge::external_config_from_env(), "JUDGE_MODEL is not set", UsageError);
  setenv("JUDGE_MODEL", "remote-judge", 1);
  CHECK_THROWS_WITH_AS(judge::external_config_from_env(), "JUDGE_API_KEY is not set", UsageError);
  setenv("JUDGE_API_KEY", "sk-test", 1);

  auto cfg = judge::external_config_from_env();
  CHECK(cfg.endpoint == "http://judge.local:9");
  CHECK(cfg.model == "remote-judge");
  CHECK(cfg.api_key == "sk-test");
  CHECK(cfg.max_concurrency == 4);

  setenv("JUDGE_MAX_CONCURRENCY", "2", 1);
  CHECK(judge::external_config_from_env().max_concurrency == 2);
  setenv("JUDGE_MAX_CONCURRENCY", "zero", 1);
  CHECK_THROWS_AS(judge::external_config_from_env(), UsageError);
  setenv("JUDGE_MAX_CONCURRENCY", "-3", 1);
  CHECK_THROWS_AS(judge::external_config_from_env(), UsageError);
}

TEST_CASE("endpoint URLs are validated before any socket work") {
  CHECK_THROWS_AS(judge::ExternalJudge(fast_config("https://judge.local")), UsageError);
  CHECK_THROWS_AS(judge::ExternalJudge(fast_config("ftp://judge.local")), UsageError);
  CHECK_THROWS_AS(judge::ExternalJudge(fast_config("http://")), UsageError);
}

TEST_CASE("external judge round-trips the annotation protocol") {
  StubServer stub([](int, const httplib::Request&, httplib::Response& res) {
    reply_content(res, "Perfect. Nicely done.");
  });
  judge::ExternalJudge client(fast_config(stub.endpoint()));
  auto v = client.judge("Say hi.", "hi");
  CHECK(v.judgment == "Perfect. Nicely done.");
  CHECK(v.polarity == corpus::Polarity::POSITIVE);
  CHECK(v.provenance == judge::Provenance::EXTERNAL);
  CHECK(stub.hits.load() == 1);

  CHECK(stub.last_auth == "Bearer stub-key");
  nlohmann::json req = nlohmann::json::parse(stub.last_body);
  CHECK(req.at("model") == "stub-model");
  CHECK(req.at("temperature") == 0);
  std::string content = req.at("messages").at(0).at("content").get<std::string>();
  CHECK(content.find("Say hi.") != std::string::npos);
  CHECK(content.find("### Response:\nhi") != std::string::npos);
}

TEST_CASE("a bare endpoint gains the chat completions path") {
  // The stub only registers /v1/chat/completions; reaching it proves the
  // default path was appended to the bare host endpoint.
  StubServer stub([](int, const httplib::Request&, httplib::Response& res) {
    reply_content(res, "The response is wrong.");
  });
  judge::ExternalJudge client(fast_config(stub.endpoint()));
  auto v = client.judge("Say hi.", "Hi");
  CHECK(v.polarity == corpus::Polarity::NEGATIVE);
}

TEST_CASE("custom endpoint paths are preserved") {
  StubServer stub(
      [](int, const httplib::Request&, httplib::Response& res) { reply_content(res, "Perfect."); },
      "/my/judge");
  judge::ExternalJudge client(fast_config(stub.endpoint() + "/my/judge"));
  CHECK(client.complete("ping") == "Perfect.");
}

TEST_CASE("rate limiting retries with backoff until success") {
  StubServer stub([](int hit, const httplib::Request&, httplib::Response& res) {
    if (hit <= 2) {
      res.status = hit == 1 ? 429 : 503;
      res.set_content("busy", "text/plain");
      return;
    }
    reply_content(res, "Perfect. Third time lucky.");
  });
  judge::ExternalJudge client(fast_config(stub.endpoint()));
  auto v = client.judge("Say hi.", "hi");
  CHECK(v.polarity == corpus::Polarity::POSITIVE);
  CHECK(stub.hits.load() == 3);
}

TEST_CASE("retries exhaust into a runtime error naming the attempt count") {
  StubServer stub([](int, const httplib::Request&, httplib::Response& res) {
    res.status = 500;
    res.set_content("down", "text/plain");
  });
  auto cfg = fast_config(stub.endpoint());
  cfg.max_retries = 2;
  judge::ExternalJudge client(cfg);
  CHECK_THROWS_WITH_AS(client.complete("ping"), doctest::Contains("after 3 attempts"),
                       RuntimeError);
  CHECK(stub.hits.load() == 3);
}

TEST_CASE("malformed response bodies fail fast as data errors") {
  StubServer stub([](int, const httplib::Request&, httplib::Response& res) {
    res.set_content("{\"choices\": []}", "application/json");
  });
  judge::ExternalJudge client(fast_config(stub.endpoint()));
  CHECK_THROWS_AS(client.complete("ping"), DataError);
  CHECK(stub.hits.load() == 1);  // no retry on a well-formed but wrong reply
}

TEST_CASE("client errors other than 429 do not retry") {
  StubServer stub([](int, const httplib::Request&, httplib::Response& res) {
    res.status = 403;
    res.set_content("forbidden", "text/plain");
  });
  judge::ExternalJudge client(fast_config(stub.endpoint()));
  CHECK_THROWS_WITH_AS(client.complete("ping"), doctest::Contains("403"), RuntimeError);
  CHECK(stub.hits.load() == 1);
}

TEST_CASE("judge_many fills one slot per item and records failures in place") {
  StubServer stub([](int, const httplib::Request& req, httplib::Response& res) {
    if (req.body.find("poison") != std::string::npos) {
      res.status = 400;
      res.set_content("bad request", "text/plain");
      return;
    }
    reply_content(res, "Perfect. Fine.");
  });
  auto cfg = fast_config(stub.endpoint());
  cfg.max_concurrency = 3;
  judge::ExternalJudge client(cfg);

  std::vector<std::pair<std::string, std::string>> items = {
      {"Say hi.", "hi"}, {"Say hi.", "poison"}, {"Say hi.", "hello"}};
  std::vector<std::string> errors;
  auto out = client.judge_many(items, &errors);
  REQUIRE(out.size() == 3);
  REQUIRE(errors.size() == 3);
  CHECK(out[0].has_value());
  CHECK(!out[1].has_value());
  CHECK(out[2].has_value());
  CHECK(errors[0].empty());
  CHECK(errors[1].find("400") != std::string::npos);
  CHECK(errors[2].empty());
}

TEST_CASE("the in-flight gate caps concurrent requests across threads") {
  StubServer stub([](int, const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    reply_content(res, "Perfect. Slow but fine.");
  });
  auto cfg = fast_config(stub.endpoint());
  cfg.max_concurrency = 2;
  judge::ExternalJudge client(cfg);

  std::vector<std::thread> callers;
  for (int i = 0; i < 6; ++i) {
    callers.emplace_back([&] { (void)client.judge("Say hi.", "hi"); });
  }
  for (auto& t : callers) t.join();
  CHECK(stub.hits.load() == 6);
  CHECK(stub.peak_in_flight.load() <= 2);
}

TEST_CASE("judge training lowers the judgment NLL and validates its inputs") {
  const auto& task = judge::task_by_name("suffix-tag");
  auto triplets = judge::synth_triplets(task, 21, 24, 0.5);
  corpus::TemplateSet t = corpus::default_templates();

  judge::JudgeTrainConfig cfg;
  cfg.epochs = 2;
  cfg.opt.lr = 0.01;
  std::vector<double> losses;
  auto trained = judge::train_judge(tiny_judge_model(31), triplets, t, cfg, &losses);
  REQUIRE(losses.size() == 2 * triplets.size());
  double first = 0.0, second = 0.0;
  for (size_t i = 0; i < triplets.size(); ++i) {
    first += losses[i];
    second += losses[triplets.size() + i];
  }
  CHECK(second < first);

  CHECK_THROWS_AS(judge::train_judge(tiny_judge_model(31), {}, t, cfg), DataError);
  judge::JudgeTrainConfig zero = cfg;
  zero.epochs = 0;
  CHECK_THROWS_AS(judge::train_judge(tiny_judge_model(31), triplets, t, zero), UsageError);

  // Deterministic: same base seed and data, bit-identical parameters.
  auto again = judge::train_judge(tiny_judge_model(31), triplets, t, cfg);
  CHECK(trained.net.params() == again.net.params());
}

TEST_CASE("trained judge verdicts classify by keyword and fall back when blank") {
  corpus::TemplateSet t = corpus::default_templates();
  nn::LanguageModel model = tiny_judge_model(31);

  nn::GenerationConfig silent;
  silent.max_new_tokens = 0;  // forces empty decode
  auto blank = judge::trained_judge(model, "Say hi.", "hi", t, silent);
  CHECK(blank.judgment == judge::kTrainedJudgeFallback);
  CHECK(blank.polarity == corpus::Polarity::NEGATIVE);
  CHECK(blank.provenance == judge::Provenance::TRAINED);

  nn::GenerationConfig gen;
  gen.max_new_tokens = 24;
  auto a = judge::trained_judge(model, "Say hi.", "hi", t, gen);
  auto b = judge::trained_judge(model, "Say hi.", "hi", t, gen);
  CHECK(a.judgment == b.judgment);
  CHECK(a.polarity == corpus::classify_polarity(a.judgment));
}
