#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "cutkit/config.hpp"
#include "cutkit/error.hpp"
#include "cutkit/eval.hpp"
#include "cutkit/loop.hpp"
#include "cutkit/rng.hpp"

using namespace cutkit;
namespace fs = std::filesystem;

namespace {

nn::LanguageModel tiny_model(uint64_t seed) {
  nn::ModelConfig mc;
  mc.d_model = 8;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 16;
  mc.max_seq = 384;
  return nn::make_language_model(mc, nn::Tokenizer::byte_level(), seed);
}

loop::TrainConfig tiny_train(int epochs) {
  loop::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.seed = 9;
  cfg.opt.lr = 0.01;
  cfg.templates = corpus::default_templates();
  cfg.gen.max_new_tokens = 12;
  return cfg;
}

std::vector<corpus::JudgmentTriplet> mixed_triplets(uint64_t seed, size_t n) {
  return judge::synth_triplets(judge::task_by_name("suffix-tag"), seed, n, 0.5);
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

loop::LoopConfig tiny_loop(int iterations) {
  loop::LoopConfig cfg;
  cfg.iterations = iterations;
  cfg.instructions_per_iteration = 6;
  cfg.epochs_per_iteration = 1;
  cfg.seed = 21;
  cfg.eval_n = 3;
  cfg.train = tiny_train(1);
  cfg.corpus.align_p_ratio = 1.0;  // keep every positive at desk scale
  return cfg;
}

loop::OnlineContext oracle_ctx(const judge::SyntheticTask& task) {
  loop::OnlineContext ctx;
  ctx.source = loop::task_instruction_source(task);
  ctx.judge_fn = [&task](std::string_view x, std::string_view y) {
    return judge::oracle_judge(task, x, y);
  };
  ctx.eval_task = &task;
  return ctx;
}

}  // namespace

TEST_CASE("offline_align is deterministic and guards its inputs") {
  auto triplets = mixed_triplets(31, 8);
  auto examples = corpus::build_alignment_set(triplets);
  loop::TrainConfig cfg = tiny_train(2);

  std::vector<loop::StepLog> logs;
  std::vector<double> means;
  auto m1 = loop::offline_align(tiny_model(1), examples,  cfg,
                                [&](const loop::StepLog& l) { logs.push_back(l); }, &means);
  auto m2 = loop::offline_align(tiny_model(1), examples, cfg);
  CHECK(m1.net.params() == m2.net.params());

  size_t targets = 0;
  for (const auto& e : examples) {
    if (e.category != corpus::Category::MISALIGN) ++targets;
  }
  size_t per_epoch = (targets + cfg.batch_size - 1) / cfg.batch_size;
  REQUIRE(means.size() == 2);
  REQUIRE(logs.size() == 2 * per_epoch);
  for (size_t i = 0; i < logs.size(); ++i) {
    CHECK(logs[i].step == static_cast<int64_t>(i));
    CHECK(std::isfinite(logs[i].total));
    CHECK(logs[i].tokens_in_U <= logs[i].tokens_total);
    CHECK(logs[i].total ==
          doctest::Approx(logs[i].l1_mle_part + logs[i].l1_ut_part + logs[i].l2_part)
              .epsilon(1e-12));
  }

  auto before = tiny_model(1);
  auto frozen = loop::offline_align(before, examples, tiny_train(0));
  CHECK(frozen.net.params() == before.net.params());

  CHECK_THROWS_AS(loop::offline_align(tiny_model(1), {}, cfg), DataError);
  loop::TrainConfig neg = cfg;
  neg.epochs = -1;
  CHECK_THROWS_AS(loop::offline_align(tiny_model(1), examples, neg), UsageError);

  loop::TrainConfig fwd = cfg;
  fwd.objective = objectives::ObjectiveKind::FORWARD_PREDICTION;
  CHECK_THROWS_AS(loop::offline_align(tiny_model(1), examples, fwd), UsageError);

  loop::TrainConfig mle = cfg;
  mle.objective = objectives::ObjectiveKind::MLE;
  auto m3 = loop::offline_align(tiny_model(1), examples, mle);
  CHECK(m3.net.params() != tiny_model(1).net.params());
}

TEST_CASE("pairs_from_triplets keeps strict preferences grouped by instruction") {
  std::vector<corpus::JudgmentTriplet> trips = {
      {"a1", "do A", "good-a1", "Perfect.", corpus::Polarity::POSITIVE,
       corpus::Source::OFFLINE_DATASET},
      {"b1", "do B", "good-b", "Perfect.", corpus::Polarity::POSITIVE,
       corpus::Source::OFFLINE_DATASET},
      {"a2", "do A", "bad-a1", "Too short.", corpus::Polarity::NEGATIVE,
       corpus::Source::OFFLINE_DATASET},
      {"a3", "do A", "good-a2", "Perfect.", corpus::Polarity::POSITIVE,
       corpus::Source::OFFLINE_DATASET},
      {"a4", "do A", "bad-a2", "Too long.", corpus::Polarity::NEGATIVE,
       corpus::Source::OFFLINE_DATASET},
  };
  auto pairs = loop::pairs_from_triplets(trips);
  // "do A": two positives x two negatives; "do B" has one response, no pairs.
  REQUIRE(pairs.size() == 4);
  for (const auto& p : pairs) {
    CHECK(p.instruction == "do A");
    CHECK(p.chosen.find("good") == 0);
    CHECK(p.rejected.find("bad") == 0);
  }
  CHECK(loop::pairs_from_triplets({}).empty());
}

TEST_CASE("dpo training starts from a ln 2 loss against its frozen reference") {
  std::vector<loop::DpoPair> pairs = {{"Say hi.", "hi", "HI"}};
  loop::TrainConfig cfg = tiny_train(1);
  cfg.batch_size = 1;

  std::vector<loop::StepLog> logs;
  auto trained = loop::train_dpo_pairs(tiny_model(6), pairs, cfg,
                                       [&](const loop::StepLog& l) { logs.push_back(l); });
  REQUIRE(logs.size() == 1);
  CHECK(logs[0].total == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(trained.net.params() != tiny_model(6).net.params());

  auto again = loop::train_dpo_pairs(tiny_model(6), pairs, cfg);
  CHECK(trained.net.params() == again.net.params());

  CHECK_THROWS_AS(loop::train_dpo_pairs(tiny_model(6), {}, cfg), DataError);
}

TEST_CASE("train_on_triplets dispatches every objective") {
  auto triplets = mixed_triplets(77, 6);
  loop::CorpusOptions copts;
  copts.align_p_ratio = 1.0;
  auto base = tiny_model(2);

  using objectives::ObjectiveKind;
  for (auto kind : {ObjectiveKind::CUT, ObjectiveKind::MLE, ObjectiveKind::FORWARD_PREDICTION,
                    ObjectiveKind::HINDSIGHT, ObjectiveKind::ILF_MLE, ObjectiveKind::ILF_DPO}) {
    CAPTURE(objectives::to_string(kind));
    loop::TrainConfig cfg = tiny_train(1);
    cfg.objective = kind;
    std::vector<double> means;
    auto out = loop::train_on_triplets(base, triplets, cfg, copts, {}, &means);
    CHECK(out.net.params() != base.net.params());
    REQUIRE(means.size() == 1);
    CHECK(std::isfinite(means[0]));
  }

  // Determinism of the full CUT path from raw triplets.
  loop::TrainConfig cfg = tiny_train(1);
  auto a = loop::train_on_triplets(base, triplets, cfg, copts);
  auto b = loop::train_on_triplets(base, triplets, cfg, copts);
  CHECK(a.net.params() == b.net.params());

  // Degenerate corpora fail loudly per objective.
  auto all_bad = judge::synth_triplets(judge::task_by_name("suffix-tag"), 5, 4, 1.0);
  loop::TrainConfig mle = tiny_train(1);
  mle.objective = ObjectiveKind::MLE;
  CHECK_THROWS_AS(loop::train_on_triplets(base, all_bad, mle, copts), DataError);

  auto all_good = judge::synth_triplets(judge::task_by_name("suffix-tag"), 5, 4, 0.0);
  loop::TrainConfig dpo = tiny_train(1);
  dpo.objective = ObjectiveKind::ILF_DPO;
  CHECK_THROWS_AS(loop::train_on_triplets(base, all_good, dpo, copts), DataError);

  CHECK_THROWS_AS(loop::train_on_triplets(base, {}, cfg, copts), DataError);
}

TEST_CASE("iteration reports round-trip through JSON") {
  loop::IterationReport r;
  r.iteration = 2;
  r.instruction_count = 10;
  r.positives = 4;
  r.negatives = 5;
  r.dropped = 1;
  r.align_p = 1;
  r.align_n = 5;
  r.misalign = 5;
  r.mean_epoch_loss = {3.5, 2.25};
  r.eval_before = {{"compliance", 0.25}};
  r.eval_after = {{"compliance", 0.5}};

  auto back = loop::report_from_json(loop::report_to_json(r));
  CHECK(back.iteration == r.iteration);
  CHECK(back.instruction_count == r.instruction_count);
  CHECK(back.positives == r.positives);
  CHECK(back.negatives == r.negatives);
  CHECK(back.dropped == r.dropped);
  CHECK(back.align_p == r.align_p);
  CHECK(back.align_n == r.align_n);
  CHECK(back.misalign == r.misalign);
  CHECK(back.mean_epoch_loss == r.mean_epoch_loss);
  CHECK(back.eval_before == r.eval_before);
  CHECK(back.eval_after == r.eval_after);

  CHECK_THROWS_AS(loop::report_from_json("{"), DataError);
  CHECK_THROWS_AS(loop::report_from_json("{\"iteration\": 1}"), DataError);
}

TEST_CASE("instruction sources respect the used set") {
  const auto& task = judge::task_by_name("lowercase-echo");
  auto src = loop::task_instruction_source(task);
  std::set<std::string> used;
  auto first = src(5, 42, used);
  CHECK(first.size() == 5);
  CHECK(src(5, 42, used) == first);  // source itself does not record usage

  used.insert(first.begin(), first.end());
  auto second = src(5, 42, used);
  for (const auto& x : second) CHECK(used.count(x) == 0);

  auto pool = loop::pool_instruction_source({"i1", "i2", "i3", "i4"});
  std::set<std::string> skip = {"i2"};
  auto got = pool(2, 0, skip);
  CHECK(got == std::vector<std::string>{"i1", "i3"});
  CHECK_THROWS_AS(pool(4, 0, skip), RuntimeError);
}

TEST_CASE("one online iteration collects, judges, trains, and reports") {
  const auto& task = judge::task_by_name("lowercase-echo");
  auto cfg = tiny_loop(1);
  auto ctx = oracle_ctx(task);

  std::vector<loop::VerdictRecord> verdicts;
  std::vector<corpus::JudgmentTriplet> triplets;
  auto [model, report] = loop::online_iteration(
      tiny_model(3), ctx, cfg, 1, {},
      [&](const loop::VerdictRecord& v) { verdicts.push_back(v); }, {}, &triplets);

  CHECK(report.iteration == 1);
  CHECK(report.instruction_count == 6);
  CHECK(report.positives + report.negatives == 6);
  CHECK(report.dropped == 0);
  CHECK(report.align_n == report.negatives);
  CHECK(report.misalign == report.negatives);
  CHECK(report.align_p == report.positives);  // ratio 1.0 keeps them all
  REQUIRE(report.mean_epoch_loss.size() == 1);
  CHECK(report.eval_before.count("compliance") == 1);
  CHECK(report.eval_after.count("compliance") == 1);

  REQUIRE(verdicts.size() == 6);
  for (const auto& v : verdicts) {
    CHECK(v.provenance == judge::Provenance::ORACLE);
    CHECK(v.latency_ms >= 0.0);
    CHECK(!v.instruction_id.empty());
  }
  REQUIRE(triplets.size() == 6);
  for (const auto& t : triplets) {
    CHECK(t.source == corpus::Source::MODEL_GENERATED);
    corpus::validate_triplet(t);
    CHECK(ctx.used.count(t.instruction) == 1);
  }
  // Eval instructions are reserved in `used` beyond the six collected ones.
  CHECK(ctx.used.size() == 6 + cfg.eval_n);

  // A fresh context replays to the identical report.
  auto ctx2 = oracle_ctx(task);
  auto [m2, r2] = loop::online_iteration(tiny_model(3), ctx2, cfg, 1);
  CHECK(loop::report_to_json(r2) == loop::report_to_json(report));
  CHECK(m2.net.params() == model.net.params());
}

TEST_CASE("judge failures drop items and total failure aborts") {
  const auto& task = judge::task_by_name("lowercase-echo");
  auto cfg = tiny_loop(1);

  auto ctx = oracle_ctx(task);
  int calls = 0;
  ctx.judge_fn = [&task, &calls](std::string_view x, std::string_view y) {
    if (++calls == 3) throw RuntimeError("judge outage");
    return judge::oracle_judge(task, x, y);
  };
  std::vector<std::pair<std::string, std::string>> drops;
  auto [model, report] = loop::online_iteration(
      tiny_model(3), ctx, cfg, 1, {}, {},
      [&](std::string_view id, std::string_view err) { drops.emplace_back(id, err); });
  CHECK(report.dropped == 1);
  CHECK(report.positives + report.negatives == 5);
  REQUIRE(drops.size() == 1);
  CHECK(drops[0].second.find("judge outage") != std::string::npos);

  auto dead = oracle_ctx(task);
  dead.judge_fn = [](std::string_view, std::string_view) -> judge::JudgeVerdict {
    throw RuntimeError("always down");
  };
  CHECK_THROWS_AS(loop::online_iteration(tiny_model(3), dead, cfg, 1), RuntimeError);
}

TEST_CASE("run_online lays out the run directory and resumes bit-exact") {
  const auto& task = judge::task_by_name("lowercase-echo");

  TempDir full_dir("cutkit_loop_full");
  std::string snapshot = "{\"note\": \"verbatim snapshot\"}";
  auto full = loop::run_online(tiny_model(3), oracle_ctx(task), tiny_loop(2), full_dir.path,
                               &snapshot);
  REQUIRE(full.reports.size() == 2);

  {
    std::ifstream in(full_dir.path / "config.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text == snapshot);
  }
  for (int k = 1; k <= 2; ++k) {
    char name[16];
    std::snprintf(name, sizeof(name), "iter_%03d", k);
    fs::path dir = full_dir.path / name;
    for (const char* f :
         {"triplets.jsonl", "report.json", "checkpoint.ckpt", "training_log.jsonl",
          "verdicts.jsonl", "drops.log"}) {
      CHECK(fs::exists(dir / f));
    }
  }

  // Interrupted run: one iteration now, rerun extends to two.
  TempDir resumed_dir("cutkit_loop_resume");
  auto part = loop::run_online(tiny_model(3), oracle_ctx(task), tiny_loop(1), resumed_dir.path);
  REQUIRE(part.reports.size() == 1);
  CHECK(loop::report_to_json(part.reports[0]) == loop::report_to_json(full.reports[0]));

  auto resumed = loop::run_online(tiny_model(3), oracle_ctx(task), tiny_loop(2), resumed_dir.path);
  REQUIRE(resumed.reports.size() == 2);
  for (int k = 0; k < 2; ++k) {
    CHECK(loop::report_to_json(resumed.reports[k]) == loop::report_to_json(full.reports[k]));
  }
  CHECK(resumed.model.net.params() == full.model.net.params());

  // A completed run is a no-op returning the stored reports and weights.
  auto replay = loop::run_online(tiny_model(3), oracle_ctx(task), tiny_loop(2), resumed_dir.path);
  CHECK(replay.reports.size() == 2);
  CHECK(replay.model.net.params() == full.model.net.params());
}

TEST_CASE("cold starts retrain from the initial weights every iteration") {
  const auto& task = judge::task_by_name("lowercase-echo");
  TempDir dir("cutkit_loop_cold");
  auto cfg = tiny_loop(2);
  cfg.warm_start = false;
  auto run = loop::run_online(tiny_model(3), oracle_ctx(task), cfg, dir.path);
  REQUIRE(run.reports.size() == 2);
  // Same base weights and same eval instruction stream on both iterations.
  CHECK(run.reports[1].eval_before.at("compliance") ==
        run.reports[0].eval_before.at("compliance"));
}

TEST_CASE("run config JSON rejects unknown keys and round-trips") {
  auto defaults = config::config_from_json("{}");
  CHECK(defaults.objective == objectives::ObjectiveKind::CUT);
  CHECK(defaults.obj.lambda == 1.1);
  CHECK(defaults.instructions_per_iteration == 100);
  CHECK(defaults.eval_n == 50);

  std::string text = config::config_to_json(defaults);
  CHECK(config::config_to_json(config::config_from_json(text)) == text);

  CHECK_THROWS_WITH_AS(config::config_from_json("{\"loss\": {\"lamda\": 2}}"),
                       doctest::Contains("loss.lamda"), UsageError);
  CHECK_THROWS_AS(config::config_from_json("{\"optimiser\": {}}"), UsageError);
  CHECK_THROWS_AS(config::config_from_json("not json"), UsageError);

  auto tuned = config::config_from_json(
      "{\"objective\": \"hindsight\", \"train\": {\"epochs\": 7},"
      " \"loop\": {\"iterations\": 5, \"eval_n\": 9},"
      " \"loss\": {\"lambda\": 1.5, \"ablations\": {\"disable_l1\": true}}}");
  CHECK(tuned.objective == objectives::ObjectiveKind::HINDSIGHT);
  CHECK(tuned.epochs == 7);
  CHECK(tuned.iterations == 5);
  CHECK(tuned.eval_n == 9);
  CHECK(tuned.obj.lambda == 1.5);
  CHECK(tuned.obj.ablations.disable_l1);
  CHECK(!tuned.obj.ablations.disable_l2_align_p);

  CHECK_THROWS_AS(config::config_from_json("{\"loss\": {\"lambda\": 0}}"), UsageError);
  CHECK_THROWS_AS(config::config_from_json("{\"corpus\": {\"align_p_ratio\": 1.5}}"), UsageError);
  CHECK_THROWS_AS(config::config_from_json("{\"generation\": {\"temperature\": -1}}"), UsageError);
  CHECK_THROWS_AS(config::config_from_json("{\"train\": {\"batch_size\": 0}}"), UsageError);
}

TEST_CASE("config files and template files load and validate") {
  TempDir dir("cutkit_loop_config");
  auto cfg = config::config_from_json("{}");
  cfg.epochs = 5;
  config::save_config_file(dir.path / "run.json", cfg);
  auto back = config::load_config_file(dir.path / "run.json");
  CHECK(back.epochs == 5);
  CHECK(config::config_to_json(back) == config::config_to_json(cfg));
  CHECK_THROWS_AS(config::load_config_file(dir.path / "missing.json"), UsageError);

  CHECK(config::templates_for(cfg).train == corpus::default_templates().train);

  {
    std::ofstream out(dir.path / "templates.json");
    out << "{\"train\": \"{instruction}|{judgment}|{response}\","
           " \"inference\": \"{instruction}|{response}\","
           " \"judge\": \"{instruction}|{response}|{judgment}\"}";
  }
  cfg.templates_path = (dir.path / "templates.json").string();
  CHECK(config::templates_for(cfg).train == "{instruction}|{judgment}|{response}");

  {
    std::ofstream out(dir.path / "bad.json");
    out << "{\"train\": \"{instruction}|{response}|{judgment}\","
           " \"inference\": \"{instruction}|{response}\","
           " \"judge\": \"{instruction}|{response}|{judgment}\"}";
  }
  cfg.templates_path = (dir.path / "bad.json").string();
  CHECK_THROWS_AS(config::templates_for(cfg), UsageError);  // response must be terminal

  cfg.templates_path = (dir.path / "nowhere.json").string();
  CHECK_THROWS_AS(config::templates_for(cfg), UsageError);
}

TEST_CASE("config assembles the loop and train views") {
  auto cfg = config::config_from_json(
      "{\"objective\": \"mle\", \"train\": {\"epochs\": 4, \"batch_size\": 2, \"seed\": 77},"
      " \"loop\": {\"iterations\": 2, \"instructions_per_iteration\": 11,"
      " \"epochs_per_iteration\": 6, \"warm_start\": false, \"eval_n\": 13},"
      " \"corpus\": {\"align_p_ratio\": 0.5, \"seed\": 3}}");
  auto train = config::train_config(cfg);
  CHECK(train.objective == objectives::ObjectiveKind::MLE);
  CHECK(train.epochs == 4);
  CHECK(train.batch_size == 2);
  CHECK(train.seed == 77);

  auto lp = config::loop_config(cfg);
  CHECK(lp.iterations == 2);
  CHECK(lp.instructions_per_iteration == 11);
  CHECK(lp.epochs_per_iteration == 6);
  CHECK(!lp.warm_start);
  CHECK(lp.eval_n == 13);
  CHECK(lp.corpus.align_p_ratio == 0.5);
  CHECK(lp.corpus.seed == 3);
  CHECK(lp.train.objective == objectives::ObjectiveKind::MLE);
}

#ifdef CUTKIT_CLI_PATH
namespace {

int run_cli(const std::string& args) {
  std::string cmd = std::string(CUTKIT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("the command line maps error classes onto exit codes") {
  TempDir dir("cutkit_loop_cli");
  auto p = [&](const char* name) { return (dir.path / name).string(); };

  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("") == 1);            // a subcommand is required
  CHECK(run_cli("no-such-command") == 1);
  CHECK(run_cli("build-data") == 1);  // missing required options
  CHECK(run_cli("train --data " + p("absent.jsonl") + " --out " + p("run")) == 2);

  {
    std::ofstream out(dir.path / "triplets.jsonl");
    out << "{\"id\": \"p1\", \"instruction\": \"Say hi.\", \"response\": \"hi\","
           " \"judgment\": \"Perfect.\"}\n"
           "{\"id\": \"n1\", \"instruction\": \"Say ok.\", \"response\": \"OK\","
           " \"judgment\": \"Use lowercase.\"}\n";
  }
  {
    std::ofstream out(dir.path / "bad_config.json");
    out << "{\"loss\": {\"lamda\": 2}}";
  }
  CHECK(run_cli("train --data " + p("triplets.jsonl") + " --config " + p("bad_config.json") +
                " --out " + p("run")) == 1);

  {
    std::ofstream out(dir.path / "broken.jsonl");
    out << "{\"id\": \"t1\"\n";
  }
  CHECK(run_cli("build-data --triplets " + p("broken.jsonl") + " --out " + p("b.jsonl")) == 2);

  CHECK(run_cli("build-data --triplets " + p("triplets.jsonl") + " --out " + p("examples.jsonl") +
                " --ratio 1.0 --seed 1") == 0);
  CHECK(fs::exists(dir.path / "examples.jsonl"));
  CHECK(fs::exists(dir.path / "examples.jsonl.manifest.json"));

  {
    std::ofstream out(dir.path / "tiny.json");
    out << "{\"model\": {\"d_model\": 8, \"n_layers\": 1, \"n_heads\": 2, \"d_ff\": 16,"
           " \"max_seq\": 256}, \"train\": {\"epochs\": 1, \"batch_size\": 4}}";
  }
  CHECK(run_cli("train --data " + p("triplets.jsonl") + " --config " + p("tiny.json") +
                " --out " + p("run")) == 0);
  CHECK(fs::exists(dir.path / "run" / "checkpoint.ckpt"));
  CHECK(fs::exists(dir.path / "run" / "training_log.jsonl"));
}
#endif
