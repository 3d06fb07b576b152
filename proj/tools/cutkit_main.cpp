// cutkit: build alignment data from judgment triplets, train with CUT or a
// baseline objective, run the online loop, train and query judges, evaluate,
// and inspect per-token probability contrasts.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cutkit/config.hpp"
#include "cutkit/contrast.hpp"
#include "cutkit/error.hpp"
#include "cutkit/eval.hpp"
#include "cutkit/judge.hpp"
#include "cutkit/jsonl.hpp"
#include "cutkit/loop.hpp"

namespace {

using namespace cutkit;
namespace fs = std::filesystem;

// Flag values that override the config file when the user passed them.
struct Overrides {
  std::optional<std::string> objective;
  std::optional<int> epochs;
  std::optional<uint64_t> seed;
  std::optional<int> iterations;
  std::optional<bool> cold_start;
};

config::RunConfig effective_config(const std::string& config_path, const Overrides& o) {
  config::RunConfig cfg =
      config_path.empty() ? config::RunConfig{} : config::load_config_file(config_path);
  if (o.objective) cfg.objective = objectives::objective_from_string(*o.objective);
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.seed) cfg.seed = *o.seed;
  if (o.iterations) cfg.iterations = *o.iterations;
  if (o.cold_start && *o.cold_start) cfg.warm_start = false;
  config::validate(cfg);
  return cfg;
}

nn::LanguageModel model_from(const std::string& base_ckpt, const config::RunConfig& cfg) {
  if (!base_ckpt.empty()) return nn::load_checkpoint(base_ckpt);
  return nn::make_language_model(cfg.model, nn::Tokenizer::byte_level(), cfg.model_seed);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write " + path.string());
  return out;
}

loop::StepSink jsonl_step_sink(std::ofstream& out) {
  return [&out](const loop::StepLog& s) {
    nlohmann::json j;
    j["step"] = s.step;
    j["total"] = s.total;
    j["l1_mle_part"] = s.l1_mle_part;
    j["l1_ut_part"] = s.l1_ut_part;
    j["l2_part"] = s.l2_part;
    j["tokens_in_U"] = s.tokens_in_U;
    j["tokens_total"] = s.tokens_total;
    out << j.dump() << "\n";
  };
}

// ---------------------------------------------------------------- build-data

struct BuildDataArgs {
  std::string triplets, out;
  double ratio = 1.0;
  uint64_t seed = 0;
  std::string fake_judgment = std::string(corpus::kFakePositiveJudgment);
  std::string keyword = std::string(corpus::kPositiveKeyword);
};

void cmd_build_data(const BuildDataArgs& a) {
  auto triplets = corpus::load_triplets(a.triplets, a.keyword);
  auto examples = corpus::build_alignment_set(triplets, a.fake_judgment, a.keyword);
  examples = corpus::downsample_align_p(examples, a.ratio, a.seed);
  corpus::save_examples(a.out, examples);
  corpus::DatasetManifest m = corpus::manifest_of(examples, a.ratio, a.seed);
  corpus::save_manifest(fs::path(a.out).string() + ".manifest.json", m);
  std::cout << "wrote " << examples.size() << " examples (" << m.align_p << " ALIGN_P, "
            << m.align_n << " ALIGN_N, " << m.misalign << " MISALIGN) to " << a.out << "\n";
}

// --------------------------------------------------------------------- train

struct TrainArgs {
  std::string data, config_path, out, base;
  Overrides over;
};

// The first record decides the schema: alignment examples carry "category",
// judgment triplets carry "polarity".
bool data_is_examples(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open data file " + path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    try {
      return nlohmann::json::parse(line).contains("category");
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + " line 1: " + e.what());
    }
  }
  throw DataError(path + " is empty");
}

void cmd_train(const TrainArgs& a) {
  config::RunConfig cfg = effective_config(a.config_path, a.over);
  loop::TrainConfig tcfg = config::train_config(cfg);
  nn::LanguageModel model = model_from(a.base, cfg);

  fs::create_directories(a.out);
  config::save_config_file(fs::path(a.out) / "config.json", cfg);
  std::ofstream log = open_out(fs::path(a.out) / "training_log.jsonl");
  loop::StepSink sink = jsonl_step_sink(log);

  std::vector<double> epoch_means;
  if (data_is_examples(a.data)) {
    auto examples = corpus::load_examples(a.data, cfg.corpus.positive_keyword);
    model = loop::offline_align(std::move(model), examples, tcfg, sink, &epoch_means);
  } else {
    auto triplets = corpus::load_triplets(a.data, cfg.corpus.positive_keyword);
    model = loop::train_on_triplets(std::move(model), triplets, tcfg, cfg.corpus, sink,
                                    &epoch_means);
  }

  nn::save_checkpoint(fs::path(a.out) / "checkpoint.ckpt", model);
  std::cout << "objective " << objectives::to_string(cfg.objective) << ", epoch losses:";
  for (double m : epoch_means) std::cout << " " << std::setprecision(6) << m;
  std::cout << "\ncheckpoint: " << (fs::path(a.out) / "checkpoint.ckpt").string() << "\n";
}

// -------------------------------------------------------------------- online

struct OnlineArgs {
  std::string base, task, instructions, judge_spec = "ORACLE", config_path, out;
  Overrides over;
};

std::vector<std::string> load_instruction_pool(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open instruction file " + path);
  std::vector<std::string> pool;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) pool.push_back(line);
  }
  if (pool.empty()) throw DataError("instruction file " + path + " is empty");
  return pool;
}

void cmd_online(const OnlineArgs& a) {
  config::RunConfig cfg = effective_config(a.config_path, a.over);
  loop::LoopConfig lcfg = config::loop_config(cfg);

  if (a.task.empty() && a.instructions.empty()) {
    throw UsageError("online needs --task or --instructions");
  }
  const judge::SyntheticTask* task = a.task.empty() ? nullptr : &judge::task_by_name(a.task);

  loop::OnlineContext ctx;
  ctx.source = a.instructions.empty()
                   ? loop::task_instruction_source(*task)
                   : loop::pool_instruction_source(load_instruction_pool(a.instructions));
  ctx.eval_task = task;

  // The client objects live in shared_ptrs so the judge closure owns them.
  std::string spec = a.judge_spec;
  for (char& c : spec) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (spec == "oracle") {
    if (!task) throw UsageError("the oracle judge needs --task");
    ctx.judge_fn = [task](std::string_view x, std::string_view y) {
      return judge::oracle_judge(*task, x, y);
    };
  } else if (spec == "external") {
    auto client = std::make_shared<judge::ExternalJudge>(judge::external_config_from_env());
    ctx.judge_fn = [client](std::string_view x, std::string_view y) {
      return client->judge(x, y);
    };
  } else if (spec.starts_with("trained:")) {
    auto jm = std::make_shared<nn::LanguageModel>(nn::load_checkpoint(spec.substr(8)));
    auto templates = lcfg.train.templates;
    auto gen = lcfg.train.gen;
    ctx.judge_fn = [jm, templates, gen](std::string_view x, std::string_view y) {
      return judge::trained_judge(*jm, x, y, templates, gen);
    };
  } else {
    throw UsageError("unknown judge '" + a.judge_spec + "' (oracle, external, trained:CKPT)");
  }

  nn::LanguageModel model = nn::load_checkpoint(a.base);
  std::string snapshot = config::config_to_json(cfg);
  loop::RunResult result =
      loop::run_online(std::move(model), std::move(ctx), lcfg, a.out, &snapshot);

  for (const auto& r : result.reports) {
    std::cout << "iteration " << r.iteration << ": " << r.positives << " positive, "
              << r.negatives << " negative, " << r.dropped << " dropped";
    if (auto it = r.eval_after.find("compliance"); it != r.eval_after.end()) {
      double before = r.eval_before.count("compliance") ? r.eval_before.at("compliance") : 0.0;
      std::cout << ", compliance " << std::setprecision(4) << before << " -> " << it->second;
    }
    std::cout << "\n";
  }
}

// --------------------------------------------------------------- judge-train

struct JudgeTrainArgs {
  std::string triplets, base, out, config_path;
  Overrides over;
};

void cmd_judge_train(const JudgeTrainArgs& a) {
  config::RunConfig cfg = effective_config(a.config_path, a.over);
  auto triplets = corpus::load_triplets(a.triplets, cfg.corpus.positive_keyword);
  nn::LanguageModel base = model_from(a.base, cfg);

  judge::JudgeTrainConfig jcfg;
  jcfg.epochs = a.over.epochs ? *a.over.epochs : cfg.epochs;
  jcfg.opt = cfg.opt;
  jcfg.seed = cfg.seed;

  fs::create_directories(a.out);
  config::save_config_file(fs::path(a.out) / "config.json", cfg);
  std::vector<double> losses;
  nn::LanguageModel judge_model =
      judge::train_judge(std::move(base), triplets, config::templates_for(cfg), jcfg, &losses);
  nn::save_checkpoint(fs::path(a.out) / "judge.ckpt", judge_model);

  std::ofstream log = open_out(fs::path(a.out) / "judge_train_log.jsonl");
  for (size_t i = 0; i < losses.size(); ++i) {
    nlohmann::json j;
    j["step"] = i;
    j["loss"] = losses[i];
    log << j.dump() << "\n";
  }
  std::cout << "judge trained on " << triplets.size() << " triplets, checkpoint: "
            << (fs::path(a.out) / "judge.ckpt").string() << "\n";
}

// ---------------------------------------------------------------------- eval

struct EvalArgs {
  std::string model, opponent, metric, task, judge_spec = "oracle", out, config_path;
  size_t n = 0;  // 0 = config eval_n
  std::optional<uint64_t> seed;
};

void cmd_eval(const EvalArgs& a) {
  config::RunConfig cfg = effective_config(a.config_path, {});
  corpus::TemplateSet templates = config::templates_for(cfg);
  size_t n = a.n ? a.n : cfg.eval_n;
  uint64_t seed = a.seed ? *a.seed : cfg.seed;
  if (n == 0) throw UsageError("sample count must be positive (--n)");

  nn::LanguageModel model = nn::load_checkpoint(a.model);
  eval::EvalReport report;
  report.metric = a.metric;
  report.sample_count = n;

  if (a.metric == "compliance") {
    if (a.task.empty()) throw UsageError("compliance needs --task");
    const auto& task = judge::task_by_name(a.task);
    std::vector<eval::ComplianceRecord> records;
    report.score = eval::compliance_rate(model, task, n, seed, templates, cfg.gen, &records);
    for (const auto& r : records) {
      nlohmann::json j;
      j["instruction"] = r.instruction;
      j["response"] = r.response;
      j["pass"] = r.pass;
      report.record_lines.push_back(jsonl::dump_lossy(j));
    }
  } else if (a.metric == "winrate") {
    if (a.opponent.empty()) throw UsageError("winrate needs --opponent");
    if (a.task.empty()) throw UsageError("winrate needs --task for instructions");
    const auto& task = judge::task_by_name(a.task);
    nn::LanguageModel opponent = nn::load_checkpoint(a.opponent);
    auto instructions = judge::sample_instructions(task, seed, n);
    eval::PairwiseJudge pj;
    std::shared_ptr<judge::ExternalJudge> client;
    if (a.judge_spec == "oracle") {
      pj = eval::oracle_pairwise(task);
    } else if (a.judge_spec == "external") {
      client = std::make_shared<judge::ExternalJudge>(judge::external_config_from_env());
      pj = eval::external_pairwise(*client);
    } else {
      throw UsageError("winrate judge must be oracle or external");
    }
    std::vector<eval::WinRecord> records;
    report.score = eval::win_rate(model, opponent, instructions, pj, templates, cfg.gen,
                                  &records);
    for (const auto& r : records) {
      nlohmann::json j;
      j["instruction"] = r.instruction;
      j["response_a"] = r.response_a;
      j["response_b"] = r.response_b;
      j["score_a"] = r.score_a;
      report.record_lines.push_back(jsonl::dump_lossy(j));
    }
  } else if (a.metric == "rouge") {
    if (a.task.empty()) throw UsageError("rouge needs --task for references");
    const auto& task = judge::task_by_name(a.task);
    auto instructions = judge::sample_instructions(task, seed, n);
    double sum_l = 0.0;
    for (const std::string& x : instructions) {
      std::string prompt = corpus::prompt_prefix(templates.inference,
                                                 {{"instruction", x}, {"response", ""}},
                                                 "response");
      std::string response = nn::generate(model, prompt, cfg.gen);
      std::vector<std::string> references = {task.canonical(x)};
      eval::RougeScores s = eval::rouge(response, references);
      sum_l += s.rougeL;
      nlohmann::json j;
      j["instruction"] = x;
      j["response"] = response;
      j["reference"] = references[0];
      j["rouge1"] = s.rouge1;
      j["rouge2"] = s.rouge2;
      j["rougeL"] = s.rougeL;
      j["rougeLsum"] = s.rougeLsum;
      report.record_lines.push_back(jsonl::dump_lossy(j));
    }
    report.score = sum_l / static_cast<double>(instructions.size());
  } else {
    throw UsageError("unknown metric '" + a.metric + "' (compliance, winrate, rouge)");
  }

  std::cout << report.metric << " " << std::setprecision(6) << report.score << " over "
            << report.sample_count << " samples\n";
  if (!a.out.empty()) {
    eval::save_report(a.out, report);
    config::save_config_file(a.out + ".config.json", cfg);
  }
}

// ---------------------------------------------------------- inspect-contrast

std::string printable_token(char c) {
  auto b = static_cast<unsigned char>(c);
  if (b >= 0x20 && b < 0x7f) return std::string(1, c);
  if (c == '\n') return "\\n";
  char buf[8];
  std::snprintf(buf, sizeof(buf), "<0x%02X>", b);
  return buf;
}

struct InspectArgs {
  std::string model, data, example_id, config_path;
};

void cmd_inspect_contrast(const InspectArgs& a) {
  config::RunConfig cfg = effective_config(a.config_path, {});
  auto examples = corpus::load_examples(a.data, cfg.corpus.positive_keyword);
  auto index = corpus::index_by_id(examples);
  auto it = index.find(a.example_id);
  if (it == index.end()) throw DataError("no example with id '" + a.example_id + "'");

  // Accept either half of the pair and find the other.
  const corpus::AlignmentExample* align_n = nullptr;
  const corpus::AlignmentExample* misalign = nullptr;
  const corpus::AlignmentExample& picked = examples[it->second];
  if (picked.category == corpus::Category::ALIGN_N) {
    align_n = &picked;
    for (const auto& e : examples) {
      if (e.category == corpus::Category::MISALIGN && e.partner_id == picked.id) {
        misalign = &e;
        break;
      }
    }
    if (!misalign) throw DataError("no MISALIGN partner references '" + picked.id + "'");
  } else if (picked.category == corpus::Category::MISALIGN) {
    misalign = &picked;
    auto pit = index.find(picked.partner_id);
    if (pit == index.end()) throw DataError("dangling partner_id '" + picked.partner_id + "'");
    align_n = &examples[pit->second];
  } else {
    throw DataError("example '" + a.example_id + "' is ALIGN_P; contrast needs ALIGN_N");
  }

  nn::LanguageModel model = nn::load_checkpoint(a.model);
  contrast::ContrastResult r = contrast::contrast_example(
      model, *align_n, *misalign, config::templates_for(cfg), cfg.obj.lambda, cfg.obj.alpha,
      cfg.obj.gamma);

  const std::string& y = align_n->response;
  std::vector<bool> flagged(r.p_neg.size(), false);
  for (int u : r.U) flagged[static_cast<size_t>(u)] = true;
  for (size_t t = 0; t < r.p_neg.size(); ++t) {
    nlohmann::json j;
    j["token"] = t < y.size() ? printable_token(y[t]) : std::string("<eos>");
    j["index"] = t;
    j["p_neg"] = r.p_neg[t];
    j["p_pos"] = r.p_pos[t];
    j["flagged"] = static_cast<bool>(flagged[t]);
    j["weight"] = r.weights[t];
    std::cout << jsonl::dump_lossy(j) << "\n";
  }
}

// -------------------------------------------------------------------- report

struct ReportArgs {
  std::string run_dir;
  std::vector<std::string> eval_files;
};

void cmd_report(const ReportArgs& a) {
  if (a.run_dir.empty() && a.eval_files.empty()) {
    throw UsageError("report needs --run and/or --eval");
  }
  if (!a.run_dir.empty()) {
    std::vector<loop::IterationReport> reports;
    for (int k = 1;; ++k) {
      char name[16];
      std::snprintf(name, sizeof(name), "iter_%03d", k);
      fs::path p = fs::path(a.run_dir) / name / "report.json";
      if (!fs::exists(p)) break;
      std::ifstream in(p);
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      reports.push_back(loop::report_from_json(text));
    }
    if (reports.empty()) throw DataError("no iteration reports under " + a.run_dir);
    std::cout << "iter  instr  pos  neg  drop  alignP  alignN  misalign  loss       "
                 "compliance\n";
    for (const auto& r : reports) {
      double loss = r.mean_epoch_loss.empty() ? 0.0 : r.mean_epoch_loss.back();
      std::ostringstream comp;
      if (auto b = r.eval_before.find("compliance"); b != r.eval_before.end()) {
        comp << std::fixed << std::setprecision(3) << b->second;
        if (auto e = r.eval_after.find("compliance"); e != r.eval_after.end()) {
          comp << " -> " << std::fixed << std::setprecision(3) << e->second;
        }
      }
      std::cout << std::left << std::setw(6) << r.iteration << std::setw(7)
                << r.instruction_count << std::setw(5) << r.positives << std::setw(5)
                << r.negatives << std::setw(6) << r.dropped << std::setw(8) << r.align_p
                << std::setw(8) << r.align_n << std::setw(10) << r.misalign << std::setw(11)
                << std::fixed << std::setprecision(5) << loss << comp.str() << "\n";
    }
  }
  if (!a.eval_files.empty()) {
    std::cout << "metric       score     n\n";
    for (const std::string& f : a.eval_files) {
      eval::EvalReport r = eval::load_report(f);
      std::cout << std::left << std::setw(13) << r.metric << std::setw(10) << std::fixed
                << std::setprecision(4) << r.score << r.sample_count << "\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"judgment-based alignment toolkit"};
  app.require_subcommand(1);

  BuildDataArgs bd;
  auto* sub_bd = app.add_subcommand("build-data",
                                    "Recast judgment triplets as Align-P/Align-N/Misalign");
  sub_bd->add_option("--triplets", bd.triplets, "input triplet JSONL")->required();
  sub_bd->add_option("--out", bd.out, "output example JSONL")->required();
  sub_bd->add_option("--ratio", bd.ratio, "ALIGN_P keep ratio");
  sub_bd->add_option("--seed", bd.seed, "downsampling seed");
  sub_bd->add_option("--fake-judgment", bd.fake_judgment, "MISALIGN substitute judgment");
  sub_bd->add_option("--keyword", bd.keyword, "positive-judgment prefix");

  TrainArgs tr;
  auto* sub_tr = app.add_subcommand("train", "Train an objective on a dataset");
  sub_tr->add_option("--data", tr.data, "example or triplet JSONL")->required();
  sub_tr->add_option("--objective", tr.over.objective,
                     "cut|forward|hindsight|ilf-mle|ilf-dpo|mle");
  sub_tr->add_option("--config", tr.config_path, "config JSON");
  sub_tr->add_option("--out", tr.out, "output directory")->required();
  sub_tr->add_option("--base", tr.base, "starting checkpoint (default: fresh init)");
  sub_tr->add_option("--epochs", tr.over.epochs, "override train.epochs");
  sub_tr->add_option("--seed", tr.over.seed, "override train.seed");

  OnlineArgs on;
  auto* sub_on = app.add_subcommand("online", "Iterative judge-then-train loop");
  sub_on->add_option("--base", on.base, "starting checkpoint")->required();
  sub_on->add_option("--task", on.task, "builtin task name");
  sub_on->add_option("--instructions", on.instructions, "instruction pool, one per line");
  sub_on->add_option("--judge", on.judge_spec, "oracle|external|trained:CKPT");
  sub_on->add_option("--iterations", on.over.iterations, "override loop.iterations");
  sub_on->add_option("--config", on.config_path, "config JSON");
  sub_on->add_option("--out", on.out, "run directory")->required();
  sub_on->add_flag("--cold-start", [&on](int64_t) { on.over.cold_start = true; },
                   "restart each iteration from the base checkpoint");

  JudgeTrainArgs jt;
  auto* sub_jt = app.add_subcommand("judge-train", "Fine-tune a judgment model");
  sub_jt->add_option("--triplets", jt.triplets, "training triplet JSONL")->required();
  sub_jt->add_option("--base", jt.base, "starting checkpoint (default: fresh init)");
  sub_jt->add_option("--out", jt.out, "output directory")->required();
  sub_jt->add_option("--config", jt.config_path, "config JSON");
  sub_jt->add_option("--epochs", jt.over.epochs, "override train.epochs");

  EvalArgs ev;
  auto* sub_ev = app.add_subcommand("eval", "Score a checkpoint");
  sub_ev->add_option("--model", ev.model, "checkpoint to score")->required();
  sub_ev->add_option("--opponent", ev.opponent, "opponent checkpoint (winrate)");
  sub_ev->add_option("--metric", ev.metric, "compliance|winrate|rouge")->required();
  sub_ev->add_option("--task", ev.task, "builtin task name");
  sub_ev->add_option("--judge", ev.judge_spec, "winrate judge: oracle|external");
  sub_ev->add_option("--n", ev.n, "sample count");
  sub_ev->add_option("--seed", ev.seed, "instruction seed");
  sub_ev->add_option("--out", ev.out, "write EvalReport JSON here");
  sub_ev->add_option("--config", ev.config_path, "config JSON");

  InspectArgs in;
  auto* sub_in = app.add_subcommand("inspect-contrast",
                                    "Per-token detection trace for one example");
  sub_in->add_option("--model", in.model, "checkpoint")->required();
  sub_in->add_option("--data", in.data, "example JSONL")->required();
  sub_in->add_option("--example-id", in.example_id, "ALIGN_N or MISALIGN id")->required();
  sub_in->add_option("--config", in.config_path, "config JSON");

  ReportArgs rp;
  auto* sub_rp = app.add_subcommand("report", "Render stored reports as a table");
  sub_rp->add_option("--run", rp.run_dir, "online run directory");
  sub_rp->add_option("--eval", rp.eval_files, "EvalReport JSON files");

  sub_bd->callback([&] { cmd_build_data(bd); });
  sub_tr->callback([&] { cmd_train(tr); });
  sub_on->callback([&] { cmd_online(on); });
  sub_jt->callback([&] { cmd_judge_train(jt); });
  sub_ev->callback([&] { cmd_eval(ev); });
  sub_in->callback([&] { cmd_inspect_contrast(in); });
  sub_rp->callback([&] { cmd_report(rp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const RuntimeError& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
