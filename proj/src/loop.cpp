#include "cutkit/loop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "cutkit/error.hpp"
#include "cutkit/eval.hpp"
#include "cutkit/jsonl.hpp"
#include "cutkit/rng.hpp"

namespace cutkit::loop {

namespace {

// Seed-stream tags; every per-epoch or per-iteration stream derives from
// (seed, tag, index) so resumed runs replay identical draws.
enum StreamTag : uint64_t {
  kShuffleStream = 300,
  kSampleStream = 400,
  kDownsampleStream = 401,
  kEvalStream = 402,
  kTrainStream = 403,
};

std::string inference_prompt(const corpus::TemplateSet& templates, const std::string& x) {
  return corpus::prompt_prefix(templates.inference, {{"instruction", x}, {"response", ""}},
                               "response");
}

// Shared epoch/batch/shuffle skeleton for the per-item objectives.
// apply(model, item, grad_scale) accumulates gradients and returns the loss.
template <class Item, class Apply>
nn::LanguageModel train_items(nn::LanguageModel model, std::vector<Item> items,
                              const TrainConfig& cfg, const StepSink& sink,
                              std::vector<double>* epoch_means, Apply&& apply) {
  if (items.empty()) throw DataError("empty training set");
  if (cfg.batch_size == 0) throw UsageError("batch_size must be positive");
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 g = rng::engine(rng::derive(cfg.seed, kShuffleStream, epoch));
    rng::shuffle(items, g);
    double epoch_sum = 0.0;
    size_t epoch_n = 0;
    for (size_t at = 0; at < items.size(); at += cfg.batch_size) {
      size_t bn = std::min(cfg.batch_size, items.size() - at);
      model.net.zero_grads();
      double batch_sum = 0.0;
      for (size_t k = 0; k < bn; ++k) {
        batch_sum += apply(model, items[at + k], 1.0 / static_cast<double>(bn));
      }
      model.net.adam_step(cfg.opt);
      double mean = batch_sum / static_cast<double>(bn);
      if (!std::isfinite(mean)) throw RuntimeError("non-finite training loss");
      if (sink) {
        StepLog log;
        log.step = step;
        log.total = mean;
        sink(log);
      }
      ++step;
      epoch_sum += batch_sum;
      epoch_n += bn;
    }
    if (epoch_means) epoch_means->push_back(epoch_sum / static_cast<double>(epoch_n));
  }
  return model;
}

nn::LanguageModel train_cut(nn::LanguageModel model,
                            std::span<const corpus::AlignmentExample> examples,
                            const TrainConfig& cfg, const StepSink& sink,
                            std::vector<double>* epoch_means) {
  std::map<std::string, const corpus::AlignmentExample*> lookup;
  std::vector<corpus::AlignmentExample> targets;
  for (const auto& e : examples) {
    if (!lookup.emplace(e.id, &e).second) throw DataError("duplicate example id '" + e.id + "'");
    if (e.category != corpus::Category::MISALIGN) targets.push_back(e);
  }
  if (targets.empty()) throw DataError("no ALIGN_P or ALIGN_N examples to train on");
  if (cfg.batch_size == 0) throw UsageError("batch_size must be positive");

  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::mt19937_64 g = rng::engine(rng::derive(cfg.seed, kShuffleStream, epoch));
    rng::shuffle(targets, g);
    double epoch_sum = 0.0;
    size_t epoch_n = 0;
    for (size_t at = 0; at < targets.size(); at += cfg.batch_size) {
      size_t bn = std::min(cfg.batch_size, targets.size() - at);
      model.net.zero_grads();
      objectives::LossBreakdown b = objectives::cut_total(
          model, std::span(targets).subspan(at, bn), cfg.templates, cfg.obj, &lookup, true);
      model.net.adam_step(cfg.opt);
      if (sink) {
        StepLog log;
        log.step = step;
        log.total = b.total;
        log.l1_mle_part = b.l1_mle_part;
        log.l1_ut_part = b.l1_ut_part;
        log.l2_part = b.l2_part;
        log.tokens_in_U = b.tokens_in_U;
        log.tokens_total = b.tokens_total;
        sink(log);
      }
      ++step;
      epoch_sum += b.total * static_cast<double>(bn);
      epoch_n += bn;
    }
    if (epoch_means) epoch_means->push_back(epoch_sum / static_cast<double>(epoch_n));
  }
  return model;
}

}  // namespace

nn::LanguageModel offline_align(nn::LanguageModel model,
                                std::span<const corpus::AlignmentExample> examples,
                                const TrainConfig& cfg, const StepSink& sink,
                                std::vector<double>* epoch_means) {
  if (examples.empty()) throw DataError("empty example set");
  if (cfg.epochs < 0) throw UsageError("epochs must be non-negative");
  if (cfg.epochs == 0) return model;
  using objectives::ObjectiveKind;
  if (cfg.objective == ObjectiveKind::CUT) {
    return train_cut(std::move(model), examples, cfg, sink, epoch_means);
  }
  if (cfg.objective == ObjectiveKind::MLE) {
    std::vector<corpus::AlignmentExample> positives;
    for (const auto& e : examples) {
      if (e.category == corpus::Category::ALIGN_P) positives.push_back(e);
    }
    if (positives.empty()) throw DataError("MLE needs ALIGN_P examples");
    return train_items(std::move(model), std::move(positives), cfg, sink, epoch_means,
                       [&cfg](nn::LanguageModel& m, const corpus::AlignmentExample& e, double gs) {
                         return objectives::apply_mle(m, e.instruction, e.response, cfg.templates,
                                                      gs, true);
                       });
  }
  throw UsageError("objective '" + std::string(objectives::to_string(cfg.objective)) +
                   "' trains from triplets, not alignment examples");
}

std::vector<DpoPair> pairs_from_triplets(std::span<const corpus::JudgmentTriplet> triplets) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<std::pair<std::string, double>>> groups;
  for (const auto& t : triplets) {
    auto [it, fresh] = groups.try_emplace(t.instruction);
    if (fresh) order.push_back(t.instruction);
    it->second.emplace_back(t.response,
                            t.polarity == corpus::Polarity::POSITIVE ? 1.0 : 0.0);
  }
  std::vector<DpoPair> out;
  for (const std::string& x : order) {
    const auto& responses = groups[x];
    if (responses.size() < 2) continue;
    for (const corpus::PreferencePair& p : corpus::enumerate_preference_pairs(responses)) {
      out.push_back({x, p.chosen, p.rejected});
    }
  }
  return out;
}

nn::LanguageModel train_dpo_pairs(nn::LanguageModel model, std::span<const DpoPair> pairs,
                                  const TrainConfig& cfg, const StepSink& sink,
                                  std::vector<double>* epoch_means) {
  if (pairs.empty()) throw DataError("no preference pairs to train on");
  // The reference stays frozen at the pre-alignment weights.
  nn::TransformerLM reference(model.net);
  std::vector<DpoPair> items(pairs.begin(), pairs.end());
  double beta = cfg.obj.dpo_beta;
  return train_items(std::move(model), std::move(items), cfg, sink, epoch_means,
                     [&cfg, &reference, beta](nn::LanguageModel& m, const DpoPair& p, double gs) {
                       return objectives::apply_dpo_pair(m, reference, p.instruction, p.chosen,
                                                         p.rejected, cfg.templates, beta, gs,
                                                         true);
                     });
}

nn::LanguageModel train_on_triplets(nn::LanguageModel model,
                                    std::span<const corpus::JudgmentTriplet> triplets,
                                    const TrainConfig& cfg, const CorpusOptions& corpus_opts,
                                    const StepSink& sink, std::vector<double>* epoch_means) {
  if (triplets.empty()) throw DataError("empty triplet set");
  using objectives::ObjectiveKind;
  switch (cfg.objective) {
    case ObjectiveKind::CUT: {
      std::vector<corpus::AlignmentExample> examples = corpus::build_alignment_set(
          triplets, corpus_opts.fake_judgment, corpus_opts.positive_keyword);
      examples = corpus::downsample_align_p(examples, corpus_opts.align_p_ratio, corpus_opts.seed);
      return offline_align(std::move(model), examples, cfg, sink, epoch_means);
    }
    case ObjectiveKind::MLE: {
      // SFT baseline: every positive response, no downsampling.
      std::vector<const corpus::JudgmentTriplet*> positives;
      for (const auto& t : triplets) {
        if (t.polarity == corpus::Polarity::POSITIVE) positives.push_back(&t);
      }
      if (positives.empty()) throw DataError("MLE needs positive triplets");
      return train_items(std::move(model), std::move(positives), cfg, sink, epoch_means,
                         [&cfg](nn::LanguageModel& m, const corpus::JudgmentTriplet* t,
                                double gs) {
                           return objectives::apply_mle(m, t->instruction, t->response,
                                                        cfg.templates, gs, true);
                         });
    }
    case ObjectiveKind::FORWARD_PREDICTION:
    case ObjectiveKind::HINDSIGHT: {
      bool forward = cfg.objective == ObjectiveKind::FORWARD_PREDICTION;
      std::vector<const corpus::JudgmentTriplet*> items;
      for (const auto& t : triplets) items.push_back(&t);
      return train_items(std::move(model), std::move(items), cfg, sink, epoch_means,
                         [&cfg, forward](nn::LanguageModel& m, const corpus::JudgmentTriplet* t,
                                         double gs) {
                           return forward ? objectives::apply_forward_prediction(
                                                m, *t, cfg.templates, gs, true)
                                          : objectives::apply_hindsight(m, *t, cfg.templates, gs,
                                                                        true);
                         });
    }
    case ObjectiveKind::ILF_MLE: {
      // Refinements come from the starting model, once, before any update.
      std::vector<std::pair<std::string, std::string>> targets;
      for (const auto& t : triplets) {
        if (t.polarity == corpus::Polarity::POSITIVE) {
          targets.emplace_back(t.instruction, t.response);
        } else {
          targets.emplace_back(t.instruction,
                               objectives::ilf_refine(model, t.instruction, t.response,
                                                      t.judgment, cfg.gen));
        }
      }
      return train_items(std::move(model), std::move(targets), cfg, sink, epoch_means,
                         [&cfg](nn::LanguageModel& m,
                                const std::pair<std::string, std::string>& xy, double gs) {
                           return objectives::apply_mle(m, xy.first, xy.second, cfg.templates, gs,
                                                        true);
                         });
    }
    case ObjectiveKind::ILF_DPO: {
      std::vector<DpoPair> pairs;
      for (const auto& t : triplets) {
        if (t.polarity == corpus::Polarity::POSITIVE) continue;
        pairs.push_back({t.instruction,
                         objectives::ilf_refine(model, t.instruction, t.response, t.judgment,
                                                cfg.gen),
                         t.response});
      }
      if (pairs.empty()) throw DataError("ILF-DPO needs negative triplets to refine");
      return train_dpo_pairs(std::move(model), pairs, cfg, sink, epoch_means);
    }
  }
  throw UsageError("unknown objective");
}

std::string report_to_json(const IterationReport& r) {
  nlohmann::json j;
  j["iteration"] = r.iteration;
  j["instruction_count"] = r.instruction_count;
  j["positives"] = r.positives;
  j["negatives"] = r.negatives;
  j["dropped"] = r.dropped;
  j["align_p"] = r.align_p;
  j["align_n"] = r.align_n;
  j["misalign"] = r.misalign;
  j["mean_epoch_loss"] = r.mean_epoch_loss;
  j["eval_before"] = r.eval_before;
  j["eval_after"] = r.eval_after;
  return j.dump(2);
}

IterationReport report_from_json(const std::string& text) {
  IterationReport r;
  try {
    nlohmann::json j = nlohmann::json::parse(text);
    r.iteration = j.at("iteration").get<int>();
    r.instruction_count = j.at("instruction_count").get<size_t>();
    r.positives = j.at("positives").get<size_t>();
    r.negatives = j.at("negatives").get<size_t>();
    r.dropped = j.at("dropped").get<size_t>();
    r.align_p = j.at("align_p").get<size_t>();
    r.align_n = j.at("align_n").get<size_t>();
    r.misalign = j.at("misalign").get<size_t>();
    r.mean_epoch_loss = j.at("mean_epoch_loss").get<std::vector<double>>();
    r.eval_before = j.at("eval_before").get<std::map<std::string, double>>();
    r.eval_after = j.at("eval_after").get<std::map<std::string, double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid iteration report: ") + e.what());
  }
  return r;
}

InstructionSource task_instruction_source(const judge::SyntheticTask& task) {
  return [&task](size_t n, uint64_t seed, const std::set<std::string>& used) {
    return judge::sample_instructions(task, seed, n, &used);
  };
}

InstructionSource pool_instruction_source(std::vector<std::string> pool) {
  return [pool = std::move(pool)](size_t n, uint64_t, const std::set<std::string>& used) {
    std::vector<std::string> out;
    std::set<std::string> taken;
    for (const std::string& s : pool) {
      if (out.size() == n) break;
      if (used.contains(s) || !taken.insert(s).second) continue;
      out.push_back(s);
    }
    if (out.size() < n) {
      throw RuntimeError("instruction pool exhausted: needed " + std::to_string(n) + ", found " +
                         std::to_string(out.size()));
    }
    return out;
  };
}

std::pair<nn::LanguageModel, IterationReport> online_iteration(
    nn::LanguageModel model, OnlineContext& ctx, const LoopConfig& cfg, int iteration,
    const StepSink& step_sink, const VerdictSink& verdict_sink, const DropSink& drop_sink,
    std::vector<corpus::JudgmentTriplet>* out_triplets) {
  if (!ctx.source) throw UsageError("online iteration needs an instruction source");
  if (!ctx.judge_fn) throw UsageError("online iteration needs a judge");
  if (cfg.instructions_per_iteration == 0) {
    throw UsageError("instructions_per_iteration must be positive");
  }
  uint64_t it = static_cast<uint64_t>(iteration);

  // The evaluation set is fixed per run and never enters training.
  bool do_eval = ctx.eval_task != nullptr && cfg.eval_n > 0;
  if (do_eval) {
    for (std::string& s :
         judge::sample_instructions(*ctx.eval_task, rng::derive(cfg.seed, kEvalStream),
                                    cfg.eval_n)) {
      ctx.used.insert(std::move(s));
    }
  }

  std::vector<std::string> instructions =
      ctx.source(cfg.instructions_per_iteration, rng::derive(cfg.seed, kSampleStream, it),
                 ctx.used);
  {
    std::set<std::string> check;
    for (const std::string& x : instructions) {
      if (!check.insert(x).second || ctx.used.contains(x)) {
        throw RuntimeError("instruction source repeated '" + x + "'");
      }
    }
  }

  IterationReport report;
  report.iteration = iteration;
  report.instruction_count = instructions.size();

  // Step 1: one greedy response per instruction from the current model.
  std::vector<std::string> responses;
  responses.reserve(instructions.size());
  for (const std::string& x : instructions) {
    responses.push_back(nn::generate(model, inference_prompt(cfg.train.templates, x),
                                     cfg.train.gen));
  }

  // Step 2: judgments; failed items drop out of the iteration.  A blank
  // generation can never form a valid triplet, so it drops before judging.
  std::vector<corpus::JudgmentTriplet> triplets;
  for (size_t i = 0; i < instructions.size(); ++i) {
    std::string id = "it" + std::to_string(iteration) + "-" + std::to_string(i);
    if (responses[i].find_first_not_of(" \t\r\n") == std::string::npos) {
      ++report.dropped;
      if (drop_sink) drop_sink(id, "model produced an empty response");
      continue;
    }
    auto t0 = std::chrono::steady_clock::now();
    judge::JudgeVerdict v;
    try {
      v = ctx.judge_fn(instructions[i], responses[i]);
    } catch (const std::exception& e) {
      ++report.dropped;
      if (drop_sink) drop_sink(id, e.what());
      continue;
    }
    double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
    if (verdict_sink) verdict_sink({id, v.judgment, v.polarity, v.provenance, ms});
    corpus::JudgmentTriplet t;
    t.id = std::move(id);
    t.instruction = instructions[i];
    t.response = responses[i];
    t.judgment = v.judgment;
    t.polarity = v.polarity;
    t.source = corpus::Source::MODEL_GENERATED;
    (t.polarity == corpus::Polarity::POSITIVE ? report.positives : report.negatives) += 1;
    triplets.push_back(std::move(t));
  }
  if (triplets.empty()) {
    throw RuntimeError("iteration " + std::to_string(iteration) +
                       ": every item was dropped");
  }
  for (std::string& x : instructions) ctx.used.insert(std::move(x));

  // Step 3: build, downsample, train.
  std::vector<corpus::AlignmentExample> examples = corpus::build_alignment_set(
      triplets, cfg.corpus.fake_judgment, cfg.corpus.positive_keyword);
  examples = corpus::downsample_align_p(examples, cfg.corpus.align_p_ratio,
                                        rng::derive(cfg.seed, kDownsampleStream, it));
  for (const auto& e : examples) {
    switch (e.category) {
      case corpus::Category::ALIGN_P: ++report.align_p; break;
      case corpus::Category::ALIGN_N: ++report.align_n; break;
      case corpus::Category::MISALIGN: ++report.misalign; break;
    }
  }

  auto compliance = [&](const nn::LanguageModel& m) {
    return eval::compliance_rate(m, *ctx.eval_task, cfg.eval_n,
                                 rng::derive(cfg.seed, kEvalStream), cfg.train.templates,
                                 cfg.train.gen);
  };
  if (do_eval) report.eval_before["compliance"] = compliance(model);

  TrainConfig tcfg = cfg.train;
  tcfg.epochs = cfg.epochs_per_iteration;
  tcfg.seed = rng::derive(cfg.seed, kTrainStream, it);
  if (tcfg.objective == objectives::ObjectiveKind::CUT ||
      tcfg.objective == objectives::ObjectiveKind::MLE) {
    model = offline_align(std::move(model), examples, tcfg, step_sink, &report.mean_epoch_loss);
  } else {
    CorpusOptions copts = cfg.corpus;
    copts.seed = rng::derive(cfg.seed, kDownsampleStream, it);
    model = train_on_triplets(std::move(model), triplets, tcfg, copts, step_sink,
                              &report.mean_epoch_loss);
  }

  if (do_eval) report.eval_after["compliance"] = compliance(model);
  if (out_triplets) *out_triplets = std::move(triplets);
  return {std::move(model), std::move(report)};
}

RunResult run_online(nn::LanguageModel model, OnlineContext ctx, const LoopConfig& cfg,
                     const std::filesystem::path& run_dir, const std::string* config_snapshot) {
  namespace fs = std::filesystem;
  if (cfg.iterations < 1) throw UsageError("iterations must be positive");
  fs::create_directories(run_dir);

  {
    std::ofstream out(run_dir / "config.json");
    if (!out) throw RuntimeError("cannot write " + (run_dir / "config.json").string());
    if (config_snapshot) {
      out << *config_snapshot;
    } else {
      nlohmann::json j;
      j["iterations"] = cfg.iterations;
      j["instructions_per_iteration"] = cfg.instructions_per_iteration;
      j["epochs_per_iteration"] = cfg.epochs_per_iteration;
      j["seed"] = cfg.seed;
      j["warm_start"] = cfg.warm_start;
      j["eval_n"] = cfg.eval_n;
      j["align_p_ratio"] = cfg.corpus.align_p_ratio;
      j["objective"] = std::string(objectives::to_string(cfg.train.objective));
      out << j.dump(2) << "\n";
    }
  }

  auto iter_dir = [&](int k) {
    char name[16];
    std::snprintf(name, sizeof(name), "iter_%03d", k);
    return run_dir / name;
  };

  const nn::LanguageModel base = model;  // cold starts restart from here
  RunResult result{std::move(model), {}};

  // Resume: a complete iteration has both its checkpoint and its report.
  int start = 1;
  for (int k = 1; k <= cfg.iterations; ++k) {
    fs::path dir = iter_dir(k);
    if (!fs::exists(dir / "checkpoint.ckpt") || !fs::exists(dir / "report.json")) break;
    std::ifstream in(dir / "report.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    result.reports.push_back(report_from_json(text));
    for (const auto& t : corpus::load_triplets(dir / "triplets.jsonl",
                                               cfg.corpus.positive_keyword)) {
      ctx.used.insert(t.instruction);
    }
    result.model = nn::load_checkpoint(dir / "checkpoint.ckpt");
    start = k + 1;
  }

  for (int k = start; k <= cfg.iterations; ++k) {
    fs::path dir = iter_dir(k);
    fs::create_directories(dir);
    std::ofstream train_log(dir / "training_log.jsonl", std::ios::trunc);
    std::ofstream verdicts(dir / "verdicts.jsonl", std::ios::trunc);
    std::ofstream drops(dir / "drops.log", std::ios::trunc);
    StepSink step_sink = [&](const StepLog& s) {
      nlohmann::json j;
      j["step"] = s.step;
      j["total"] = s.total;
      j["l1_mle_part"] = s.l1_mle_part;
      j["l1_ut_part"] = s.l1_ut_part;
      j["l2_part"] = s.l2_part;
      j["tokens_in_U"] = s.tokens_in_U;
      j["tokens_total"] = s.tokens_total;
      train_log << j.dump() << "\n";
    };
    VerdictSink verdict_sink = [&](const VerdictRecord& v) {
      nlohmann::json j;
      j["instruction_id"] = v.instruction_id;
      j["judgment"] = v.judgment;
      j["polarity"] = std::string(corpus::to_string(v.polarity));
      j["provenance"] = std::string(judge::to_string(v.provenance));
      j["latency_ms"] = v.latency_ms;
      verdicts << jsonl::dump_lossy(j) << "\n";
    };
    DropSink drop_sink = [&](std::string_view id, std::string_view error) {
      drops << id << "\t" << error << "\n";
    };

    nn::LanguageModel input = cfg.warm_start ? std::move(result.model) : base;
    std::vector<corpus::JudgmentTriplet> triplets;
    auto [trained, report] = online_iteration(std::move(input), ctx, cfg, k, step_sink,
                                              verdict_sink, drop_sink, &triplets);
    result.model = std::move(trained);

    corpus::save_triplets(dir / "triplets.jsonl", triplets);
    {
      std::ofstream out(dir / "report.json");
      if (!out) throw RuntimeError("cannot write " + (dir / "report.json").string());
      out << report_to_json(report) << "\n";
    }
    nn::save_checkpoint(dir / "checkpoint.ckpt", result.model);
    result.reports.push_back(std::move(report));
  }
  return result;
}

}  // namespace cutkit::loop
