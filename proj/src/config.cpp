#include "cutkit/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string_view>

#include <json.hpp>

#include "cutkit/error.hpp"

namespace cutkit::config {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::string_view where,
                std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw UsageError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (std::string_view a : allowed) {
      if (key == a) {
        known = true;
        break;
      }
    }
    if (!known) throw UsageError("unknown config key '" + std::string(where) + "." + key + "'");
  }
}

template <class T>
void get_to(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

void parse_model(const json& j, RunConfig& cfg) {
  check_keys(j, "model",
             {"d_model", "n_layers", "n_heads", "d_ff", "max_seq", "init_std", "seed"});
  get_to(j, "d_model", cfg.model.d_model);
  get_to(j, "n_layers", cfg.model.n_layers);
  get_to(j, "n_heads", cfg.model.n_heads);
  get_to(j, "d_ff", cfg.model.d_ff);
  get_to(j, "max_seq", cfg.model.max_seq);
  get_to(j, "init_std", cfg.model.init_std);
  get_to(j, "seed", cfg.model_seed);
}

void parse_loss(const json& j, RunConfig& cfg) {
  check_keys(j, "loss", {"lambda", "alpha", "gamma", "dpo_beta", "weight_gradient", "ablations"});
  get_to(j, "lambda", cfg.obj.lambda);
  get_to(j, "alpha", cfg.obj.alpha);
  get_to(j, "gamma", cfg.obj.gamma);
  get_to(j, "dpo_beta", cfg.obj.dpo_beta);
  get_to(j, "weight_gradient", cfg.obj.weight_gradient);
  if (auto it = j.find("ablations"); it != j.end()) {
    check_keys(*it, "loss.ablations",
               {"disable_l1", "disable_l2_align_p", "disable_l2_align_n", "ut_all_tokens",
                "disable_dynamic_weighting"});
    get_to(*it, "disable_l1", cfg.obj.ablations.disable_l1);
    get_to(*it, "disable_l2_align_p", cfg.obj.ablations.disable_l2_align_p);
    get_to(*it, "disable_l2_align_n", cfg.obj.ablations.disable_l2_align_n);
    get_to(*it, "ut_all_tokens", cfg.obj.ablations.ut_all_tokens);
    get_to(*it, "disable_dynamic_weighting", cfg.obj.ablations.disable_dynamic_weighting);
  }
}

}  // namespace

void validate(const RunConfig& cfg) {
  cfg.model.validate();
  if (cfg.obj.lambda <= 0) throw UsageError("loss.lambda must be positive");
  if (cfg.obj.alpha < 0) throw UsageError("loss.alpha must be non-negative");
  if (cfg.obj.gamma < 0) throw UsageError("loss.gamma must be non-negative");
  if (cfg.obj.dpo_beta <= 0) throw UsageError("loss.dpo_beta must be positive");
  if (cfg.opt.lr <= 0) throw UsageError("optimizer.lr must be positive");
  if (cfg.opt.beta1 < 0 || cfg.opt.beta1 >= 1 || cfg.opt.beta2 < 0 || cfg.opt.beta2 >= 1) {
    throw UsageError("optimizer betas must lie in [0, 1)");
  }
  if (cfg.opt.eps <= 0) throw UsageError("optimizer.eps must be positive");
  if (cfg.opt.clip_norm <= 0) throw UsageError("optimizer.clip_norm must be positive");
  if (cfg.epochs < 0) throw UsageError("train.epochs must be non-negative");
  if (cfg.batch_size == 0) throw UsageError("train.batch_size must be positive");
  if (cfg.corpus.align_p_ratio < 0 || cfg.corpus.align_p_ratio > 1) {
    throw UsageError("corpus.align_p_ratio must lie in [0, 1]");
  }
  if (cfg.corpus.positive_keyword.empty()) {
    throw UsageError("corpus.positive_keyword must be non-empty");
  }
  if (cfg.iterations < 1) throw UsageError("loop.iterations must be positive");
  if (cfg.instructions_per_iteration == 0) {
    throw UsageError("loop.instructions_per_iteration must be positive");
  }
  if (cfg.epochs_per_iteration < 0) {
    throw UsageError("loop.epochs_per_iteration must be non-negative");
  }
  if (cfg.gen.max_new_tokens < 1) throw UsageError("generation.max_new_tokens must be positive");
  if (cfg.gen.temperature < 0) throw UsageError("generation.temperature must be non-negative");
  if (cfg.gen.top_k < 0) throw UsageError("generation.top_k must be non-negative");
}

RunConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  try {
    check_keys(j, "config",
               {"model", "objective", "loss", "optimizer", "train", "corpus", "loop",
                "generation", "templates"});
    if (auto it = j.find("model"); it != j.end()) parse_model(*it, cfg);
    if (auto it = j.find("objective"); it != j.end()) {
      cfg.objective = objectives::objective_from_string(it->get<std::string>());
    }
    if (auto it = j.find("loss"); it != j.end()) parse_loss(*it, cfg);
    if (auto it = j.find("optimizer"); it != j.end()) {
      check_keys(*it, "optimizer", {"lr", "beta1", "beta2", "eps", "clip_norm"});
      get_to(*it, "lr", cfg.opt.lr);
      get_to(*it, "beta1", cfg.opt.beta1);
      get_to(*it, "beta2", cfg.opt.beta2);
      get_to(*it, "eps", cfg.opt.eps);
      get_to(*it, "clip_norm", cfg.opt.clip_norm);
    }
    if (auto it = j.find("train"); it != j.end()) {
      check_keys(*it, "train", {"epochs", "batch_size", "seed"});
      get_to(*it, "epochs", cfg.epochs);
      get_to(*it, "batch_size", cfg.batch_size);
      get_to(*it, "seed", cfg.seed);
    }
    if (auto it = j.find("corpus"); it != j.end()) {
      check_keys(*it, "corpus", {"align_p_ratio", "seed", "fake_judgment", "positive_keyword"});
      get_to(*it, "align_p_ratio", cfg.corpus.align_p_ratio);
      get_to(*it, "seed", cfg.corpus.seed);
      get_to(*it, "fake_judgment", cfg.corpus.fake_judgment);
      get_to(*it, "positive_keyword", cfg.corpus.positive_keyword);
    }
    if (auto it = j.find("loop"); it != j.end()) {
      check_keys(*it, "loop",
                 {"iterations", "instructions_per_iteration", "epochs_per_iteration",
                  "warm_start", "eval_n"});
      get_to(*it, "iterations", cfg.iterations);
      get_to(*it, "instructions_per_iteration", cfg.instructions_per_iteration);
      get_to(*it, "epochs_per_iteration", cfg.epochs_per_iteration);
      get_to(*it, "warm_start", cfg.warm_start);
      get_to(*it, "eval_n", cfg.eval_n);
    }
    if (auto it = j.find("generation"); it != j.end()) {
      check_keys(*it, "generation", {"max_new_tokens", "temperature", "top_k"});
      get_to(*it, "max_new_tokens", cfg.gen.max_new_tokens);
      get_to(*it, "temperature", cfg.gen.temperature);
      get_to(*it, "top_k", cfg.gen.top_k);
    }
    get_to(j, "templates", cfg.templates_path);
  } catch (const json::exception& e) {
    throw UsageError(std::string("config field has the wrong type: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

std::string config_to_json(const RunConfig& cfg) {
  json j;
  j["model"] = {{"d_model", cfg.model.d_model},   {"n_layers", cfg.model.n_layers},
                {"n_heads", cfg.model.n_heads},   {"d_ff", cfg.model.d_ff},
                {"max_seq", cfg.model.max_seq},   {"init_std", cfg.model.init_std},
                {"seed", cfg.model_seed}};
  j["objective"] = std::string(objectives::to_string(cfg.objective));
  j["loss"] = {{"lambda", cfg.obj.lambda},
               {"alpha", cfg.obj.alpha},
               {"gamma", cfg.obj.gamma},
               {"dpo_beta", cfg.obj.dpo_beta},
               {"weight_gradient", cfg.obj.weight_gradient},
               {"ablations",
                {{"disable_l1", cfg.obj.ablations.disable_l1},
                 {"disable_l2_align_p", cfg.obj.ablations.disable_l2_align_p},
                 {"disable_l2_align_n", cfg.obj.ablations.disable_l2_align_n},
                 {"ut_all_tokens", cfg.obj.ablations.ut_all_tokens},
                 {"disable_dynamic_weighting", cfg.obj.ablations.disable_dynamic_weighting}}}};
  j["optimizer"] = {{"lr", cfg.opt.lr},
                    {"beta1", cfg.opt.beta1},
                    {"beta2", cfg.opt.beta2},
                    {"eps", cfg.opt.eps},
                    {"clip_norm", cfg.opt.clip_norm}};
  j["train"] = {{"epochs", cfg.epochs}, {"batch_size", cfg.batch_size}, {"seed", cfg.seed}};
  j["corpus"] = {{"align_p_ratio", cfg.corpus.align_p_ratio},
                 {"seed", cfg.corpus.seed},
                 {"fake_judgment", cfg.corpus.fake_judgment},
                 {"positive_keyword", cfg.corpus.positive_keyword}};
  j["loop"] = {{"iterations", cfg.iterations},
               {"instructions_per_iteration", cfg.instructions_per_iteration},
               {"epochs_per_iteration", cfg.epochs_per_iteration},
               {"warm_start", cfg.warm_start},
               {"eval_n", cfg.eval_n}};
  j["generation"] = {{"max_new_tokens", cfg.gen.max_new_tokens},
                     {"temperature", cfg.gen.temperature},
                     {"top_k", cfg.gen.top_k}};
  j["templates"] = cfg.templates_path;
  return j.dump(2);
}

RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return config_from_json(buf.str());
}

void save_config_file(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw RuntimeError("cannot write config file " + path.string());
  out << config_to_json(cfg) << "\n";
}

corpus::TemplateSet templates_for(const RunConfig& cfg) {
  corpus::TemplateSet t = corpus::default_templates();
  if (!cfg.templates_path.empty()) {
    std::ifstream in(cfg.templates_path);
    if (!in) throw UsageError("cannot open templates file " + cfg.templates_path);
    json j;
    try {
      j = json::parse(in);
      check_keys(j, "templates", {"train", "inference", "judge"});
      get_to(j, "train", t.train);
      get_to(j, "inference", t.inference);
      get_to(j, "judge", t.judge);
    } catch (const json::exception& e) {
      throw UsageError(std::string("invalid templates file: ") + e.what());
    }
  }
  corpus::validate_templates(t);
  return t;
}

loop::TrainConfig train_config(const RunConfig& cfg) {
  loop::TrainConfig t;
  t.objective = cfg.objective;
  t.obj = cfg.obj;
  t.opt = cfg.opt;
  t.epochs = cfg.epochs;
  t.batch_size = cfg.batch_size;
  t.seed = cfg.seed;
  t.templates = templates_for(cfg);
  t.gen = cfg.gen;
  return t;
}

loop::LoopConfig loop_config(const RunConfig& cfg) {
  loop::LoopConfig l;
  l.iterations = cfg.iterations;
  l.instructions_per_iteration = cfg.instructions_per_iteration;
  l.epochs_per_iteration = cfg.epochs_per_iteration;
  l.seed = cfg.seed;
  l.warm_start = cfg.warm_start;
  l.eval_n = cfg.eval_n;
  l.train = train_config(cfg);
  l.corpus = cfg.corpus;
  return l;
}

}  // namespace cutkit::config
