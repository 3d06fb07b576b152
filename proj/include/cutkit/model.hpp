#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cutkit::nn {

// Decoder-only transformer: learned token + position embeddings, pre-RMSNorm
// blocks (causal multi-head attention, ReLU MLP), RMSNorm before an untied
// output head. All math is double precision through the kernel dispatch table.
struct ModelConfig {
  int vocab_size = 258;  // alphabet + BOS + EOS; BOS = vocab-2, EOS = vocab-1
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 256;
  int max_seq = 384;
  double init_std = 0.08;

  int head_dim() const { return d_model / n_heads; }
  int bos_id() const { return vocab_size - 2; }
  int eos_id() const { return vocab_size - 1; }
  void validate() const;
};

struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;
};

struct GenerationConfig {
  int max_new_tokens = 200;
  double temperature = 0.0;  // 0 = greedy (argmax, lowest id wins ties)
  int top_k = 0;             // 0 = full vocabulary
};

// Named slice of the flat parameter vector. Checkpoints serialize this table.
struct TensorSpec {
  std::string name;
  size_t offset;
  size_t size;
};

// Incremental decoding state: per-layer key/value rows for positions [0, len).
struct KVCache {
  std::vector<std::vector<double>> k, v;
  int len = 0;
};

class TransformerLM {
 public:
  // Random init from the seed; gains start at 1, residual projections are
  // scaled down by 1/sqrt(2*n_layers).
  TransformerLM(ModelConfig cfg, uint64_t seed);
  // Zero parameters; used by checkpoint loading.
  explicit TransformerLM(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<TensorSpec>& tensors() const { return tensors_; }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }
  std::vector<double>& grads() { return grads_; }
  std::vector<double>& opt_m() { return opt_m_; }
  std::vector<double>& opt_v() { return opt_v_; }
  const std::vector<double>& opt_m() const { return opt_m_; }
  const std::vector<double>& opt_v() const { return opt_v_; }
  int64_t opt_step() const { return opt_step_; }
  void set_opt_step(int64_t s) { opt_step_ = s; }

  // tokens excludes BOS (prepended internally). boundary indexes the first
  // target token. Returns log p(tokens[i] | BOS, tokens[<i]) for
  // i in [boundary, tokens.size()). Throws RuntimeError when BOS + tokens
  // exceeds max_seq. Stateless: results do not depend on prior calls.
  std::vector<double> token_logprobs(std::span<const int> tokens, size_t boundary) const;

  // Same rows as token_logprobs but keeps the activation tape for backward.
  std::vector<double> forward_cached(std::span<const int> tokens, size_t boundary);
  // row_grad[k] = dL/d(logprob row k) for the last forward_cached call.
  // Accumulates into grads().
  void backward(std::span<const double> row_grad);

  void zero_grads();
  // Global-norm clip then fused Adam update; increments the step counter.
  void adam_step(const OptimizerConfig& opt);

  // Log-probability distribution over the next token after BOS + prefix.
  std::vector<double> next_logprobs(std::span<const int> prefix) const;

  // Sample continuation ids for BOS + prompt. Stops at EOS (not included in
  // the result), max_new_tokens, or the context limit. rng may be null for
  // greedy decoding.
  std::vector<int> generate_ids(std::span<const int> prompt, const GenerationConfig& gen,
                                std::mt19937_64* rng) const;

 private:
  struct Workspace;

  std::vector<double> forward_into(Workspace& ws, std::span<const int> tokens,
                                   size_t boundary) const;
  void step_hidden(std::span<const double> x_in, int pos, KVCache& cache,
                   std::span<double> x_out) const;

  ModelConfig cfg_;
  std::vector<TensorSpec> tensors_;
  std::vector<double> params_, grads_, opt_m_, opt_v_;
  int64_t opt_step_ = 0;

  std::unique_ptr<Workspace> ws_;

 public:
  ~TransformerLM();
  TransformerLM(TransformerLM&&) noexcept;
  TransformerLM& operator=(TransformerLM&&) noexcept;
  TransformerLM(const TransformerLM& other);
};

}  // namespace cutkit::nn
