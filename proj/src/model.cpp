#include "cutkit/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cutkit/error.hpp"
#include "cutkit/kernels.hpp"
#include "cutkit/rng.hpp"

namespace cutkit::nn {
namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kPi = 3.14159265358979323846;

struct LayerOffsets {
  size_t ln1_g, wqkv, wo, ln2_g, w1, w2;
};

struct Offsets {
  size_t wte, wpe;
  std::vector<LayerOffsets> layer;
  size_t lnf_g, head, total;
};

Offsets make_offsets(const ModelConfig& c) {
  Offsets o;
  size_t C = c.d_model, V = c.vocab_size, F = c.d_ff, T = c.max_seq;
  size_t at = 0;
  o.wte = at;
  at += V * C;
  o.wpe = at;
  at += T * C;
  o.layer.resize(c.n_layers);
  for (int l = 0; l < c.n_layers; ++l) {
    auto& L = o.layer[l];
    L.ln1_g = at;
    at += C;
    L.wqkv = at;
    at += 3 * C * C;
    L.wo = at;
    at += C * C;
    L.ln2_g = at;
    at += C;
    L.w1 = at;
    at += F * C;
    L.w2 = at;
    at += C * F;
  }
  o.lnf_g = at;
  at += C;
  o.head = at;
  at += V * C;
  o.total = at;
  return o;
}

double draw_normal(std::mt19937_64& g) {
  double u1 = 1.0 - rng::uniform01(g);
  double u2 = rng::uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

// y = g ⊙ x * r with r = (mean(x^2) + eps)^{-1/2}; returns r for the tape.
double rmsnorm_fwd(const double* x, const double* g, double* y, int C) {
  const auto& K = kernels::active();
  double ms = K.sumsq(x, C) / C;
  double r = 1.0 / std::sqrt(ms + kRmsEps);
  for (int i = 0; i < C; ++i) y[i] = g[i] * x[i] * r;
  return r;
}

void rmsnorm_bwd(const double* x, const double* g, double r, const double* dy,
                 double* dx_acc, double* dg_acc, int C) {
  double hx = 0.0;
  for (int i = 0; i < C; ++i) hx += dy[i] * g[i] * x[i];
  double k = r * r * r * hx / C;
  for (int i = 0; i < C; ++i) {
    dg_acc[i] += dy[i] * x[i] * r;
    dx_acc[i] += r * dy[i] * g[i] - k * x[i];
  }
}

// y[t] = W x[t] with W stored row-major [out, in].
void linear_fwd(const double* W, const double* x, double* y, int T, int in, int out) {
  const auto& K = kernels::active();
  for (int t = 0; t < T; ++t) {
    for (int o = 0; o < out; ++o) {
      y[t * out + o] = K.dot(W + static_cast<size_t>(o) * in, x + static_cast<size_t>(t) * in, in);
    }
  }
}

// dx[t] += W^T dy[t]
void linear_bwd_input(const double* W, const double* dy, double* dx, int T, int in, int out) {
  const auto& K = kernels::active();
  for (int t = 0; t < T; ++t) {
    for (int o = 0; o < out; ++o) {
      K.axpy(dy[t * out + o], W + static_cast<size_t>(o) * in, dx + static_cast<size_t>(t) * in, in);
    }
  }
}

// dW[o] += sum_t dy[t][o] x[t]
void linear_bwd_weight(const double* x, const double* dy, double* dW, int T, int in, int out) {
  const auto& K = kernels::active();
  for (int t = 0; t < T; ++t) {
    for (int o = 0; o < out; ++o) {
      K.axpy(dy[t * out + o], x + static_cast<size_t>(t) * in, dW + static_cast<size_t>(o) * in, in);
    }
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 3) throw UsageError("vocab_size must be at least 3 (alphabet + BOS + EOS)");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0) {
    throw UsageError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw UsageError("d_model must be divisible by n_heads");
  if (max_seq < 2) throw UsageError("max_seq must be at least 2");
}

struct TransformerLM::Workspace {
  int T = 0;
  size_t boundary = 0;
  std::vector<int> seq;
  struct LayerTape {
    std::vector<double> x_in, a, qkv, att, ctx, x_mid, b, m1;
    std::vector<double> r1, r2;
  };
  std::vector<LayerTape> layers;
  std::vector<double> x_last, f, rf;
  std::vector<double> probs;
  std::vector<int> row_targets;
  std::vector<size_t> row_pos;
  std::vector<double> tmp;
};

TransformerLM::~TransformerLM() = default;
TransformerLM::TransformerLM(TransformerLM&&) noexcept = default;
TransformerLM& TransformerLM::operator=(TransformerLM&&) noexcept = default;

TransformerLM::TransformerLM(const TransformerLM& other)
    : cfg_(other.cfg_),
      tensors_(other.tensors_),
      params_(other.params_),
      grads_(other.grads_),
      opt_m_(other.opt_m_),
      opt_v_(other.opt_v_),
      opt_step_(other.opt_step_) {}

TransformerLM::TransformerLM(ModelConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Offsets off = make_offsets(cfg_);
  size_t C = cfg_.d_model;
  auto add = [&](const std::string& name, size_t offset, size_t size) {
    tensors_.push_back({name, offset, size});
  };
  add("wte", off.wte, static_cast<size_t>(cfg_.vocab_size) * C);
  add("wpe", off.wpe, static_cast<size_t>(cfg_.max_seq) * C);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1_g", off.layer[l].ln1_g, C);
    add(p + "wqkv", off.layer[l].wqkv, 3 * C * C);
    add(p + "wo", off.layer[l].wo, C * C);
    add(p + "ln2_g", off.layer[l].ln2_g, C);
    add(p + "w1", off.layer[l].w1, static_cast<size_t>(cfg_.d_ff) * C);
    add(p + "w2", off.layer[l].w2, C * static_cast<size_t>(cfg_.d_ff));
  }
  add("lnf_g", off.lnf_g, C);
  add("head", off.head, static_cast<size_t>(cfg_.vocab_size) * C);
  params_.assign(off.total, 0.0);
  grads_.assign(off.total, 0.0);
  opt_m_.assign(off.total, 0.0);
  opt_v_.assign(off.total, 0.0);
}

TransformerLM::TransformerLM(ModelConfig cfg, uint64_t seed) : TransformerLM(cfg) {
  Offsets off = make_offsets(cfg_);
  size_t C = cfg_.d_model, F = cfg_.d_ff;
  auto g = rng::engine(seed);
  auto fill_normal = [&](size_t at, size_t n, double std) {
    for (size_t i = 0; i < n; ++i) params_[at + i] = std * draw_normal(g);
  };
  auto fill_ones = [&](size_t at, size_t n) {
    for (size_t i = 0; i < n; ++i) params_[at + i] = 1.0;
  };
  double std = cfg_.init_std;
  // Residual-branch projections start smaller so depth does not blow up the
  // residual stream at init.
  double res_std = std / std::sqrt(2.0 * cfg_.n_layers);
  fill_normal(off.wte, static_cast<size_t>(cfg_.vocab_size) * C, std);
  fill_normal(off.wpe, static_cast<size_t>(cfg_.max_seq) * C, std * 0.5);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    fill_ones(off.layer[l].ln1_g, C);
    fill_normal(off.layer[l].wqkv, 3 * C * C, std);
    fill_normal(off.layer[l].wo, C * C, res_std);
    fill_ones(off.layer[l].ln2_g, C);
    fill_normal(off.layer[l].w1, F * C, std);
    fill_normal(off.layer[l].w2, C * F, res_std);
  }
  fill_ones(off.lnf_g, C);
  fill_normal(off.head, static_cast<size_t>(cfg_.vocab_size) * C, std);
}

std::vector<double> TransformerLM::forward_into(Workspace& ws, std::span<const int> tokens,
                                                size_t boundary) const {
  const auto& K = kernels::active();
  const int C = cfg_.d_model, H = cfg_.n_heads, D = cfg_.head_dim();
  const int F = cfg_.d_ff, V = cfg_.vocab_size, L = cfg_.n_layers;
  if (boundary > tokens.size()) throw RuntimeError("scoring boundary past end of sequence");
  const int T = static_cast<int>(tokens.size()) + 1;
  if (T > cfg_.max_seq) {
    throw RuntimeError("sequence of " + std::to_string(T) + " tokens (with BOS) exceeds max_seq " +
                       std::to_string(cfg_.max_seq));
  }
  for (int id : tokens) {
    if (id < 0 || id >= V) throw DataError("token id " + std::to_string(id) + " out of range");
  }

  ws.T = T;
  ws.boundary = boundary;
  ws.seq.assign(1, cfg_.bos_id());
  ws.seq.insert(ws.seq.end(), tokens.begin(), tokens.end());
  ws.layers.resize(L);
  const double* P = params_.data();
  Offsets off = make_offsets(cfg_);

  for (int l = 0; l < L; ++l) {
    auto& tp = ws.layers[l];
    tp.x_in.assign(static_cast<size_t>(T) * C, 0.0);
    tp.a.assign(static_cast<size_t>(T) * C, 0.0);
    tp.qkv.assign(static_cast<size_t>(T) * 3 * C, 0.0);
    tp.att.assign(static_cast<size_t>(H) * T * T, 0.0);
    tp.ctx.assign(static_cast<size_t>(T) * C, 0.0);
    tp.x_mid.assign(static_cast<size_t>(T) * C, 0.0);
    tp.b.assign(static_cast<size_t>(T) * C, 0.0);
    tp.m1.assign(static_cast<size_t>(T) * F, 0.0);
    tp.r1.assign(T, 0.0);
    tp.r2.assign(T, 0.0);
  }
  ws.x_last.assign(static_cast<size_t>(T) * C, 0.0);
  ws.f.assign(static_cast<size_t>(T) * C, 0.0);
  ws.rf.assign(T, 0.0);
  ws.tmp.assign(static_cast<size_t>(T) * std::max(C, F), 0.0);

  // Embeddings.
  for (int t = 0; t < T; ++t) {
    const double* te = P + off.wte + static_cast<size_t>(ws.seq[t]) * C;
    const double* pe = P + off.wpe + static_cast<size_t>(t) * C;
    double* x = ws.layers[0].x_in.data() + static_cast<size_t>(t) * C;
    for (int i = 0; i < C; ++i) x[i] = te[i] + pe[i];
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  for (int l = 0; l < L; ++l) {
    auto& tp = ws.layers[l];
    const auto& lo = off.layer[l];
    double* x_out = (l + 1 < L) ? ws.layers[l + 1].x_in.data() : ws.x_last.data();

    for (int t = 0; t < T; ++t) {
      tp.r1[t] = rmsnorm_fwd(tp.x_in.data() + static_cast<size_t>(t) * C, P + lo.ln1_g,
                             tp.a.data() + static_cast<size_t>(t) * C, C);
    }
    linear_fwd(P + lo.wqkv, tp.a.data(), tp.qkv.data(), T, C, 3 * C);
    for (int t = 0; t < T; ++t) {
      for (int h = 0; h < H; ++h) {
        const double* q = tp.qkv.data() + (static_cast<size_t>(t) * 3 + 0) * C + h * D;
        double* arow = tp.att.data() + (static_cast<size_t>(h) * T + t) * T;
        for (int u = 0; u <= t; ++u) {
          const double* k = tp.qkv.data() + (static_cast<size_t>(u) * 3 + 1) * C + h * D;
          arow[u] = K.dot(q, k, D) * scale;
        }
        K.softmax_inplace(arow, t + 1);
        double* c = tp.ctx.data() + static_cast<size_t>(t) * C + h * D;
        for (int u = 0; u <= t; ++u) {
          const double* v = tp.qkv.data() + (static_cast<size_t>(u) * 3 + 2) * C + h * D;
          K.axpy(arow[u], v, c, D);
        }
      }
    }
    linear_fwd(P + lo.wo, tp.ctx.data(), ws.tmp.data(), T, C, C);
    for (int t = 0; t < T; ++t) {
      double* xm = tp.x_mid.data() + static_cast<size_t>(t) * C;
      const double* xi = tp.x_in.data() + static_cast<size_t>(t) * C;
      const double* ao = ws.tmp.data() + static_cast<size_t>(t) * C;
      for (int i = 0; i < C; ++i) xm[i] = xi[i] + ao[i];
      tp.r2[t] = rmsnorm_fwd(xm, P + lo.ln2_g, tp.b.data() + static_cast<size_t>(t) * C, C);
    }
    linear_fwd(P + lo.w1, tp.b.data(), tp.m1.data(), T, C, F);
    for (size_t i = 0; i < tp.m1.size(); ++i) {
      if (tp.m1[i] < 0.0) tp.m1[i] = 0.0;
    }
    linear_fwd(P + lo.w2, tp.m1.data(), ws.tmp.data(), T, F, C);
    for (int t = 0; t < T; ++t) {
      double* xo = x_out + static_cast<size_t>(t) * C;
      const double* xm = tp.x_mid.data() + static_cast<size_t>(t) * C;
      const double* mo = ws.tmp.data() + static_cast<size_t>(t) * C;
      for (int i = 0; i < C; ++i) xo[i] = xm[i] + mo[i];
    }
  }

  // Head + log-softmax, only at predictor positions [boundary, T-2].
  const size_t n_rows = tokens.size() - boundary;
  ws.probs.assign(n_rows * V, 0.0);
  ws.row_targets.resize(n_rows);
  ws.row_pos.resize(n_rows);
  std::vector<double> rows(n_rows);
  std::vector<double> logits(V);
  for (size_t k = 0; k < n_rows; ++k) {
    size_t p = boundary + k;
    int target = tokens[p];
    ws.row_targets[k] = target;
    ws.row_pos[k] = p;
    ws.rf[p] = rmsnorm_fwd(ws.x_last.data() + p * C, P + off.lnf_g, ws.f.data() + p * C, C);
    for (int o = 0; o < V; ++o) {
      logits[o] = K.dot(P + off.head + static_cast<size_t>(o) * C, ws.f.data() + p * C, C);
    }
    double mx = K.reduce_max(logits.data(), V);
    double* prow = ws.probs.data() + k * V;
    for (int o = 0; o < V; ++o) prow[o] = std::exp(logits[o] - mx);
    double z = K.reduce_sum(prow, V);
    rows[k] = logits[target] - mx - std::log(z);
    K.scal(1.0 / z, prow, V);
  }
  return rows;
}

std::vector<double> TransformerLM::token_logprobs(std::span<const int> tokens,
                                                  size_t boundary) const {
  Workspace local;
  return forward_into(local, tokens, boundary);
}

std::vector<double> TransformerLM::forward_cached(std::span<const int> tokens, size_t boundary) {
  if (!ws_) ws_ = std::make_unique<Workspace>();
  return forward_into(*ws_, tokens, boundary);
}

void TransformerLM::backward(std::span<const double> row_grad) {
  if (!ws_ || ws_->T == 0) throw RuntimeError("backward called without a cached forward pass");
  Workspace& ws = *ws_;
  if (row_grad.size() != ws.row_targets.size()) {
    throw RuntimeError("row_grad size " + std::to_string(row_grad.size()) +
                       " does not match cached rows " + std::to_string(ws.row_targets.size()));
  }
  const auto& K = kernels::active();
  const int C = cfg_.d_model, H = cfg_.n_heads, D = cfg_.head_dim();
  const int F = cfg_.d_ff, V = cfg_.vocab_size, L = cfg_.n_layers;
  const int T = ws.T;
  const double* P = params_.data();
  double* G = grads_.data();
  Offsets off = make_offsets(cfg_);

  std::vector<double> dx(static_cast<size_t>(T) * C, 0.0);
  std::vector<double> dlogits(V);
  std::vector<double> df(C);

  // Head and final norm.
  for (size_t k = 0; k < ws.row_targets.size(); ++k) {
    double g = row_grad[k];
    if (g == 0.0) continue;
    size_t p = ws.row_pos[k];
    const double* prow = ws.probs.data() + k * V;
    for (int o = 0; o < V; ++o) dlogits[o] = -g * prow[o];
    dlogits[ws.row_targets[k]] += g;
    std::fill(df.begin(), df.end(), 0.0);
    const double* fp = ws.f.data() + p * C;
    for (int o = 0; o < V; ++o) {
      if (dlogits[o] == 0.0) continue;
      K.axpy(dlogits[o], P + off.head + static_cast<size_t>(o) * C, df.data(), C);
      K.axpy(dlogits[o], fp, G + off.head + static_cast<size_t>(o) * C, C);
    }
    rmsnorm_bwd(ws.x_last.data() + p * C, P + off.lnf_g, ws.rf[p], df.data(),
                dx.data() + p * C, G + off.lnf_g, C);
  }

  std::vector<double> dmid(static_cast<size_t>(T) * C);
  std::vector<double> db(static_cast<size_t>(T) * C);
  std::vector<double> dm1(static_cast<size_t>(T) * F);
  std::vector<double> dctx(static_cast<size_t>(T) * C);
  std::vector<double> dqkv(static_cast<size_t>(T) * 3 * C);
  std::vector<double> da(static_cast<size_t>(T) * C);
  std::vector<double> datt(T);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));

  for (int l = L - 1; l >= 0; --l) {
    auto& tp = ws.layers[l];
    const auto& lo = off.layer[l];

    // MLP backward; dx is the gradient at the block output.
    linear_bwd_weight(tp.m1.data(), dx.data(), G + lo.w2, T, F, C);
    std::fill(dm1.begin(), dm1.end(), 0.0);
    linear_bwd_input(P + lo.w2, dx.data(), dm1.data(), T, F, C);
    K.relu_bwd(tp.m1.data(), dm1.data(), static_cast<size_t>(T) * F);
    linear_bwd_weight(tp.b.data(), dm1.data(), G + lo.w1, T, C, F);
    std::fill(db.begin(), db.end(), 0.0);
    linear_bwd_input(P + lo.w1, dm1.data(), db.data(), T, C, F);

    dmid = dx;  // residual path
    for (int t = 0; t < T; ++t) {
      rmsnorm_bwd(tp.x_mid.data() + static_cast<size_t>(t) * C, P + lo.ln2_g, tp.r2[t],
                  db.data() + static_cast<size_t>(t) * C, dmid.data() + static_cast<size_t>(t) * C,
                  G + lo.ln2_g, C);
    }

    // Attention backward; dmid is the gradient at the attention block output.
    linear_bwd_weight(tp.ctx.data(), dmid.data(), G + lo.wo, T, C, C);
    std::fill(dctx.begin(), dctx.end(), 0.0);
    linear_bwd_input(P + lo.wo, dmid.data(), dctx.data(), T, C, C);

    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    for (int t = 0; t < T; ++t) {
      for (int h = 0; h < H; ++h) {
        const double* arow = tp.att.data() + (static_cast<size_t>(h) * T + t) * T;
        const double* dc = dctx.data() + static_cast<size_t>(t) * C + h * D;
        double dot_av = 0.0;
        for (int u = 0; u <= t; ++u) {
          const double* v = tp.qkv.data() + (static_cast<size_t>(u) * 3 + 2) * C + h * D;
          datt[u] = K.dot(dc, v, D);
          K.axpy(arow[u], dc, dqkv.data() + (static_cast<size_t>(u) * 3 + 2) * C + h * D, D);
          dot_av += datt[u] * arow[u];
        }
        const double* q = tp.qkv.data() + (static_cast<size_t>(t) * 3 + 0) * C + h * D;
        double* dq = dqkv.data() + (static_cast<size_t>(t) * 3 + 0) * C + h * D;
        for (int u = 0; u <= t; ++u) {
          double ds = arow[u] * (datt[u] - dot_av) * scale;
          if (ds == 0.0) continue;
          const double* ku = tp.qkv.data() + (static_cast<size_t>(u) * 3 + 1) * C + h * D;
          K.axpy(ds, ku, dq, D);
          K.axpy(ds, q, dqkv.data() + (static_cast<size_t>(u) * 3 + 1) * C + h * D, D);
        }
      }
    }
    linear_bwd_weight(tp.a.data(), dqkv.data(), G + lo.wqkv, T, C, 3 * C);
    std::fill(da.begin(), da.end(), 0.0);
    linear_bwd_input(P + lo.wqkv, dqkv.data(), da.data(), T, C, 3 * C);

    // dx for the layer below: residual plus the norm backward of this block.
    dx = dmid;
    for (int t = 0; t < T; ++t) {
      rmsnorm_bwd(tp.x_in.data() + static_cast<size_t>(t) * C, P + lo.ln1_g, tp.r1[t],
                  da.data() + static_cast<size_t>(t) * C, dx.data() + static_cast<size_t>(t) * C,
                  G + lo.ln1_g, C);
    }
  }

  for (int t = 0; t < T; ++t) {
    const double* dxt = dx.data() + static_cast<size_t>(t) * C;
    K.vadd(dxt, G + off.wte + static_cast<size_t>(ws.seq[t]) * C, C);
    K.vadd(dxt, G + off.wpe + static_cast<size_t>(t) * C, C);
  }
}

void TransformerLM::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

void TransformerLM::adam_step(const OptimizerConfig& opt) {
  const auto& K = kernels::active();
  double gn = std::sqrt(K.sumsq(grads_.data(), grads_.size()));
  double gscale = 1.0;
  if (opt.clip_norm > 0.0 && gn > opt.clip_norm) gscale = opt.clip_norm / gn;
  opt_step_ += 1;
  double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt_step_));
  double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt_step_));
  K.adam_update(params_.data(), grads_.data(), opt_m_.data(), opt_v_.data(), params_.size(),
                opt.lr, opt.beta1, opt.beta2, opt.eps, bc1, bc2, gscale);
}

// One position of the incremental (KV-cached) forward pass. Appends this
// position's keys/values and returns the final hidden state.
void TransformerLM::step_hidden(std::span<const double> x_in, int pos, KVCache& cache,
                                std::span<double> x_out) const {
  const auto& K = kernels::active();
  const int C = cfg_.d_model, H = cfg_.n_heads, D = cfg_.head_dim(), F = cfg_.d_ff;
  const int L = cfg_.n_layers;
  const double* P = params_.data();
  Offsets off = make_offsets(cfg_);
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));

  std::vector<double> x(x_in.begin(), x_in.end());
  std::vector<double> a(C), qkv(3 * C), ctx(C), attn_out(C), b(C), m1(F), mlp_out(C);
  std::vector<double> att(pos + 1);
  for (int l = 0; l < L; ++l) {
    const auto& lo = off.layer[l];
    rmsnorm_fwd(x.data(), P + lo.ln1_g, a.data(), C);
    for (int o = 0; o < 3 * C; ++o) {
      qkv[o] = K.dot(P + lo.wqkv + static_cast<size_t>(o) * C, a.data(), C);
    }
    auto& ck = cache.k[l];
    auto& cv = cache.v[l];
    ck.insert(ck.end(), qkv.begin() + C, qkv.begin() + 2 * C);
    cv.insert(cv.end(), qkv.begin() + 2 * C, qkv.begin() + 3 * C);
    std::fill(ctx.begin(), ctx.end(), 0.0);
    for (int h = 0; h < H; ++h) {
      const double* q = qkv.data() + h * D;
      for (int u = 0; u <= pos; ++u) {
        att[u] = K.dot(q, ck.data() + static_cast<size_t>(u) * C + h * D, D) * scale;
      }
      K.softmax_inplace(att.data(), pos + 1);
      for (int u = 0; u <= pos; ++u) {
        K.axpy(att[u], cv.data() + static_cast<size_t>(u) * C + h * D, ctx.data() + h * D, D);
      }
    }
    for (int o = 0; o < C; ++o) attn_out[o] = K.dot(P + lo.wo + static_cast<size_t>(o) * C, ctx.data(), C);
    K.vadd(attn_out.data(), x.data(), C);
    rmsnorm_fwd(x.data(), P + lo.ln2_g, b.data(), C);
    for (int o = 0; o < F; ++o) {
      double v = K.dot(P + lo.w1 + static_cast<size_t>(o) * C, b.data(), C);
      m1[o] = v > 0.0 ? v : 0.0;
    }
    for (int o = 0; o < C; ++o) mlp_out[o] = K.dot(P + lo.w2 + static_cast<size_t>(o) * F, m1.data(), F);
    K.vadd(mlp_out.data(), x.data(), C);
  }
  std::copy(x.begin(), x.end(), x_out.begin());
  cache.len = pos + 1;
}

namespace {

// Embedding lookup for the incremental path.
void embed_token(const std::vector<double>& params, const Offsets& off, int C, int token, int pos,
                 std::vector<double>& out) {
  const double* te = params.data() + off.wte + static_cast<size_t>(token) * C;
  const double* pe = params.data() + off.wpe + static_cast<size_t>(pos) * C;
  out.resize(C);
  for (int i = 0; i < C; ++i) out[i] = te[i] + pe[i];
}

}  // namespace

std::vector<double> TransformerLM::next_logprobs(std::span<const int> prefix) const {
  const auto& K = kernels::active();
  const int C = cfg_.d_model, V = cfg_.vocab_size;
  if (static_cast<int>(prefix.size()) + 1 > cfg_.max_seq) {
    throw RuntimeError("prefix exceeds max_seq");
  }
  Offsets off = make_offsets(cfg_);
  KVCache cache;
  cache.k.assign(cfg_.n_layers, {});
  cache.v.assign(cfg_.n_layers, {});
  std::vector<double> x(C), h(C);
  embed_token(params_, off, C, cfg_.bos_id(), 0, x);
  step_hidden(x, 0, cache, h);
  for (size_t i = 0; i < prefix.size(); ++i) {
    embed_token(params_, off, C, prefix[i], static_cast<int>(i) + 1, x);
    step_hidden(x, static_cast<int>(i) + 1, cache, h);
  }
  std::vector<double> f(C);
  rmsnorm_fwd(h.data(), params_.data() + off.lnf_g, f.data(), C);
  std::vector<double> logits(V);
  for (int o = 0; o < V; ++o) {
    logits[o] = K.dot(params_.data() + off.head + static_cast<size_t>(o) * C, f.data(), C);
  }
  double mx = K.reduce_max(logits.data(), V);
  double z = 0.0;
  for (int o = 0; o < V; ++o) z += std::exp(logits[o] - mx);
  double lse = mx + std::log(z);
  for (int o = 0; o < V; ++o) logits[o] -= lse;
  return logits;
}

std::vector<int> TransformerLM::generate_ids(std::span<const int> prompt,
                                             const GenerationConfig& gen,
                                             std::mt19937_64* rng_engine) const {
  const auto& K = kernels::active();
  const int C = cfg_.d_model, V = cfg_.vocab_size;
  Offsets off = make_offsets(cfg_);
  if (static_cast<int>(prompt.size()) + 1 >= cfg_.max_seq) {
    throw RuntimeError("generation prompt of " + std::to_string(prompt.size()) +
                       " tokens leaves no room in max_seq " + std::to_string(cfg_.max_seq));
  }
  KVCache cache;
  cache.k.assign(cfg_.n_layers, {});
  cache.v.assign(cfg_.n_layers, {});
  std::vector<double> x(C), h(C);
  embed_token(params_, off, C, cfg_.bos_id(), 0, x);
  step_hidden(x, 0, cache, h);
  for (size_t i = 0; i < prompt.size(); ++i) {
    embed_token(params_, off, C, prompt[i], static_cast<int>(i) + 1, x);
    step_hidden(x, static_cast<int>(i) + 1, cache, h);
  }

  std::vector<int> out;
  std::vector<double> f(C), logits(V);
  int pos = static_cast<int>(prompt.size());  // position of the last consumed token, in S terms
  for (int step = 0; step < gen.max_new_tokens; ++step) {
    rmsnorm_fwd(h.data(), params_.data() + off.lnf_g, f.data(), C);
    for (int o = 0; o < V; ++o) {
      logits[o] = K.dot(params_.data() + off.head + static_cast<size_t>(o) * C, f.data(), C);
    }
    int chosen;
    if (gen.temperature <= 0.0) {
      chosen = 0;
      for (int o = 1; o < V; ++o) {
        if (logits[o] > logits[chosen]) chosen = o;
      }
    } else {
      if (rng_engine == nullptr) throw RuntimeError("sampling requires an rng engine");
      std::vector<double> p(logits);
      K.scal(1.0 / gen.temperature, p.data(), V);
      K.softmax_inplace(p.data(), V);
      if (gen.top_k > 0 && gen.top_k < V) {
        // Keep the top_k most probable ids (ties broken toward lower id).
        std::vector<int> idx(V);
        for (int o = 0; o < V; ++o) idx[o] = o;
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
          if (p[a] != p[b]) return p[a] > p[b];
          return a < b;
        });
        std::vector<double> kept(V, 0.0);
        for (int r = 0; r < gen.top_k; ++r) kept[idx[r]] = p[idx[r]];
        p = std::move(kept);
      }
      chosen = static_cast<int>(rng::sample_index(p, *rng_engine));
    }
    if (chosen == cfg_.eos_id()) break;
    out.push_back(chosen);
    pos += 1;
    if (pos + 1 >= cfg_.max_seq) break;  // context full: truncate
    embed_token(params_, off, C, chosen, pos, x);
    step_hidden(x, pos, cache, h);
  }
  return out;
}

}  // namespace cutkit::nn
