#pragma once

#include <cstddef>
#include <string_view>

namespace cutkit::kernels {

// Double-precision vector primitives behind every forward/backward pass and
// the optimizer. Two implementations exist: a scalar reference and an AVX2+FMA
// variant compiled in its own translation unit. Dispatch happens once at
// runtime; all variants must agree to tight tolerance (see test_kernels).
struct Ops {
  const char* name;

  double (*dot)(const double* x, const double* y, size_t n);
  // y += a * x
  void (*axpy)(double a, const double* x, double* y, size_t n);
  // x *= a
  void (*scal)(double a, double* x, size_t n);
  // y += x
  void (*vadd)(const double* x, double* y, size_t n);
  // y[i] *= x[i]
  void (*vmul)(const double* x, double* y, size_t n);
  // grad[i] = act[i] > 0 ? grad[i] : 0   (ReLU backward mask)
  void (*relu_bwd)(const double* act, double* grad, size_t n);
  double (*sumsq)(const double* x, size_t n);
  double (*reduce_sum)(const double* x, size_t n);
  double (*reduce_max)(const double* x, size_t n);
  // Numerically stable in-place softmax: subtract max, exponentiate, normalize.
  void (*softmax_inplace)(double* x, size_t n);
  // Fused Adam step for one tensor. g is scaled by gscale (global-norm clip
  // factor) before the moment updates. bc1/bc2 are the bias-correction
  // denominators 1-beta1^t and 1-beta2^t.
  void (*adam_update)(double* p, const double* g, double* m, double* v, size_t n,
                      double lr, double beta1, double beta2, double eps,
                      double bc1, double bc2, double gscale);
};

const Ops& scalar_ops();
// Null when this binary or CPU cannot run AVX2+FMA.
const Ops* avx2_ops();

bool avx2_supported();

// Active implementation. First call resolves CUTKIT_KERNELS (scalar|avx2|auto,
// default auto = best supported) and caches the choice.
const Ops& active();

// Override the active implementation ("scalar", "avx2", "auto"). Throws
// UsageError for unknown names, RuntimeError if the CPU lacks support.
void select(std::string_view name);

}  // namespace cutkit::kernels
