#include <cmath>

#include "cutkit/kernels.hpp"

namespace cutkit::kernels {
namespace {

double dot(const double* x, const double* y, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void axpy(double a, const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void scal(double a, double* x, size_t n) {
  for (size_t i = 0; i < n; ++i) x[i] *= a;
}

void vadd(const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += x[i];
}

void vmul(const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] *= x[i];
}

void relu_bwd(const double* act, double* grad, size_t n) {
  for (size_t i = 0; i < n; ++i) {
    if (act[i] <= 0.0) grad[i] = 0.0;
  }
}

double sumsq(const double* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

double reduce_sum(const double* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double reduce_max(const double* x, size_t n) {
  double best = -HUGE_VAL;
  for (size_t i = 0; i < n; ++i) {
    if (x[i] > best) best = x[i];
  }
  return best;
}

void softmax_inplace(double* x, size_t n) {
  if (n == 0) return;
  double mx = reduce_max(x, n);
  for (size_t i = 0; i < n; ++i) x[i] = std::exp(x[i] - mx);
  double z = reduce_sum(x, n);
  scal(1.0 / z, x, n);
}

void adam_update(double* p, const double* g, double* m, double* v, size_t n,
                 double lr, double beta1, double beta2, double eps,
                 double bc1, double bc2, double gscale) {
  for (size_t i = 0; i < n; ++i) {
    double gi = g[i] * gscale;
    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
    double mhat = m[i] / bc1;
    double vhat = v[i] / bc2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops ops = {
      "scalar", dot,        axpy,       scal,       vadd,            vmul,
      relu_bwd, sumsq,      reduce_sum, reduce_max, softmax_inplace, adam_update,
  };
  return ops;
}

}  // namespace cutkit::kernels
