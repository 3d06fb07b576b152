#include <cstdlib>
#include <string>

#include "cutkit/error.hpp"
#include "cutkit/kernels.hpp"

namespace cutkit::kernels {
namespace {

const Ops* g_forced = nullptr;

const Ops& resolve_auto() {
  if (avx2_supported()) return *avx2_ops();
  return scalar_ops();
}

const Ops& resolve_from_env() {
  const char* env = std::getenv("CUTKIT_KERNELS");
  if (env == nullptr || std::string(env).empty() || std::string(env) == "auto") {
    return resolve_auto();
  }
  std::string name(env);
  if (name == "scalar") return scalar_ops();
  if (name == "avx2") {
    if (!avx2_supported()) {
      throw RuntimeError("CUTKIT_KERNELS=avx2 but this CPU/binary lacks AVX2+FMA");
    }
    return *avx2_ops();
  }
  throw UsageError("unknown CUTKIT_KERNELS value '" + name + "' (expected scalar|avx2|auto)");
}

}  // namespace

bool avx2_supported() {
  if (avx2_ops() == nullptr) return false;
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Ops& active() {
  if (g_forced != nullptr) return *g_forced;
  static const Ops& chosen = resolve_from_env();
  return chosen;
}

void select(std::string_view name) {
  if (name == "auto") {
    g_forced = &resolve_auto();
  } else if (name == "scalar") {
    g_forced = &scalar_ops();
  } else if (name == "avx2") {
    if (!avx2_supported()) {
      throw RuntimeError("kernel variant 'avx2' unavailable on this CPU/binary");
    }
    g_forced = avx2_ops();
  } else {
    throw UsageError("unknown kernel variant '" + std::string(name) + "' (expected scalar|avx2|auto)");
  }
}

}  // namespace cutkit::kernels
