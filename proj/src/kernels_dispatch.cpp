#include <cstdlib>
#include <stdexcept>

#include "hica/kernels.hpp"

namespace hica::kernels {

namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Ops* pick(const std::string& which) {
  if (which == "scalar") return &scalar_ops();
#if defined(__x86_64__) || defined(_M_X64)
  if (which == "avx2") {
    if (!cpu_has_avx2()) throw std::runtime_error("HICA_KERNELS=avx2 but cpu lacks avx2/fma");
    return &avx2_ops();
  }
  if (which == "auto" || which.empty())
    return cpu_has_avx2() ? &avx2_ops() : &scalar_ops();
#else
  if (which == "avx2") throw std::runtime_error("avx2 kernels not built on this architecture");
  if (which == "auto" || which.empty()) return &scalar_ops();
#endif
  throw std::runtime_error("unknown kernel set '" + which + "' (use scalar|avx2|auto)");
}

const Ops*& slot() {
  static const Ops* current = nullptr;
  return current;
}

}  // namespace

const Ops& active() {
  const Ops*& cur = slot();
  if (cur == nullptr) {
    const char* env = std::getenv("HICA_KERNELS");
    cur = pick(env == nullptr ? "auto" : env);
  }
  return *cur;
}

void force(const std::string& which) { slot() = pick(which); }

}  // namespace hica::kernels
