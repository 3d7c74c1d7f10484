#include "mcf/parallel.hpp"

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mcf {

namespace {
int g_override = 0;

int read_env_threads() {
  const char* env = std::getenv("MCF_NUM_THREADS");
  if (env == nullptr || *env == '\0') return 0;
  try {
    int n = std::stoi(env);
    return n > 0 ? n : 0;
  } catch (...) {
    return 0;
  }
}

int env_threads() {
  static const int cached = read_env_threads();
  return cached;
}
}  // namespace

int num_threads() {
  if (g_override > 0) return g_override;
  if (int n = env_threads(); n > 0) return n;
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_num_threads(int n) { g_override = n > 0 ? n : 0; }

int init_threads_from_env() {
  int n = env_threads();
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
  return num_threads();
}

}  // namespace mcf
