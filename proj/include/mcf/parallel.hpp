#pragma once

#include <cstddef>

namespace mcf {

/// Execution policy for the data-parallel kernels. `Serial` forces a single
/// thread; `Parallel` uses the OpenMP team size from `num_threads()`.
enum class Exec { Serial, Parallel };

/// Thread count used by `Exec::Parallel`: an explicit `set_num_threads`
/// override, else the MCF_NUM_THREADS environment variable, else OpenMP's
/// default.
int num_threads();
void set_num_threads(int n);

/// Applies MCF_NUM_THREADS (if set) to the OpenMP runtime. Returns the value
/// in effect afterwards.
int init_threads_from_env();

inline int threads_for(Exec exec) { return exec == Exec::Serial ? 1 : num_threads(); }

}  // namespace mcf
