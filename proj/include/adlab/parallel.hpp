#pragma once

#include <cstddef>
#include <functional>

namespace adlab {

/// Worker cap: ADLAB_THREADS when set to a positive integer, else the hardware concurrency.
std::size_t worker_limit();

/// Runs fn(i) for i in [0, n) on up to worker_limit() threads. Callers write
/// results by index, so the outcome does not depend on scheduling. The first
/// exception (lowest index) is rethrown after all workers finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace adlab
