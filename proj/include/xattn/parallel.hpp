#pragma once

#include <cstddef>
#include <functional>

namespace xattn {

// Runs fn(i) for every i in [0, n) on up to `jobs` threads (jobs <= 1 runs
// inline). Rethrows the first exception once all workers have stopped.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

}  // namespace xattn
