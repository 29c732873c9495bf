#pragma once

#include <cstdint>
#include <functional>

namespace kernreg {

// Worker count from KERNREG_THREADS. 0 (or unset on a 1-core box) forces a
// single thread. All parallel loops partition output elements so every element
// is accumulated in a fixed serial order regardless of the thread count;
// results are bit-identical either way.
int thread_count();

// Runs fn(begin, end) over a partition of [0, n).
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace kernreg
