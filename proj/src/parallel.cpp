#include "kernreg/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace kernreg {

int thread_count() {
    static const int n = [] {
        if (const char* env = std::getenv("KERNREG_THREADS")) {
            int v = std::atoi(env);
            return v <= 0 ? 1 : v;
        }
        unsigned hw = std::thread::hardware_concurrency();
        return static_cast<int>(std::clamp(hw, 1u, 8u));
    }();
    return n;
}

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    int workers = thread_count();
    if (workers <= 1 || n < 2048) {
        fn(0, n);
        return;
    }
    std::int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::int64_t lo = 0; lo < n; lo += chunk) {
        std::int64_t hi = std::min(lo + chunk, n);
        pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

}  // namespace kernreg
