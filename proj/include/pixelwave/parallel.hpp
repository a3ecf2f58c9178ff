#pragma once

#include <cstdlib>
#include <thread>
#include <vector>

namespace pixelwave {

// Thread count from the only environment variable the tools read.
inline int env_thread_count() {
    const char* v = std::getenv("PIXELWAVE_THREADS");
    if (!v) return 1;
    int n = std::atoi(v);
    if (n < 1) return 1;
    return std::min(n, 64);
}

// Index-partitioned parallel loop for read-only workloads (each index
// writes only its own output slot, so results are order-independent).
template <typename Fn>
void parallel_for(int64_t n, const Fn& fn, int threads = env_thread_count()) {
    if (threads <= 1 || n < 2 * threads) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        int64_t lo = t * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace pixelwave
