#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace cmscan {

// Global worker count for parallel_for. 1 = fully serial. Results are
// bit-identical for a fixed thread count because every output index is
// written by exactly one worker and no reduction crosses workers.
inline int& thread_count() {
    static int n = 1;
    return n;
}

inline void set_thread_count(int n) {
    thread_count() = std::max(1, n);
}

// Static contiguous split of [0, n). f is called as f(begin, end).
template <typename F>
void parallel_for(std::size_t n, F&& f) {
    const int workers = std::min<std::size_t>(thread_count(), n);
    if (workers <= 1 || n == 0) {
        f(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (int w = 1; w < workers; ++w) {
        const std::size_t b = std::min(n, w * chunk);
        const std::size_t e = std::min(n, b + chunk);
        if (b < e) pool.emplace_back([&f, b, e] { f(b, e); });
    }
    f(std::size_t{0}, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace cmscan
