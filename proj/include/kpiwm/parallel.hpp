#pragma once

#include <cstddef>
#include <thread>
#include <vector>

namespace kpiwm {

// Runs fn(i) for i in [0, n). Each index writes only its own output slot, so
// results are identical for any thread count; reductions happen at the call
// site in index order.
template <typename Fn>
void parallel_for(std::size_t n, const Fn& fn, unsigned threads = 0) {
    if (threads == 0) threads = std::thread::hardware_concurrency();
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t]() {
            for (std::size_t i = t; i < n; i += threads) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

} // namespace kpiwm
