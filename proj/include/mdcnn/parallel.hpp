#pragma once

// Deterministic fan-out: job i always writes slot i, and callers reduce the
// slots in index order, so results do not depend on the thread count.

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace mdcnn {

/// Runs fn(i) for i in [0, n) on up to `threads` threads (strided assignment).
/// The first exception, by job index, is rethrown after all threads join.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = threads <= 1 ? 1 : std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace mdcnn
