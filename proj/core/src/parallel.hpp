#pragma once

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace dps::detail {

// Strided static partition; the first exception thrown by any worker is
// rethrown after all workers join. Results must be written to per-index slots.
template <typename Fn>
void parallel_for(size_t n, size_t threads, Fn && fn) {
    const size_t nthreads = std::max<size_t>(1, std::min(threads, n));
    if (nthreads == 1) {
        for (size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::vector<std::thread> pool;
    std::exception_ptr       error;
    std::mutex               error_mutex;
    for (size_t tid = 0; tid < nthreads; ++tid) {
        pool.emplace_back([&, tid] {
            try {
                for (size_t i = tid; i < n; i += nthreads) {
                    fn(i);
                }
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) {
                    error = std::current_exception();
                }
            }
        });
    }
    for (auto & th : pool) {
        th.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

} // namespace dps::detail
