#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace bimors {

// Worker cap shared by evaluation and per-class encoding. 0 or 1 runs inline.
void set_thread_count(std::size_t n) noexcept;
std::size_t thread_count() noexcept;

namespace detail {
// Per-thread autograd recording switch (see NoGradGuard) and a marker for
// code already running inside a parallel_for worker.
bool& grad_mode_flag() noexcept;
bool& in_worker_flag() noexcept;
} // namespace detail

// Runs fn(i) for i in [0, n) over contiguous chunks. Results must be written
// to index-addressed slots by the caller so output order never depends on
// scheduling. The first exception thrown by any worker is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers = detail::in_worker_flag() ? 1 : std::min(thread_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    const bool grad_mode = detail::grad_mode_flag();
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&, begin, end] {
            detail::grad_mode_flag() = grad_mode;
            detail::in_worker_flag() = true;
            try {
                for (std::size_t i = begin; i < end; ++i) fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace bimors
