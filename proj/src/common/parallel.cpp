#include "common/parallel.hpp"

#include <atomic>

namespace bimors {

namespace {
std::atomic<std::size_t> g_threads{1};
}

void set_thread_count(std::size_t n) noexcept { g_threads.store(n == 0 ? 1 : n); }

std::size_t thread_count() noexcept { return g_threads.load(); }

namespace detail {

bool& grad_mode_flag() noexcept {
    thread_local bool enabled = true;
    return enabled;
}

bool& in_worker_flag() noexcept {
    thread_local bool inside = false;
    return inside;
}

} // namespace detail

} // namespace bimors
