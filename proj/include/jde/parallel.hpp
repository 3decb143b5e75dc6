#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace jde {

/// Runs fn(i) for i in [0, count) on up to `jobs` threads. Tasks are claimed in
/// index order; each task's exception is stored in its slot and the rest keep
/// running. Returns one (possibly null) exception pointer per index.
inline std::vector<std::exception_ptr> parallel_for(std::size_t count, int jobs,
                                                    const std::function<void(std::size_t)>& fn) {
    std::vector<std::exception_ptr> errors(count);
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), count);
    if (threads <= 1) {
        worker();
        return errors;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return errors;
}

}  // namespace jde
