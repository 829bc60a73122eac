#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace icrl {

// Fixed-size pool with static range partitioning. Every output element is
// written by exactly one worker with a fixed inner loop order, so results are
// bit-identical for any thread count. ICRL_THREADS caps the pool size.
class ThreadPool {
public:
    static ThreadPool& instance();

    int size() const { return (int)workers_.size() + 1; }

    // Splits [0, n) into contiguous ranges, one per worker plus the caller.
    // fn(begin, end) must touch disjoint state per range.
    void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn);

    ~ThreadPool();

private:
    ThreadPool();
    struct Task {
        const std::function<void(int64_t, int64_t)>* fn = nullptr;
        int64_t begin = 0, end = 0;
    };
    void worker_loop(int idx);

    std::vector<std::thread> workers_;
    std::vector<Task> tasks_;
    std::mutex mu_;
    std::condition_variable cv_work_, cv_done_;
    uint64_t generation_ = 0;
    int pending_ = 0;
    bool stop_ = false;
};

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    ThreadPool::instance().parallel_for(n, fn);
}

}  // namespace icrl
