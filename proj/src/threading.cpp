#include "icrl/threading.hpp"

#include <cstdlib>
#include <string>

namespace icrl {

namespace {
int pool_size_from_env() {
    int n = (int)std::thread::hardware_concurrency();
    if (n < 1) n = 1;
    if (const char* cap = std::getenv("ICRL_THREADS")) {
        int c = std::atoi(cap);
        if (c >= 1 && c < n) n = c;
        if (c >= 1 && c > n) n = c;
    }
    return n;
}
}  // namespace

ThreadPool& ThreadPool::instance() {
    static ThreadPool pool;
    return pool;
}

ThreadPool::ThreadPool() {
    int n = pool_size_from_env();
    int helpers = n - 1;
    tasks_.resize(helpers);
    workers_.reserve(helpers);
    for (int i = 0; i < helpers; ++i) workers_.emplace_back([this, i] { worker_loop(i); });
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard<std::mutex> lk(mu_);
        stop_ = true;
    }
    cv_work_.notify_all();
    for (auto& w : workers_) w.join();
}

void ThreadPool::worker_loop(int idx) {
    uint64_t seen = 0;
    for (;;) {
        Task task;
        {
            std::unique_lock<std::mutex> lk(mu_);
            cv_work_.wait(lk, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            task = tasks_[idx];
        }
        if (task.fn && task.begin < task.end) (*task.fn)(task.begin, task.end);
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (--pending_ == 0) cv_done_.notify_all();
        }
    }
}

void ThreadPool::parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    int parts = size();
    if (parts == 1 || n < 2 * parts) {
        fn(0, n);
        return;
    }
    int64_t chunk = (n + parts - 1) / parts;
    {
        std::unique_lock<std::mutex> lk(mu_);
        pending_ = (int)workers_.size();
        for (size_t i = 0; i < workers_.size(); ++i) {
            int64_t b = (int64_t)(i + 1) * chunk;
            int64_t e = std::min<int64_t>(b + chunk, n);
            tasks_[i] = Task{&fn, std::min(b, n), std::max(std::min(e, n), std::min(b, n))};
        }
        ++generation_;
    }
    cv_work_.notify_all();
    fn(0, std::min(chunk, n));  // caller takes the first range
    {
        std::unique_lock<std::mutex> lk(mu_);
        cv_done_.wait(lk, [&] { return pending_ == 0; });
    }
}

}  // namespace icrl
