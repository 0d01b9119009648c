#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace anf {

/// Persistent worker pool for loop parallelism inside kernels.
///
/// parallel_for splits [0, n) into one contiguous chunk per worker, so each
/// index is computed by exactly one thread with a fixed iteration order.
/// Results are bitwise independent of the thread count as long as different
/// indices write disjoint memory, which is the rule every caller follows.
/// ANF_THREADS caps the pool size (default: hardware concurrency).
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int size() const { return static_cast<int>(workers_.size()) + 1; }

    void run(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& chunk_fn) {
        if (n <= 0) return;
        int nthreads = size();
        if (nthreads == 1 || n == 1 || in_worker_) {
            chunk_fn(0, n);
            return;
        }
        std::int64_t chunk = (n + nthreads - 1) / nthreads;
        {
            std::unique_lock<std::mutex> lock(mu_);
            job_fn_ = &chunk_fn;
            job_n_ = n;
            job_chunk_ = chunk;
            pending_ = 0;
            for (int t = 1; t < nthreads; ++t) {
                if (t * chunk < n) ++pending_;
            }
            ++epoch_;
        }
        cv_.notify_all();
        // The calling thread takes the first chunk.
        chunk_fn(0, std::min<std::int64_t>(chunk, n));
        std::unique_lock<std::mutex> lock(mu_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        job_fn_ = nullptr;
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

private:
    ThreadPool() {
        int n = 0;
        if (const char* env = std::getenv("ANF_THREADS")) {
            n = std::atoi(env);
        }
        if (n <= 0) {
            n = static_cast<int>(std::thread::hardware_concurrency());
            if (n <= 0) n = 1;
        }
        for (int t = 1; t < n; ++t) {
            workers_.emplace_back([this, t] { worker_loop(t); });
        }
    }

    ~ThreadPool() {
        {
            std::unique_lock<std::mutex> lock(mu_);
            stop_ = true;
            ++epoch_;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    void worker_loop(int index) {
        in_worker_ = true;
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::int64_t, std::int64_t)>* fn = nullptr;
            std::int64_t lo = 0, hi = 0;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [&] { return epoch_ != seen; });
                seen = epoch_;
                if (stop_) return;
                lo = index * job_chunk_;
                hi = std::min<std::int64_t>(lo + job_chunk_, job_n_);
                if (lo >= job_n_) continue;
                fn = job_fn_;
            }
            (*fn)(lo, hi);
            {
                std::unique_lock<std::mutex> lock(mu_);
                if (--pending_ == 0) done_cv_.notify_one();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(std::int64_t, std::int64_t)>* job_fn_ = nullptr;
    std::int64_t job_n_ = 0, job_chunk_ = 0;
    int pending_ = 0;
    std::uint64_t epoch_ = 0;
    bool stop_ = false;
    static thread_local bool in_worker_;
};

inline thread_local bool ThreadPool::in_worker_ = false;

/// Runs fn(i) for i in [0, n), split across the pool in contiguous chunks.
template <typename Fn>
void parallel_for(std::int64_t n, Fn&& fn) {
    ThreadPool::instance().run(n, [&fn](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) fn(i);
    });
}

}  // namespace anf
