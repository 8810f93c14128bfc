#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace qdiff {

// Fixed-size pool with a static, thread-count-independent work partition.
// Kernels are internally parallel, externally synchronous: parallel_for
// returns only when every worker has finished its chunk. Not reentrant.
class WorkerPool {
public:
    explicit WorkerPool(int threads) : size_(threads < 1 ? 1 : threads) {
        for (int t = 1; t < size_; ++t) {
            workers_.emplace_back([this, t] { worker_loop(t); });
        }
    }

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    ~WorkerPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    int size() const { return size_; }

    // Chunk t of [begin,end) split across T workers. Contiguous, exhaustive,
    // disjoint; element-to-index mapping does not depend on which worker runs it.
    static std::pair<int64_t, int64_t> partition(int64_t begin, int64_t end, int t, int T) {
        int64_t n = end - begin;
        if (n <= 0) return {begin, begin};
        int64_t lo = begin + n * t / T;
        int64_t hi = begin + n * (t + 1) / T;
        return {lo, hi};
    }

    // fn(chunk_begin, chunk_end) is invoked at most once per worker.
    void parallel_for(int64_t begin, int64_t end, const std::function<void(int64_t, int64_t)>& fn) {
        if (end - begin <= 0) return;
        if (size_ == 1) {
            fn(begin, end);
            return;
        }
        if (active_.exchange(true)) throw std::logic_error("WorkerPool: nested parallel_for");
        {
            std::lock_guard<std::mutex> lk(mu_);
            job_ = &fn;
            job_begin_ = begin;
            job_end_ = end;
            pending_ = size_ - 1;
            ++generation_;
        }
        cv_.notify_all();
        auto [lo, hi] = partition(begin, end, 0, size_);
        if (lo < hi) fn(lo, hi);
        {
            std::unique_lock<std::mutex> lk(mu_);
            done_cv_.wait(lk, [this] { return pending_ == 0; });
            job_ = nullptr;
        }
        active_.store(false);
    }

private:
    void worker_loop(int index) {
        uint64_t seen = 0;
        for (;;) {
            const std::function<void(int64_t, int64_t)>* job = nullptr;
            int64_t b = 0, e = 0;
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                job = job_;
                b = job_begin_;
                e = job_end_;
            }
            if (job) {
                auto [lo, hi] = partition(b, e, index, size_);
                if (lo < hi) (*job)(lo, hi);
            }
            {
                std::lock_guard<std::mutex> lk(mu_);
                if (--pending_ == 0) done_cv_.notify_one();
            }
        }
    }

    int size_;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(int64_t, int64_t)>* job_ = nullptr;
    int64_t job_begin_ = 0;
    int64_t job_end_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
    std::atomic<bool> active_{false};
};

}  // namespace qdiff
