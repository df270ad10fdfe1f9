#include "stem/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace stem {
namespace {

int default_threads() {
    if (const char* env = std::getenv("STEM_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    const int n = hw == 0 ? 1 : static_cast<int>(hw);
    return n > 8 ? 8 : n;
}

int g_threads = default_threads();

// Persistent pool with barrier semantics: every worker checks in once per
// job, claiming chunks through an atomic counter until none remain. run()
// returns only after all workers have checked in, so job state is never
// touched outside the window in which it is valid.
class Pool {
public:
    explicit Pool(int workers) : worker_count_(workers) {
        threads_.reserve(static_cast<std::size_t>(workers));
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::unique_lock<std::mutex> lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run(std::size_t n, int parts, const std::function<void(std::size_t, std::size_t)>& fn) {
        {
            std::unique_lock<std::mutex> lock(mutex_);
            job_ = &fn;
            job_n_ = n;
            job_parts_ = parts;
            next_part_.store(0, std::memory_order_relaxed);
            pending_ = worker_count_;
            ++generation_;
        }
        cv_.notify_all();
        claim_and_run();
        std::unique_lock<std::mutex> lock(mutex_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    void claim_and_run() {
        const std::size_t per =
            (job_n_ + static_cast<std::size_t>(job_parts_) - 1) / static_cast<std::size_t>(job_parts_);
        for (;;) {
            const int part = next_part_.fetch_add(1, std::memory_order_relaxed);
            if (part >= job_parts_) return;
            const std::size_t begin = per * static_cast<std::size_t>(part);
            const std::size_t end = begin + per < job_n_ ? begin + per : job_n_;
            if (begin < end) (*job_)(begin, end);
        }
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> lock(mutex_);
                cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
            }
            claim_and_run();
            {
                std::unique_lock<std::mutex> lock(mutex_);
                if (--pending_ == 0) done_cv_.notify_one();
            }
        }
    }

    const int worker_count_;
    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::size_t, std::size_t)>* job_ = nullptr;
    std::size_t job_n_ = 0;
    int job_parts_ = 1;
    std::atomic<int> next_part_{0};
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

Pool& pool() {
    static Pool p(default_threads() > 1 ? default_threads() - 1 : 1);
    return p;
}

}  // namespace

int num_threads() { return g_threads; }

void set_num_threads(int n) { g_threads = n < 1 ? 1 : n; }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    const int t = g_threads;
    if (t <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    const int parts = static_cast<std::size_t>(t) < n ? t : static_cast<int>(n);
    pool().run(n, parts, fn);
}

}  // namespace stem
