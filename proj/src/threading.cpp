#include "cdmamba/threading.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace cdmamba {
namespace {

std::size_t read_budget() {
    std::size_t n = std::thread::hardware_concurrency();
    if (n == 0) n = 1;
    if (const char* env = std::getenv("CDMAMBA_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
    }
    return n;
}

// Persistent pool; tasks are (begin, end) slices handed out at submit time.
class Pool {
public:
    Pool() : budget_(read_budget()) {
        for (std::size_t i = 0; i + 1 < budget_; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    ~Pool() {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    std::size_t budget() const { return budget_; }

    void run(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
             std::size_t grain) {
        std::size_t max_tasks = std::max<std::size_t>(1, n / std::max<std::size_t>(1, grain));
        std::size_t tasks = std::min(budget_, max_tasks);
        if (tasks <= 1 || workers_.empty()) {
            body(0, n);
            return;
        }
        std::size_t chunk = (n + tasks - 1) / tasks;
        {
            std::lock_guard lk(mu_);
            body_ = &body;
            pending_.clear();
            for (std::size_t t = 0; t < tasks; ++t) {
                std::size_t lo = t * chunk;
                std::size_t hi = std::min(n, lo + chunk);
                if (lo < hi) pending_.push_back({lo, hi});
            }
            remaining_ = pending_.size();
        }
        cv_.notify_all();
        // the submitting thread also works
        for (;;) {
            std::pair<std::size_t, std::size_t> slice;
            {
                std::lock_guard lk(mu_);
                if (pending_.empty()) break;
                slice = pending_.back();
                pending_.pop_back();
            }
            body(slice.first, slice.second);
            finish_one();
        }
        std::unique_lock lk(mu_);
        done_cv_.wait(lk, [this] { return remaining_ == 0; });
        body_ = nullptr;
    }

private:
    void worker_loop() {
        for (;;) {
            std::pair<std::size_t, std::size_t> slice;
            const std::function<void(std::size_t, std::size_t)>* body = nullptr;
            {
                std::unique_lock lk(mu_);
                cv_.wait(lk, [this] { return stop_ || !pending_.empty(); });
                if (stop_) return;
                slice = pending_.back();
                pending_.pop_back();
                body = body_;
            }
            run_inline(*body, slice);
            finish_one();
        }
    }

    static void run_inline(const std::function<void(std::size_t, std::size_t)>& body,
                           std::pair<std::size_t, std::size_t> slice);

    void finish_one() {
        std::lock_guard lk(mu_);
        if (--remaining_ == 0) done_cv_.notify_all();
    }

    std::size_t budget_;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    std::vector<std::pair<std::size_t, std::size_t>> pending_;
    const std::function<void(std::size_t, std::size_t)>* body_ = nullptr;
    std::size_t remaining_ = 0;
    bool stop_ = false;
};

Pool& pool() {
    static Pool p;
    return p;
}

thread_local bool inside_parallel = false;

void Pool::run_inline(const std::function<void(std::size_t, std::size_t)>& body,
                      std::pair<std::size_t, std::size_t> slice) {
    inside_parallel = true;
    body(slice.first, slice.second);
    inside_parallel = false;
}

}  // namespace

std::size_t thread_budget() { return pool().budget(); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body,
                  std::size_t grain) {
    if (n == 0) return;
    if (inside_parallel) {  // nested calls run inline
        body(0, n);
        return;
    }
    inside_parallel = true;
    pool().run(n, body, grain);
    inside_parallel = false;
}

}  // namespace cdmamba
