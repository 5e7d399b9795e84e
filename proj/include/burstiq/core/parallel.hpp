#pragma once

#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

namespace burstiq {

// Two logical workers with a fixed range split. The split is a function of n
// alone (never of the machine), so reductions that sum worker partials in
// worker order produce identical bits on any host.
class WorkerPool {
 public:
  static WorkerPool& instance() {
    static WorkerPool pool;
    return pool;
  }

  // fn(begin, end) over [0, n) split into at most two contiguous ranges.
  void for_ranges(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    if (n == 1 || busy_) {
      fn(0, n);
      return;
    }
    std::size_t mid = (n + 1) / 2;
    busy_ = true;
    {
      std::unique_lock<std::mutex> lock(mu_);
      task_ = [&fn, mid, n] { fn(mid, n); };
      has_task_ = true;
      task_error_ = nullptr;
    }
    cv_.notify_one();
    std::exception_ptr local_error;
    try {
      fn(0, mid);
    } catch (...) {
      local_error = std::current_exception();
    }
    {
      std::unique_lock<std::mutex> lock(mu_);
      done_cv_.wait(lock, [this] { return !has_task_; });
    }
    busy_ = false;
    if (local_error) std::rethrow_exception(local_error);
    if (task_error_) std::rethrow_exception(task_error_);
  }

  static constexpr int worker_count() { return 2; }

 private:
  WorkerPool() {
    helper_ = std::thread([this] { run(); });
  }

  ~WorkerPool() {
    {
      std::unique_lock<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_one();
    helper_.join();
  }

  void run() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return stop_ || has_task_; });
        if (stop_) return;
        task = std::move(task_);
      }
      try {
        task();
      } catch (...) {
        task_error_ = std::current_exception();
      }
      {
        std::unique_lock<std::mutex> lock(mu_);
        has_task_ = false;
      }
      done_cv_.notify_one();
    }
  }

  std::thread helper_;
  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::function<void()> task_;
  std::exception_ptr task_error_;
  bool has_task_ = false;
  bool stop_ = false;
  bool busy_ = false;  // ops never nest, but fall back to inline if they do
};

}  // namespace burstiq
