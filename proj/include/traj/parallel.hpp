// Fixed-size worker pool used for within-batch parallelism.

#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace traj {

/// Thread count honouring the TRAJ_NUM_THREADS cap. `requested == 0` means
/// "use the hardware concurrency".
inline std::size_t resolve_thread_count(std::size_t requested = 0) {
  std::size_t n = requested;
  if (n == 0) n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TRAJ_NUM_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
    } catch (const std::exception&) {
      // unparsable value: ignore the cap
    }
  }
  return std::max<std::size_t>(1, n);
}

class ThreadPool {
 public:
  explicit ThreadPool(std::size_t threads = 1)
      : size_(std::max<std::size_t>(1, threads)) {
    workers_.reserve(size_ - 1);
    for (std::size_t w = 0; w + 1 < size_; ++w) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
    }
    wake_.notify_all();
    // jthread joins on destruction
  }

  std::size_t size() const { return size_; }

  /// Runs task(0) .. task(count-1); the calling thread participates. Returns
  /// once all tasks finished; the first exception thrown by a task is
  /// rethrown here. Not reentrant.
  void run(std::size_t count, const std::function<void(std::size_t)>& task) {
    if (count == 0) return;
    if (size_ == 1 || count == 1) {
      for (std::size_t t = 0; t < count; ++t) task(t);
      return;
    }
    std::size_t gen = 0;
    {
      std::lock_guard lock(mutex_);
      task_ = &task;
      count_ = count;
      next_ = 0;
      pending_ = count;
      gen = ++generation_;
    }
    wake_.notify_all();
    drain(gen);
    std::unique_lock lock(mutex_);
    done_.wait(lock, [this] { return pending_ == 0; });
    task_ = nullptr;
    if (error_) std::rethrow_exception(std::exchange(error_, nullptr));
  }

  /// Splits [0, n) into at most size() contiguous chunks.
  void parallel_for(std::size_t n,
                    const std::function<void(std::size_t, std::size_t)>& body) {
    const std::size_t chunks = std::min(n, size_);
    if (chunks <= 1) {
      if (n > 0) body(0, n);
      return;
    }
    run(chunks, [&](std::size_t c) {
      const std::size_t begin = n * c / chunks;
      const std::size_t end = n * (c + 1) / chunks;
      body(begin, end);
    });
  }

 private:
  void drain(std::size_t gen) {
    std::unique_lock lock(mutex_);
    while (generation_ == gen && next_ < count_) {
      const std::size_t t = next_++;
      const auto* task = task_;
      lock.unlock();
      std::exception_ptr err;
      try {
        (*task)(t);
      } catch (...) {
        err = std::current_exception();
      }
      lock.lock();
      if (err && !error_) error_ = err;
      if (--pending_ == 0) done_.notify_all();
    }
  }

  void worker_loop() {
    std::size_t seen = 0;
    for (;;) {
      {
        std::unique_lock lock(mutex_);
        wake_.wait(lock, [&] { return stopping_ || generation_ != seen; });
        if (stopping_) return;
        seen = generation_;
      }
      drain(seen);
    }
  }

  std::size_t size_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* task_ = nullptr;
  std::size_t count_ = 0;
  std::size_t next_ = 0;
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  bool stopping_ = false;
  std::exception_ptr error_;
  std::vector<std::jthread> workers_;
};

}  // namespace traj
