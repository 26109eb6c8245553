#include "ach/worker_pool.hpp"

#include "ach/common.hpp"

namespace ach {

WorkerPool::WorkerPool(int workers) : count_(workers) {
  detail::require(workers >= 1, "WorkerPool: need at least one worker");
  if (count_ == 1) return;
  threads_.reserve(static_cast<std::size_t>(count_));
  for (int i = 0; i < count_; ++i)
    threads_.emplace_back([this, i] { worker_main(i); });
}

WorkerPool::~WorkerPool() {
  if (threads_.empty()) return;
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = true;
  }
  cv_start_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerPool::run(const std::function<void(int)>& fn) {
  if (count_ == 1) {
    fn(0);
    return;
  }
  std::unique_lock<std::mutex> lock(mu_);
  job_ = &fn;
  first_error_ = nullptr;
  remaining_ = count_;
  ++generation_;
  cv_start_.notify_all();
  cv_done_.wait(lock, [this] { return remaining_ == 0; });
  job_ = nullptr;
  if (first_error_) std::rethrow_exception(first_error_);
}

void WorkerPool::worker_main(int index) {
  std::uint64_t seen = 0;
  for (;;) {
    const std::function<void(int)>* job = nullptr;
    {
      std::unique_lock<std::mutex> lock(mu_);
      cv_start_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      job = job_;
    }
    std::exception_ptr err;
    try {
      (*job)(index);
    } catch (...) {
      err = std::current_exception();
    }
    {
      std::lock_guard<std::mutex> lock(mu_);
      if (err && !first_error_) first_error_ = err;
      if (--remaining_ == 0) cv_done_.notify_one();
    }
  }
}

int WorkerPool::default_workers() {
  const unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

}  // namespace ach
