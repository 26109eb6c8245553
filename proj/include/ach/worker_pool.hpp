#pragma once

#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace ach {

// Persistent pool of worker threads. run() executes fn(worker_index) on every
// worker and blocks until all return; the first exception thrown by a worker
// is rethrown on the caller. A pool of one worker runs inline.
class WorkerPool {
 public:
  explicit WorkerPool(int workers);
  ~WorkerPool();

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  int workers() const { return count_; }
  void run(const std::function<void(int)>& fn);

  // Default worker count: hardware parallelism, at least 1.
  static int default_workers();

 private:
  void worker_main(int index);

  int count_ = 1;
  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_start_;
  std::condition_variable cv_done_;
  const std::function<void(int)>* job_ = nullptr;
  std::uint64_t generation_ = 0;
  int remaining_ = 0;
  bool stop_ = false;
  std::exception_ptr first_error_;
};

}  // namespace ach
