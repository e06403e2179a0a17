#ifndef INSITU_THREADPOOL_HPP
#define INSITU_THREADPOOL_HPP

#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace insitu {

// Which kind of thread is executing. Event handlers must only ever run on
// pool threads, never on the transport delivery path; tests assert this.
enum class ExecContext { External, Courier, Pool };

inline thread_local ExecContext tls_exec_context = ExecContext::External;
inline ExecContext current_context() { return tls_exec_context; }

class ThreadPool {
 public:
  explicit ThreadPool(int size) {
    for (int i = 0; i < size; ++i)
      workers_.emplace_back([this] {
        tls_exec_context = ExecContext::Pool;
        run();
      });
  }

  ~ThreadPool() {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  void submit(std::function<void()> task) {
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(task));
    }
    cv_.notify_one();
  }

  int size() const { return int(workers_.size()); }

  bool idle() const {
    std::lock_guard lock(mu_);
    return queue_.empty() && busy_ == 0;
  }

  void wait_idle() const {
    std::unique_lock lock(mu_);
    idle_cv_.wait(lock, [this] { return queue_.empty() && busy_ == 0; });
  }

 private:
  void run() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
        if (stopping_ && queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop_front();
        ++busy_;
      }
      task();
      {
        std::lock_guard lock(mu_);
        --busy_;
        if (queue_.empty() && busy_ == 0) idle_cv_.notify_all();
      }
    }
  }

  mutable std::mutex mu_;
  std::condition_variable cv_;
  mutable std::condition_variable idle_cv_;
  std::deque<std::function<void()>> queue_;
  std::vector<std::thread> workers_;
  int busy_ = 0;
  bool stopping_ = false;
};

}  // namespace insitu

#endif
